#pragma once

#include <json.hpp>

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "nerfloc/geometry.hpp"
#include "nerfloc/nn.hpp"
#include "nerfloc/rng.hpp"

namespace nerfloc {

struct LayerOutOfRange : std::runtime_error {
  explicit LayerOutOfRange(int j)
      : std::runtime_error("encoder layer " + std::to_string(j) +
                           " outside 1..7") {}
};
struct NegativeDensity : std::runtime_error {
  NegativeDensity() : std::runtime_error("negative density") {}
};
struct NonPositiveDelta : std::runtime_error {
  NonPositiveDelta() : std::runtime_error("non-positive sampling interval") {}
};
struct StrideMismatch : std::runtime_error {
  explicit StrideMismatch(const std::string& m)
      : std::runtime_error("stride mismatch: " + m) {}
};

// Frequency positional encoding: concat(x, [sin(2^b pi x), cos(2^b pi x)]
// for b in 0..bands-1). Output dim = k * (1 + 2 * bands).
template <typename T>
MatX<T> positional_encode(const MatX<T>& x, int bands) {
  const Eigen::Index n = x.rows(), k = x.cols();
  MatX<T> out(n, k * (1 + 2 * bands));
  out.leftCols(k) = x;
  for (int b = 0; b < bands; ++b) {
    const T f = static_cast<T>(std::pow(2.0, b) * M_PI);
    out.middleCols(k + 2 * b * k, k) = (x.array() * f).sin();
    out.middleCols(k + (2 * b + 1) * k, k) = (x.array() * f).cos();
  }
  return out;
}
inline int positional_encode_dim(int k, int bands) { return k * (1 + 2 * bands); }

// Chain rule through positional_encode: given d(pe) and the cached encoding,
// accumulate d(x). The sin/cos values are read back from `encoded`.
template <typename T>
void positional_encode_backward(const MatX<T>& encoded, const MatX<T>& d_encoded,
                                int bands, MatX<T>* dx) {
  const Eigen::Index k = dx->cols();
  *dx += d_encoded.leftCols(k);
  for (int b = 0; b < bands; ++b) {
    const T f = static_cast<T>(std::pow(2.0, b) * M_PI);
    const auto sin_v = encoded.middleCols(k + 2 * b * k, k).array();
    const auto cos_v = encoded.middleCols(k + (2 * b + 1) * k, k).array();
    const auto d_sin = d_encoded.middleCols(k + 2 * b * k, k).array();
    const auto d_cos = d_encoded.middleCols(k + (2 * b + 1) * k, k).array();
    dx->array() += f * (cos_v * d_sin - sin_v * d_cos);
  }
}

struct SceneFieldConfig {
  int feature_dim = 256;   // encoder width D; equals the image coarse dim
  int skip_layer = 4;      // P_x(X) re-injected at this 0-based encoder layer
  int pe_x_bands = 10;
  int pe_d_bands = 4;
  int appearance_dim = 16;
  int color_hidden = 0;    // 0 -> feature_dim / 2
  double near = 0.05;
  double far = 2.0;
  double delta_cap = 1e10;
  double density_bias_init = -1.0;  // softplus input offset; favors empty space

  static constexpr int kLayers = 7;

  int pe_x_dim() const { return positional_encode_dim(3, pe_x_bands); }
  int pe_d_dim() const { return positional_encode_dim(3, pe_d_bands); }
  int color_hidden_dim() const {
    return color_hidden > 0 ? color_hidden : feature_dim / 2;
  }

  nlohmann::json to_json() const;
  static SceneFieldConfig from_json(const nlohmann::json& j);
};

// Per-batch intermediates kept for the backward pass.
template <typename T>
struct FieldCache {
  MatX<T> pe_x;
  std::vector<MatX<T>> h;  // post-ReLU encoder outputs, h[6] = f7
  MatX<T> sigma_pre;       // N x 1
  MatX<T> pe_d;
  MatX<T> color_cat;       // [f7, pe_d, app]
  MatX<T> color_hid;       // post-ReLU
  MatX<T> color;           // post-sigmoid, N x 3
  std::vector<int> app_idx;
};

// The radiance field: positional encoders, a 7-layer tappable point encoder
// with one skip connection, a density head (softplus) and a 2-layer color
// head (sigmoid), plus a per-sequence appearance table.
template <typename T>
struct SceneField {
  SceneFieldConfig cfg;
  std::vector<Linear<T>> encoder;
  Linear<T> density_head;
  Linear<T> color_hidden_layer;
  Linear<T> color_out;
  MatX<T> appearance;  // n_seq x appearance_dim
  MatX<T> g_appearance;
  std::vector<std::string> sequence_ids;

  void init(const SceneFieldConfig& config,
            const std::vector<std::string>& sequences, Rng& rng) {
    cfg = config;
    sequence_ids = sequences;
    if (sequence_ids.empty()) sequence_ids.push_back("default");
    encoder.resize(SceneFieldConfig::kLayers);
    for (int i = 0; i < SceneFieldConfig::kLayers; ++i) {
      int in = cfg.feature_dim;
      if (i == 0) in = cfg.pe_x_dim();
      if (i == cfg.skip_layer) in = cfg.feature_dim + cfg.pe_x_dim();
      encoder[i].init(in, cfg.feature_dim, rng);
    }
    density_head.init(cfg.feature_dim, 1, rng);
    density_head.b(0) += static_cast<T>(cfg.density_bias_init);
    color_hidden_layer.init(
        cfg.feature_dim + cfg.pe_d_dim() + cfg.appearance_dim,
        cfg.color_hidden_dim(), rng);
    color_out.init(cfg.color_hidden_dim(), 3, rng);
    appearance = MatX<T>::Zero(static_cast<Eigen::Index>(sequence_ids.size()),
                               cfg.appearance_dim);
    g_appearance = MatX<T>::Zero(appearance.rows(), appearance.cols());
  }

  ParamRegistry<T> registry() {
    ParamRegistry<T> reg;
    for (int i = 0; i < SceneFieldConfig::kLayers; ++i) {
      encoder[i].register_params(reg, "enc" + std::to_string(i));
    }
    density_head.register_params(reg, "density");
    color_hidden_layer.register_params(reg, "color_hidden");
    color_out.register_params(reg, "color_out");
    reg.add("appearance", appearance, g_appearance);
    return reg;
  }

  int appearance_index(const std::string& id) const {
    for (size_t i = 0; i < sequence_ids.size(); ++i) {
      if (sequence_ids[i] == id) return static_cast<int>(i);
    }
    return -1;  // unknown sequences fall back to the table mean
  }

  Eigen::Matrix<T, 1, Eigen::Dynamic> appearance_row(int idx) const {
    if (idx >= 0 && idx < appearance.rows()) return appearance.row(idx);
    return appearance.colwise().mean();
  }

  // Encoder up to (and including) 0-based layer `upto`; fills cache->h.
  void encode_points(const MatX<T>& points, FieldCache<T>* cache,
                     int upto = SceneFieldConfig::kLayers - 1) const {
    cache->pe_x = positional_encode<T>(points, cfg.pe_x_bands);
    cache->h.assign(SceneFieldConfig::kLayers, {});
    MatX<T> cur = relu<T>(encoder[0].forward(cache->pe_x));
    cache->h[0] = cur;
    for (int i = 1; i <= upto; ++i) {
      if (i == cfg.skip_layer) {
        MatX<T> cat(cur.rows(), cur.cols() + cache->pe_x.cols());
        cat << cur, cache->pe_x;
        cur = relu<T>(encoder[i].forward(cat));
      } else {
        cur = relu<T>(encoder[i].forward(cur));
      }
      cache->h[i] = cur;
    }
  }

  // f^j for j in 1..7. Throws LayerOutOfRange otherwise.
  MatX<T> encoder_features(const MatX<T>& points, int layer) const {
    if (layer < 1 || layer > SceneFieldConfig::kLayers)
      throw LayerOutOfRange(layer);
    FieldCache<T> cache;
    encode_points(points, &cache, layer - 1);
    return cache.h[layer - 1];
  }

  // Density-only forward (used by the coarse sampling pass).
  VecX<T> density(const MatX<T>& points, FieldCache<T>* cache) const {
    FieldCache<T> local;
    FieldCache<T>* c = cache ? cache : &local;
    encode_points(points, c);
    c->sigma_pre = density_head.forward(c->h.back());
    return softplus<T>(c->sigma_pre).col(0);
  }

  // Full forward: densities, colors, and the tapped feature layer.
  // `dirs` must be unit vectors; app_idx is per-point (-1 = table mean).
  // `density_noise` (train-time regularizer) is added before the softplus;
  // the cache keeps the noisy pre-activation so backward stays consistent.
  void forward(const MatX<T>& points, const MatX<T>& dirs,
               const std::vector<int>& app_idx, FieldCache<T>* cache,
               VecX<T>* sigma, MatX<T>* color,
               const VecX<T>* density_noise = nullptr) const {
    encode_points(points, cache);
    cache->sigma_pre = density_head.forward(cache->h.back());
    if (density_noise) cache->sigma_pre.col(0) += *density_noise;
    *sigma = softplus<T>(cache->sigma_pre).col(0);
    cache->pe_d = positional_encode<T>(dirs, cfg.pe_d_bands);
    const Eigen::Index n = points.rows();
    MatX<T> app(n, cfg.appearance_dim);
    for (Eigen::Index i = 0; i < n; ++i) {
      app.row(i) = appearance_row(app_idx[i]);
    }
    cache->app_idx = app_idx;
    cache->color_cat.resize(n, cfg.feature_dim + cfg.pe_d_dim() + cfg.appearance_dim);
    cache->color_cat << cache->h.back(), cache->pe_d, app;
    cache->color_hid = relu<T>(color_hidden_layer.forward(cache->color_cat));
    cache->color = sigmoid<T>(color_out.forward(cache->color_hid));
    *color = cache->color;
  }

  // Backward through the full forward pass. d_sigma (N), d_color (N x 3) and
  // d_feature (N x D at `feature_layer`, may be empty) drive the chain.
  // Parameter grads accumulate in place; input grads accumulate into
  // d_points / d_dirs when non-null.
  void backward(const FieldCache<T>& cache, const VecX<T>& d_sigma,
                const MatX<T>& d_color, const MatX<T>& d_feature,
                int feature_layer, MatX<T>* d_points, MatX<T>* d_dirs) {
    const Eigen::Index n = cache.h[0].rows();
    const int layers = SceneFieldConfig::kLayers;
    std::vector<MatX<T>> dh(layers);
    for (int i = 0; i < layers; ++i)
      dh[i] = MatX<T>::Zero(n, cfg.feature_dim);
    MatX<T> d_pe_x = MatX<T>::Zero(n, cfg.pe_x_dim());

    if (d_color.size() > 0) {
      MatX<T> d_pre_out = sigmoid_backward_from_output(cache.color, d_color);
      MatX<T> d_hid = color_out.backward(cache.color_hid, d_pre_out);
      d_hid = relu_backward(cache.color_hid, d_hid);
      MatX<T> d_cat = color_hidden_layer.backward(cache.color_cat, d_hid);
      dh[layers - 1] += d_cat.leftCols(cfg.feature_dim);
      if (d_dirs) {
        positional_encode_backward<T>(
            cache.pe_d, d_cat.middleCols(cfg.feature_dim, cfg.pe_d_dim()),
            cfg.pe_d_bands, d_dirs);
      }
      const auto d_app = d_cat.rightCols(cfg.appearance_dim);
      const T mean_share = static_cast<T>(1.0 / appearance.rows());
      for (Eigen::Index i = 0; i < n; ++i) {
        const int idx = cache.app_idx[i];
        if (idx >= 0) {
          g_appearance.row(idx) += d_app.row(i);
        } else {
          for (Eigen::Index r = 0; r < appearance.rows(); ++r)
            g_appearance.row(r) += mean_share * d_app.row(i);
        }
      }
    }
    if (d_sigma.size() > 0) {
      MatX<T> ds = softplus_backward(cache.sigma_pre, MatX<T>(d_sigma));
      dh[layers - 1] += density_head.backward(cache.h.back(), ds);
    }
    if (d_feature.size() > 0) {
      dh[feature_layer - 1] += d_feature;
    }

    for (int i = layers - 1; i >= 0; --i) {
      MatX<T> d_pre = relu_backward(cache.h[i], dh[i]);
      if (i == 0) {
        d_pe_x += encoder[0].backward(cache.pe_x, d_pre);
      } else if (i == cfg.skip_layer) {
        MatX<T> cat(n, cfg.feature_dim + cfg.pe_x_dim());
        cat << cache.h[i - 1], cache.pe_x;
        MatX<T> d_cat = encoder[i].backward(cat, d_pre);
        dh[i - 1] += d_cat.leftCols(cfg.feature_dim);
        d_pe_x += d_cat.rightCols(cfg.pe_x_dim());
      } else {
        dh[i - 1] += encoder[i].backward(cache.h[i - 1], d_pre);
      }
    }
    if (d_points) {
      positional_encode_backward<T>(cache.pe_x, d_pe_x, cfg.pe_x_bands,
                                    d_points);
    }
  }
};

// ---------------------------------------------------------------------------
// Ray sampling and volumetric compositing.
// ---------------------------------------------------------------------------

struct RaySamples {
  Ray ray;
  Eigen::VectorXd t_values;  // strictly increasing, in [near, far]
  Eigen::VectorXd deltas;    // last entry = delta cap
  Eigen::MatrixXd points;    // N x 3

  static RaySamples make(const Ray& ray, const Eigen::VectorXd& ts,
                         double delta_cap);
};

// Stratified depths: one sample per uniform bin of [near, far].
Eigen::VectorXd stratified_samples(int n, double near, double far, bool jitter,
                                   Rng& rng);

// Inverse-CDF resampling of n_fine depths proportional to the compositing
// weights over the coarse intervals.
Eigen::VectorXd importance_resample(const Eigen::VectorXd& t_coarse,
                                    const Eigen::VectorXd& weights, int n_fine,
                                    Rng& rng);

Eigen::VectorXd merge_sorted(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// w_i = T_i (1 - exp(-delta_i sigma_i)), T_i = exp(-sum_{j<i} delta_j sigma_j).
template <typename T>
VecX<T> composite_weights(const VecX<T>& sigma, const VecX<T>& delta) {
  if (sigma.size() != delta.size())
    throw std::invalid_argument("composite_weights: length mismatch");
  const Eigen::Index n = sigma.size();
  VecX<T> w(n);
  double log_transmittance = 0.0;  // accumulate in double for stability
  for (Eigen::Index i = 0; i < n; ++i) {
    if (sigma(i) < T(0)) throw NegativeDensity();
    if (delta(i) <= T(0)) throw NonPositiveDelta();
    const double a = static_cast<double>(sigma(i)) * static_cast<double>(delta(i));
    const double ti = std::exp(log_transmittance);
    w(i) = static_cast<T>(ti * (-std::expm1(-a)));
    log_transmittance -= a;
  }
  return w;
}

// d(loss)/d(sigma) given d(loss)/d(w); deltas are fixed by the sampler.
template <typename T>
VecX<T> composite_weights_backward(const VecX<T>& sigma, const VecX<T>& delta,
                                   const VecX<T>& w, const VecX<T>& dw) {
  const Eigen::Index n = sigma.size();
  VecX<T> dsigma(n);
  // Suffix sums of dw_k * w_k handle the transmittance coupling.
  T suffix = T(0);
  std::vector<T> suffix_after(n);
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    suffix_after[i] = suffix;
    suffix += dw(i) * w(i);
  }
  double log_transmittance = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = static_cast<double>(sigma(i)) * static_cast<double>(delta(i));
    const double ti = std::exp(log_transmittance);
    const T da = static_cast<T>(static_cast<double>(dw(i)) * ti * std::exp(-a)) -
                 suffix_after[i];
    dsigma(i) = delta(i) * da;
    log_transmittance -= a;
  }
  return dsigma;
}

// Per-ray composited outputs (Eq. 1/2 style weighted sums).
struct RenderedSurface {
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
  Eigen::Vector3d surface_point = Eigen::Vector3d::Zero();
  Eigen::VectorXd feature;
  double opacity = 0.0;
  double depth = 0.0;           // weight-averaged ray depth (normalized)
  double depth_sigma = 0.0;     // sqrt of the weight variance of depth
  int feature_layer = 0;
};

struct RenderOptions {
  int n_coarse = 64;
  int n_fine = 64;
  int feature_layer = 3;
  bool want_feature = true;
  bool jitter = true;
  uint64_t seed = 0;
  int threads = 1;
  std::string appearance_id;  // empty -> table mean
};

struct SurfaceGrid {
  int rows = 0, cols = 0;
  std::vector<RenderedSurface> surfaces;        // row-major
  std::vector<Eigen::Vector2d> pixels;          // ray pixel per surface
};

template <typename T>
std::vector<RenderedSurface> render_rays(const SceneField<T>& field,
                                         const std::vector<Ray>& rays,
                                         const RenderOptions& opts);

template <typename T>
RenderedSurface render_ray(const SceneField<T>& field, const Ray& ray,
                           const RenderOptions& opts) {
  return render_rays(field, {ray}, opts)[0];
}

// One ray per stride x stride patch center. Throws StrideMismatch when the
// stride does not divide the image dimensions.
template <typename T>
SurfaceGrid render_view(const SceneField<T>& field, const CameraPose& pose,
                        const CameraIntrinsics& K, int stride,
                        const RenderOptions& opts);

template <typename T>
void save_field(const SceneField<T>& field, const std::string& dir);

template <typename T>
SceneField<T> load_field(const std::string& dir);

}  // namespace nerfloc
