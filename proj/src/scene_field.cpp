#include "nerfloc/scene_field.hpp"

#include <thread>

#include "nerfloc/checkpoint.hpp"

namespace nerfloc {

nlohmann::json SceneFieldConfig::to_json() const {
  return {{"feature_dim", feature_dim},
          {"skip_layer", skip_layer},
          {"pe_x_bands", pe_x_bands},
          {"pe_d_bands", pe_d_bands},
          {"appearance_dim", appearance_dim},
          {"color_hidden", color_hidden},
          {"near", near},
          {"far", far},
          {"delta_cap", delta_cap},
          {"density_bias_init", density_bias_init}};
}

SceneFieldConfig SceneFieldConfig::from_json(const nlohmann::json& j) {
  SceneFieldConfig c;
  c.feature_dim = j.at("feature_dim");
  c.skip_layer = j.at("skip_layer");
  c.pe_x_bands = j.at("pe_x_bands");
  c.pe_d_bands = j.at("pe_d_bands");
  c.appearance_dim = j.at("appearance_dim");
  c.color_hidden = j.at("color_hidden");
  c.near = j.at("near");
  c.far = j.at("far");
  c.delta_cap = j.at("delta_cap");
  c.density_bias_init = j.value("density_bias_init", -1.0);
  return c;
}

RaySamples RaySamples::make(const Ray& ray, const Eigen::VectorXd& ts,
                            double delta_cap) {
  RaySamples s;
  s.ray = ray;
  s.t_values = ts;
  const Eigen::Index n = ts.size();
  s.deltas.resize(n);
  for (Eigen::Index i = 0; i + 1 < n; ++i) s.deltas(i) = ts(i + 1) - ts(i);
  if (n > 0) s.deltas(n - 1) = delta_cap;
  s.points.resize(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    s.points.row(i) = ray.point_at(ts(i)).transpose();
  return s;
}

Eigen::VectorXd stratified_samples(int n, double near, double far, bool jitter,
                                   Rng& rng) {
  Eigen::VectorXd ts(n);
  const double bin = (far - near) / n;
  for (int i = 0; i < n; ++i) {
    const double u = jitter ? rng.uniform() : 0.5;
    ts(i) = near + (i + u) * bin;
  }
  return ts;
}

Eigen::VectorXd importance_resample(const Eigen::VectorXd& t_coarse,
                                    const Eigen::VectorXd& weights, int n_fine,
                                    Rng& rng) {
  const Eigen::Index n = t_coarse.size();
  // Piecewise-constant pdf over the coarse intervals; epsilon keeps the CDF
  // valid when all weights vanish.
  const Eigen::Index n_int = n - 1;
  Eigen::VectorXd mass(n_int);
  for (Eigen::Index i = 0; i < n_int; ++i) {
    mass(i) = 0.5 * (weights(i) + weights(i + 1)) + 1e-5;
  }
  Eigen::VectorXd cdf(n_int + 1);
  cdf(0) = 0;
  for (Eigen::Index i = 0; i < n_int; ++i) cdf(i + 1) = cdf(i) + mass(i);
  const double total = cdf(n_int);

  Eigen::VectorXd out(n_fine);
  for (int s = 0; s < n_fine; ++s) {
    const double u = (s + rng.uniform()) / n_fine * total;  // stratified
    // Binary search for the interval containing u.
    Eigen::Index lo = 0, hi = n_int;
    while (lo + 1 < hi) {
      const Eigen::Index mid = (lo + hi) / 2;
      if (cdf(mid) <= u) lo = mid; else hi = mid;
    }
    const double seg = mass(lo);
    const double frac = seg > 0 ? (u - cdf(lo)) / seg : 0.5;
    out(s) = t_coarse(lo) + frac * (t_coarse(lo + 1) - t_coarse(lo));
  }
  std::sort(out.data(), out.data() + out.size());
  return out;
}

Eigen::VectorXd merge_sorted(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  Eigen::VectorXd out(a.size() + b.size());
  std::merge(a.data(), a.data() + a.size(), b.data(), b.data() + b.size(),
             out.data());
  return out;
}

namespace {

template <typename T>
void render_chunk(const SceneField<T>& field,
                  const std::vector<Ray>& rays, size_t begin, size_t end,
                  const RenderOptions& opts, uint64_t chunk_seed,
                  std::vector<RenderedSurface>* out) {
  const int n_rays = static_cast<int>(end - begin);
  if (n_rays == 0) return;
  Rng rng(chunk_seed);
  const double near = field.cfg.near, far = field.cfg.far;
  const int app_idx = opts.appearance_id.empty()
                          ? -1
                          : field.appearance_index(opts.appearance_id);

  // Pass 1: stratified depths, density only, importance resampling.
  std::vector<Eigen::VectorXd> merged_ts(n_rays);
  if (opts.n_fine > 0) {
    MatX<T> coarse_pts(static_cast<Eigen::Index>(n_rays) * opts.n_coarse, 3);
    std::vector<Eigen::VectorXd> coarse_ts(n_rays);
    for (int r = 0; r < n_rays; ++r) {
      coarse_ts[r] = stratified_samples(opts.n_coarse, near, far, opts.jitter, rng);
      const Ray& ray = rays[begin + r];
      for (int i = 0; i < opts.n_coarse; ++i) {
        coarse_pts.row(static_cast<Eigen::Index>(r) * opts.n_coarse + i) =
            ray.point_at(coarse_ts[r](i)).template cast<T>().transpose();
      }
    }
    FieldCache<T> cache;
    const VecX<T> sigma_c = field.density(coarse_pts, &cache);
    for (int r = 0; r < n_rays; ++r) {
      const RaySamples cs = RaySamples::make(rays[begin + r], coarse_ts[r],
                                             field.cfg.delta_cap);
      const VecX<T> w = composite_weights<T>(
          sigma_c.segment(static_cast<Eigen::Index>(r) * opts.n_coarse,
                          opts.n_coarse),
          cs.deltas.cast<T>());
      const Eigen::VectorXd fine_ts = importance_resample(
          coarse_ts[r], w.template cast<double>(), opts.n_fine, rng);
      merged_ts[r] = merge_sorted(coarse_ts[r], fine_ts);
    }
  } else {
    for (int r = 0; r < n_rays; ++r) {
      merged_ts[r] = stratified_samples(opts.n_coarse, near, far, opts.jitter, rng);
    }
  }

  // Pass 2: full forward on the merged samples, then composite.
  const int n_m = static_cast<int>(merged_ts[0].size());
  MatX<T> pts(static_cast<Eigen::Index>(n_rays) * n_m, 3);
  MatX<T> dirs(static_cast<Eigen::Index>(n_rays) * n_m, 3);
  std::vector<int> app(static_cast<size_t>(n_rays) * n_m, app_idx);
  for (int r = 0; r < n_rays; ++r) {
    const Ray& ray = rays[begin + r];
    const Eigen::Matrix<T, 1, 3> d = ray.direction.template cast<T>().transpose();
    for (int i = 0; i < n_m; ++i) {
      pts.row(static_cast<Eigen::Index>(r) * n_m + i) =
          ray.point_at(merged_ts[r](i)).template cast<T>().transpose();
      dirs.row(static_cast<Eigen::Index>(r) * n_m + i) = d;
    }
  }
  FieldCache<T> cache;
  VecX<T> sigma;
  MatX<T> color;
  field.forward(pts, dirs, app, &cache, &sigma, &color);
  const MatX<T>* feature =
      opts.want_feature ? &cache.h[opts.feature_layer - 1] : nullptr;
  if (opts.want_feature &&
      (opts.feature_layer < 1 || opts.feature_layer > SceneFieldConfig::kLayers)) {
    throw LayerOutOfRange(opts.feature_layer);
  }

  for (int r = 0; r < n_rays; ++r) {
    const Eigen::Index base = static_cast<Eigen::Index>(r) * n_m;
    const RaySamples ms =
        RaySamples::make(rays[begin + r], merged_ts[r], field.cfg.delta_cap);
    const VecX<T> w =
        composite_weights<T>(sigma.segment(base, n_m), ms.deltas.cast<T>());
    RenderedSurface s;
    s.feature_layer = opts.want_feature ? opts.feature_layer : 0;
    Eigen::Vector3d c = Eigen::Vector3d::Zero(), x = Eigen::Vector3d::Zero();
    Eigen::VectorXd f;
    if (feature) f = Eigen::VectorXd::Zero(feature->cols());
    double opacity = 0;
    for (int i = 0; i < n_m; ++i) {
      const double wi = static_cast<double>(w(i));
      opacity += wi;
      c += wi * color.row(base + i).template cast<double>().transpose();
      x += wi * ms.points.row(i).transpose();
      if (feature)
        f += wi * feature->row(base + i).template cast<double>().transpose();
    }
    s.color = c;
    s.surface_point = x;
    s.feature = f;
    s.opacity = opacity;
    if (opacity > 1e-9) {
      double mean_t = 0;
      for (int i = 0; i < n_m; ++i) {
        mean_t += static_cast<double>(w(i)) * merged_ts[r](i);
      }
      mean_t /= opacity;
      double var_t = 0;
      for (int i = 0; i < n_m; ++i) {
        const double d = merged_ts[r](i) - mean_t;
        var_t += static_cast<double>(w(i)) * d * d;
      }
      s.depth = mean_t;
      s.depth_sigma = std::sqrt(var_t / opacity);
    }
    (*out)[begin + r] = std::move(s);
  }
}

}  // namespace

template <typename T>
std::vector<RenderedSurface> render_rays(const SceneField<T>& field,
                                         const std::vector<Ray>& rays,
                                         const RenderOptions& opts) {
  std::vector<RenderedSurface> out(rays.size());
  // Fixed chunking keeps results independent of the worker count.
  constexpr size_t kChunk = 256;
  const size_t n_chunks = (rays.size() + kChunk - 1) / kChunk;
  const int n_threads =
      std::max(1, std::min<int>(opts.threads > 0
                                    ? opts.threads
                                    : static_cast<int>(
                                          std::thread::hardware_concurrency()),
                                static_cast<int>(n_chunks)));
  if (n_threads == 1) {
    for (size_t c = 0; c < n_chunks; ++c) {
      render_chunk(field, rays, c * kChunk,
                   std::min(rays.size(), (c + 1) * kChunk), opts,
                   derive_seed(opts.seed, c), &out);
    }
    return out;
  }
  std::vector<std::thread> workers;
  std::atomic<size_t> next{0};
  for (int t = 0; t < n_threads; ++t) {
    workers.emplace_back([&] {
      for (size_t c = next.fetch_add(1); c < n_chunks; c = next.fetch_add(1)) {
        render_chunk(field, rays, c * kChunk,
                     std::min(rays.size(), (c + 1) * kChunk), opts,
                     derive_seed(opts.seed, c), &out);
      }
    });
  }
  for (auto& w : workers) w.join();
  return out;
}

template <typename T>
SurfaceGrid render_view(const SceneField<T>& field, const CameraPose& pose,
                        const CameraIntrinsics& K, int stride,
                        const RenderOptions& opts) {
  if (stride <= 0 || K.width % stride != 0 || K.height % stride != 0) {
    throw StrideMismatch(std::to_string(stride) + " does not divide " +
                         std::to_string(K.width) + "x" + std::to_string(K.height));
  }
  SurfaceGrid grid;
  grid.rows = K.height / stride;
  grid.cols = K.width / stride;
  std::vector<Ray> rays;
  rays.reserve(static_cast<size_t>(grid.rows) * grid.cols);
  grid.pixels.reserve(rays.capacity());
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const Eigen::Vector2d px((c + 0.5) * stride, (r + 0.5) * stride);
      rays.push_back(ray_for_pixel(px, pose, K));
      grid.pixels.push_back(px);
    }
  }
  grid.surfaces = render_rays(field, rays, opts);
  return grid;
}

template <typename T>
void save_field(const SceneField<T>& field, const std::string& dir) {
  nlohmann::json config = field.cfg.to_json();
  config["type"] = "scene_field";
  config["sequences"] = field.sequence_ids;
  ParamRegistry<T> reg = const_cast<SceneField<T>&>(field).registry();
  save_checkpoint(dir, reg, config);
}

template <typename T>
SceneField<T> load_field(const std::string& dir) {
  const nlohmann::json manifest = load_checkpoint_manifest(dir);
  const auto& config = manifest.at("config");
  if (config.value("type", "") != "scene_field") {
    throw CheckpointError("not a scene_field checkpoint: " + dir);
  }
  SceneField<T> field;
  Rng rng(0);
  field.init(SceneFieldConfig::from_json(config),
             config.at("sequences").get<std::vector<std::string>>(), rng);
  ParamRegistry<T> reg = field.registry();
  load_checkpoint_into(dir, reg);
  return field;
}

template std::vector<RenderedSurface> render_rays<float>(
    const SceneField<float>&, const std::vector<Ray>&, const RenderOptions&);
template std::vector<RenderedSurface> render_rays<double>(
    const SceneField<double>&, const std::vector<Ray>&, const RenderOptions&);
template SurfaceGrid render_view<float>(const SceneField<float>&,
                                        const CameraPose&,
                                        const CameraIntrinsics&, int,
                                        const RenderOptions&);
template SurfaceGrid render_view<double>(const SceneField<double>&,
                                         const CameraPose&,
                                         const CameraIntrinsics&, int,
                                         const RenderOptions&);
template void save_field<float>(const SceneField<float>&, const std::string&);
template void save_field<double>(const SceneField<double>&, const std::string&);
template SceneField<float> load_field<float>(const std::string&);
template SceneField<double> load_field<double>(const std::string&);

}  // namespace nerfloc
