#include "nerfloc/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "nerfloc/checkpoint.hpp"

namespace nerfloc {

std::string to_string(FeatureSource s) {
  switch (s) {
    case FeatureSource::kPt3D: return "pt3d";
    case FeatureSource::kPe3D: return "pe3d";
    default:
      return "f" + std::to_string(source_layer(s));
  }
}

FeatureSource feature_source_from_string(const std::string& s) {
  if (s == "pt3d") return FeatureSource::kPt3D;
  if (s == "pe3d") return FeatureSource::kPe3D;
  if (s.size() == 2 && s[0] == 'f' && s[1] >= '1' && s[1] <= '7') {
    return static_cast<FeatureSource>(static_cast<int>(FeatureSource::kF1) +
                                      (s[1] - '1'));
  }
  throw std::invalid_argument("unknown feature source: " + s);
}

nlohmann::json MatcherConfig::to_json() const {
  return {{"variant", variant},
          {"image_size", image_size},
          {"d_coarse", d_coarse},
          {"d_fine", d_fine},
          {"cnn_channels", cnn_channels},
          {"tau", tau},
          {"theta", theta},
          {"n_self_blocks", n_self_blocks},
          {"n_heads", n_heads},
          {"n_fine_self_blocks", n_fine_self_blocks},
          {"fine_window", fine_window},
          {"pe3d_bands", pe3d_bands},
          {"source", to_string(source)},
          {"opacity_threshold", opacity_threshold}};
}

MatcherConfig MatcherConfig::from_json(const nlohmann::json& j) {
  MatcherConfig c;
  c.variant = j.at("variant");
  c.image_size = j.at("image_size");
  c.d_coarse = j.at("d_coarse");
  c.d_fine = j.at("d_fine");
  c.cnn_channels = j.at("cnn_channels").get<std::vector<int>>();
  c.tau = j.at("tau");
  c.theta = j.at("theta");
  c.n_self_blocks = j.at("n_self_blocks");
  c.n_heads = j.at("n_heads");
  c.n_fine_self_blocks = j.at("n_fine_self_blocks");
  c.fine_window = j.at("fine_window");
  c.pe3d_bands = j.at("pe3d_bands");
  c.source = feature_source_from_string(j.at("source"));
  c.opacity_threshold = j.at("opacity_threshold");
  return c;
}

template <typename T>
int MatcherParams<T>::lift_input_dim() const {
  if (cfg.source == FeatureSource::kPt3D) return 3;
  if (cfg.source == FeatureSource::kPe3D)
    return positional_encode_dim(3, cfg.pe3d_bands);
  return 0;
}

template <typename T>
void MatcherParams<T>::init(const MatcherConfig& config, Rng& rng) {
  cfg = config;
  const auto& ch = cfg.cnn_channels;
  conv0.init(3, ch[0], 3, 1, rng);
  conv1.init(ch[0], ch[1], 3, 2, rng);
  conv2.init(ch[1], ch[2], 3, 2, rng);
  conv3.init(ch[2], ch[3], 3, 2, rng);
  head_coarse.init(ch[3], cfg.d_coarse, 1, 1, rng);
  head_fine.init(ch[1], cfg.d_fine, 1, 1, rng);
  if (lift_input_dim() > 0) lift.init(lift_input_dim(), cfg.d_coarse, rng);
  if (cfg.variant == "full") {
    self_blocks.resize(cfg.n_self_blocks);
    for (auto& b : self_blocks) b.init(cfg.d_coarse, cfg.n_heads, rng);
    fuse.init(cfg.d_coarse + positional_encode_dim(3, cfg.pe3d_bands),
              cfg.d_coarse, rng);
    cross_block.init(cfg.d_coarse, cfg.n_heads, rng);
    fine_lift.init(cfg.d_coarse, cfg.d_fine, rng);
    fine_self_blocks.resize(cfg.n_fine_self_blocks);
    for (auto& b : fine_self_blocks) b.init(cfg.d_fine, cfg.n_heads, rng);
  }
}

template <typename T>
ParamRegistry<T> MatcherParams<T>::registry() {
  ParamRegistry<T> reg;
  conv0.register_params(reg, "conv0");
  conv1.register_params(reg, "conv1");
  conv2.register_params(reg, "conv2");
  conv3.register_params(reg, "conv3");
  head_coarse.register_params(reg, "head_coarse");
  head_fine.register_params(reg, "head_fine");
  if (lift_input_dim() > 0) lift.register_params(reg, "lift");
  for (size_t i = 0; i < self_blocks.size(); ++i) {
    self_blocks[i].register_params(reg, "self" + std::to_string(i));
  }
  if (cfg.variant == "full") {
    fuse.register_params(reg, "fuse");
    cross_block.register_params(reg, "cross");
    fine_lift.register_params(reg, "fine_lift");
    for (size_t i = 0; i < fine_self_blocks.size(); ++i) {
      fine_self_blocks[i].register_params(reg, "fine_self" + std::to_string(i));
    }
  }
  return reg;
}

template <typename T>
void save_matcher(MatcherParams<T>& params, const std::string& dir) {
  nlohmann::json config = params.cfg.to_json();
  config["type"] = "matcher";
  ParamRegistry<T> reg = params.registry();
  save_checkpoint(dir, reg, config);
}

template <typename T>
MatcherParams<T> load_matcher(const std::string& dir) {
  const nlohmann::json manifest = load_checkpoint_manifest(dir);
  const auto& config = manifest.at("config");
  if (config.value("type", "") != "matcher") {
    throw CheckpointError("not a matcher checkpoint: " + dir);
  }
  MatcherParams<T> params;
  Rng rng(0);
  params.init(MatcherConfig::from_json(config), rng);
  ParamRegistry<T> reg = params.registry();
  load_checkpoint_into(dir, reg);
  return params;
}

// ---------------------------------------------------------------------------
// CNN encoder.
// ---------------------------------------------------------------------------

namespace {

template <typename T>
MatX<T> image_to_matrix(const Image& image) {
  MatX<T> m(static_cast<Eigen::Index>(image.width) * image.height, 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        m(static_cast<Eigen::Index>(y) * image.width + x, c) =
            static_cast<T>(image.at(x, y, c));
      }
    }
  }
  return m;
}

template <typename T>
struct CnnCache {
  typename Conv2d<T>::Cache c0, c1, c2, c3, hc, hf;
  MatX<T> a0, a1, a2, a3;  // post-ReLU activations
  int h = 0, w = 0;
};

template <typename T>
void cnn_forward(const MatcherParams<T>& p, const Image& image,
                 ImageFeaturePyramid<T>* pyr, CnnCache<T>* cache) {
  if (image.width != image.height || image.width % 8 != 0) {
    throw BadShape(std::to_string(image.width) + "x" +
                   std::to_string(image.height) +
                   " (needs square, divisible by 8)");
  }
  if (image.channels != 3) throw BadShape("expected 3 channels");
  CnnCache<T> local;
  CnnCache<T>& c = cache ? *cache : local;
  c.h = image.height;
  c.w = image.width;
  const MatX<T> x = image_to_matrix<T>(image);
  c.a0 = relu<T>(p.conv0.forward(x, c.h, c.w, &c.c0));
  c.a1 = relu<T>(p.conv1.forward(c.a0, c.h, c.w, &c.c1));
  c.a2 = relu<T>(p.conv2.forward(c.a1, c.c1.out_h, c.c1.out_w, &c.c2));
  c.a3 = relu<T>(p.conv3.forward(c.a2, c.c2.out_h, c.c2.out_w, &c.c3));
  pyr->coarse = p.head_coarse.forward(c.a3, c.c3.out_h, c.c3.out_w, &c.hc);
  pyr->coarse_h = c.c3.out_h;
  pyr->coarse_w = c.c3.out_w;
  pyr->fine = p.head_fine.forward(c.a1, c.c1.out_h, c.c1.out_w, &c.hf);
  pyr->fine_h = c.c1.out_h;
  pyr->fine_w = c.c1.out_w;
}

// d_coarse / d_fine are grads on the pyramid outputs.
template <typename T>
void cnn_backward(MatcherParams<T>& p, CnnCache<T>& c, const MatX<T>& d_coarse,
                  const MatX<T>& d_fine) {
  MatX<T> da1 = MatX<T>::Zero(c.a1.rows(), c.a1.cols());
  if (d_fine.size() > 0) da1 += p.head_fine.backward(c.hf, d_fine);
  MatX<T> da3 = p.head_coarse.backward(c.hc, d_coarse);
  da3 = relu_backward(c.a3, da3);
  MatX<T> da2 = relu_backward(c.a2, p.conv3.backward(c.c3, da3));
  da1 += p.conv2.backward(c.c2, da2);
  da1 = relu_backward(c.a1, da1);
  MatX<T> da0 = relu_backward(c.a0, p.conv1.backward(c.c1, da1));
  p.conv0.backward(c.c0, da0);  // input grad discarded
}

template <typename T>
MatX<T> normalize_rows(const MatX<T>& x) {
  MatX<T> out = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T n = x.row(i).norm();
    if (n < T(1e-12)) throw ZeroVector();
    out.row(i) /= n;
  }
  return out;
}

// Backward through row normalization: dx = (dy - xhat (xhat . dy)) / |x|.
template <typename T>
MatX<T> normalize_rows_backward(const MatX<T>& x, const MatX<T>& xhat,
                                const MatX<T>& dy) {
  MatX<T> dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T n = x.row(i).norm();
    const T dot = xhat.row(i).dot(dy.row(i));
    dx.row(i) = (dy.row(i) - dot * xhat.row(i)) / n;
  }
  return dx;
}

template <typename T>
MatX<T> softmax_cols(const MatX<T>& z) {
  return softmax_rows<T>(MatX<T>(z.transpose())).transpose();
}

template <typename T>
MatX<T> lifted_point_features(const MatcherParams<T>& p,
                              const ScenePointSet& points) {
  if (p.lift_input_dim() > 0) {
    return p.lift.forward(points.features.cast<T>());
  }
  return points.features.cast<T>();
}

}  // namespace

template <typename T>
ImageFeaturePyramid<T> encode_image(const Image& image,
                                    const MatcherParams<T>& params) {
  ImageFeaturePyramid<T> pyr;
  cnn_forward(params, image, &pyr, static_cast<CnnCache<T>*>(nullptr));
  return pyr;
}

std::pair<Image, CameraIntrinsics> prepare_query_image(
    const Image& image, const CameraIntrinsics& K, int image_size) {
  if (image.width == image_size && image.height == image_size) {
    return {image, K};
  }
  return {image.resized(image_size, image_size),
          K.scaled(image_size, image_size)};
}

template <typename T>
ScenePointSet prepare_scene_features(const CameraPose& pose,
                                     const CameraIntrinsics& K,
                                     const SceneField<T>& field,
                                     const MatcherConfig& cfg, uint64_t seed,
                                     const std::string& appearance_id,
                                     int n_coarse, int n_fine) {
  RenderOptions opts;
  opts.n_coarse = n_coarse > 0 ? n_coarse : 128;
  opts.n_fine = n_fine >= 0 && n_coarse > 0 ? n_fine : 128;
  opts.want_feature = is_layer_source(cfg.source);
  if (opts.want_feature) opts.feature_layer = source_layer(cfg.source);
  opts.jitter = true;
  opts.seed = seed;
  opts.threads = 2;
  opts.appearance_id = appearance_id;
  const SurfaceGrid grid = render_view(field, pose, K, 8, opts);

  std::vector<int> keep;
  for (size_t i = 0; i < grid.surfaces.size(); ++i) {
    if (grid.surfaces[i].opacity >= cfg.opacity_threshold) {
      keep.push_back(static_cast<int>(i));
    }
  }
  if (keep.size() < 8) throw LowOpacityScene();

  ScenePointSet set;
  set.source = cfg.source;
  const int feat_dim = is_layer_source(cfg.source)
                           ? field.cfg.feature_dim
                           : (cfg.source == FeatureSource::kPt3D
                                  ? 3
                                  : positional_encode_dim(3, cfg.pe3d_bands));
  set.points.resize(static_cast<Eigen::Index>(keep.size()), 3);
  set.features.resize(static_cast<Eigen::Index>(keep.size()), feat_dim);
  set.opacities.resize(static_cast<Eigen::Index>(keep.size()));
  for (size_t k = 0; k < keep.size(); ++k) {
    const RenderedSurface& s = grid.surfaces[keep[k]];
    set.points.row(static_cast<Eigen::Index>(k)) = s.surface_point.transpose();
    set.opacities(static_cast<Eigen::Index>(k)) = s.opacity;
    if (is_layer_source(cfg.source)) {
      set.features.row(static_cast<Eigen::Index>(k)) = s.feature.transpose();
    } else if (cfg.source == FeatureSource::kPt3D) {
      set.features.row(static_cast<Eigen::Index>(k)) = s.surface_point.transpose();
    } else {
      set.features.row(static_cast<Eigen::Index>(k)) =
          positional_encode<double>(s.surface_point.transpose(), cfg.pe3d_bands);
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Dual softmax and mutual matching.
// ---------------------------------------------------------------------------

ScoreMatrix dual_softmax(const Eigen::MatrixXd& img_features,
                         const Eigen::MatrixXd& point_features, double tau) {
  if (tau <= 0) throw std::invalid_argument("tau must be positive");
  const Eigen::MatrixXd a = normalize_rows<double>(img_features);
  const Eigen::MatrixXd b = normalize_rows<double>(point_features);
  const Eigen::MatrixXd z = (a * b.transpose()) / tau;
  ScoreMatrix out;
  out.tau = tau;
  out.S = softmax_rows<double>(z).cwiseProduct(softmax_cols<double>(z));
  return out;
}

std::vector<CoarseMatch> mutual_matches(const ScoreMatrix& S, double theta) {
  const Eigen::Index n_m = S.S.rows(), n_s = S.S.cols();
  std::vector<Eigen::Index> row_best(n_m), col_best(n_s);
  for (Eigen::Index i = 0; i < n_m; ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < n_s; ++j) {
      if (S.S(i, j) > S.S(i, best)) best = j;  // ties keep the lowest index
    }
    row_best[i] = best;
  }
  for (Eigen::Index j = 0; j < n_s; ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < n_m; ++i) {
      if (S.S(i, j) > S.S(best, j)) best = i;
    }
    col_best[j] = best;
  }
  std::vector<CoarseMatch> out;
  for (Eigen::Index i = 0; i < n_m; ++i) {
    const Eigen::Index j = row_best[i];
    if (col_best[j] == i && S.S(i, j) > theta) {
      out.push_back({static_cast<int>(i), static_cast<int>(j), S.S(i, j)});
    }
  }
  return out;
}

GroundTruthAssociation gt_associations(const ScenePointSet& points,
                                       const CameraPose& query_pose,
                                       const CameraIntrinsics& query_K,
                                       int patch) {
  GroundTruthAssociation gt;
  gt.grid_h = query_K.height / patch;
  gt.grid_w = query_K.width / patch;
  const Eigen::Index n = points.points.rows();
  gt.fine_targets = Eigen::MatrixXd::Zero(n, 2);
  gt.in_bounds.assign(static_cast<size_t>(n), 0);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Vector2d px;
    if (!project_checked(points.points.row(j).transpose(), query_pose, query_K,
                         &px)) {
      continue;
    }
    if (px.x() < 0 || px.x() >= query_K.width || px.y() < 0 ||
        px.y() >= query_K.height) {
      continue;
    }
    const int col = static_cast<int>(px.x() / patch);
    const int row = static_cast<int>(px.y() / patch);
    gt.entries.push_back({row * gt.grid_w + col, static_cast<int>(j)});
    gt.fine_targets.row(j) = px.transpose();
    gt.in_bounds[static_cast<size_t>(j)] = 1;
  }
  return gt;
}

double coarse_loss(const ScoreMatrix& S, const GroundTruthAssociation& gt) {
  if (gt.entries.empty()) throw NoGroundTruth();
  double sum = 0;
  for (const auto& [i, j] : gt.entries) {
    sum += std::log(S.S(i, j));
  }
  return -sum / static_cast<double>(gt.entries.size());
}

double fine_loss(const std::vector<FineMatch>& predictions,
                 const Eigen::MatrixXd& fine_targets_fullres) {
  if (predictions.empty()) throw NoMatches();
  double sum = 0;
  for (const auto& m : predictions) {
    // Supervised at fine-grid resolution (full-res / 2).
    const Eigen::Vector2d pred = m.pixel / 2.0;
    const Eigen::Vector2d target =
        fine_targets_fullres.row(m.point).transpose() / 2.0;
    const double s2 = std::max(m.sigma2, 1e-6);
    sum += (pred - target).norm() / s2;
  }
  return sum / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------------
// Full-variant plumbing.
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct FineBranchCache {
  int patch = 0, point = 0;
  int cx = 0, cy = 0;  // clamped window center on the fine grid
  MatX<T> window0;     // w*w x d_fine gathered features
  std::vector<typename TransformerBlock<T>::Cache> blocks;
  MatX<T> window;      // after self blocks
  VecX<T> q;           // fine_lift output
  VecX<T> heat;        // softmax over w*w
  Eigen::Vector2d expectation_fine;
  double sigma2 = 0;
};

template <typename T>
struct FullForwardCache {
  MatX<T> img0, pts0;
  std::vector<typename TransformerBlock<T>::Cache> img_self, pts_self;
  MatX<T> pe3d;
  MatX<T> pts_cat;
  MatX<T> pts_fused;
  MatX<T> img_pre_cross;
  typename TransformerBlock<T>::Cache cross_img, cross_pts;
  MatX<T> img_out, pts_out;
};

// Window center on the fine grid for coarse patch (row, col): the patch
// center maps to fine coords x/2, clamped so the window stays in bounds.
inline void fine_window_center(int patch_idx, int grid_w, int fine_w,
                               int fine_h, int window, int* cx, int* cy) {
  const int row = patch_idx / grid_w;
  const int col = patch_idx % grid_w;
  const int half = window / 2;
  *cx = std::clamp(4 * col + 2, half, fine_w - 1 - half);
  *cy = std::clamp(4 * row + 2, half, fine_h - 1 - half);
}

template <typename T>
void fine_branch_forward(const MatcherParams<T>& p,
                         const ImageFeaturePyramid<T>& pyr,
                         const MatX<T>& pts_out, int patch, int point,
                         FineBranchCache<T>* c) {
  const int w = p.cfg.fine_window;
  c->patch = patch;
  c->point = point;
  fine_window_center(patch, pyr.coarse_w, pyr.fine_w, pyr.fine_h, w, &c->cx,
                     &c->cy);
  const int half = w / 2;
  c->window0.resize(w * w, p.cfg.d_fine);
  for (int dy = -half; dy <= half; ++dy) {
    for (int dx = -half; dx <= half; ++dx) {
      const int k = (dy + half) * w + (dx + half);
      c->window0.row(k) =
          pyr.fine.row(static_cast<Eigen::Index>(c->cy + dy) * pyr.fine_w +
                       (c->cx + dx));
    }
  }
  c->blocks.resize(p.fine_self_blocks.size());
  MatX<T> cur = c->window0;
  for (size_t b = 0; b < p.fine_self_blocks.size(); ++b) {
    cur = p.fine_self_blocks[b].forward(cur, cur, &c->blocks[b]);
  }
  c->window = cur;
  c->q = p.fine_lift.forward(pts_out.row(point)).transpose();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(p.cfg.d_fine)));
  VecX<T> logits = c->window * c->q * scale;
  const T m = logits.maxCoeff();
  VecX<T> heat = (logits.array() - m).exp();
  heat /= heat.sum();
  c->heat = heat;
  // Expectation and total variance over the window cells (fine coords).
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (int dy = -half; dy <= half; ++dy) {
    for (int dx = -half; dx <= half; ++dx) {
      const int k = (dy + half) * w + (dx + half);
      mean += static_cast<double>(heat(k)) *
              Eigen::Vector2d(c->cx + dx + 0.5, c->cy + dy + 0.5);
    }
  }
  double var = 0;
  for (int dy = -half; dy <= half; ++dy) {
    for (int dx = -half; dx <= half; ++dx) {
      const int k = (dy + half) * w + (dx + half);
      var += static_cast<double>(heat(k)) *
             (Eigen::Vector2d(c->cx + dx + 0.5, c->cy + dy + 0.5) - mean)
                 .squaredNorm();
    }
  }
  c->expectation_fine = mean;
  c->sigma2 = var;
}

// Shared forward for the full variant; caches optional (training needs them).
template <typename T>
void full_forward(const MatcherParams<T>& p, const MatX<T>& img_coarse,
                  int coarse_h, int coarse_w, const ScenePointSet& points,
                  const MatX<T>& pts_feats, FullForwardCache<T>* c) {
  FullForwardCache<T> local;
  FullForwardCache<T>& cc = c ? *c : local;
  cc.img0 = img_coarse +
            sinusoidal_grid_encoding<T>(coarse_h, coarse_w, p.cfg.d_coarse);
  cc.pts0 = pts_feats;
  cc.img_self.resize(p.self_blocks.size());
  cc.pts_self.resize(p.self_blocks.size());
  MatX<T> img = cc.img0, pts = cc.pts0;
  for (size_t b = 0; b < p.self_blocks.size(); ++b) {
    img = p.self_blocks[b].forward(img, img, &cc.img_self[b]);
    pts = p.self_blocks[b].forward(pts, pts, &cc.pts_self[b]);
  }
  cc.img_pre_cross = img;
  cc.pe3d = positional_encode<T>(points.points.cast<T>(), p.cfg.pe3d_bands);
  cc.pts_cat.resize(pts.rows(), pts.cols() + cc.pe3d.cols());
  cc.pts_cat << pts, cc.pe3d;
  cc.pts_fused = p.fuse.forward(cc.pts_cat);
  cc.img_out = p.cross_block.forward(img, cc.pts_fused, &cc.cross_img);
  cc.pts_out = p.cross_block.forward(cc.pts_fused, img, &cc.cross_pts);
}

}  // namespace

template <typename T>
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> coarse_attention_forward(
    const ImageFeaturePyramid<T>& pyramid, const ScenePointSet& points,
    const MatcherParams<T>& params) {
  const MatX<T> pts_feats = lifted_point_features(params, points);
  FullForwardCache<T> cache;
  full_forward(params, pyramid.coarse, pyramid.coarse_h, pyramid.coarse_w,
               points, pts_feats, &cache);
  return {cache.img_out.template cast<double>(),
          cache.pts_out.template cast<double>()};
}

template <typename T>
FineMatch fine_refine(const CoarseMatch& match,
                      const ImageFeaturePyramid<T>& pyramid,
                      const Eigen::MatrixXd& refined_point_features,
                      const MatcherParams<T>& params) {
  FineBranchCache<T> fc;
  const MatX<T> pts = refined_point_features.cast<T>();
  fine_branch_forward(params, pyramid, pts, match.patch, match.point, &fc);
  FineMatch fm;
  fm.point = match.point;
  fm.pixel = 2.0 * fc.expectation_fine;
  fm.sigma2 = fc.sigma2;
  return fm;
}

template <typename T>
MatchSet match_query(const ImageFeaturePyramid<T>& pyramid,
                     const ScenePointSet& points, MatcherParams<T>& params) {
  MatchSet out;
  out.grid_w = pyramid.coarse_w;
  const MatX<T> pts_feats = lifted_point_features(params, points);
  if (params.cfg.variant == "mini") {
    const ScoreMatrix S =
        dual_softmax(pyramid.coarse.template cast<double>(),
                     pts_feats.template cast<double>(), params.cfg.tau);
    out.coarse = mutual_matches(S, params.cfg.theta);
    out.stage = "coarse";
    return out;
  }
  FullForwardCache<T> cache;
  full_forward(params, pyramid.coarse, pyramid.coarse_h, pyramid.coarse_w,
               points, pts_feats, &cache);
  const ScoreMatrix S =
      dual_softmax(cache.img_out.template cast<double>(),
                   cache.pts_out.template cast<double>(), params.cfg.tau);
  out.coarse = mutual_matches(S, params.cfg.theta);
  for (const auto& m : out.coarse) {
    FineBranchCache<T> fc;
    fine_branch_forward(params, pyramid, cache.pts_out, m.patch, m.point, &fc);
    FineMatch fm;
    fm.point = m.point;
    fm.pixel = 2.0 * fc.expectation_fine;  // fine grid -> full resolution
    fm.sigma2 = fc.sigma2;
    out.fine.push_back(fm);
  }
  out.stage = "fine";
  return out;
}

std::vector<Correspondence> to_correspondences(const MatchSet& matches,
                                               const ScenePointSet& points,
                                               int patch) {
  std::map<int, const FineMatch*> fine_by_point;
  for (const auto& f : matches.fine) fine_by_point[f.point] = &f;
  std::vector<Correspondence> out;
  for (const auto& m : matches.coarse) {
    Correspondence c;
    c.point = points.points.row(m.point).transpose();
    c.score = m.score;
    const auto it = fine_by_point.find(m.point);
    if (it != fine_by_point.end()) {
      c.pixel = it->second->pixel;
    } else {
      const int grid_w = matches.grid_w > 0 ? matches.grid_w : 0;
      const int row = grid_w > 0 ? m.patch / grid_w : 0;
      const int col = grid_w > 0 ? m.patch % grid_w : m.patch;
      c.pixel = {col * patch + patch / 2.0, row * patch + patch / 2.0};
    }
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

template <typename T>
double matcher_loss_and_grad(MatcherParams<T>& params, const Image& query_image,
                             const ScenePointSet& points,
                             const GroundTruthAssociation& gt) {
  if (gt.entries.empty()) throw NoGroundTruth();
  const bool full = params.cfg.variant == "full";
  const bool lifted = params.lift_input_dim() > 0;

  CnnCache<T> cnn;
  ImageFeaturePyramid<T> pyr;
  cnn_forward(params, query_image, &pyr, &cnn);
  const MatX<T> pts_feats = lifted_point_features(params, points);

  FullForwardCache<T> cache;
  const MatX<T>* img_for_match = nullptr;
  const MatX<T>* pts_for_match = nullptr;
  if (full) {
    full_forward(params, pyr.coarse, pyr.coarse_h, pyr.coarse_w, points,
                 pts_feats, &cache);
    img_for_match = &cache.img_out;
    pts_for_match = &cache.pts_out;
  } else {
    img_for_match = &pyr.coarse;
    pts_for_match = &pts_feats;
  }

  // Dual softmax kept explicit so the backward can reuse the factors.
  const MatX<T> img_hat = normalize_rows(*img_for_match);
  const MatX<T> pts_hat = normalize_rows(*pts_for_match);
  const T inv_tau = static_cast<T>(1.0 / params.cfg.tau);
  const MatX<T> z = (img_hat * pts_hat.transpose()) * inv_tau;
  const MatX<T> a = softmax_rows<T>(z);
  const MatX<T> b = softmax_cols<T>(z);

  const T inv_m = static_cast<T>(1.0 / static_cast<double>(gt.entries.size()));
  double loss_c = 0;
  // d(L_c)/dz via the cross-entropy form of -log(a) - log(b).
  MatX<T> dz = MatX<T>::Zero(z.rows(), z.cols());
  for (const auto& [i, j] : gt.entries) {
    loss_c -=
        std::log(static_cast<double>(a(i, j)) * static_cast<double>(b(i, j)));
    dz.row(i) += inv_m * a.row(i);
    dz.col(j) += inv_m * b.col(j);
    dz(i, j) -= T(2) * inv_m;
  }
  loss_c /= static_cast<double>(gt.entries.size());

  double loss_f = 0;
  MatX<T> d_fine_map;
  MatX<T> d_pts_out;
  std::vector<FineBranchCache<T>> fine_caches;
  if (full) {
    d_fine_map = MatX<T>::Zero(pyr.fine.rows(), pyr.fine.cols());
    d_pts_out = MatX<T>::Zero(cache.pts_out.rows(), cache.pts_out.cols());
    fine_caches.resize(gt.entries.size());
    const double inv_f = 1.0 / static_cast<double>(gt.entries.size());
    for (size_t e = 0; e < gt.entries.size(); ++e) {
      const auto& [i, j] = gt.entries[e];
      FineBranchCache<T>& fc = fine_caches[e];
      fine_branch_forward(params, pyr, cache.pts_out, i, j, &fc);
      const Eigen::Vector2d target_fine =
          gt.fine_targets.row(j).transpose() / 2.0;
      const Eigen::Vector2d resid = fc.expectation_fine - target_fine;
      const double dist = resid.norm();
      const double s2 = std::max(fc.sigma2, 1e-6);
      loss_f += dist / s2 * inv_f;
      Eigen::Vector2d d_expect = Eigen::Vector2d::Zero();
      if (dist > 1e-12) d_expect = inv_f * resid / (dist * s2);
      const double d_sigma2 = fc.sigma2 > 1e-6 ? -inv_f * dist / (s2 * s2) : 0.0;

      const int w = params.cfg.fine_window;
      const int half = w / 2;
      VecX<T> d_heat(w * w);
      for (int dy = -half; dy <= half; ++dy) {
        for (int dx = -half; dx <= half; ++dx) {
          const int k = (dy + half) * w + (dx + half);
          const Eigen::Vector2d cell(fc.cx + dx + 0.5, fc.cy + dy + 0.5);
          // d(sigma2)/d(heat_k) reduces to ||cell - mean||^2: the mean-shift
          // term cancels because sum_k heat_k (cell_k - mean) = 0.
          d_heat(k) = static_cast<T>(
              d_expect.dot(cell) +
              d_sigma2 * (cell - fc.expectation_fine).squaredNorm());
        }
      }
      const T hdot = fc.heat.dot(d_heat);
      const VecX<T> d_logits =
          fc.heat.cwiseProduct((d_heat.array() - hdot).matrix());
      const T scale =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(params.cfg.d_fine)));
      MatX<T> d_window = scale * d_logits * fc.q.transpose();
      const VecX<T> d_q = scale * fc.window.transpose() * d_logits;
      const MatX<T> pts_row = cache.pts_out.row(j);
      d_pts_out.row(j) += params.fine_lift.backward(pts_row, d_q.transpose());
      for (int bl = static_cast<int>(params.fine_self_blocks.size()) - 1;
           bl >= 0; --bl) {
        MatX<T> d_in = MatX<T>::Zero(w * w, params.cfg.d_fine);
        params.fine_self_blocks[bl].backward(fc.blocks[bl], d_window, &d_in,
                                             &d_in);
        d_window = d_in;
      }
      for (int dy = -half; dy <= half; ++dy) {
        for (int dx = -half; dx <= half; ++dx) {
          const int k = (dy + half) * w + (dx + half);
          d_fine_map.row(static_cast<Eigen::Index>(fc.cy + dy) * pyr.fine_w +
                         (fc.cx + dx)) += d_window.row(k);
        }
      }
    }
  }

  // Backward through the dual softmax into the match features.
  const MatX<T> d_img_hat = (dz * pts_hat) * inv_tau;
  const MatX<T> d_pts_hat = (dz.transpose() * img_hat) * inv_tau;
  MatX<T> d_img = normalize_rows_backward(*img_for_match, img_hat, d_img_hat);
  MatX<T> d_pts = normalize_rows_backward(*pts_for_match, pts_hat, d_pts_hat);

  MatX<T> d_img_coarse;  // grads on the CNN coarse output
  MatX<T> d_pts_feats = MatX<T>::Zero(pts_feats.rows(), pts_feats.cols());
  if (full) {
    d_pts += d_pts_out;
    // Cross blocks (parallel update, shared weights).
    MatX<T> d_img_pre =
        MatX<T>::Zero(cache.img_pre_cross.rows(), params.cfg.d_coarse);
    MatX<T> d_pts_fused =
        MatX<T>::Zero(cache.pts_fused.rows(), params.cfg.d_coarse);
    params.cross_block.backward(cache.cross_img, d_img, &d_img_pre,
                                &d_pts_fused);
    params.cross_block.backward(cache.cross_pts, d_pts, &d_pts_fused,
                                &d_img_pre);
    // Fuse.
    MatX<T> d_pts_cat = params.fuse.backward(cache.pts_cat, d_pts_fused);
    MatX<T> d_pts_stream = d_pts_cat.leftCols(params.cfg.d_coarse);
    // Self blocks (shared weights, two streams).
    MatX<T> d_img_stream = d_img_pre;
    for (int b = static_cast<int>(params.self_blocks.size()) - 1; b >= 0; --b) {
      MatX<T> d_img_in = MatX<T>::Zero(d_img_stream.rows(), params.cfg.d_coarse);
      MatX<T> d_pts_in = MatX<T>::Zero(d_pts_stream.rows(), params.cfg.d_coarse);
      params.self_blocks[b].backward(cache.img_self[b], d_img_stream,
                                     &d_img_in, &d_img_in);
      params.self_blocks[b].backward(cache.pts_self[b], d_pts_stream,
                                     &d_pts_in, &d_pts_in);
      d_img_stream = d_img_in;
      d_pts_stream = d_pts_in;
    }
    d_img_coarse = d_img_stream;  // the 2D encoding is an additive constant
    d_pts_feats = d_pts_stream;
  } else {
    d_img_coarse = d_img;
    d_pts_feats = d_pts;
  }

  if (lifted) {
    params.lift.backward(points.features.cast<T>(), d_pts_feats);
  }
  cnn_backward(params, cnn, d_img_coarse, d_fine_map);
  return loss_c + loss_f;
}

MatcherTrainResult train_matcher(const std::vector<MatcherTrainScene>& scenes,
                                 const MatcherConfig& config,
                                 const MatcherTrainConfig& train) {
  struct PairRef {
    int scene = 0;
    int query = 0;  // item index
    int ref = 0;
  };
  std::vector<std::vector<PairRef>> pools(scenes.size());
  for (size_t s = 0; s < scenes.size(); ++s) {
    const auto& ds = *scenes[s].dataset;
    const auto covis = covisibility_pairs(ds, train.top_covis);
    for (int q : ds.train_ids) {
      for (const auto& n : covis[q]) {
        pools[s].push_back({static_cast<int>(s), q, n.other});
      }
    }
  }
  size_t total_pool = 0;
  for (const auto& p : pools) total_pool += p.size();
  if (total_pool == 0) throw MissingPairs();

  MatcherTrainResult result;
  Rng init_rng(derive_seed(train.seed, 0));
  result.params.init(config, init_rng);
  MatcherParams<float>& params = result.params;
  ParamRegistry<float> reg = params.registry();

  const double lr0 =
      train.lr > 0 ? train.lr : (config.variant == "mini" ? 8e-4 : 4e-4);

  // Rendered reference views are cached per (scene, item).
  std::map<std::pair<int, int>, ScenePointSet> point_cache;
  auto rendered = [&](int scene, int item) -> const ScenePointSet& {
    const auto key = std::make_pair(scene, item);
    auto it = point_cache.find(key);
    if (it == point_cache.end()) {
      const auto& ds = *scenes[scene].dataset;
      const auto& ref = ds.items[item];
      it = point_cache
               .emplace(key,
                        prepare_scene_features(
                            ref.pose, ref.intrinsics, *scenes[scene].field,
                            config, derive_seed(train.seed, 5000 + item),
                            ref.sequence, train.render_n_coarse,
                            train.render_n_fine))
               .first;
    }
    return it->second;
  };

  Adam<float> adam;
  Rng rng(derive_seed(train.seed, 1));
  long step = 0;

  // Per-epoch pair schedule: pairs_per_scene samples per scene (with
  // replacement when the pool is smaller), merged and shuffled.
  long pairs_per_epoch = 0;
  for (const auto& p : pools) {
    pairs_per_epoch += p.empty() ? 0 : train.pairs_per_scene;
  }
  const long steps_per_epoch =
      std::max(1L, pairs_per_epoch / std::max(1, train.batch_pairs));
  const long total_steps = steps_per_epoch * train.epochs;

  std::ofstream log;
  if (!train.log_path.empty()) log.open(train.log_path);

  for (int epoch = 0; epoch < train.epochs; ++epoch) {
    std::vector<PairRef> epoch_pairs;
    for (auto& pool : pools) {
      if (pool.empty()) continue;
      if (train.pairs_per_scene <= static_cast<long>(pool.size())) {
        // Seeded partial Fisher-Yates: distinct pairs.
        for (long i = 0; i < train.pairs_per_scene; ++i) {
          const long j = i + rng.uniform_int(static_cast<int>(pool.size() - i));
          std::swap(pool[i], pool[j]);
          epoch_pairs.push_back(pool[i]);
        }
      } else {
        // Requested more than the pool holds: sample with replacement.
        for (int i = 0; i < train.pairs_per_scene; ++i) {
          epoch_pairs.push_back(
              pool[rng.uniform_int(static_cast<int>(pool.size()))]);
        }
      }
    }
    for (size_t i = epoch_pairs.size(); i > 1; --i) {
      std::swap(epoch_pairs[i - 1],
                epoch_pairs[rng.uniform_int(static_cast<int>(i))]);
    }

    double epoch_loss = 0;
    long used = 0, batch_count = 0;
    reg.zero_grads();
    for (const auto& pr : epoch_pairs) {
      const auto& ds = *scenes[pr.scene].dataset;
      const auto& query = ds.items[pr.query];
      auto [image, K] =
          prepare_query_image(query.image, query.intrinsics, config.image_size);
      const ScenePointSet& pts = rendered(pr.scene, pr.ref);
      const GroundTruthAssociation gt = gt_associations(pts, query.pose, K);
      if (gt.entries.empty()) continue;
      epoch_loss += matcher_loss_and_grad(params, image, pts, gt);
      ++used;
      ++batch_count;
      if (batch_count >= train.batch_pairs) {
        adam.step(reg, cosine_anneal(lr0, step, total_steps), 0.9,
                  train.adam_beta2);
        reg.zero_grads();
        batch_count = 0;
        ++step;
      }
    }
    if (batch_count > 0) {
      adam.step(reg, cosine_anneal(lr0, step, total_steps), 0.9,
                train.adam_beta2);
      reg.zero_grads();
      ++step;
    }
    MatcherEpochLog el;
    el.epoch = epoch;
    el.loss = used > 0 ? epoch_loss / used : 0;
    result.epochs.push_back(el);
    if (log) {
      log << "epoch " << epoch << " loss " << el.loss << "\n";
      log.flush();
    }
  }
  return result;
}

// Explicit instantiations: float for production, double for gradient checks.
#define NERFLOC_INSTANTIATE_MATCHER(T)                                        \
  template struct MatcherParams<T>;                                           \
  template void save_matcher<T>(MatcherParams<T>&, const std::string&);       \
  template MatcherParams<T> load_matcher<T>(const std::string&);              \
  template ImageFeaturePyramid<T> encode_image<T>(const Image&,               \
                                                  const MatcherParams<T>&);   \
  template ScenePointSet prepare_scene_features<T>(                           \
      const CameraPose&, const CameraIntrinsics&, const SceneField<T>&,       \
      const MatcherConfig&, uint64_t, const std::string&, int, int);          \
  template std::pair<Eigen::MatrixXd, Eigen::MatrixXd>                        \
  coarse_attention_forward<T>(const ImageFeaturePyramid<T>&,                  \
                              const ScenePointSet&, const MatcherParams<T>&); \
  template FineMatch fine_refine<T>(const CoarseMatch&,                       \
                                    const ImageFeaturePyramid<T>&,            \
                                    const Eigen::MatrixXd&,                   \
                                    const MatcherParams<T>&);                 \
  template MatchSet match_query<T>(const ImageFeaturePyramid<T>&,             \
                                   const ScenePointSet&, MatcherParams<T>&);  \
  template double matcher_loss_and_grad<T>(MatcherParams<T>&, const Image&,   \
                                           const ScenePointSet&,              \
                                           const GroundTruthAssociation&);

NERFLOC_INSTANTIATE_MATCHER(float)
NERFLOC_INSTANTIATE_MATCHER(double)
#undef NERFLOC_INSTANTIATE_MATCHER

}  // namespace nerfloc
