#pragma once

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nerfloc/image.hpp"
#include "nerfloc/nn.hpp"
#include "nerfloc/scene_data.hpp"
#include "nerfloc/scene_field.hpp"

namespace nerfloc {

struct BadShape : std::runtime_error {
  explicit BadShape(const std::string& m)
      : std::runtime_error("bad shape: " + m) {}
};
struct LowOpacityScene : std::runtime_error {
  LowOpacityScene()
      : std::runtime_error("fewer than 8 points survive the opacity filter") {}
};
struct ZeroVector : std::runtime_error {
  ZeroVector() : std::runtime_error("zero-norm feature vector") {}
};
struct NoGroundTruth : std::runtime_error {
  NoGroundTruth() : std::runtime_error("empty ground-truth association") {}
};
struct NoMatches : std::runtime_error {
  NoMatches() : std::runtime_error("no fine matches") {}
};
struct MissingPairs : std::runtime_error {
  MissingPairs() : std::runtime_error("no covisibility pairs available") {}
};

// 3D feature source for matching: composited raw points, their positional
// encoding, or one of the seven encoder layers.
enum class FeatureSource {
  kPt3D,
  kPe3D,
  kF1, kF2, kF3, kF4, kF5, kF6, kF7,
};
std::string to_string(FeatureSource s);
FeatureSource feature_source_from_string(const std::string& s);
inline bool is_layer_source(FeatureSource s) {
  return s >= FeatureSource::kF1 && s <= FeatureSource::kF7;
}
inline int source_layer(FeatureSource s) {
  return static_cast<int>(s) - static_cast<int>(FeatureSource::kF1) + 1;
}

struct MatcherConfig {
  std::string variant = "mini";  // "mini" | "full"
  int image_size = 480;          // inputs are resized to this square
  int d_coarse = 256;            // must equal the field feature_dim
  int d_fine = 128;
  std::vector<int> cnn_channels = {32, 64, 128, 192};  // 4 conv stages
  double tau = 0.1;              // dual-softmax temperature
  double theta = 0.2;            // mutual-match score threshold
  int n_self_blocks = 4;
  int n_heads = 8;
  int n_fine_self_blocks = 1;
  int fine_window = 5;
  int pe3d_bands = 10;           // encoding concatenated before the fuse
  FeatureSource source = FeatureSource::kF3;
  double opacity_threshold = 0.5;

  nlohmann::json to_json() const;
  static MatcherConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct ImageFeaturePyramid {
  int coarse_h = 0, coarse_w = 0;
  MatX<T> coarse;  // (coarse_h*coarse_w) x d_coarse
  int fine_h = 0, fine_w = 0;
  MatX<T> fine;    // (fine_h*fine_w) x d_fine
};

struct ScenePointSet {
  Eigen::MatrixXd points;    // N x 3
  Eigen::MatrixXd features;  // N x dim(source); raw, lifted by the matcher
  Eigen::VectorXd opacities; // all >= threshold
  FeatureSource source = FeatureSource::kF3;
};

struct ScoreMatrix {
  Eigen::MatrixXd S;  // N_m x N_s, entries in [0, 1]
  double tau = 0.1;
};

struct CoarseMatch {
  int patch = 0;  // image patch index i (row-major over the coarse grid)
  int point = 0;  // scene point index j
  double score = 0;
};

struct FineMatch {
  int point = 0;
  Eigen::Vector2d pixel;  // full-resolution subpixel position
  double sigma2 = 0;      // heatmap total variance (fine-grid units)
};

struct MatchSet {
  std::vector<CoarseMatch> coarse;
  std::vector<FineMatch> fine;
  std::string stage;  // "coarse" | "fine"
  int grid_w = 0;     // coarse grid width, for patch-center pixel recovery
};

struct GroundTruthAssociation {
  // Sparse binary M_gt as (patch, point) entries; at most one per point.
  std::vector<std::pair<int, int>> entries;
  Eigen::MatrixXd fine_targets;  // N_s x 2 full-res projections
  std::vector<uint8_t> in_bounds;
  int grid_h = 0, grid_w = 0;
};

// ---------------------------------------------------------------------------
// Matcher parameters. Production code instantiates float; gradient checks
// run the double instantiation.
// ---------------------------------------------------------------------------

template <typename T>
struct MatcherParams {
  MatcherConfig cfg;

  // CNN encoder: stem + three stride-2 stages; fine head taps the 1/2
  // resolution stage, coarse head the 1/8 stage.
  Conv2d<T> conv0, conv1, conv2, conv3;
  Conv2d<T> head_coarse, head_fine;  // 1x1
  Linear<T> lift;  // Pt3D/Pe3D only: source dim -> d_coarse

  // Full variant.
  std::vector<TransformerBlock<T>> self_blocks;  // shared across domains
  Linear<T> fuse;  // (d_coarse + pe3d dim) -> d_coarse
  TransformerBlock<T> cross_block;               // shared directionally
  Linear<T> fine_lift;                           // d_coarse -> d_fine
  std::vector<TransformerBlock<T>> fine_self_blocks;

  void init(const MatcherConfig& config, Rng& rng);
  ParamRegistry<T> registry();
  int lift_input_dim() const;
};

template <typename T>
void save_matcher(MatcherParams<T>& params, const std::string& dir);
template <typename T>
MatcherParams<T> load_matcher(const std::string& dir);

// ---------------------------------------------------------------------------
// Operations.
// ---------------------------------------------------------------------------

// CNN feature pyramid. Image must be square with side divisible by 8 (resize
// first via prepare_query_image). Throws BadShape.
template <typename T>
ImageFeaturePyramid<T> encode_image(const Image& image,
                                    const MatcherParams<T>& params);

// Resizes to cfg.image_size and rescales the intrinsics accordingly.
std::pair<Image, CameraIntrinsics> prepare_query_image(
    const Image& image, const CameraIntrinsics& K, int image_size);

// Renders the stride-8 grid at the reference pose and packages surviving
// points with their source features. Throws LowOpacityScene.
template <typename T>
ScenePointSet prepare_scene_features(const CameraPose& pose,
                                     const CameraIntrinsics& K,
                                     const SceneField<T>& field,
                                     const MatcherConfig& cfg,
                                     uint64_t seed = 0,
                                     const std::string& appearance_id = {},
                                     int n_coarse = 0, int n_fine = 0);

// Dual softmax over pairwise cosine similarities. Throws ZeroVector.
ScoreMatrix dual_softmax(const Eigen::MatrixXd& img_features,
                         const Eigen::MatrixXd& point_features, double tau);

// Mutual row/column argmax above the threshold; ties resolved to the lowest
// index. Point indices appear at most once.
std::vector<CoarseMatch> mutual_matches(const ScoreMatrix& S, double theta);

// Ground-truth coarse association + fine targets by projecting the points
// with the ground-truth query calibration.
GroundTruthAssociation gt_associations(const ScenePointSet& points,
                                       const CameraPose& query_pose,
                                       const CameraIntrinsics& query_K,
                                       int patch = 8);

// L_c = -mean over GT entries of log S. Throws NoGroundTruth.
double coarse_loss(const ScoreMatrix& S, const GroundTruthAssociation& gt);

// L_f = mean over matches of ||x_pred - x_gt||_2 / max(sigma2, 1e-6),
// computed at fine-grid resolution. Throws NoMatches.
double fine_loss(const std::vector<FineMatch>& predictions,
                 const Eigen::MatrixXd& fine_targets_fullres);

// Attention stage of the full variant: 2D-encoded image features and lifted
// point features through shared self-attention, 3D-encoding concat + fuse,
// and one bidirectional cross-attention block. Returns refined
// (image, point) features, both N x d_coarse.
template <typename T>
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> coarse_attention_forward(
    const ImageFeaturePyramid<T>& pyramid, const ScenePointSet& points,
    const MatcherParams<T>& params);

// Subpixel refinement of one coarse match: softmax heatmap over the w x w
// fine-feature window around the patch, expectation + total variance.
// `refined_point_features` are the cross-attended point features.
template <typename T>
FineMatch fine_refine(const CoarseMatch& match,
                      const ImageFeaturePyramid<T>& pyramid,
                      const Eigen::MatrixXd& refined_point_features,
                      const MatcherParams<T>& params);

// Full-pipeline match (mini: dual softmax only; full: attention + fine).
template <typename T>
MatchSet match_query(const ImageFeaturePyramid<T>& pyramid,
                     const ScenePointSet& points, MatcherParams<T>& params);

// 2D-3D correspondences ready for PnP: coarse matches use patch centers,
// fine matches their subpixel refinement when present.
struct Correspondence {
  Eigen::Vector2d pixel;
  Eigen::Vector3d point;
  double score = 0;
};
std::vector<Correspondence> to_correspondences(const MatchSet& matches,
                                               const ScenePointSet& points,
                                               int patch = 8);

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct MatcherTrainConfig {
  int epochs = 30;
  double lr = 0;  // 0 -> 8e-4 for mini, 4e-4 for full (cosine annealed)
  int batch_pairs = 16;
  int pairs_per_scene = 10000;  // sampled with replacement past the pool size
  int top_covis = 20;
  double adam_beta2 = 0.999;
  uint64_t seed = 0;
  int render_n_coarse = 0, render_n_fine = 0;  // 0 -> field defaults (128)
  std::string log_path;
};

struct MatcherTrainScene {
  const SceneDataset* dataset = nullptr;
  const SceneField<float>* field = nullptr;
  std::string name = "scene";
};

struct MatcherEpochLog {
  int epoch = 0;
  double loss = 0;  // L_c (mini) or L_c + L_f (full), epoch mean
};

struct MatcherTrainResult {
  MatcherParams<float> params;
  std::vector<MatcherEpochLog> epochs;
};

// Trains the matcher on covisibility pairs; "per-scene" is the single-scene
// case, "multi-scene" balances sampled pairs across the given scenes.
// Throws MissingPairs when no scene yields covisible pairs.
MatcherTrainResult train_matcher(const std::vector<MatcherTrainScene>& scenes,
                                 const MatcherConfig& config,
                                 const MatcherTrainConfig& train);

// Loss + gradient of one training pair (exposed for gradient checks).
// Returns L_c for mini, L_c + L_f for full; accumulates into params' grads.
template <typename T>
double matcher_loss_and_grad(MatcherParams<T>& params, const Image& query_image,
                             const ScenePointSet& points,
                             const GroundTruthAssociation& gt);

}  // namespace nerfloc
