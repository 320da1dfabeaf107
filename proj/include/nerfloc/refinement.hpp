#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nerfloc/matcher.hpp"
#include "nerfloc/pose_solver.hpp"
#include "nerfloc/scene_field.hpp"

namespace nerfloc {

struct RefineConfig {
  std::string mode = "iterative";  // "iterative" | "optimize-then-match"
  int rounds = 1;
  int opt_steps_per_round = 10;
  double lr_full = 1e-5;
  double lr_mini = 1e-3;
  double lr = 0;  // 0 -> pick by matcher variant
  double lr_decay = 0.9;  // exponential, per optimization step
  int rays_for_photometric = 1024;
};

struct RefinementRound {
  CameraPose pose;
  std::optional<PoseErrors> errors;        // vs ground truth when available
  std::vector<double> photometric_losses;  // per optimization step
  bool solver_failed = false;
};

struct RefinementTrace {
  std::vector<RefinementRound> rounds;  // rounds[0] = initial estimate
};

struct PhotometricOptions {
  int n_coarse = 32;
  int n_fine = 32;
  bool jitter = true;
  uint64_t seed = 0;
};

// Masked photometric MSE of the rendered pixels against the query image and
// its gradient on the left SE(3) tangent of the camera-to-world pose. The
// sampled depths are constants of the backward pass; field parameter values
// are never modified. Pass null gradients to evaluate the loss only.
template <typename T>
double photometric_pose_loss_and_grad(SceneField<T>& field,
                                      const CameraPose& pose,
                                      const CameraIntrinsics& K,
                                      const Image& query,
                                      const std::vector<Eigen::Vector2i>& pixels,
                                      int appearance_idx,
                                      const PhotometricOptions& opts,
                                      Eigen::Vector3d* d_omega,
                                      Eigen::Vector3d* d_t);

// Everything a refinement pass needs about the query and the scene.
struct RefineContext {
  SceneField<float>* field = nullptr;
  MatcherParams<float>* matcher = nullptr;
  Image query;            // already resized to the matcher input
  CameraIntrinsics K;     // matching the resized query
  std::string appearance_id;
  const PixelMask* mask = nullptr;       // optional query mask
  const CameraPose* ground_truth = nullptr;  // fills trace errors when set
  RansacConfig ransac;
  int render_n_coarse = 32;
  int render_n_fine = 32;
  uint64_t seed = 0;
};

// Re-render at the current estimate, re-match, re-solve; a failed round keeps
// the previous estimate and is marked in the trace.
CameraPose refine_iterative(const RefineContext& ctx, const CameraPose& initial,
                            int rounds, RefinementTrace* trace);

// Gradient descent (Adam on the tangent) of the photometric loss through the
// frozen field, from the initial pose.
CameraPose refine_photometric(const RefineContext& ctx,
                              const CameraPose& initial, int steps, double lr0,
                              double lr_decay, int rays_per_step,
                              std::vector<double>* losses);

// Mode dispatch; optimize-then-match ends each round with one matching +
// PnP pass at the optimized reference pose.
CameraPose refine(const RefineContext& ctx, const CameraPose& initial,
                  const RefineConfig& config, RefinementTrace* trace);

}  // namespace nerfloc
