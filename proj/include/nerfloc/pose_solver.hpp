#pragma once

#include <vector>

#include "nerfloc/geometry.hpp"
#include "nerfloc/matcher.hpp"

namespace nerfloc {

struct DegenerateConfiguration : std::runtime_error {
  explicit DegenerateConfiguration(const std::string& m)
      : std::runtime_error("degenerate configuration: " + m) {}
};
struct TooFewMatches : std::runtime_error {
  TooFewMatches() : std::runtime_error("need at least 4 matches") {}
};
struct NoConsensus : std::runtime_error {
  NoConsensus() : std::runtime_error("no consensus set found") {}
};

struct RansacConfig {
  double reproj_threshold_px = 3.0;
  int max_iterations = 1000;
  double confidence = 0.999;
  int min_inliers = 6;
  uint64_t seed = 0;
  int refit_rounds = 2;  // inlier refit / re-selection passes
};

struct PoseEstimate {
  CameraPose pose;
  std::vector<int> inliers;
  double mean_reproj_error = 0;  // over inliers, px
  int iterations = 0;
};

// Minimal three-point absolute pose (Grunert's distance formulation; quartic
// solved via the companion matrix, candidates polished on the three points).
// Every returned pose reprojects all three correspondences within 1e-6 px.
// Throws DegenerateConfiguration for collinear or coincident points.
std::vector<CameraPose> p3p(const std::array<Correspondence, 3>& corr,
                            const CameraIntrinsics& K);

// P3P hypotheses inside RANSAC, inlier count scoring, adaptive termination
// from the confidence parameter, and a Gauss-Newton refit on the inliers.
// Deterministic given config.seed. Throws TooFewMatches / NoConsensus.
PoseEstimate ransac_pnp(const std::vector<Correspondence>& matches,
                        const CameraIntrinsics& K, const RansacConfig& config);

// Gauss-Newton minimization of total squared reprojection error over the
// given correspondences, starting from `init`. Tangent update: 3 rotation +
// 3 translation. Exposed for reuse by the refinement module.
CameraPose refine_pose_gauss_newton(const CameraPose& init,
                                    const std::vector<Correspondence>& matches,
                                    const CameraIntrinsics& K,
                                    int max_iterations = 10,
                                    double min_step_norm = 1e-10);

double reprojection_error(const CameraPose& pose, const Correspondence& c,
                          const CameraIntrinsics& K);

}  // namespace nerfloc
