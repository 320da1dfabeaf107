#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <functional>

#include "nerfloc/geometry.hpp"
#include "nerfloc/nn.hpp"
#include "nerfloc/rng.hpp"

namespace nerfloc::testutil {

inline CameraPose random_pose(Rng& rng, double max_offset = 2.0) {
  Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  CameraPose pose;
  pose.rotation = Eigen::Quaterniond(q(0), q(1), q(2), q(3)).normalized();
  pose.translation = Eigen::Vector3d(rng.uniform(-max_offset, max_offset),
                                     rng.uniform(-max_offset, max_offset),
                                     rng.uniform(-max_offset, max_offset));
  return pose;
}

inline CameraIntrinsics default_intrinsics(int size = 96, double focal = 70) {
  CameraIntrinsics k;
  k.width = k.height = size;
  k.fx = k.fy = focal;
  k.cx = k.cy = size / 2.0;
  return k;
}

// Central-difference gradient check over every entry of a registry.
// `loss` must be a deterministic function of the registered parameters.
// Analytic gradients are snapshotted up front because evaluating the loss may
// overwrite them. Returns the worst relative error.
// Differences below `abs_floor` sit inside central-difference round-off for
// an O(1) loss at double precision and are treated as matching.
template <typename T>
double max_grad_rel_error(const ParamRegistry<T>& reg,
                          const std::function<double()>& loss, double h,
                          double denom_floor = 1e-7, double abs_floor = 1e-9) {
  std::vector<std::vector<double>> analytic;
  for (const auto& e : reg.entries()) {
    std::vector<double> g(e.size());
    for (Eigen::Index i = 0; i < e.size(); ++i) g[i] = e.grad[i];
    analytic.push_back(std::move(g));
  }
  double worst = 0;
  for (size_t k = 0; k < reg.entries().size(); ++k) {
    const auto& e = reg.entries()[k];
    for (Eigen::Index i = 0; i < e.size(); ++i) {
      const T saved = e.data[i];
      e.data[i] = saved + static_cast<T>(h);
      const double lp = loss();
      e.data[i] = saved - static_cast<T>(h);
      const double lm = loss();
      e.data[i] = saved;
      const double fd = (lp - lm) / (2 * h);
      const double g = analytic[k][i];
      if (std::abs(g - fd) < abs_floor) continue;
      const double rel =
          std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), denom_floor});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace nerfloc::testutil
