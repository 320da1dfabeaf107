#include "nerfloc/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace nerfloc {

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(),
       v.z(), 0, -v.x(),
      -v.y(), v.x(), 0;
  return m;
}

CameraPose apply_tangent(const CameraPose& pose, const Eigen::Vector3d& omega,
                         const Eigen::Vector3d& dt) {
  CameraPose out = pose;
  const double angle = omega.norm();
  Eigen::Quaterniond dq = Eigen::Quaterniond::Identity();
  if (angle > 0) {
    dq = Eigen::Quaterniond(Eigen::AngleAxisd(angle, omega / angle));
  }
  out.rotation = (dq * pose.rotation).normalized();
  out.translation = pose.translation + dt;
  return out;
}

Eigen::Vector2d project(const Eigen::Vector3d& point, const CameraPose& pose,
                        const CameraIntrinsics& K) {
  const Eigen::Vector3d pc = pose.world_to_camera(point);
  if (pc.z() <= 1e-12) throw NonPositiveDepth();
  return {K.fx * pc.x() / pc.z() + K.cx, K.fy * pc.y() / pc.z() + K.cy};
}

bool project_checked(const Eigen::Vector3d& point, const CameraPose& pose,
                     const CameraIntrinsics& K, Eigen::Vector2d* pixel) {
  const Eigen::Vector3d pc = pose.world_to_camera(point);
  if (pc.z() <= 1e-12) return false;
  *pixel = {K.fx * pc.x() / pc.z() + K.cx, K.fy * pc.y() / pc.z() + K.cy};
  return true;
}

Ray ray_for_pixel(const Eigen::Vector2d& pixel, const CameraPose& pose,
                  const CameraIntrinsics& K) {
  if (pixel.x() < 0 || pixel.x() > K.width || pixel.y() < 0 ||
      pixel.y() > K.height) {
    throw OutOfBounds("pixel (" + std::to_string(pixel.x()) + ", " +
                      std::to_string(pixel.y()) + ")");
  }
  Ray ray;
  const Eigen::Vector3d dir_cam((pixel.x() - K.cx) / K.fx,
                                (pixel.y() - K.cy) / K.fy, 1.0);
  ray.origin = pose.camera_center();
  ray.direction = (pose.rotation * dir_cam).normalized();
  ray.pixel = pixel;
  return ray;
}

PoseErrors pose_errors(const CameraPose& estimate, const CameraPose& truth) {
  PoseErrors e;
  e.translation = (estimate.camera_center() - truth.camera_center()).norm();
  const Eigen::Matrix3d r_rel = estimate.rotation.toRotationMatrix().transpose() *
                                truth.rotation.toRotationMatrix();
  // Clamp guards acos against round-off near 0 and 180 degrees.
  const double c = std::clamp((r_rel.trace() - 1.0) / 2.0, -1.0, 1.0);
  e.rotation_deg = std::acos(c) * 180.0 / M_PI;
  return e;
}

double recall(const std::vector<PoseErrors>& errors, double t_thresh,
              double r_thresh) {
  if (errors.empty()) throw EmptyInput("recall over zero queries");
  int hits = 0;
  for (const auto& e : errors) {
    if (e.translation < t_thresh && e.rotation_deg < r_thresh) ++hits;
  }
  return static_cast<double>(hits) / errors.size();
}

double median(std::vector<double> values) {
  if (values.empty()) throw EmptyInput("median of zero values");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace nerfloc
