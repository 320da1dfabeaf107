#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nerfloc {

struct NonPositiveDepth : std::runtime_error {
  NonPositiveDepth() : std::runtime_error("point has non-positive depth") {}
};
struct OutOfBounds : std::runtime_error {
  explicit OutOfBounds(const std::string& m)
      : std::runtime_error("out of bounds: " + m) {}
};
struct EmptyInput : std::runtime_error {
  explicit EmptyInput(const std::string& m)
      : std::runtime_error("empty input: " + m) {}
};

// Rigid camera-to-world transform: X_world = R * X_cam + t.
// The camera center in world coordinates is t.
struct CameraPose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static CameraPose identity() { return {}; }

  void normalize() { rotation.normalize(); }

  Eigen::Vector3d camera_center() const { return translation; }
  Eigen::Vector3d camera_to_world(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }
  Eigen::Vector3d world_to_camera(const Eigen::Vector3d& p) const {
    return rotation.conjugate() * (p - translation);
  }

  CameraPose inverse() const {
    CameraPose inv;
    inv.rotation = rotation.conjugate();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  // this ∘ other: first apply other, then this.
  CameraPose compose(const CameraPose& other) const {
    CameraPose out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  // Camera forward axis (+z of the camera frame) in world coordinates.
  Eigen::Vector3d forward() const { return rotation * Eigen::Vector3d::UnitZ(); }
};

// Left-multiplicative SE(3) tangent update: rotation exp(omega) applied on the
// left, translation added. Quaternion is renormalized.
CameraPose apply_tangent(const CameraPose& pose,
                         const Eigen::Vector3d& omega,
                         const Eigen::Vector3d& dt);

Eigen::Matrix3d skew(const Eigen::Vector3d& v);

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  bool valid() const {
    return fx > 0 && fy > 0 && cx > 0 && cx < width && cy > 0 && cy < height;
  }

  // Rescale for a resized image.
  CameraIntrinsics scaled(int new_w, int new_h) const {
    CameraIntrinsics k = *this;
    const double sx = static_cast<double>(new_w) / width;
    const double sy = static_cast<double>(new_h) / height;
    k.fx *= sx; k.cx *= sx;
    k.fy *= sy; k.cy *= sy;
    k.width = new_w; k.height = new_h;
    return k;
  }
};

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();  // unit norm
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();

  Eigen::Vector3d point_at(double t) const { return origin + t * direction; }
};

// Pinhole projection of a world point into continuous pixel coordinates.
// Throws NonPositiveDepth when the camera-frame z is <= 1e-12.
Eigen::Vector2d project(const Eigen::Vector3d& point, const CameraPose& pose,
                        const CameraIntrinsics& K);

// Non-throwing variant; returns false for non-positive depth.
bool project_checked(const Eigen::Vector3d& point, const CameraPose& pose,
                     const CameraIntrinsics& K, Eigen::Vector2d* pixel);

// Ray through a continuous pixel coordinate. Throws OutOfBounds when the pixel
// lies outside [0, width] x [0, height].
Ray ray_for_pixel(const Eigen::Vector2d& pixel, const CameraPose& pose,
                  const CameraIntrinsics& K);

struct PoseErrors {
  double translation = 0;   // scene units
  double rotation_deg = 0;  // degrees in [0, 180]
};

PoseErrors pose_errors(const CameraPose& estimate, const CameraPose& truth);

// Fraction of entries with both errors strictly below the thresholds.
double recall(const std::vector<PoseErrors>& errors, double t_thresh,
              double r_thresh);

double median(std::vector<double> values);

}  // namespace nerfloc
