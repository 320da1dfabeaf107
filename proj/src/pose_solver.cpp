#include "nerfloc/pose_solver.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>

#include "nerfloc/rng.hpp"

namespace nerfloc {

double reprojection_error(const CameraPose& pose, const Correspondence& c,
                          const CameraIntrinsics& K) {
  Eigen::Vector2d px;
  if (!project_checked(c.point, pose, K, &px)) {
    return std::numeric_limits<double>::infinity();
  }
  return (px - c.pixel).norm();
}

CameraPose refine_pose_gauss_newton(const CameraPose& init,
                                    const std::vector<Correspondence>& matches,
                                    const CameraIntrinsics& K,
                                    int max_iterations, double min_step_norm) {
  // Work in the camera-from-world frame; left SE(3) perturbation on the
  // camera-frame point gives J_theta = -[x]_x and J_t = I.
  Eigen::Matrix3d r_wc = init.rotation.toRotationMatrix().transpose();
  Eigen::Vector3d t_wc = -(r_wc * init.translation);

  for (int it = 0; it < max_iterations; ++it) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& m : matches) {
      const Eigen::Vector3d xc = r_wc * m.point + t_wc;
      if (xc.z() <= 1e-9) continue;
      const double iz = 1.0 / xc.z();
      const Eigen::Vector2d px(K.fx * xc.x() * iz + K.cx,
                               K.fy * xc.y() * iz + K.cy);
      const Eigen::Vector2d resid = px - m.pixel;
      Eigen::Matrix<double, 2, 3> dpi;
      dpi << K.fx * iz, 0, -K.fx * xc.x() * iz * iz,
             0, K.fy * iz, -K.fy * xc.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> jac;
      jac.leftCols<3>() = -dpi * skew(xc);  // rotation tangent
      jac.rightCols<3>() = dpi;             // translation tangent
      h.noalias() += jac.transpose() * jac;
      g.noalias() += jac.transpose() * resid;
    }
    // Tiny Levenberg damping keeps the solve well-posed near degeneracy.
    h.diagonal().array() += 1e-12 * (1.0 + h.diagonal().maxCoeff());
    const Eigen::Matrix<double, 6, 1> delta = h.ldlt().solve(-g);
    if (!delta.allFinite()) break;
    const Eigen::Vector3d omega = delta.head<3>();
    const Eigen::Vector3d dt = delta.tail<3>();
    const double angle = omega.norm();
    Eigen::Matrix3d dr = Eigen::Matrix3d::Identity();
    if (angle > 0) dr = Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
    r_wc = dr * r_wc;
    t_wc = dr * t_wc + dt;
    if (delta.norm() < min_step_norm) break;
  }
  CameraPose out;
  out.rotation = Eigen::Quaterniond(r_wc.transpose()).normalized();
  out.translation = -(r_wc.transpose() * t_wc);
  return out;
}

namespace {

// Ascending-coefficient polynomial helpers for the Grunert elimination.
using Poly = std::vector<double>;

Poly poly_mul(const Poly& a, const Poly& b) {
  Poly out(a.size() + b.size() - 1, 0.0);
  for (size_t i = 0; i < a.size(); ++i) {
    for (size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  }
  return out;
}

void poly_axpy(Poly* acc, const Poly& p, double scale) {
  if (acc->size() < p.size()) acc->resize(p.size(), 0.0);
  for (size_t i = 0; i < p.size(); ++i) (*acc)[i] += scale * p[i];
}

std::vector<double> real_roots(Poly p) {
  double max_c = 0;
  for (double c : p) max_c = std::max(max_c, std::abs(c));
  if (max_c == 0) return {};
  while (p.size() > 1 && std::abs(p.back()) < 1e-12 * max_c) p.pop_back();
  const int deg = static_cast<int>(p.size()) - 1;
  if (deg < 1) return {};
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(deg, deg);
  for (int i = 0; i < deg; ++i) {
    companion(0, i) = -p[deg - 1 - i] / p[deg];
    if (i + 1 < deg) companion(i + 1, i) = 1.0;
  }
  const Eigen::EigenSolver<Eigen::MatrixXd> solver(companion);
  std::vector<double> roots;
  for (int i = 0; i < deg; ++i) {
    const auto z = solver.eigenvalues()(i);
    if (std::abs(z.imag()) < 1e-8 * std::max(1.0, std::abs(z.real()))) {
      roots.push_back(z.real());
    }
  }
  return roots;
}

// Rigid alignment Q_i = R P_i + t (world -> camera) for three points.
bool align_three(const std::array<Eigen::Vector3d, 3>& p,
                 const std::array<Eigen::Vector3d, 3>& q, Eigen::Matrix3d* r,
                 Eigen::Vector3d* t) {
  const Eigen::Vector3d pc = (p[0] + p[1] + p[2]) / 3.0;
  const Eigen::Vector3d qc = (q[0] + q[1] + q[2]) / 3.0;
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (int i = 0; i < 3; ++i) h += (p[i] - pc) * (q[i] - qc).transpose();
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d rot = svd.matrixV() * svd.matrixU().transpose();
  if (rot.determinant() < 0) {
    Eigen::Matrix3d v = svd.matrixV();
    v.col(2) *= -1;
    rot = v * svd.matrixU().transpose();
  }
  if (!rot.allFinite()) return false;
  *r = rot;
  *t = qc - rot * pc;
  return true;
}

}  // namespace

std::vector<CameraPose> p3p(const std::array<Correspondence, 3>& corr,
                            const CameraIntrinsics& K) {
  const Eigen::Vector3d p1 = corr[0].point, p2 = corr[1].point,
                        p3 = corr[2].point;
  const double scale = std::max({(p2 - p1).norm(), (p3 - p1).norm(),
                                 (p3 - p2).norm()});
  if (std::min({(p2 - p1).norm(), (p3 - p1).norm(), (p3 - p2).norm()}) <
      1e-12 * std::max(1.0, scale)) {
    throw DegenerateConfiguration("coincident 3D points");
  }
  if ((p2 - p1).cross(p3 - p1).norm() <
      1e-12 * std::max(1.0, scale * scale)) {
    throw DegenerateConfiguration("collinear 3D points");
  }

  std::array<Eigen::Vector3d, 3> f;
  for (int i = 0; i < 3; ++i) {
    f[i] = Eigen::Vector3d((corr[i].pixel.x() - K.cx) / K.fx,
                           (corr[i].pixel.y() - K.cy) / K.fy, 1.0)
               .normalized();
  }
  const double a = (p2 - p3).norm();
  const double b = (p1 - p3).norm();
  const double c = (p1 - p2).norm();
  const double cos_alpha = f[1].dot(f[2]);
  const double cos_beta = f[0].dot(f[2]);
  const double cos_gamma = f[0].dot(f[1]);
  const double k1 = (c * c) / (b * b);
  const double k2 = (a * a) / (b * b);

  // s2 = u s1, s3 = v s1; eliminating u gives a quartic in v.
  const Poly q_poly{1.0, -2.0 * cos_beta, 1.0};
  const Poly n_poly{k1 - k2 - 1.0, -2.0 * cos_beta * (k1 - k2), 1.0 + k1 - k2};
  const Poly d_poly{-2.0 * cos_gamma, 2.0 * cos_alpha};
  const Poly dd = poly_mul(d_poly, d_poly);
  Poly quartic = poly_mul(n_poly, n_poly);
  poly_axpy(&quartic, poly_mul(n_poly, d_poly), -2.0 * cos_gamma);
  poly_axpy(&quartic, dd, 1.0);
  poly_axpy(&quartic, poly_mul(q_poly, dd), -k1);

  std::vector<CameraPose> out;
  for (double v : real_roots(quartic)) {
    if (!(v > 0)) continue;
    const double qv = v * v - 2.0 * cos_beta * v + 1.0;
    if (qv <= 0) continue;
    const double s1 = b / std::sqrt(qv);
    const double denom = 2.0 * (v * cos_alpha - cos_gamma);
    if (std::abs(denom) < 1e-14) continue;
    const double u =
        ((1.0 + k1 - k2) * v * v - 2.0 * cos_beta * (k1 - k2) * v +
         (k1 - k2 - 1.0)) /
        denom;
    if (!(u > 0)) continue;
    const double s2 = u * s1;
    const double s3 = v * s1;
    std::array<Eigen::Vector3d, 3> q{s1 * f[0], s2 * f[1], s3 * f[2]};
    Eigen::Matrix3d r_wc;
    Eigen::Vector3d t_wc;
    if (!align_three({p1, p2, p3}, q, &r_wc, &t_wc)) continue;
    CameraPose pose;
    pose.rotation = Eigen::Quaterniond(r_wc.transpose()).normalized();
    pose.translation = -(r_wc.transpose() * t_wc);
    // Polish the root on the minimal set, then gate on exact reprojection.
    pose = refine_pose_gauss_newton(
        pose, {corr.begin(), corr.end()}, K, 10, 1e-14);
    double worst = 0;
    for (const auto& m : corr) {
      worst = std::max(worst, reprojection_error(pose, m, K));
    }
    if (worst > 1e-6) continue;
    bool duplicate = false;
    for (const auto& existing : out) {
      const PoseErrors diff = pose_errors(existing, pose);
      if (diff.translation < 1e-9 * std::max(1.0, scale) &&
          diff.rotation_deg < 1e-7) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) out.push_back(pose);
  }
  return out;
}

PoseEstimate ransac_pnp(const std::vector<Correspondence>& matches,
                        const CameraIntrinsics& K, const RansacConfig& config) {
  const int n = static_cast<int>(matches.size());
  if (n < 4) throw TooFewMatches();

  Rng rng(config.seed);
  std::vector<int> indices(n);
  for (int i = 0; i < n; ++i) indices[i] = i;

  auto count_inliers = [&](const CameraPose& pose, std::vector<int>* keep) {
    int count = 0;
    for (int i = 0; i < n; ++i) {
      if (reprojection_error(pose, matches[i], K) < config.reproj_threshold_px) {
        ++count;
        if (keep) keep->push_back(i);
      }
    }
    return count;
  };

  CameraPose best_pose;
  int best_count = 0;
  long needed = config.max_iterations;
  int it = 0;
  for (; it < config.max_iterations && it < needed; ++it) {
    // Draw three distinct indices from a shuffled table.
    for (int k = 0; k < 3; ++k) {
      const int j = k + rng.uniform_int(n - k);
      std::swap(indices[k], indices[j]);
    }
    std::array<Correspondence, 3> sample{matches[indices[0]],
                                         matches[indices[1]],
                                         matches[indices[2]]};
    std::vector<CameraPose> candidates;
    try {
      candidates = p3p(sample, K);
    } catch (const DegenerateConfiguration&) {
      continue;
    }
    for (const auto& pose : candidates) {
      const int count = count_inliers(pose, nullptr);
      if (count > best_count) {
        best_count = count;
        best_pose = pose;
        const double ratio = static_cast<double>(count) / n;
        const double denom = std::log(1.0 - std::min(0.999999, ratio * ratio * ratio));
        if (denom < 0) {
          needed = static_cast<long>(
              std::ceil(std::log(1.0 - config.confidence) / denom));
        }
      }
    }
  }
  if (best_count < std::max(3, config.min_inliers)) throw NoConsensus();

  // Refit on inliers, then re-select, a configurable number of rounds.
  CameraPose pose = best_pose;
  std::vector<int> inliers;
  count_inliers(pose, &inliers);
  for (int round = 0; round < config.refit_rounds; ++round) {
    std::vector<Correspondence> subset;
    for (int i : inliers) subset.push_back(matches[i]);
    pose = refine_pose_gauss_newton(pose, subset, K);
    inliers.clear();
    count_inliers(pose, &inliers);
    if (static_cast<int>(inliers.size()) < config.min_inliers) break;
  }
  if (static_cast<int>(inliers.size()) < config.min_inliers) throw NoConsensus();

  PoseEstimate est;
  est.pose = pose;
  est.inliers = inliers;
  est.iterations = it;
  double sum = 0;
  for (int i : inliers) sum += reprojection_error(pose, matches[i], K);
  est.mean_reproj_error = sum / inliers.size();
  return est;
}

}  // namespace nerfloc
