#pragma once

#include <Eigen/Core>
#include <vector>

// Test-only reference implementations, kept deliberately independent of the
// library code paths they check.
namespace nerfloc::oracles {

// Transmittance weights via the explicit product loop.
inline Eigen::VectorXd composite_weights_bruteforce(const Eigen::VectorXd& sigma,
                                                    const Eigen::VectorXd& delta) {
  const Eigen::Index n = sigma.size();
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double transmittance = 1.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      transmittance *= std::exp(-sigma(j) * delta(j));
    }
    w(i) = transmittance * (1.0 - std::exp(-sigma(i) * delta(i)));
  }
  return w;
}

// Two-pass dual softmax: explicit row softmax times column softmax.
inline Eigen::MatrixXd dual_softmax_bruteforce(const Eigen::MatrixXd& cosine,
                                               double tau) {
  const Eigen::MatrixXd z = cosine / tau;
  Eigen::MatrixXd rows(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double denom = 0;
    for (Eigen::Index j = 0; j < z.cols(); ++j) denom += std::exp(z(i, j));
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      rows(i, j) = std::exp(z(i, j)) / denom;
  }
  Eigen::MatrixXd cols(z.rows(), z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    double denom = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) denom += std::exp(z(i, j));
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      cols(i, j) = std::exp(z(i, j)) / denom;
  }
  return rows.cwiseProduct(cols);
}

}  // namespace nerfloc::oracles
