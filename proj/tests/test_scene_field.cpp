#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "nerfloc/scene_field.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace nerfloc;

namespace {

SceneFieldConfig tiny_config() {
  SceneFieldConfig cfg;
  cfg.feature_dim = 16;
  cfg.pe_x_bands = 4;
  cfg.pe_d_bands = 2;
  cfg.appearance_dim = 4;
  cfg.near = 0.1;
  cfg.far = 2.0;
  return cfg;
}

SceneField<double> tiny_field(uint64_t seed = 1) {
  SceneField<double> f;
  Rng rng(seed);
  f.init(tiny_config(), {"seq0", "seq1"}, rng);
  // Nudge weights away from zero-init softness so densities vary.
  return f;
}

}  // namespace

TEST_CASE("positional encoding at zero") {
  MatX<double> x = MatX<double>::Zero(1, 3);
  const MatX<double> pe = positional_encode(x, 5);
  CHECK(pe.cols() == 3 * (1 + 2 * 5));
  for (int b = 0; b < 5; ++b) {
    for (int k = 0; k < 3; ++k) {
      CHECK(pe(0, 3 + 2 * b * 3 + k) == doctest::Approx(0.0));      // sin
      CHECK(pe(0, 3 + (2 * b + 1) * 3 + k) == doctest::Approx(1.0));  // cos
    }
  }
}

TEST_CASE("positional encoding dimension formula") {
  MatX<double> x = MatX<double>::Random(4, 3);
  CHECK(positional_encode(x, 10).cols() == 63);
  CHECK(positional_encode_dim(3, 10) == 63);
}

TEST_CASE("positional encoding periodicity: x and x+2 share frequency terms") {
  MatX<double> x = MatX<double>::Random(6, 3);
  MatX<double> shifted = x.array() + 2.0;
  const MatX<double> a = positional_encode(x, 6);
  const MatX<double> b = positional_encode(shifted, 6);
  CHECK((a.rightCols(a.cols() - 3) - b.rightCols(b.cols() - 3)).cwiseAbs().maxCoeff()
        < 1e-9);
  CHECK((a.leftCols(3) - b.leftCols(3)).cwiseAbs().maxCoeff() ==
        doctest::Approx(2.0));
}

TEST_CASE("encoder feature tap is consistent with the full forward pass") {
  SceneField<double> field = tiny_field();
  MatX<double> pts = MatX<double>::Random(5, 3);
  const MatX<double> f7 = field.encoder_features(pts, 7);
  const VecX<double> sigma_via_head =
      softplus<double>(field.density_head.forward(f7)).col(0);
  FieldCache<double> cache;
  const VecX<double> sigma = field.density(pts, &cache);
  CHECK((sigma - sigma_via_head).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("identical points produce identical features") {
  SceneField<double> field = tiny_field();
  MatX<double> pts(2, 3);
  pts.row(0) << 0.3, -0.2, 0.9;
  pts.row(1) << 0.3, -0.2, 0.9;
  const MatX<double> f = field.encoder_features(pts, 3);
  CHECK((f.row(0) - f.row(1)).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("encoder layer bounds") {
  SceneField<double> field = tiny_field();
  MatX<double> pts = MatX<double>::Random(2, 3);
  CHECK_THROWS_AS(field.encoder_features(pts, 0), LayerOutOfRange);
  CHECK_THROWS_AS(field.encoder_features(pts, 8), LayerOutOfRange);
}

TEST_CASE("composite weights: zero density") {
  VecX<double> sigma = VecX<double>::Zero(8);
  VecX<double> delta = VecX<double>::Constant(8, 0.25);
  const VecX<double> w = composite_weights(sigma, delta);
  CHECK(w.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("composite weights: opaque first sample occludes the rest") {
  VecX<double> sigma(3);
  sigma << 1e8, 5.0, 5.0;
  VecX<double> delta = VecX<double>::Constant(3, 0.5);
  const VecX<double> w = composite_weights(sigma, delta);
  CHECK(w(0) == doctest::Approx(1.0));
  CHECK(w(1) < 1e-12);
  CHECK(w(2) < 1e-12);
}

TEST_CASE("composite weights: ln2 case") {
  VecX<double> sigma(2), delta(2);
  delta << 1.0, 1.0;
  sigma << std::log(2.0), std::log(2.0);
  const VecX<double> w = composite_weights(sigma, delta);
  CHECK(w(0) == doctest::Approx(0.5));
  CHECK(w(1) == doctest::Approx(0.25));
}

TEST_CASE("composite weights input validation") {
  VecX<double> neg(2), delta(2);
  neg << -1.0, 0.0;
  delta << 1.0, 1.0;
  CHECK_THROWS_AS(composite_weights(neg, delta), NegativeDensity);
  VecX<double> sigma(2), bad_delta(2);
  sigma << 1.0, 1.0;
  bad_delta << 0.0, 1.0;
  CHECK_THROWS_AS(composite_weights(sigma, bad_delta), NonPositiveDelta);
}

TEST_CASE("composite weights match the brute-force oracle on random batches") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + rng.uniform_int(63);
    Eigen::VectorXd sigma(n), delta(n);
    for (int i = 0; i < n; ++i) {
      sigma(i) = rng.uniform(0, 8.0);
      delta(i) = rng.uniform(1e-3, 0.3);
    }
    const Eigen::VectorXd w = composite_weights<double>(sigma, delta);
    const Eigen::VectorXd w_ref =
        oracles::composite_weights_bruteforce(sigma, delta);
    CHECK(w.minCoeff() >= 0.0);
    CHECK(w.maxCoeff() <= 1.0);
    CHECK(w.sum() <= 1.0 + 1e-6);
    for (int i = 0; i < n; ++i) {
      const double rel =
          std::abs(w(i) - w_ref(i)) / std::max(1e-9, std::abs(w_ref(i)));
      CHECK(rel < 1e-6);
    }
  }
}

TEST_CASE("Eq.2 compositing is linear in the per-sample features") {
  Rng rng(5);
  const int n = 16;
  Eigen::VectorXd sigma(n), delta(n);
  for (int i = 0; i < n; ++i) {
    sigma(i) = rng.uniform(0, 4.0);
    delta(i) = rng.uniform(0.01, 0.2);
  }
  const Eigen::VectorXd w = composite_weights<double>(sigma, delta);
  Eigen::MatrixXd f = Eigen::MatrixXd::Random(n, 8);
  Eigen::MatrixXd g = Eigen::MatrixXd::Random(n, 8);
  const double a = 0.7, b = -1.3;
  const Eigen::VectorXd lhs = (a * f + b * g).transpose() * w;
  const Eigen::VectorXd rhs = a * (f.transpose() * w) + b * (g.transpose() * w);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("single opaque sample pins the surface point and feature") {
  // Composite over one sample with huge optical depth: weight -> 1 and the
  // surface outputs equal that sample's values.
  VecX<double> sigma(1), delta(1);
  sigma << 1e9;
  delta << 1.0;
  const VecX<double> w = composite_weights(sigma, delta);
  CHECK(w(0) == doctest::Approx(1.0));
  Ray ray;
  ray.origin = {0.1, 0.2, 0.3};
  ray.direction = Eigen::Vector3d(0.2, -0.4, 0.8).normalized();
  const double t_star = 1.7;
  const Eigen::Vector3d surface = w(0) * ray.point_at(t_star);
  CHECK((surface - ray.point_at(t_star)).norm() < 1e-9);
}

TEST_CASE("render_ray on a fresh field reports bounded opacity and zero-density flags") {
  SceneField<double> field = tiny_field(3);
  // Force densities to zero within double precision (the capped last delta
  // amplifies anything larger).
  field.density_head.W.setZero();
  field.density_head.b(0) = -80.0;
  Ray ray;
  ray.origin = {0.5, 0.5, 0.05};
  ray.direction = Eigen::Vector3d::UnitZ();
  RenderOptions opts;
  opts.n_coarse = 16;
  opts.n_fine = 8;
  opts.feature_layer = 3;
  opts.seed = 4;
  const RenderedSurface s = render_ray(field, ray, opts);
  CHECK(s.opacity < 1e-9);
  CHECK(s.color.norm() < 1e-9);
  CHECK(s.surface_point.norm() < 1e-9);
}

TEST_CASE("render_ray is deterministic given a fixed seed") {
  SceneField<double> field = tiny_field(9);
  Ray ray;
  ray.origin = {0.5, 0.4, 0.1};
  ray.direction = Eigen::Vector3d(0.1, 0.2, 1.0).normalized();
  RenderOptions opts;
  opts.n_coarse = 24;
  opts.n_fine = 12;
  opts.seed = 77;
  const RenderedSurface a = render_ray(field, ray, opts);
  const RenderedSurface b = render_ray(field, ray, opts);
  CHECK((a.color - b.color).norm() == doctest::Approx(0.0));
  CHECK((a.surface_point - b.surface_point).norm() == doctest::Approx(0.0));
  CHECK(a.opacity == doctest::Approx(b.opacity));
  CHECK((a.feature - b.feature).norm() == doctest::Approx(0.0));
}

TEST_CASE("render_view grid sizes") {
  SceneField<double> field = tiny_field(5);
  RenderOptions opts;
  opts.n_coarse = 4;
  opts.n_fine = 0;
  opts.want_feature = false;
  SUBCASE("96x96 stride 8 yields 144 surfaces") {
    const CameraIntrinsics k = testutil::default_intrinsics(96, 70);
    const SurfaceGrid g = render_view(field, CameraPose::identity(), k, 8, opts);
    CHECK(g.rows == 12);
    CHECK(g.cols == 12);
    CHECK(g.surfaces.size() == 144);
  }
  SUBCASE("480x480 stride 8 yields 3600 surfaces") {
    const CameraIntrinsics k = testutil::default_intrinsics(480, 400);
    const SurfaceGrid g = render_view(field, CameraPose::identity(), k, 8, opts);
    CHECK(g.surfaces.size() == 3600);
  }
  SUBCASE("stride must divide the image size") {
    const CameraIntrinsics k = testutil::default_intrinsics(96, 70);
    CHECK_THROWS_AS(render_view(field, CameraPose::identity(), k, 7, opts),
                    StrideMismatch);
  }
}

TEST_CASE("constant color scales with opacity under compositing") {
  Rng rng(12);
  const int n = 32;
  Eigen::VectorXd sigma(n), delta(n);
  for (int i = 0; i < n; ++i) {
    sigma(i) = rng.uniform(0, 2.0);
    delta(i) = rng.uniform(0.01, 0.1);
  }
  const Eigen::VectorXd w = composite_weights<double>(sigma, delta);
  const double alpha = w.sum();
  const Eigen::Vector3d c(0.2, 0.6, 0.9);
  Eigen::Vector3d composited = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) composited += w(i) * c;
  CHECK((composited - alpha * c).norm() < 1e-12);
}

TEST_CASE("checkpoint round-trip preserves parameters") {
  SceneField<double> field = tiny_field(21);
  const auto dir = std::filesystem::temp_directory_path() / "nerfloc_field_ckpt";
  std::filesystem::remove_all(dir);
  save_field(field, dir.string());
  SceneField<double> loaded = load_field<double>(dir.string());
  CHECK(loaded.cfg.feature_dim == field.cfg.feature_dim);
  REQUIRE(loaded.sequence_ids == field.sequence_ids);
  MatX<double> pts = MatX<double>::Random(4, 3);
  const MatX<double> fa = field.encoder_features(pts, 3);
  const MatX<double> fb = loaded.encoder_features(pts, 3);
  // The blob stores float32, so expect float-level agreement.
  CHECK((fa - fb).cwiseAbs().maxCoeff() < 1e-5);
  std::filesystem::remove_all(dir);
}

TEST_CASE("importance resampling concentrates samples where weights are high") {
  Rng rng(31);
  Eigen::VectorXd t(8);
  t << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(8);
  w(4) = 1.0;  // mass around t in [0.4, 0.6]
  const Eigen::VectorXd fine = importance_resample(t, w, 64, rng);
  int inside = 0;
  for (int i = 0; i < fine.size(); ++i) {
    CHECK(fine(i) >= 0.1);
    CHECK(fine(i) <= 0.8);
    if (fine(i) >= 0.35 && fine(i) <= 0.65) ++inside;
  }
  CHECK(inside > 48);
  for (int i = 1; i < fine.size(); ++i) CHECK(fine(i) >= fine(i - 1));
}
