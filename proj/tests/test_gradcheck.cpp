#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nerfloc/matcher.hpp"
#include "nerfloc/nerf_training.hpp"
#include "nerfloc/refinement.hpp"
#include "test_util.hpp"

using namespace nerfloc;

namespace {

SceneField<double> micro_field(uint64_t seed) {
  SceneFieldConfig cfg;
  cfg.feature_dim = 8;
  cfg.pe_x_bands = 2;
  cfg.pe_d_bands = 1;
  cfg.appearance_dim = 2;
  cfg.near = 0.2;
  cfg.far = 1.6;
  SceneField<double> f;
  Rng rng(seed);
  f.init(cfg, {"s0", "s1"}, rng);
  return f;
}

}  // namespace

TEST_CASE("photometric loss gradient w.r.t. every field tensor (FD, double)") {
  SceneField<double> field = micro_field(3);
  Rng rr(9);
  std::vector<Ray> rays;
  for (int i = 0; i < 3; ++i) {
    Ray r;
    r.origin = {rr.uniform(0.3, 0.7), rr.uniform(0.3, 0.7), rr.uniform(0.0, 0.2)};
    r.direction =
        Eigen::Vector3d(rr.uniform(-0.3, 0.3), rr.uniform(-0.3, 0.3), 1.0)
            .normalized();
    rays.push_back(r);
  }
  MatX<double> targets = MatX<double>::Random(3, 3).cwiseAbs();
  std::vector<int> app{0, 1, -1};
  TrainBatchOptions opts;
  opts.n_coarse = 6;
  opts.n_fine = 0;  // resampled depths are non-differentiable by convention
  opts.seed = 21;

  auto reg = field.registry();
  reg.zero_grads();
  field_loss_and_grad(&field, rays, targets, {}, app, opts);
  auto loss_fn = [&]() {
    SceneField<double> copy = field;
    return field_loss_and_grad(&copy, rays, targets, {}, app, opts);
  };
  const double worst = testutil::max_grad_rel_error<double>(reg, loss_fn, 1e-6);
  CHECK(worst < 1e-4);
}

TEST_CASE("L_c + L_f gradient w.r.t. every full-matcher tensor (FD, double)") {
  MatcherConfig cfg;
  cfg.variant = "full";
  cfg.image_size = 24;
  cfg.d_coarse = 8;
  cfg.d_fine = 4;
  cfg.cnn_channels = {4, 5, 6, 6};
  cfg.n_self_blocks = 1;
  cfg.n_heads = 2;
  cfg.n_fine_self_blocks = 1;
  cfg.pe3d_bands = 2;
  MatcherParams<double> params;
  Rng rng(5);
  params.init(cfg, rng);

  Image img(24, 24, 3);
  Rng irng(7);
  for (auto& v : img.data) v = static_cast<float>(irng.uniform());

  // Points that project inside the 24x24 frame from the identity pose.
  CameraIntrinsics k;
  k.fx = k.fy = 30;
  k.cx = k.cy = 12;
  k.width = k.height = 24;
  ScenePointSet pts;
  const int n_pts = 5;
  pts.points.resize(n_pts, 3);
  pts.features.resize(n_pts, cfg.d_coarse);
  pts.opacities = Eigen::VectorXd::Ones(n_pts);
  pts.source = FeatureSource::kF3;
  Rng prng(11);
  for (int i = 0; i < n_pts; ++i) {
    pts.points.row(i) << prng.uniform(-0.25, 0.25), prng.uniform(-0.25, 0.25),
        prng.uniform(0.9, 1.5);
    for (int d = 0; d < cfg.d_coarse; ++d) pts.features(i, d) = prng.normal();
  }
  const GroundTruthAssociation gt =
      gt_associations(pts, CameraPose::identity(), k, 8);
  REQUIRE(gt.entries.size() >= 3);

  auto reg = params.registry();
  reg.zero_grads();
  matcher_loss_and_grad(params, img, pts, gt);
  auto loss_fn = [&]() {
    MatcherParams copy = params;
    return matcher_loss_and_grad(copy, img, pts, gt);
  };
  const double worst = testutil::max_grad_rel_error<double>(reg, loss_fn, 1e-6);
  CHECK(worst < 1e-4);
}

TEST_CASE("mini-variant gradient including the coordinate lift (FD, double)") {
  MatcherConfig cfg;
  cfg.variant = "mini";
  cfg.image_size = 24;
  cfg.d_coarse = 8;
  cfg.d_fine = 4;
  cfg.cnn_channels = {4, 5, 6, 6};
  cfg.pe3d_bands = 2;
  cfg.source = FeatureSource::kPe3D;
  MatcherParams<double> params;
  Rng rng(15);
  params.init(cfg, rng);

  Image img(24, 24, 3);
  Rng irng(17);
  for (auto& v : img.data) v = static_cast<float>(irng.uniform());

  CameraIntrinsics k;
  k.fx = k.fy = 30;
  k.cx = k.cy = 12;
  k.width = k.height = 24;
  ScenePointSet pts;
  const int n_pts = 4;
  pts.points.resize(n_pts, 3);
  pts.features.resize(n_pts, positional_encode_dim(3, cfg.pe3d_bands));
  pts.opacities = Eigen::VectorXd::Ones(n_pts);
  pts.source = FeatureSource::kPe3D;
  Rng prng(19);
  for (int i = 0; i < n_pts; ++i) {
    pts.points.row(i) << prng.uniform(-0.25, 0.25), prng.uniform(-0.25, 0.25),
        prng.uniform(0.9, 1.5);
  }
  pts.features = positional_encode<double>(pts.points, cfg.pe3d_bands);
  const GroundTruthAssociation gt =
      gt_associations(pts, CameraPose::identity(), k, 8);
  REQUIRE(!gt.entries.empty());

  auto reg = params.registry();
  reg.zero_grads();
  matcher_loss_and_grad(params, img, pts, gt);
  auto loss_fn = [&]() {
    MatcherParams copy = params;
    return matcher_loss_and_grad(copy, img, pts, gt);
  };
  const double worst = testutil::max_grad_rel_error<double>(reg, loss_fn, 1e-6);
  CHECK(worst < 1e-4);
}

TEST_CASE("photometric loss gradient w.r.t. the pose tangent (FD, double)") {
  SceneField<double> field = micro_field(23);
  // Give the field some density so the loss responds to pose changes.
  field.density_head.b(0) = 1.5;

  Image img(16, 16, 3);
  Rng irng(29);
  for (auto& v : img.data) v = static_cast<float>(irng.uniform());
  CameraIntrinsics k;
  k.fx = k.fy = 20;
  k.cx = k.cy = 8;
  k.width = k.height = 16;
  CameraPose pose;
  pose.translation = {0.4, 0.5, -0.1};

  std::vector<Eigen::Vector2i> pixels;
  Rng prng(31);
  for (int i = 0; i < 6; ++i) {
    pixels.push_back({prng.uniform_int(16), prng.uniform_int(16)});
  }
  PhotometricOptions opts;
  opts.n_coarse = 6;
  opts.n_fine = 0;
  opts.seed = 37;

  Eigen::Vector3d d_omega, d_t;
  photometric_pose_loss_and_grad(field, pose, k, img, pixels, 0, opts, &d_omega,
                                 &d_t);
  const double h = 1e-6;
  double worst = 0;
  for (int axis = 0; axis < 6; ++axis) {
    Eigen::Vector3d omega = Eigen::Vector3d::Zero(), dt = Eigen::Vector3d::Zero();
    (axis < 3 ? omega(axis) : dt(axis - 3)) = h;
    const double lp = photometric_pose_loss_and_grad(
        field, apply_tangent(pose, omega, dt), k, img, pixels, 0, opts, nullptr,
        nullptr);
    (axis < 3 ? omega(axis) : dt(axis - 3)) = -h;
    const double lm = photometric_pose_loss_and_grad(
        field, apply_tangent(pose, omega, dt), k, img, pixels, 0, opts, nullptr,
        nullptr);
    const double fd = (lp - lm) / (2 * h);
    const double g = axis < 3 ? d_omega(axis) : d_t(axis - 3);
    const double rel =
        std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-7});
    worst = std::max(worst, rel);
  }
  CHECK(worst < 1e-4);
}
