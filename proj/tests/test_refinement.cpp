#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "nerfloc/nerf_training.hpp"
#include "nerfloc/refinement.hpp"
#include "test_util.hpp"

using namespace nerfloc;

namespace {

// Field whose output color is pose-independent: constant density plus the
// capped last delta pin total opacity at exactly 1, and zeroed color weights
// make every sample the same color.
SceneField<float> constant_field() {
  SceneFieldConfig cfg;
  cfg.feature_dim = 8;
  cfg.pe_x_bands = 2;
  cfg.pe_d_bands = 1;
  cfg.appearance_dim = 2;
  cfg.near = 0.2;
  cfg.far = 1.5;
  SceneField<float> f;
  Rng rng(5);
  f.init(cfg, {"s"}, rng);
  f.density_head.W.setZero();
  f.density_head.b(0) = 2.0;
  f.color_out.W.setZero();
  f.color_out.b << 0.3f, -0.1f, 0.8f;
  return f;
}

Image constant_query(int size, const SceneField<float>& field) {
  // The color the constant field composites on any ray.
  Ray ray;
  ray.origin = {0.5, 0.5, -0.2};
  ray.direction = Eigen::Vector3d::UnitZ();
  RenderOptions opts;
  opts.n_coarse = 8;
  opts.n_fine = 0;
  opts.want_feature = false;
  opts.seed = 1;
  const RenderedSurface s = render_ray(field, ray, opts);
  Image img(size, size, 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<float>(s.color(c));
    }
  }
  return img;
}

}  // namespace

TEST_CASE("refine_iterative with zero rounds returns the initial pose") {
  SceneField<float> field = constant_field();
  RefineContext ctx;
  ctx.field = &field;
  ctx.matcher = nullptr;
  ctx.K = testutil::default_intrinsics(16, 20);
  ctx.query = constant_query(16, field);
  Rng rng(3);
  const CameraPose initial = testutil::random_pose(rng, 0.3);
  RefinementTrace trace;
  const CameraPose out = refine_iterative(ctx, initial, 0, &trace);
  CHECK((out.translation - initial.translation).norm() == 0.0);
  CHECK(trace.rounds.size() == 1);
}

TEST_CASE("a failed matching round keeps the previous estimate") {
  SceneField<float> field = constant_field();
  // No matcher at all: every round must fail and pass the pose through.
  MatcherConfig cfg;
  cfg.variant = "mini";
  cfg.image_size = 16;
  cfg.d_coarse = 8;
  cfg.d_fine = 4;
  cfg.cnn_channels = {4, 4, 4, 4};
  MatcherParams<float> matcher;
  Rng mrng(7);
  matcher.init(cfg, mrng);
  // Zero densities guarantee LowOpacityScene during re-rendering.
  field.density_head.b(0) = -80.0;

  RefineContext ctx;
  ctx.field = &field;
  ctx.matcher = &matcher;
  ctx.K = testutil::default_intrinsics(16, 20);
  ctx.query = constant_query(16, field);
  ctx.render_n_coarse = 8;
  ctx.render_n_fine = 0;
  CameraPose initial;
  initial.translation = {0.5, 0.5, -0.2};
  RefinementTrace trace;
  const CameraPose out = refine_iterative(ctx, initial, 2, &trace);
  CHECK((out.translation - initial.translation).norm() == 0.0);
  REQUIRE(trace.rounds.size() == 3);
  CHECK(trace.rounds[1].solver_failed);
  CHECK(trace.rounds[2].solver_failed);
}

TEST_CASE("photometric refinement is stationary at an exact optimum") {
  SceneField<float> field = constant_field();
  RefineContext ctx;
  ctx.field = &field;
  ctx.K = testutil::default_intrinsics(16, 20);
  ctx.query = constant_query(16, field);
  ctx.render_n_coarse = 8;
  ctx.render_n_fine = 4;
  CameraPose initial;
  initial.translation = {0.5, 0.5, -0.2};

  // Gradient is exactly zero, so Adam must not move the pose.
  std::vector<Eigen::Vector2i> pixels{{3, 4}, {8, 8}, {12, 2}};
  PhotometricOptions opts;
  opts.n_coarse = 8;
  opts.n_fine = 4;
  opts.seed = 11;
  Eigen::Vector3d d_omega, d_t;
  const double loss = photometric_pose_loss_and_grad(
      field, initial, ctx.K, ctx.query, pixels, -1, opts, &d_omega, &d_t);
  CHECK(loss < 1e-10);
  CHECK(d_omega.norm() < 1e-6);
  CHECK(d_t.norm() < 1e-6);

  std::vector<double> losses;
  const CameraPose refined =
      refine_photometric(ctx, initial, 10, 1e-3, 0.9, 64, &losses);
  CHECK((refined.translation - initial.translation).norm() < 1e-6);
  const PoseErrors diff = pose_errors(refined, initial);
  CHECK(diff.rotation_deg < 1e-6);
  CHECK(std::abs(refined.rotation.norm() - 1.0) < 1e-9);
}

TEST_CASE("field parameters are bit-identical across photometric refinement") {
  SceneField<float> field = constant_field();
  auto reg = field.registry();
  std::vector<float> before;
  for (const auto& e : reg.entries()) {
    for (Eigen::Index i = 0; i < e.size(); ++i) before.push_back(e.data[i]);
  }
  RefineContext ctx;
  ctx.field = &field;
  ctx.K = testutil::default_intrinsics(16, 20);
  Image query(16, 16, 3, 0.7f);  // deliberately wrong target
  ctx.query = query;
  ctx.render_n_coarse = 8;
  ctx.render_n_fine = 4;
  CameraPose initial;
  initial.translation = {0.5, 0.5, -0.2};
  refine_photometric(ctx, initial, 5, 1e-3, 0.9, 32, nullptr);
  size_t k = 0;
  for (const auto& e : reg.entries()) {
    for (Eigen::Index i = 0; i < e.size(); ++i) {
      CHECK(e.data[i] == before[k]);
      ++k;
    }
  }
}

TEST_CASE("photometric refinement reduces the loss on a trained micro scene") {
  SyntheticSceneSpec spec;
  spec.seed = 19;
  spec.n_train_views = 6;
  spec.n_test_views = 1;
  spec.image_size = 32;
  spec.n_objects = 4;
  const SceneDataset data = generate_synthetic(spec);

  SceneFieldConfig fc;
  fc.feature_dim = 32;
  fc.pe_x_bands = 5;
  fc.pe_d_bands = 2;
  fc.appearance_dim = 4;
  fc.color_hidden = 32;
  NerfTrainConfig tc;
  tc.epochs = 8;
  tc.rays_per_batch = 64;
  tc.rays_per_epoch = 6144;
  tc.n_coarse = 16;
  tc.n_fine = 16;
  tc.lr = 5e-3;
  tc.adam_beta2 = 0.99;
  tc.seed = 2;
  tc.psnr_sample_rays = 512;
  tc.final_psnr_views = 1;
  NerfTrainResult trained = train_scene(data, fc, tc);

  const auto& query = data.items[data.test_ids[0]];
  RefineContext ctx;
  ctx.field = &trained.field;
  ctx.K = query.intrinsics;
  ctx.query = query.image;
  ctx.appearance_id = query.sequence;
  ctx.render_n_coarse = 16;
  ctx.render_n_fine = 16;
  ctx.seed = 5;

  // Perturb by about 2 degrees and 2% of the scene diameter.
  Rng rng(23);
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  const CameraPose perturbed = apply_tangent(
      query.pose, axis * (2.0 * M_PI / 180.0),
      0.02 * data.diameter * Eigen::Vector3d(rng.normal(), rng.normal(),
                                             rng.normal()).normalized());

  // Fixed evaluation pixel grid, loss before vs after.
  std::vector<Eigen::Vector2i> eval_pixels;
  for (int y = 2; y < 32; y += 4) {
    for (int x = 2; x < 32; x += 4) eval_pixels.push_back({x, y});
  }
  PhotometricOptions eval_opts;
  eval_opts.n_coarse = 16;
  eval_opts.n_fine = 16;
  eval_opts.jitter = false;
  eval_opts.seed = 77;
  const int app = trained.field.appearance_index(query.sequence);
  const double loss_before = photometric_pose_loss_and_grad(
      trained.field, perturbed, ctx.K, ctx.query, eval_pixels, app, eval_opts,
      nullptr, nullptr);
  const CameraPose refined =
      refine_photometric(ctx, perturbed, 40, 2e-3, 0.95, 128, nullptr);
  const double loss_after = photometric_pose_loss_and_grad(
      trained.field, refined, ctx.K, ctx.query, eval_pixels, app, eval_opts,
      nullptr, nullptr);
  CHECK(loss_after < 0.6 * loss_before);
  const PoseErrors before_err = pose_errors(perturbed, query.pose);
  const PoseErrors after_err = pose_errors(refined, query.pose);
  CHECK(after_err.translation < before_err.translation);
}
