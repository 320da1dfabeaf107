#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nerfloc/nerf_training.hpp"
#include "test_util.hpp"

using namespace nerfloc;

TEST_CASE("photometric loss basics") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(5, 3);
  SUBCASE("zero for identical inputs") {
    CHECK(photometric_loss(a, a, {}) == doctest::Approx(0.0));
  }
  SUBCASE("single channel offset of 0.5 on one unmasked ray") {
    Eigen::MatrixXd rendered = a;
    rendered(2, 1) += 0.5;
    std::vector<uint8_t> mask(5, 1);
    mask[2] = 0;
    CHECK(photometric_loss(rendered, a, mask) == doctest::Approx(0.25 / 3.0));
  }
  SUBCASE("all masked") {
    CHECK_THROWS_AS(photometric_loss(a, a, std::vector<uint8_t>(5, 1)), AllMasked);
  }
}

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

std::vector<Ray> micro_rays(int n, Rng& rng) {
  std::vector<Ray> rays;
  for (int i = 0; i < n; ++i) {
    Ray r;
    r.origin = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.0, 0.2)};
    r.direction =
        Eigen::Vector3d(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0)
            .normalized();
    rays.push_back(r);
  }
  return rays;
}

}  // namespace

TEST_CASE("masked rays contribute bit-identical zero gradient") {
  SceneField<double> field = micro_field(4);
  Rng rng(17);
  const std::vector<Ray> rays = micro_rays(4, rng);
  MatX<double> targets = MatX<double>::Random(4, 3).cwiseAbs();
  std::vector<uint8_t> mask{0, 1, 0, 0};
  std::vector<int> app{0, 0, 1, 1};
  TrainBatchOptions opts;
  opts.n_coarse = 8;
  opts.n_fine = 4;
  opts.seed = 55;

  auto reg = field.registry();
  reg.zero_grads();
  field_loss_and_grad(&field, rays, targets, mask, app, opts);
  std::vector<double> grads1;
  for (const auto& e : reg.entries()) {
    for (Eigen::Index i = 0; i < e.size(); ++i) grads1.push_back(e.grad[i]);
  }

  targets(1, 0) += 0.37;  // perturb the masked ray's target
  reg.zero_grads();
  field_loss_and_grad(&field, rays, targets, mask, app, opts);
  size_t k = 0;
  for (const auto& e : reg.entries()) {
    for (Eigen::Index i = 0; i < e.size(); ++i) {
      CHECK(e.grad[i] == grads1[k]);  // bit-identical
      ++k;
    }
  }
}

TEST_CASE("train_scene with zero epochs returns the seeded initialization") {
  SyntheticSceneSpec spec;
  spec.n_train_views = 4;
  spec.n_test_views = 1;
  spec.image_size = 32;
  spec.n_objects = 3;
  const SceneDataset data = generate_synthetic(spec);

  SceneFieldConfig fc;
  fc.feature_dim = 16;
  fc.pe_x_bands = 4;
  fc.pe_d_bands = 2;
  NerfTrainConfig tc;
  tc.epochs = 0;
  tc.seed = 123;
  tc.n_coarse = 8;
  tc.n_fine = 0;
  tc.psnr_sample_rays = 16;
  tc.final_psnr_views = 1;
  const NerfTrainResult result = train_scene(data, fc, tc);

  SceneField<float> fresh;
  Rng rng(derive_seed(123, 0));
  SceneFieldConfig fc2 = fc;
  fc2.near = data.near;
  fc2.far = data.far;
  std::vector<std::string> seqs;
  for (int id : data.train_ids) {
    const auto& s = data.items[id].sequence;
    if (std::find(seqs.begin(), seqs.end(), s) == seqs.end()) seqs.push_back(s);
  }
  fresh.init(fc2, seqs, rng);
  MatX<float> pts = MatX<float>::Random(6, 3);
  CHECK((result.field.encoder_features(pts, 7) - fresh.encoder_features(pts, 7))
            .cwiseAbs()
            .maxCoeff() == 0.0f);
  CHECK(result.epochs.empty());
}

TEST_CASE("train_scene requires a train split") {
  SceneDataset empty;
  CHECK_THROWS_AS(train_scene(empty, {}, {}), EmptyDataset);
}

TEST_CASE("loss decreases over epochs on a small noiseless scene") {
  SyntheticSceneSpec spec;
  spec.n_train_views = 6;
  spec.n_test_views = 1;
  spec.image_size = 32;
  spec.n_objects = 4;
  spec.seed = 5;
  const SceneDataset data = generate_synthetic(spec);

  SceneFieldConfig fc;
  fc.feature_dim = 32;
  fc.pe_x_bands = 6;
  fc.pe_d_bands = 2;
  fc.appearance_dim = 4;
  NerfTrainConfig tc;
  tc.epochs = 6;
  tc.rays_per_batch = 1024;
  tc.rays_per_epoch = 4096;
  tc.n_coarse = 16;
  tc.n_fine = 16;
  tc.lr = 2e-3;
  tc.seed = 11;
  tc.psnr_sample_rays = 512;
  tc.final_psnr_views = 1;
  const NerfTrainResult result = train_scene(data, fc, tc);
  REQUIRE(result.epochs.size() == 6);
  int upticks = 0;
  for (size_t i = 1; i < result.epochs.size(); ++i) {
    if (result.epochs[i].loss > result.epochs[i - 1].loss) ++upticks;
  }
  // Allow brief transients but demand overall descent.
  CHECK(upticks <= 1);
  CHECK(result.epochs.back().loss < result.epochs.front().loss);
  CHECK(result.epochs.back().psnr > result.epochs.front().psnr);
}
