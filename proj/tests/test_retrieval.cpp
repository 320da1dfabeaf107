#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nerfloc/retrieval.hpp"
#include "test_util.hpp"

using namespace nerfloc;

namespace {

MatcherParams<float> tiny_encoder(uint64_t seed = 3) {
  MatcherConfig cfg;
  cfg.variant = "mini";
  cfg.image_size = 48;
  cfg.d_coarse = 12;
  cfg.d_fine = 6;
  cfg.cnn_channels = {6, 8, 10, 10};
  MatcherParams<float> p;
  Rng rng(seed);
  p.init(cfg, rng);
  return p;
}

Image noisy_copy(const Image& src, double sigma, uint64_t seed) {
  Image out = src;
  Rng rng(seed);
  for (auto& v : out.data) {
    v = static_cast<float>(std::clamp(v + sigma * rng.normal(), 0.0, 1.0));
  }
  return out;
}

ScenePointSet grid_points(int n, double offset, uint64_t seed) {
  ScenePointSet set;
  Rng rng(seed);
  set.points.resize(n, 3);
  set.features.resize(n, 4);
  set.opacities = Eigen::VectorXd::Ones(n);
  for (int i = 0; i < n; ++i) {
    set.points.row(i) << offset + 0.1 * i, 0.5, 0.5;
    for (int d = 0; d < 4; ++d) set.features(i, d) = rng.normal();
  }
  return set;
}

}  // namespace

TEST_CASE("describe returns unit-norm descriptors") {
  MatcherParams<float> enc = tiny_encoder();
  Rng rng(1);
  Image img(48, 48, 3);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  const GlobalDescriptor d = describe(img, enc);
  CHECK(std::abs(d.vector.norm() - 1.0) < 1e-6);
  const GlobalDescriptor d2 = describe(img, enc);
  CHECK(d.vector.dot(d2.vector) == doctest::Approx(1.0));
}

TEST_CASE("describe separates a noisy copy from a different image") {
  MatcherParams<float> enc = tiny_encoder();
  SyntheticSceneSpec spec;
  spec.seed = 4;
  spec.n_train_views = 4;
  spec.n_test_views = 1;
  spec.image_size = 48;
  const SceneDataset data = generate_synthetic(spec);
  const Image& a = data.items[0].image;
  const Image& b = data.items[2].image;  // opposite side of the orbit
  const GlobalDescriptor da = describe(a, enc);
  const GlobalDescriptor da_noisy = describe(noisy_copy(a, 0.02, 9), enc);
  const GlobalDescriptor db = describe(b, enc);
  CHECK(da.vector.dot(da_noisy.vector) > da.vector.dot(db.vector));
}

TEST_CASE("seeded projection to a smaller descriptor dim") {
  MatcherParams<float> enc = tiny_encoder();
  RetrievalConfig cfg;
  cfg.descriptor_dim = 6;
  Rng rng(2);
  Image img(48, 48, 3);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  const GlobalDescriptor d = describe(img, enc, cfg);
  CHECK(d.vector.size() == 6);
  CHECK(std::abs(d.vector.norm() - 1.0) < 1e-6);
}

TEST_CASE("topk ranking") {
  ReferenceDatabase db;
  Rng rng(7);
  for (int i = 0; i < 8; ++i) {
    ReferenceEntry e;
    e.descriptor.vector = Eigen::VectorXd::NullaryExpr(6, [&](Eigen::Index) {
      return rng.normal();
    });
    e.descriptor.vector.normalize();
    e.descriptor.image_id = "img" + std::to_string(i);
    db.entries.push_back(e);
  }
  GlobalDescriptor q;
  q.vector = db.entries[5].descriptor.vector;

  SUBCASE("an exact database entry is its own top-1") {
    CHECK(topk(q, db, 1).front() == 5);
  }
  SUBCASE("k = |db| gives a full monotone ranking") {
    const auto order = topk(q, db, 8);
    CHECK(order.size() == 8);
    for (size_t i = 1; i < order.size(); ++i) {
      CHECK(q.vector.dot(db.entries[order[i - 1]].descriptor.vector) >=
            q.vector.dot(db.entries[order[i]].descriptor.vector));
    }
  }
  SUBCASE("top-1 equals the brute-force argmax") {
    Rng qr(13);
    for (int trial = 0; trial < 20; ++trial) {
      GlobalDescriptor probe;
      probe.vector = Eigen::VectorXd::NullaryExpr(6, [&](Eigen::Index) {
        return qr.normal();
      });
      probe.vector.normalize();
      int best = 0;
      for (int i = 1; i < 8; ++i) {
        if (probe.vector.dot(db.entries[i].descriptor.vector) >
            probe.vector.dot(db.entries[best].descriptor.vector)) {
          best = i;
        }
      }
      CHECK(topk(probe, db, 1).front() == best);
    }
  }
  SUBCASE("k out of range") {
    CHECK_THROWS_AS(topk(q, db, 9), KTooLarge);
    CHECK_THROWS_AS(topk(q, db, 0), KTooLarge);
  }
}

TEST_CASE("merge_matches rules") {
  Correspondence a{{10, 20}, {0.1, 0.2, 0.3}, 0.3};
  Correspondence a_better{{10, 20}, {0.1, 0.2, 0.3}, 0.6};
  Correspondence b{{30, 40}, {0.4, 0.5, 0.6}, 0.8};
  SUBCASE("single reference is the identity") {
    const auto merged = merge_matches({{a, b}});
    CHECK(merged.size() == 2);
  }
  SUBCASE("disjoint sets concatenate") {
    const auto merged = merge_matches({{a}, {b}});
    CHECK(merged.size() == 2);
  }
  SUBCASE("duplicates keep the best score") {
    const auto merged = merge_matches({{a}, {a_better}, {b}});
    REQUIRE(merged.size() == 2);
    for (const auto& c : merged) {
      if ((c.pixel - a.pixel).norm() < 1e-9) {
        CHECK(c.score == doctest::Approx(0.6));
      }
    }
  }
  SUBCASE("no match lost when present in exactly one set") {
    const auto merged = merge_matches({{a}, {}, {b}});
    CHECK(merged.size() == 2);
  }
  SUBCASE("all empty") {
    CHECK_THROWS_AS(merge_matches({{}, {}}), AllEmpty);
  }
}

TEST_CASE("merge_3d covisibility filter and cap") {
  const double diameter = std::sqrt(3.0);
  SUBCASE("identical sets survive at covis_min 2") {
    const ScenePointSet s = grid_points(10, 0.0, 3);
    const ScenePointSet merged = merge_3d({s, s}, 2, diameter);
    CHECK(merged.points.rows() == 10);
    CHECK((merged.features - s.features).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("disjoint sets are filtered out entirely") {
    const ScenePointSet s1 = grid_points(10, 0.0, 3);
    const ScenePointSet s2 = grid_points(10, 50.0, 4);
    CHECK_THROWS_AS(merge_3d({s1, s2}, 2, diameter), EmptyAfterFilter);
  }
  SUBCASE("features average within a cluster") {
    ScenePointSet s1 = grid_points(4, 0.0, 5);
    ScenePointSet s2 = s1;
    s2.features.setConstant(1.0);
    const ScenePointSet merged = merge_3d({s1, s2}, 2, diameter);
    REQUIRE(merged.points.rows() == 4);
    const Eigen::MatrixXd expected = (s1.features.array() + 1.0) / 2.0;
    // Cluster order follows the voxel map; compare as multisets via sums.
    CHECK(merged.features.sum() == doctest::Approx(expected.sum()));
  }
  SUBCASE("cap subsamples to the limit") {
    ScenePointSet big;
    const int n = 5000;
    big.points.resize(n, 3);
    Rng rng(6);
    for (int i = 0; i < n; ++i) {
      big.points.row(i) << rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1);
    }
    big.features = Eigen::MatrixXd::Ones(n, 2);
    big.opacities = Eigen::VectorXd::Ones(n);
    const ScenePointSet merged = merge_3d({big, big}, 2, diameter, 3600, 9);
    CHECK(merged.points.rows() == 3600);
  }
  SUBCASE("output size never exceeds the cap") {
    const ScenePointSet s = grid_points(30, 0.0, 8);
    const ScenePointSet merged = merge_3d({s, s}, 2, diameter, 3600, 1);
    CHECK(merged.points.rows() <= 3600);
  }
}

TEST_CASE("real database holds one entry per train view") {
  SyntheticSceneSpec spec;
  spec.seed = 12;
  spec.n_train_views = 5;
  spec.n_test_views = 2;
  spec.image_size = 48;
  const SceneDataset data = generate_synthetic(spec);
  SceneFieldConfig fc;
  fc.feature_dim = 12;
  fc.pe_x_bands = 3;
  fc.pe_d_bands = 1;
  fc.appearance_dim = 2;
  fc.near = data.near;
  fc.far = data.far;
  SceneField<float> field;
  Rng rng(3);
  field.init(fc, {"seq0", "seq1"}, rng);
  MatcherParams<float> enc = tiny_encoder();

  const ReferenceDatabase real = build_database(data, field, enc, "real");
  CHECK(real.entries.size() == 5);
  RetrievalConfig rc;
  rc.render_n_coarse = 8;
  rc.render_n_fine = 0;
  const ReferenceDatabase synth =
      build_database(data, field, enc, "synthesized", rc);
  CHECK(synth.entries.size() == 5);  // database size equals the pose list
  for (const auto& e : synth.entries) {
    CHECK(e.source == "synthesized");
    CHECK(std::abs(e.descriptor.vector.norm() - 1.0) < 1e-6);
  }
}
