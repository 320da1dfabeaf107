#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>

#include "nerfloc/scene_data.hpp"
#include "test_util.hpp"

using namespace nerfloc;

namespace {

SyntheticSceneSpec small_spec() {
  SyntheticSceneSpec spec;
  spec.seed = 99;
  spec.n_train_views = 6;
  spec.n_test_views = 3;
  spec.image_size = 48;
  spec.n_objects = 5;
  return spec;
}

// Independent slab test against the unit-cube room (exit face).
double room_exit_distance(const Ray& ray) {
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double inv = 1.0 / ray.direction(a);
    double lo = (0.0 - ray.origin(a)) * inv;
    double hi = (1.0 - ray.origin(a)) * inv;
    if (inv < 0) std::swap(lo, hi);
    t1 = std::min(t1, hi);
  }
  return t1;
}

}  // namespace

TEST_CASE("same seed produces bit-identical datasets") {
  const SceneDataset a = generate_synthetic(small_spec());
  const SceneDataset b = generate_synthetic(small_spec());
  REQUIRE(a.items.size() == b.items.size());
  for (size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].id == b.items[i].id);
    CHECK(a.items[i].image.data == b.items[i].image.data);
    CHECK(a.items[i].pose.translation == b.items[i].pose.translation);
    CHECK(a.items[i].pose.rotation.coeffs() == b.items[i].pose.rotation.coeffs());
  }
}

TEST_CASE("analytic depth matches an independent room intersection") {
  SyntheticSceneSpec spec = small_spec();
  spec.n_objects = 0;  // walls only
  const SceneDataset data = generate_synthetic(spec);
  REQUIRE(data.depths.size() == data.items.size());
  for (size_t i = 0; i < data.items.size(); ++i) {
    const auto& item = data.items[i];
    const int px = item.intrinsics.width / 2;  // depth is exact at pixel centers
    const Ray ray =
        ray_for_pixel({px + 0.5, px + 0.5}, item.pose, item.intrinsics);
    const double expected = room_exit_distance(ray);
    const double got = data.depths[i].at(px, px, 0);
    CHECK(got == doctest::Approx(expected).epsilon(1e-5));
  }
}

TEST_CASE("desk-scale generation stays under the time budget") {
  SyntheticSceneSpec spec;
  spec.n_train_views = 20;
  spec.n_test_views = 10;
  spec.image_size = 96;
  const auto start = std::chrono::steady_clock::now();
  const SceneDataset data = generate_synthetic(spec);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  CHECK(data.items.size() == 30);
  CHECK(secs < 10.0);
}

TEST_CASE("save / load round-trip") {
  const SceneDataset data = generate_synthetic(small_spec());
  const auto root = std::filesystem::temp_directory_path() / "nerfloc_ds_rt";
  std::filesystem::remove_all(root);
  save_dataset(data, root.string());
  const SceneDataset loaded = load_dataset(root.string());
  REQUIRE(loaded.items.size() == data.items.size());
  for (size_t i = 0; i < data.items.size(); ++i) {
    const auto& x = data.items[i];
    const auto& y = loaded.items[data.index_of(x.id) == static_cast<int>(i)
                                     ? loaded.index_of(x.id)
                                     : loaded.index_of(x.id)];
    CHECK(x.image.data == y.image.data);
    CHECK((x.pose.translation - y.pose.translation).norm() == 0.0);
    CHECK((x.pose.rotation.coeffs() - y.pose.rotation.coeffs()).norm() == 0.0);
    CHECK(x.intrinsics.fx == y.intrinsics.fx);
    CHECK(x.sequence == y.sequence);
  }
  CHECK(loaded.near == data.near);
  CHECK(loaded.far == data.far);
  CHECK(loaded.diameter == data.diameter);
  CHECK(loaded.train_ids.size() == data.train_ids.size());
  CHECK(loaded.test_ids.size() == data.test_ids.size());
  std::filesystem::remove_all(root);
}

TEST_CASE("load errors") {
  const auto root = std::filesystem::temp_directory_path() / "nerfloc_ds_err";
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root);
  SUBCASE("missing poses.txt") {
    CHECK_THROWS_AS(load_dataset(root.string()), MissingPoses);
  }
  SUBCASE("pose line with too few fields") {
    std::ofstream f(root / "poses.txt");
    f << "img0 1 0 0 0 1 2\n";  // 6 numbers instead of 7
    f.close();
    CHECK_THROWS_AS(load_dataset(root.string()), MalformedLine);
  }
  SUBCASE("non-numeric pose field reports the line") {
    std::ofstream f(root / "poses.txt");
    f << "img0 1 0 0 0 1 2 x\n";
    f.close();
    CHECK_THROWS_AS(load_dataset(root.string()), MalformedLine);
  }
  std::filesystem::remove_all(root);
}

TEST_CASE("covisibility scores identical and opposite-facing cameras") {
  SceneDataset data;
  data.near = 0.1;
  data.far = 2.0;
  const CameraIntrinsics k = testutil::default_intrinsics(48, 40);
  auto add = [&](const std::string& id, const CameraPose& pose) {
    SceneDataset::Item item;
    item.id = id;
    item.pose = pose;
    item.intrinsics = k;
    data.items.push_back(item);
    data.train_ids.push_back(static_cast<int>(data.items.size()) - 1);
  };
  CameraPose a = CameraPose::identity();
  CameraPose b = a;  // identical
  CameraPose c;      // opposite-facing
  c.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(M_PI, Eigen::Vector3d::UnitY()));
  c.translation = Eigen::Vector3d(0, 0, 0);
  add("a", a);
  add("b", b);
  add("c", c);

  const auto pairs = covisibility_pairs(data, 20);
  REQUIRE(!pairs[0].empty());
  CHECK(pairs[0][0].other == 1);
  CHECK(pairs[0][0].score == doctest::Approx(1.0));
  for (const auto& n : pairs[0]) {
    CHECK(n.other != 0);  // no self-pairs
    if (n.other == 2) CHECK(n.score == doctest::Approx(0.0));
  }
  // Opposite-facing camera shares no frustum volume: it must not appear.
  for (const auto& n : pairs[0]) CHECK(n.other != 2);
}

TEST_CASE("covisibility neighbor lists are deterministic") {
  const SceneDataset data = generate_synthetic(small_spec());
  const auto p1 = covisibility_pairs(data, 5);
  const auto p2 = covisibility_pairs(data, 5);
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    REQUIRE(p1[i].size() == p2[i].size());
    for (size_t j = 0; j < p1[i].size(); ++j) {
      CHECK(p1[i][j].other == p2[i][j].other);
      CHECK(p1[i][j].score == p2[i][j].score);
    }
  }
}

TEST_CASE("pair file round-trip") {
  const auto path =
      (std::filesystem::temp_directory_path() / "nerfloc_pairs.txt").string();
  std::vector<std::pair<std::string, std::string>> pairs{{"q0", "r3"},
                                                         {"q1", "r0"}};
  save_pairs(pairs, path);
  const auto loaded = load_pairs(path);
  CHECK(loaded == pairs);
  std::filesystem::remove(path);
}
