#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "nerfloc/geometry.hpp"
#include "nerfloc/image.hpp"

namespace nerfloc {

struct MissingPoses : std::runtime_error {
  explicit MissingPoses(const std::string& root)
      : std::runtime_error("poses.txt not found under " + root) {}
};
struct MalformedLine : std::runtime_error {
  MalformedLine(const std::string& file, int line)
      : std::runtime_error(file + ": malformed line " + std::to_string(line)) {}
};

// Boolean exclusion mask stored as a single-channel image (nonzero = excluded
// from the photometric loss).
using PixelMask = Image;

struct SceneDataset {
  struct Item {
    std::string id;
    Image image;
    CameraPose pose;  // camera-to-world
    CameraIntrinsics intrinsics;
    std::string sequence = "default";
    PixelMask mask;  // empty = no mask
  };

  std::vector<Item> items;
  std::vector<int> train_ids;  // indices into items
  std::vector<int> test_ids;
  double near = 0.05, far = 2.0, diameter = 1.0;

  // Analytic per-view depth (synthetic scenes only; not part of the on-disk
  // layout). Single channel, scene units.
  std::vector<Image> depths;

  int index_of(const std::string& id) const;
  const Item& item(const std::string& id) const { return items[index_of(id)]; }
};

struct SyntheticSceneSpec {
  uint64_t seed = 7;
  int n_objects = 12;
  int n_train_views = 20;
  int n_test_views = 10;
  int image_size = 96;
  double fov_deg = 70.0;
  double orbit_radius_min = 0.36;
  double orbit_radius_max = 0.44;
  int n_sequences = 2;
};

// Deterministic synthetic scene: a textured axis-aligned room (unit cube)
// containing colored boxes and spheres, rendered by analytic ray-primitive
// intersection. This renderer is the ground-truth oracle and is independent
// of the neural renderer. Depth maps are stored in `depths`.
SceneDataset generate_synthetic(const SyntheticSceneSpec& spec);

// On-disk layout:
//   images/<id>.png
//   poses.txt       id qw qx qy qz tx ty tz      (camera-to-world)
//   intrinsics.txt  id fx fy cx cy w h   or   * fx fy cx cy w h (shared)
//   masks/<id>.png  optional, nonzero = excluded
//   sequences.txt   id sequence
//   splits/train.txt, splits/test.txt
//   meta.txt        near far diameter
void save_dataset(const SceneDataset& dataset, const std::string& root);
SceneDataset load_dataset(const std::string& root);

struct CovisNeighbor {
  int other;     // index into items
  double score;  // fraction of probe points visible in the other view
};

// Ranked covisible neighbors per train image. Uses back-projected depth
// probes when depth is available, frustum-overlap probes otherwise.
std::vector<std::vector<CovisNeighbor>> covisibility_pairs(
    const SceneDataset& dataset, int top_n = 20);

// Pair files: one `query_name reference_name` pair per line.
void save_pairs(const std::vector<std::pair<std::string, std::string>>& pairs,
                const std::string& path);
std::vector<std::pair<std::string, std::string>> load_pairs(
    const std::string& path);

}  // namespace nerfloc
