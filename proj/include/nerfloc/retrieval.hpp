#pragma once

#include <string>
#include <vector>

#include "nerfloc/matcher.hpp"
#include "nerfloc/scene_data.hpp"
#include "nerfloc/scene_field.hpp"

namespace nerfloc {

struct KTooLarge : std::runtime_error {
  KTooLarge() : std::runtime_error("k exceeds the database size") {}
};
struct AllEmpty : std::runtime_error {
  AllEmpty() : std::runtime_error("all match sets are empty") {}
};
struct EmptyAfterFilter : std::runtime_error {
  EmptyAfterFilter()
      : std::runtime_error("no 3D points survive the covisibility filter") {}
};

struct GlobalDescriptor {
  Eigen::VectorXd vector;  // unit L2 norm
  std::string image_id;
};

struct ReferenceEntry {
  CameraPose pose;
  CameraIntrinsics intrinsics;
  GlobalDescriptor descriptor;
  std::string source;  // "real" | "synthesized"
  std::string sequence;
};

struct ReferenceDatabase {
  std::vector<ReferenceEntry> entries;
};

struct RetrievalConfig {
  int descriptor_dim = 0;  // 0 -> pooled coarse dim (no projection)
  uint64_t projection_seed = 1234;  // fixed random projection when dim differs
  int render_n_coarse = 32;         // synthesized-database rendering budget
  int render_n_fine = 32;
  uint64_t render_seed = 99;
};

// Spatially average-pooled coarse features, optionally projected to
// descriptor_dim by a seeded Gaussian projection, then L2-normalized.
GlobalDescriptor describe(const Image& image, const MatcherParams<float>& encoder,
                          const RetrievalConfig& cfg = {});

// source == "real": descriptors of the stored train images.
// source == "synthesized": full-resolution renders at the train poses.
ReferenceDatabase build_database(const SceneDataset& dataset,
                                 const SceneField<float>& field,
                                 const MatcherParams<float>& encoder,
                                 const std::string& source,
                                 const RetrievalConfig& cfg = {});

// Indices of the k nearest entries by cosine similarity, descending; ties
// break to the lower index. Throws KTooLarge.
std::vector<int> topk(const GlobalDescriptor& query,
                      const ReferenceDatabase& db, int k);

// Union of per-reference 2D-3D matches; exact duplicates (same pixel and 3D
// point) keep the best score. Throws AllEmpty.
std::vector<Correspondence> merge_matches(
    const std::vector<std::vector<Correspondence>>& per_reference);

// Voxel-grid clustering of the per-reference point sets; clusters observed
// from >= covis_min references survive with averaged features, then a seeded
// uniform subsample caps the set. Throws EmptyAfterFilter.
ScenePointSet merge_3d(const std::vector<ScenePointSet>& per_reference,
                       int covis_min, double scene_diameter,
                       int max_points = 3600, uint64_t seed = 0);

}  // namespace nerfloc
