#pragma once

#include <json.hpp>

#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "nerfloc/matcher.hpp"
#include "nerfloc/pose_solver.hpp"
#include "nerfloc/refinement.hpp"
#include "nerfloc/retrieval.hpp"
#include "nerfloc/scene_data.hpp"

namespace nerfloc {

struct LocalizeConfig {
  int topk = 1;
  std::string merge = "none";         // none | match | 3d
  std::string refine_mode = "off";    // off | iterative | optimize
  std::string retrieval_db = "real";  // real | synthesized
  RansacConfig ransac;
  RefineConfig refine;
  RetrievalConfig retrieval;
  int render_n_coarse = 32;
  int render_n_fine = 32;
  int covis_min = 2;       // merge=3d survival threshold
  int merge_cap = 3600;    // merge=3d point cap
  uint64_t seed = 0;
  int threads = 2;
  // Precomputed retrieval pairs (query id -> ordered reference ids); when a
  // query is listed here its descriptor lookup is bypassed.
  std::map<std::string, std::vector<std::string>> retrieval_pairs;
};

struct StageTimings {
  double retrieve_ms = 0, render_ms = 0, match_ms = 0, pnp_ms = 0,
         refine_ms = 0;
};

struct LocalizationResult {
  std::string query_id;
  CameraPose pose;
  std::string status = "ok";  // ok | fallback_reference | failed
  int inliers = 0;
  double mean_reproj = 0;
  int retrieved_top1 = -1;  // database entry index
  StageTimings timings;
  RefinementTrace trace;
  std::optional<PoseErrors> errors;  // vs dataset ground truth

  nlohmann::json to_json() const;
  static LocalizationResult from_json(const nlohmann::json& j);
};

// Holds the scene artifacts plus per-reference render caches; localizes
// queries through retrieve -> match -> PnP -> refine.
class Localizer {
 public:
  Localizer(const SceneDataset* dataset, SceneField<float>* field,
            MatcherParams<float>* matcher, const LocalizeConfig& config);

  const ReferenceDatabase& database() const { return db_; }

  // `use_ground_truth` fills errors and per-round trace errors from the
  // query item's stored pose.
  LocalizationResult localize(const SceneDataset::Item& query,
                              bool use_ground_truth = true);

  // Localizes the given items on a small worker pool; output order matches
  // the input order regardless of scheduling.
  std::vector<LocalizationResult> localize_all(
      const std::vector<int>& item_indices, bool use_ground_truth = true);

 private:
  const ScenePointSet& rendered_reference(int db_index);

  const SceneDataset* dataset_;
  SceneField<float>* field_;
  MatcherParams<float>* matcher_;
  LocalizeConfig cfg_;
  ReferenceDatabase db_;
  std::map<int, ScenePointSet> render_cache_;
  std::mutex cache_mutex_;
};

}  // namespace nerfloc
