#include "nerfloc/localize.hpp"

#include <atomic>
#include <chrono>
#include <mutex>
#include <thread>

namespace nerfloc {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

uint64_t id_hash(const std::string& id) {
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (char c : id) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

nlohmann::json pose_to_json(const CameraPose& pose) {
  return {{"q",
           {pose.rotation.w(), pose.rotation.x(), pose.rotation.y(),
            pose.rotation.z()}},
          {"t",
           {pose.translation.x(), pose.translation.y(), pose.translation.z()}}};
}

CameraPose pose_from_json(const nlohmann::json& j) {
  CameraPose pose;
  const auto& q = j.at("q");
  pose.rotation = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).normalized();
  const auto& t = j.at("t");
  pose.translation = Eigen::Vector3d(t[0], t[1], t[2]);
  return pose;
}

}  // namespace

nlohmann::json LocalizationResult::to_json() const {
  nlohmann::json j;
  j["query"] = query_id;
  j["pose"] = pose_to_json(pose);
  j["status"] = status;
  j["inliers"] = inliers;
  j["mean_reproj_px"] = mean_reproj;
  j["retrieved_top1"] = retrieved_top1;
  j["timings_ms"] = {{"retrieve", timings.retrieve_ms},
                     {"render", timings.render_ms},
                     {"match", timings.match_ms},
                     {"pnp", timings.pnp_ms},
                     {"refine", timings.refine_ms}};
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& r : trace.rounds) {
    nlohmann::json jr;
    jr["pose"] = pose_to_json(r.pose);
    jr["solver_failed"] = r.solver_failed;
    if (r.errors) {
      jr["translation_error"] = r.errors->translation;
      jr["rotation_error_deg"] = r.errors->rotation_deg;
    }
    if (!r.photometric_losses.empty()) jr["photometric_losses"] = r.photometric_losses;
    rounds.push_back(jr);
  }
  j["trace"] = rounds;
  if (errors) {
    j["translation_error"] = errors->translation;
    j["rotation_error_deg"] = errors->rotation_deg;
  }
  return j;
}

LocalizationResult LocalizationResult::from_json(const nlohmann::json& j) {
  LocalizationResult r;
  r.query_id = j.at("query");
  r.pose = pose_from_json(j.at("pose"));
  r.status = j.at("status");
  r.inliers = j.at("inliers");
  r.mean_reproj = j.at("mean_reproj_px");
  r.retrieved_top1 = j.value("retrieved_top1", -1);
  if (j.contains("translation_error")) {
    r.errors = PoseErrors{j.at("translation_error"), j.at("rotation_error_deg")};
  }
  for (const auto& jr : j.value("trace", nlohmann::json::array())) {
    RefinementRound round;
    round.pose = pose_from_json(jr.at("pose"));
    round.solver_failed = jr.value("solver_failed", false);
    if (jr.contains("translation_error")) {
      round.errors =
          PoseErrors{jr.at("translation_error"), jr.at("rotation_error_deg")};
    }
    if (jr.contains("photometric_losses")) {
      round.photometric_losses =
          jr.at("photometric_losses").get<std::vector<double>>();
    }
    r.trace.rounds.push_back(std::move(round));
  }
  return r;
}

Localizer::Localizer(const SceneDataset* dataset, SceneField<float>* field,
                     MatcherParams<float>* matcher, const LocalizeConfig& config)
    : dataset_(dataset), field_(field), matcher_(matcher), cfg_(config) {
  cfg_.retrieval.render_n_coarse = cfg_.render_n_coarse;
  cfg_.retrieval.render_n_fine = cfg_.render_n_fine;
  db_ = build_database(*dataset_, *field_, *matcher_, cfg_.retrieval_db,
                       cfg_.retrieval);
}

const ScenePointSet& Localizer::rendered_reference(int db_index) {
  std::lock_guard<std::mutex> lock(cache_mutex_);
  auto it = render_cache_.find(db_index);
  if (it == render_cache_.end()) {
    const auto& entry = db_.entries[db_index];
    it = render_cache_
             .emplace(db_index,
                      prepare_scene_features(
                          entry.pose, entry.intrinsics, *field_, matcher_->cfg,
                          derive_seed(cfg_.seed, 40000 + db_index),
                          entry.sequence, cfg_.render_n_coarse,
                          cfg_.render_n_fine))
             .first;
  }
  return it->second;
}

LocalizationResult Localizer::localize(const SceneDataset::Item& query,
                                       bool use_ground_truth) {
  LocalizationResult result;
  result.query_id = query.id;
  const uint64_t query_seed = derive_seed(cfg_.seed, id_hash(query.id));

  auto [image, K] =
      prepare_query_image(query.image, query.intrinsics, matcher_->cfg.image_size);

  // Retrieval (or precomputed pairs when supplied).
  auto t0 = Clock::now();
  std::vector<int> refs;
  const auto pair_it = cfg_.retrieval_pairs.find(query.id);
  if (pair_it != cfg_.retrieval_pairs.end()) {
    for (const auto& ref_id : pair_it->second) {
      for (size_t i = 0; i < db_.entries.size(); ++i) {
        if (db_.entries[i].descriptor.image_id == ref_id) {
          refs.push_back(static_cast<int>(i));
          break;
        }
      }
      if (static_cast<int>(refs.size()) >= cfg_.topk) break;
    }
  } else {
    const GlobalDescriptor desc = describe(image, *matcher_, cfg_.retrieval);
    try {
      refs = topk(desc, db_, std::min<int>(cfg_.topk,
                                           static_cast<int>(db_.entries.size())));
    } catch (const KTooLarge&) {
      result.status = "failed";
      return result;
    }
  }
  result.retrieved_top1 = refs.empty() ? -1 : refs[0];
  result.timings.retrieve_ms = ms_since(t0);
  if (refs.empty()) {
    result.status = "failed";
    return result;
  }
  const CameraPose& fallback = db_.entries[refs[0]].pose;

  // Rendering + matching, honoring the merge strategy.
  const ImageFeaturePyramid<float> pyramid = encode_image(image, *matcher_);
  std::vector<Correspondence> correspondences;
  bool matched = false;
  try {
    if (cfg_.merge == "3d" && refs.size() > 1) {
      t0 = Clock::now();
      std::vector<ScenePointSet> sets;
      for (int r : refs) sets.push_back(rendered_reference(r));
      const ScenePointSet merged =
          merge_3d(sets, cfg_.covis_min, dataset_->diameter, cfg_.merge_cap,
                   derive_seed(query_seed, 3));
      result.timings.render_ms = ms_since(t0);
      t0 = Clock::now();
      const MatchSet matches = match_query(pyramid, merged, *matcher_);
      correspondences = to_correspondences(matches, merged);
      result.timings.match_ms = ms_since(t0);
    } else if (cfg_.merge == "match" && refs.size() > 1) {
      std::vector<std::vector<Correspondence>> per_ref;
      for (int r : refs) {
        t0 = Clock::now();
        const ScenePointSet& pts = rendered_reference(r);
        result.timings.render_ms += ms_since(t0);
        t0 = Clock::now();
        const MatchSet matches = match_query(pyramid, pts, *matcher_);
        per_ref.push_back(to_correspondences(matches, pts));
        result.timings.match_ms += ms_since(t0);
      }
      correspondences = merge_matches(per_ref);
    } else {
      t0 = Clock::now();
      const ScenePointSet& pts = rendered_reference(refs[0]);
      result.timings.render_ms = ms_since(t0);
      t0 = Clock::now();
      const MatchSet matches = match_query(pyramid, pts, *matcher_);
      correspondences = to_correspondences(matches, pts);
      result.timings.match_ms = ms_since(t0);
    }
    matched = true;
  } catch (const std::runtime_error&) {
    matched = false;
  }

  // PnP.
  t0 = Clock::now();
  CameraPose estimate = fallback;
  if (matched) {
    try {
      RansacConfig rc = cfg_.ransac;
      rc.seed = derive_seed(query_seed, 1);
      const PoseEstimate est = ransac_pnp(correspondences, K, rc);
      estimate = est.pose;
      result.inliers = static_cast<int>(est.inliers.size());
      result.mean_reproj = est.mean_reproj_error;
    } catch (const std::runtime_error&) {
      result.status = "fallback_reference";
    }
  } else {
    result.status = "fallback_reference";
  }
  result.timings.pnp_ms = ms_since(t0);

  // Refinement.
  t0 = Clock::now();
  if (cfg_.refine_mode != "off") {
    RefineContext ctx;
    ctx.field = field_;
    ctx.matcher = matcher_;
    ctx.query = image;
    ctx.K = K;
    ctx.appearance_id = query.sequence;
    ctx.mask = query.mask.empty() ? nullptr : &query.mask;
    ctx.ground_truth = use_ground_truth ? &query.pose : nullptr;
    ctx.ransac = cfg_.ransac;
    ctx.ransac.seed = derive_seed(query_seed, 2);
    ctx.render_n_coarse = cfg_.render_n_coarse;
    ctx.render_n_fine = cfg_.render_n_fine;
    ctx.seed = derive_seed(query_seed, 4);
    RefineConfig rf = cfg_.refine;
    rf.mode = cfg_.refine_mode == "optimize" ? "optimize-then-match"
                                             : cfg_.refine_mode;
    estimate = refine(ctx, estimate, rf, &result.trace);
  }
  result.timings.refine_ms = ms_since(t0);

  result.pose = estimate;
  if (use_ground_truth) {
    result.errors = pose_errors(estimate, query.pose);
  }
  return result;
}

std::vector<LocalizationResult> Localizer::localize_all(
    const std::vector<int>& item_indices, bool use_ground_truth) {
  std::vector<LocalizationResult> results(item_indices.size());
  // Pre-render every database entry serially: the cache is shared state and
  // per-query work stays read-only afterwards.
  if (cfg_.merge != "none" || cfg_.topk == 1) {
    // Rendering happens lazily either way; warming top-1 refs is enough.
  }
  std::atomic<size_t> next{0};
  const int n_threads =
      std::max(1, std::min<int>(cfg_.threads, static_cast<int>(item_indices.size())));
  auto worker = [&]() {
    for (size_t i = next.fetch_add(1); i < item_indices.size();
         i = next.fetch_add(1)) {
      results[i] = localize(dataset_->items[item_indices[i]], use_ground_truth);
    }
  };
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  return results;
}

}  // namespace nerfloc
