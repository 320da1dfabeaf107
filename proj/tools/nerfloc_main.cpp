// Command-line entry points for the NeRF localization pipeline: synthetic
// scene generation, per-scene field training, matcher training, hierarchical
// localization, evaluation, and the 3D-feature-source ablation.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "nerfloc/evaluate.hpp"
#include "nerfloc/localize.hpp"
#include "nerfloc/nerf_training.hpp"
#include "nerfloc/plot.hpp"

namespace fs = std::filesystem;
using namespace nerfloc;

namespace {

struct MissingCheckpoint : std::runtime_error {
  explicit MissingCheckpoint(const std::string& p)
      : std::runtime_error("missing checkpoint: " + p) {}
};
struct EmptyQuerySet : std::runtime_error {
  EmptyQuerySet() : std::runtime_error("query split is empty") {}
};

void echo_config(CLI::App* cmd, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / "config.echo");
  f << cmd->config_to_str(true, true);
}

void require_checkpoint(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw MissingCheckpoint(dir);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct LocalizeArgs {
  std::string scene, field, matcher, out;
  std::string queries = "test";
  int topk = 1;
  std::string merge = "none";
  std::string refine_mode = "off";
  std::string retrieval_db = "real";
  std::string pairs_file;
  int n_coarse = 32, n_fine = 32;
  int opt_steps = 10;
  int rays_photo = 1024;
  double reproj_px = 3.0;
  int rounds = 1;
  uint64_t seed = 0;
  int threads = 2;
  std::string thresholds = "0.05:5";
};

void add_localize_flags(CLI::App* cmd, LocalizeArgs* args) {
  cmd->add_option("--scene", args->scene, "dataset root")->required();
  cmd->add_option("--field", args->field, "field checkpoint dir")->required();
  cmd->add_option("--matcher", args->matcher, "matcher checkpoint dir")->required();
  cmd->add_option("--out", args->out, "output dir")->required();
  cmd->add_option("--queries", args->queries, "split to localize (train|test)");
  cmd->add_option("--topk", args->topk, "retrieved references per query");
  cmd->add_option("--merge", args->merge, "none|match|3d")
      ->check(CLI::IsMember({"none", "match", "3d"}));
  cmd->add_option("--refine", args->refine_mode, "off|iterative|optimize")
      ->check(CLI::IsMember({"off", "iterative", "optimize"}));
  cmd->add_option("--retrieval-db", args->retrieval_db, "real|synthesized")
      ->check(CLI::IsMember({"real", "synthesized"}));
  cmd->add_option("--pairs", args->pairs_file,
                  "precomputed retrieval pair file (query reference per line)");
  cmd->add_option("--render-n-coarse", args->n_coarse);
  cmd->add_option("--render-n-fine", args->n_fine);
  cmd->add_option("--opt-steps", args->opt_steps, "photometric steps per round");
  cmd->add_option("--rays-photometric", args->rays_photo);
  cmd->add_option("--reproj-threshold", args->reproj_px, "RANSAC threshold, px");
  cmd->add_option("--rounds", args->rounds, "refinement rounds");
  cmd->add_option("--seed", args->seed);
  cmd->add_option("--threads", args->threads);
  cmd->add_option("--thresholds", args->thresholds,
                  "recall thresholds, e.g. 0.05:5,0.0866:5");
}

int run_localize_like(const LocalizeArgs& args) {
  require_checkpoint(args.field);
  require_checkpoint(args.matcher);
  const SceneDataset dataset = load_dataset(args.scene);
  SceneField<float> field = load_field<float>(args.field);
  MatcherParams<float> matcher = load_matcher<float>(args.matcher);

  LocalizeConfig cfg;
  cfg.topk = args.topk;
  cfg.merge = args.merge;
  cfg.refine_mode = args.refine_mode;
  cfg.retrieval_db = args.retrieval_db;
  cfg.render_n_coarse = args.n_coarse;
  cfg.render_n_fine = args.n_fine;
  cfg.refine.rounds = args.rounds;
  cfg.refine.opt_steps_per_round = args.opt_steps;
  cfg.refine.rays_for_photometric = args.rays_photo;
  cfg.ransac.reproj_threshold_px = args.reproj_px;
  cfg.seed = args.seed;
  cfg.threads = args.threads;
  if (!args.pairs_file.empty()) {
    for (const auto& [q, r] : load_pairs(args.pairs_file)) {
      cfg.retrieval_pairs[q].push_back(r);
    }
  }

  const std::vector<int>& split =
      args.queries == "train" ? dataset.train_ids : dataset.test_ids;
  if (split.empty()) throw EmptyQuerySet();

  // Resume: skip query ids already present in results.jsonl.
  const std::string results_path =
      (fs::path(args.out) / "results.jsonl").string();
  std::vector<LocalizationResult> done;
  if (fs::exists(results_path)) done = load_results(results_path);
  std::vector<int> pending;
  for (int idx : split) {
    const std::string& id = dataset.items[idx].id;
    bool seen = false;
    for (const auto& r : done) {
      if (r.query_id == id) seen = true;
    }
    if (!seen) pending.push_back(idx);
  }

  Localizer localizer(&dataset, &field, &matcher, cfg);
  const auto results = localizer.localize_all(pending);
  for (const auto& r : results) append_result(r, results_path);

  // Metrics + plots over the full (resumed) result set.
  const auto all = load_results(results_path);
  const auto thresholds = parse_thresholds(args.thresholds);
  const EvaluationSummary summary =
      evaluate_results(all, dataset, thresholds);
  std::ofstream metrics(fs::path(args.out) / "metrics.txt");
  metrics << format_metrics(summary);
  std::cout << format_metrics(summary);

  // Median translation error per refinement round, when traces exist.
  size_t max_rounds = 0;
  for (const auto& r : all) max_rounds = std::max(max_rounds, r.trace.rounds.size());
  if (max_rounds > 1) {
    PlotSeries series;
    for (size_t round = 0; round < max_rounds; ++round) {
      std::vector<double> errs;
      for (const auto& r : all) {
        if (round < r.trace.rounds.size() && r.trace.rounds[round].errors) {
          errs.push_back(r.trace.rounds[round].errors->translation);
        }
      }
      if (!errs.empty()) series.values.push_back(median(errs));
    }
    if (series.values.size() > 1) {
      fs::create_directories(fs::path(args.out) / "plots");
      save_plot({series},
                (fs::path(args.out) / "plots" / "error_vs_round.png").string());
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NeRF-feature visual localization pipeline"};
  app.require_subcommand(1);

  // --- synth ---------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "generate a synthetic scene");
  synth->set_config("--config");
  SyntheticSceneSpec spec;
  std::string synth_out;
  synth->add_option("--out", synth_out, "dataset root")->required();
  synth->add_option("--seed", spec.seed);
  synth->add_option("--train-views", spec.n_train_views);
  synth->add_option("--test-views", spec.n_test_views);
  synth->add_option("--size", spec.image_size);
  synth->add_option("--objects", spec.n_objects);
  synth->add_option("--sequences", spec.n_sequences);
  synth->callback([&] {
    const SceneDataset data = generate_synthetic(spec);
    save_dataset(data, synth_out);
    echo_config(synth, synth_out);
    std::cout << "wrote " << data.items.size() << " views to " << synth_out
              << "\n";
  });

  // --- train-nerf ----------------------------------------------------------
  auto* tn = app.add_subcommand("train-nerf", "train the per-scene field");
  tn->set_config("--config");
  std::string tn_scene, tn_out;
  SceneFieldConfig field_cfg;
  NerfTrainConfig train_cfg;
  tn->add_option("--scene", tn_scene)->required();
  tn->add_option("--out", tn_out, "checkpoint dir")->required();
  tn->add_option("--width", field_cfg.feature_dim);
  tn->add_option("--pe-x-bands", field_cfg.pe_x_bands);
  tn->add_option("--pe-d-bands", field_cfg.pe_d_bands);
  tn->add_option("--appearance-dim", field_cfg.appearance_dim);
  tn->add_option("--color-hidden", field_cfg.color_hidden);
  tn->add_option("--epochs", train_cfg.epochs);
  tn->add_option("--rays-per-batch", train_cfg.rays_per_batch);
  tn->add_option("--rays-per-epoch", train_cfg.rays_per_epoch);
  tn->add_option("--lr", train_cfg.lr);
  tn->add_option("--n-coarse", train_cfg.n_coarse);
  tn->add_option("--n-fine", train_cfg.n_fine);
  tn->add_option("--density-noise", train_cfg.density_noise_std);
  tn->add_option("--beta2", train_cfg.adam_beta2);
  tn->add_option("--max-train-images", train_cfg.max_train_images);
  tn->add_option("--seed", train_cfg.seed);
  tn->add_option("--threads", train_cfg.threads);
  tn->add_option("--log", train_cfg.log_path);
  tn->callback([&] {
    const SceneDataset data = load_dataset(tn_scene);
    const NerfTrainResult result = train_scene(data, field_cfg, train_cfg);
    save_field(result.field, tn_out);
    echo_config(tn, tn_out);
    std::cout << "final_psnr " << result.final_psnr << "\n";
  });

  // --- train-matcher ---------------------------------------------------------
  auto* tm = app.add_subcommand("train-matcher", "train the 2D-3D matcher");
  tm->set_config("--config");
  std::vector<std::string> tm_scenes, tm_fields;
  std::string tm_out, tm_mode = "per-scene", tm_source = "f3";
  MatcherConfig mcfg;
  MatcherTrainConfig mtrain;
  std::string tm_channels;
  tm->add_option("--scene", tm_scenes, "dataset root (repeatable)")->required();
  tm->add_option("--field", tm_fields, "field checkpoint per scene")->required();
  tm->add_option("--out", tm_out)->required();
  tm->add_option("--variant", mcfg.variant)->check(CLI::IsMember({"mini", "full"}));
  tm->add_option("--mode", tm_mode)
      ->check(CLI::IsMember({"per-scene", "multi-scene"}));
  tm->add_option("--source", tm_source, "pt3d|pe3d|f1..f7");
  tm->add_option("--image-size", mcfg.image_size);
  tm->add_option("--d-coarse", mcfg.d_coarse);
  tm->add_option("--d-fine", mcfg.d_fine);
  tm->add_option("--channels", tm_channels, "CNN widths, e.g. 16,24,32,48");
  tm->add_option("--tau", mcfg.tau);
  tm->add_option("--theta", mcfg.theta);
  tm->add_option("--self-blocks", mcfg.n_self_blocks);
  tm->add_option("--heads", mcfg.n_heads);
  tm->add_option("--fine-window", mcfg.fine_window);
  tm->add_option("--pe3d-bands", mcfg.pe3d_bands);
  tm->add_option("--epochs", mtrain.epochs);
  tm->add_option("--lr", mtrain.lr);
  tm->add_option("--batch-pairs", mtrain.batch_pairs);
  tm->add_option("--pairs-per-scene", mtrain.pairs_per_scene);
  tm->add_option("--top-covis", mtrain.top_covis);
  tm->add_option("--render-n-coarse", mtrain.render_n_coarse);
  tm->add_option("--render-n-fine", mtrain.render_n_fine);
  tm->add_option("--seed", mtrain.seed);
  tm->add_option("--log", mtrain.log_path);
  tm->callback([&] {
    if (tm_scenes.size() != tm_fields.size()) {
      throw CLI::ValidationError("--scene and --field counts must match");
    }
    mcfg.source = feature_source_from_string(tm_source);
    if (!tm_channels.empty()) {
      mcfg.cnn_channels.clear();
      for (const auto& c : split_csv(tm_channels)) {
        mcfg.cnn_channels.push_back(std::stoi(c));
      }
    }
    std::vector<SceneDataset> datasets;
    std::vector<SceneField<float>> fields;
    for (size_t i = 0; i < tm_scenes.size(); ++i) {
      require_checkpoint(tm_fields[i]);
      datasets.push_back(load_dataset(tm_scenes[i]));
      fields.push_back(load_field<float>(tm_fields[i]));
    }
    auto train_one = [&](const std::vector<size_t>& idx,
                         const std::string& out) {
      std::vector<MatcherTrainScene> scenes;
      for (size_t i : idx) {
        scenes.push_back({&datasets[i], &fields[i], tm_scenes[i]});
      }
      MatcherTrainResult result = train_matcher(scenes, mcfg, mtrain);
      save_matcher(result.params, out);
      echo_config(tm, out);
      std::cout << out << " final epoch loss " << result.epochs.back().loss
                << "\n";
    };
    if (tm_mode == "multi-scene" || tm_scenes.size() == 1) {
      std::vector<size_t> all(tm_scenes.size());
      for (size_t i = 0; i < all.size(); ++i) all[i] = i;
      train_one(all, tm_out);
    } else {
      for (size_t i = 0; i < tm_scenes.size(); ++i) {
        train_one({i}, (fs::path(tm_out) / fs::path(tm_scenes[i]).filename())
                           .string());
      }
    }
  });

  // --- localize --------------------------------------------------------------
  auto* loc = app.add_subcommand("localize", "localize a query split");
  loc->set_config("--config");
  LocalizeArgs largs;
  add_localize_flags(loc, &largs);
  loc->callback([&] {
    fs::create_directories(largs.out);
    echo_config(loc, largs.out);
    run_localize_like(largs);
  });

  // --- evaluate ----------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "metrics from a results file");
  ev->set_config("--config");
  std::string ev_results, ev_scene, ev_out, ev_thresholds = "0.05:5";
  ev->add_option("--results", ev_results)->required();
  ev->add_option("--scene", ev_scene)->required();
  ev->add_option("--out", ev_out)->required();
  ev->add_option("--thresholds", ev_thresholds);
  ev->callback([&] {
    const SceneDataset dataset = load_dataset(ev_scene);
    const auto results = load_results(ev_results);
    if (results.empty()) throw EmptyQuerySet();
    const EvaluationSummary summary =
        evaluate_results(results, dataset, parse_thresholds(ev_thresholds));
    fs::create_directories(ev_out);
    echo_config(ev, ev_out);
    std::ofstream metrics(fs::path(ev_out) / "metrics.txt");
    metrics << format_metrics(summary);
    std::cout << format_metrics(summary);

    std::vector<double> errs;
    for (const auto& r : results) {
      errs.push_back(pose_errors(r.pose, dataset.item(r.query_id).pose).translation);
    }
    fs::create_directories(fs::path(ev_out) / "plots");
    PlotSeries series;
    series.values = errs;
    save_plot({series},
              (fs::path(ev_out) / "plots" / "translation_errors.png").string());
  });

  // --- ablate-features --------------------------------------------------------
  auto* ab = app.add_subcommand("ablate-features",
                                "per-source matcher training + localization");
  ab->set_config("--config");
  std::string ab_scene, ab_field, ab_out;
  std::string ab_layers = "pt3d,pe3d,f1,f2,f3,f4,f5,f6,f7";
  MatcherConfig ab_mcfg;
  MatcherTrainConfig ab_mtrain;
  std::string ab_channels;
  LocalizeArgs ab_largs;
  ab->add_option("--scene", ab_scene)->required();
  ab->add_option("--field", ab_field)->required();
  ab->add_option("--out", ab_out)->required();
  ab->add_option("--layers", ab_layers, "comma-separated source list");
  ab->add_option("--image-size", ab_mcfg.image_size);
  ab->add_option("--d-coarse", ab_mcfg.d_coarse);
  ab->add_option("--d-fine", ab_mcfg.d_fine);
  ab->add_option("--channels", ab_channels);
  ab->add_option("--pe3d-bands", ab_mcfg.pe3d_bands);
  ab->add_option("--epochs", ab_mtrain.epochs);
  ab->add_option("--lr", ab_mtrain.lr);
  ab->add_option("--batch-pairs", ab_mtrain.batch_pairs);
  ab->add_option("--pairs-per-scene", ab_mtrain.pairs_per_scene);
  ab->add_option("--render-n-coarse", ab_mtrain.render_n_coarse);
  ab->add_option("--render-n-fine", ab_mtrain.render_n_fine);
  ab->add_option("--seed", ab_mtrain.seed);
  ab->add_option("--thresholds", ab_largs.thresholds);
  ab->callback([&] {
    require_checkpoint(ab_field);
    const SceneDataset dataset = load_dataset(ab_scene);
    SceneField<float> field = load_field<float>(ab_field);
    if (!ab_channels.empty()) {
      ab_mcfg.cnn_channels.clear();
      for (const auto& c : split_csv(ab_channels)) {
        ab_mcfg.cnn_channels.push_back(std::stoi(c));
      }
    }
    fs::create_directories(ab_out);
    echo_config(ab, ab_out);
    std::ofstream table(fs::path(ab_out) / "ablation.txt");
    table << "source median_t median_r_deg recall\n";
    for (const auto& layer : split_csv(ab_layers)) {
      MatcherConfig cfg = ab_mcfg;
      cfg.variant = "mini";
      cfg.source = feature_source_from_string(layer);
      MatcherTrainResult trained =
          train_matcher({{&dataset, &field, ab_scene}}, cfg, ab_mtrain);
      LocalizeConfig lcfg;
      lcfg.render_n_coarse = ab_mtrain.render_n_coarse > 0
                                 ? ab_mtrain.render_n_coarse
                                 : 32;
      lcfg.render_n_fine =
          ab_mtrain.render_n_fine >= 0 ? ab_mtrain.render_n_fine : 32;
      lcfg.seed = ab_mtrain.seed;
      Localizer localizer(&dataset, &field, &trained.params, lcfg);
      const auto results = localizer.localize_all(dataset.test_ids);
      std::vector<PoseErrors> errors;
      for (const auto& r : results) errors.push_back(*r.errors);
      const auto thresholds = parse_thresholds(ab_largs.thresholds);
      const EvaluationSummary summary = evaluate_errors(errors, thresholds);
      char line[160];
      std::snprintf(line, sizeof(line), "%s %.6f %.6f %.6f\n", layer.c_str(),
                    summary.median_translation, summary.median_rotation_deg,
                    summary.recalls.front().value);
      table << line;
      table.flush();
      std::cout << line;
    }
  });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
