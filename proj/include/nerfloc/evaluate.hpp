#pragma once

#include <string>
#include <vector>

#include "nerfloc/geometry.hpp"
#include "nerfloc/localize.hpp"

namespace nerfloc {

struct RecallEntry {
  double t_thresh = 0;
  double r_thresh = 0;
  double value = 0;
};

struct EvaluationSummary {
  int count = 0;
  double median_translation = 0;
  double median_rotation_deg = 0;
  std::vector<RecallEntry> recalls;
};

// Medians and recalls over pose errors at the given (translation, rotation)
// threshold pairs. Throws EmptyInput.
EvaluationSummary evaluate_errors(
    const std::vector<PoseErrors>& errors,
    const std::vector<std::pair<double, double>>& thresholds);

// Re-derives errors from result records against the dataset ground truth.
EvaluationSummary evaluate_results(
    const std::vector<LocalizationResult>& results, const SceneDataset& dataset,
    const std::vector<std::pair<double, double>>& thresholds);

// Fixed-format metrics table (the cmd_evaluate output).
std::string format_metrics(const EvaluationSummary& summary);

// Parses "0.05:5,0.0866:5"-style threshold lists.
std::vector<std::pair<double, double>> parse_thresholds(const std::string& s);

// results.jsonl helpers (append-only line-delimited records).
std::vector<LocalizationResult> load_results(const std::string& path);
void append_result(const LocalizationResult& result, const std::string& path);

}  // namespace nerfloc
