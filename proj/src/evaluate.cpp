#include "nerfloc/evaluate.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace nerfloc {

EvaluationSummary evaluate_errors(
    const std::vector<PoseErrors>& errors,
    const std::vector<std::pair<double, double>>& thresholds) {
  if (errors.empty()) throw EmptyInput("no errors to evaluate");
  EvaluationSummary summary;
  summary.count = static_cast<int>(errors.size());
  std::vector<double> ts, rs;
  for (const auto& e : errors) {
    ts.push_back(e.translation);
    rs.push_back(e.rotation_deg);
  }
  summary.median_translation = median(ts);
  summary.median_rotation_deg = median(rs);
  for (const auto& [t, r] : thresholds) {
    summary.recalls.push_back({t, r, recall(errors, t, r)});
  }
  return summary;
}

EvaluationSummary evaluate_results(
    const std::vector<LocalizationResult>& results, const SceneDataset& dataset,
    const std::vector<std::pair<double, double>>& thresholds) {
  std::vector<PoseErrors> errors;
  for (const auto& r : results) {
    const auto& item = dataset.item(r.query_id);
    errors.push_back(pose_errors(r.pose, item.pose));
  }
  return evaluate_errors(errors, thresholds);
}

std::string format_metrics(const EvaluationSummary& summary) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "queries %d\n", summary.count);
  out << line;
  std::snprintf(line, sizeof(line), "median_translation %.6f\n",
                summary.median_translation);
  out << line;
  std::snprintf(line, sizeof(line), "median_rotation_deg %.6f\n",
                summary.median_rotation_deg);
  out << line;
  for (const auto& r : summary.recalls) {
    std::snprintf(line, sizeof(line), "recall@(%.4g,%.4g) %.6f\n", r.t_thresh,
                  r.r_thresh, r.value);
    out << line;
  }
  return out.str();
}

std::vector<std::pair<double, double>> parse_thresholds(const std::string& s) {
  std::vector<std::pair<double, double>> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw std::invalid_argument("threshold must be t:r, got " + item);
    }
    out.emplace_back(std::stod(item.substr(0, colon)),
                     std::stod(item.substr(colon + 1)));
  }
  return out;
}

std::vector<LocalizationResult> load_results(const std::string& path) {
  std::vector<LocalizationResult> out;
  std::ifstream f(path);
  std::string line;
  while (f && std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(LocalizationResult::from_json(nlohmann::json::parse(line)));
  }
  return out;
}

void append_result(const LocalizationResult& result, const std::string& path) {
  std::ofstream f(path, std::ios::app);
  f << result.to_json().dump() << "\n";
}

}  // namespace nerfloc
