#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "nerfloc/image.hpp"

namespace nerfloc {

struct PlotSeries {
  std::vector<double> values;  // y per integer x
  Eigen::Vector3d color = {0.2, 0.4, 0.8};
};

// Minimal line chart: white canvas, axes, one polyline per series.
Image plot_series(const std::vector<PlotSeries>& series, int width = 640,
                  int height = 480);

void save_plot(const std::vector<PlotSeries>& series, const std::string& path);

}  // namespace nerfloc
