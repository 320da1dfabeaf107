#include "nerfloc/plot.hpp"

#include <algorithm>
#include <cmath>

namespace nerfloc {

namespace {

void draw_line(Image* img, double x0, double y0, double x1, double y1,
               const Eigen::Vector3d& color) {
  const int steps =
      std::max(2, static_cast<int>(std::hypot(x1 - x0, y1 - y0)) * 2);
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    if (x < 0 || x >= img->width || y < 0 || y >= img->height) continue;
    for (int c = 0; c < 3; ++c) {
      img->at(x, y, c) = static_cast<float>(color(c));
    }
  }
}

}  // namespace

Image plot_series(const std::vector<PlotSeries>& series, int width,
                  int height) {
  Image img(width, height, 3, 1.0f);
  const double margin = 40;
  const Eigen::Vector3d axis_color(0.1, 0.1, 0.1);
  draw_line(&img, margin, height - margin, width - margin / 2, height - margin,
            axis_color);
  draw_line(&img, margin, height - margin, margin, margin / 2, axis_color);

  double y_min = 0, y_max = 1e-12;
  size_t x_max = 1;
  for (const auto& s : series) {
    for (double v : s.values) y_max = std::max(y_max, v);
    x_max = std::max(x_max, s.values.size());
  }
  if (x_max < 2) x_max = 2;

  auto to_px = [&](double x, double y) {
    const double px = margin + x / (x_max - 1) * (width - 1.5 * margin);
    const double py = (height - margin) -
                      (y - y_min) / (y_max - y_min) * (height - 1.5 * margin);
    return std::make_pair(px, py);
  };
  for (const auto& s : series) {
    for (size_t i = 0; i + 1 < s.values.size(); ++i) {
      const auto [x0, y0] = to_px(static_cast<double>(i), s.values[i]);
      const auto [x1, y1] = to_px(static_cast<double>(i + 1), s.values[i + 1]);
      draw_line(&img, x0, y0, x1, y1, s.color);
    }
  }
  return img;
}

void save_plot(const std::vector<PlotSeries>& series, const std::string& path) {
  save_png(plot_series(series), path);
}

}  // namespace nerfloc
