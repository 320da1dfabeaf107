#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nerfloc {

// Row-major float image with values in [0, 1]. Pixel (x, y) covers the unit
// square [x, x+1) x [y, y+1); its center sits at continuous coords
// (x + 0.5, y + 0.5). All sampling helpers follow this convention.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;  // size = width * height * channels

  Image() = default;
  Image(int w, int h, int c, float fill = 0.f)
      : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, fill) {}

  float& at(int x, int y, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  float at(int x, int y, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  bool empty() const { return data.empty(); }

  // Bilinear sample at continuous coords; clamps at borders.
  float sample(double u, double v, int c) const;

  // Area-ignorant bilinear resize to (w, h).
  Image resized(int w, int h) const;

  // Snaps every value to the nearest 8-bit level so that a PNG save/load
  // round-trip is lossless.
  void quantize8();
};

struct PngError : std::runtime_error {
  explicit PngError(const std::string& m) : std::runtime_error(m) {}
};

// 8-bit PNG IO (gray, gray+alpha, RGB, RGBA).
Image load_png(const std::string& path);
void save_png(const Image& img, const std::string& path);

}  // namespace nerfloc
