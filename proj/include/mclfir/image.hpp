#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mclfir {

/// RGB image, interleaved row-major, values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;  // height*width*3

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  bool empty() const { return pixels.empty(); }
};

/// 8-bit RGB PNG round trip. Writing quantizes with round(v*255) after
/// clamping to [0,1]; reading maps back to v/255.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

/// Grayscale variant used for attention-map exports; values in [0,1].
void write_png_gray(const std::string& path, int height, int width,
                    const std::vector<double>& values);

}  // namespace mclfir
