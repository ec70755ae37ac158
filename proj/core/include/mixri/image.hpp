#pragma once

#include <cstdint>
#include <vector>

namespace mixri {

/// RGB image, row-major HWC, values in [0,1].
struct ImageRGB {
  int width = 0, height = 0;
  std::vector<float> data;  // height*width*3

  static ImageRGB make(int w, int h) { return {w, h, std::vector<float>(static_cast<size_t>(w) * h * 3, 0.f)}; }
  float* px(int x, int y) { return data.data() + (static_cast<size_t>(y) * width + x) * 3; }
  const float* px(int x, int y) const { return data.data() + (static_cast<size_t>(y) * width + x) * 3; }
};

/// Binary mask; nonzero = inside.
struct MaskImage {
  int width = 0, height = 0;
  std::vector<uint8_t> data;

  static MaskImage make(int w, int h) { return {w, h, std::vector<uint8_t>(static_cast<size_t>(w) * h, 0)}; }
  uint8_t at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
  void set(int x, int y, uint8_t v) { data[static_cast<size_t>(y) * width + x] = v; }
  int64_t count() const {
    int64_t c = 0;
    for (uint8_t v : data) c += v ? 1 : 0;
    return c;
  }
};

/// Per-pixel depth in meters; 0 encodes no surface.
struct DepthMap {
  int width = 0, height = 0;
  std::vector<float> values;

  static DepthMap make(int w, int h) { return {w, h, std::vector<float>(static_cast<size_t>(w) * h, 0.f)}; }
  float at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
  void set(int x, int y, float v) { values[static_cast<size_t>(y) * width + x] = v; }
};

}  // namespace mixri
