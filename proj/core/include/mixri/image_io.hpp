#pragma once

#include <string>

#include "mixri/image.hpp"

namespace mixri {

void write_png_rgb(const std::string& path, const ImageRGB& img);
ImageRGB read_png_rgb(const std::string& path);

void write_png_gray(const std::string& path, const MaskImage& mask);  // 0 / 255
MaskImage read_png_gray(const std::string& path);                     // nonzero -> 1

// Raw depth: u32 width, u32 height, then height*width little-endian f32
// meters, row-major.
void write_depth_bin(const std::string& path, const DepthMap& depth);
DepthMap read_depth_bin(const std::string& path);

/// 8-bit quantization helpers shared by the png writer and tests.
inline uint8_t to_u8(float v) {
  const float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return static_cast<uint8_t>(c * 255.0f + 0.5f);
}

}  // namespace mixri
