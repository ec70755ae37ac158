#include "mixri/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <vector>

namespace mixri {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void io_fail(const std::string& what, const std::string& path) {
  throw std::runtime_error(what + ": " + path);
}

void write_png(const std::string& path, int width, int height, int channels,
               const std::vector<uint8_t>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) io_fail("cannot open for writing", path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    io_fail("png write failed", path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y)
    rows[static_cast<size_t>(y)] =
        const_cast<png_bytep>(bytes.data() + static_cast<size_t>(y) * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void read_png(const std::string& path, int& width, int& height, int want_channels,
              std::vector<uint8_t>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) io_fail("cannot open", path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    io_fail("png read failed", path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (want_channels == 3) {
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
      png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
  } else {
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
        color == PNG_COLOR_TYPE_PALETTE)
      png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);
  bytes.assign(static_cast<size_t>(width) * height * want_channels, 0);
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y)
    rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * width * want_channels;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
}

}  // namespace

void write_png_rgb(const std::string& path, const ImageRGB& img) {
  std::vector<uint8_t> bytes(static_cast<size_t>(img.width) * img.height * 3);
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_u8(img.data[i]);
  write_png(path, img.width, img.height, 3, bytes);
}

ImageRGB read_png_rgb(const std::string& path) {
  int w, h;
  std::vector<uint8_t> bytes;
  read_png(path, w, h, 3, bytes);
  ImageRGB img = ImageRGB::make(w, h);
  for (size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

void write_png_gray(const std::string& path, const MaskImage& mask) {
  std::vector<uint8_t> bytes(mask.data.size());
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
  write_png(path, mask.width, mask.height, 1, bytes);
}

MaskImage read_png_gray(const std::string& path) {
  int w, h;
  std::vector<uint8_t> bytes;
  read_png(path, w, h, 1, bytes);
  MaskImage mask = MaskImage::make(w, h);
  for (size_t i = 0; i < bytes.size(); ++i) mask.data[i] = bytes[i] >= 128 ? 1 : 0;
  return mask;
}

void write_depth_bin(const std::string& path, const DepthMap& depth) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) io_fail("cannot open for writing", path);
  const uint32_t w = static_cast<uint32_t>(depth.width);
  const uint32_t h = static_cast<uint32_t>(depth.height);
  if (std::fwrite(&w, 4, 1, fp.get()) != 1 || std::fwrite(&h, 4, 1, fp.get()) != 1 ||
      std::fwrite(depth.values.data(), 4, depth.values.size(), fp.get()) != depth.values.size())
    io_fail("short write", path);
}

DepthMap read_depth_bin(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) io_fail("cannot open", path);
  uint32_t w = 0, h = 0;
  if (std::fread(&w, 4, 1, fp.get()) != 1 || std::fread(&h, 4, 1, fp.get()) != 1)
    io_fail("truncated depth header", path);
  DepthMap d = DepthMap::make(static_cast<int>(w), static_cast<int>(h));
  if (std::fread(d.values.data(), 4, d.values.size(), fp.get()) != d.values.size())
    io_fail("truncated depth data", path);
  return d;
}

}  // namespace mixri
