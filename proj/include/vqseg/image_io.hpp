#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "vqseg/errors.hpp"

namespace vqseg {

/// Interleaved 8-bit image, row-major (h, w, channels); channels is 1 or 3.
struct Image8 {
  int h = 0, w = 0, channels = 0;
  std::vector<uint8_t> data;

  uint8_t& at(int y, int x, int c) {
    return data[size_t((int64_t(y) * w + x) * channels + c)];
  }
  uint8_t at(int y, int x, int c) const {
    return data[size_t((int64_t(y) * w + x) * channels + c)];
  }
};

/// Reads a PNG as 8-bit grayscale or RGB (palette images are expanded,
/// 16-bit depth is stripped, alpha is dropped).
inline Image8 read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DataError("cannot open " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw DataError("libpng init failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("failed to decode " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);

  Image8 img;
  img.h = int(png_get_image_height(png, info));
  img.w = int(png_get_image_width(png, info));
  img.channels = int(png_get_channels(png, info));
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError(path + ": unsupported channel count " +
                    std::to_string(img.channels));
  }
  img.data.resize(size_t(img.h) * img.w * img.channels);
  std::vector<png_bytep> rows(size_t(img.h));
  for (int y = 0; y < img.h; ++y)
    rows[size_t(y)] = img.data.data() + size_t(y) * img.w * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

inline void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ConfigError("write_png: channels must be 1 or 3");
  if (img.h < 1 || img.w < 1 ||
      img.data.size() != size_t(img.h) * img.w * img.channels)
    throw ConfigError("write_png: inconsistent image buffer");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("cannot create " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw DataError("libpng init failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("failed to write " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(img.w), png_uint_32(img.h), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(size_t(img.h));
  for (int y = 0; y < img.h; ++y)
    rows[size_t(y)] = const_cast<png_bytep>(
        img.data.data() + size_t(y) * img.w * img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace vqseg
