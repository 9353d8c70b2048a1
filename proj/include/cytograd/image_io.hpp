#pragma once

#include <array>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "cytograd/error.hpp"

namespace cytograd {

/// 8-bit interleaved RGB raster.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel
};

/// 8-bit single-channel raster holding palette indices or gray levels.
struct IndexImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

inline RgbImage read_png_rgb(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out{image.width, image.height, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(image))};
  png_color white{255, 255, 255};
  if (!png_image_finish_read(&image, &white, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return out;
}

inline void write_png_rgb(const std::filesystem::path& path, const RgbImage& img) {
  if (img.pixels.size() != img.width * img.height * 3) {
    throw IoError("RGB buffer size does not match " + std::to_string(img.width) + "x" +
                  std::to_string(img.height));
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

/// Reads raw palette indices (palette PNG) or gray levels (8-bit or lower
/// gray PNG) without color conversion.
inline IndexImage read_png_indices(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path.string());
  IndexImage out;
  std::vector<png_bytep> rows;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialisation failed");
  }
  const char* failure = nullptr;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("cannot decode PNG mask " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) {
    failure = "mask PNG must be palette or grayscale";
  } else if (depth > 8) {
    failure = "mask PNG must have at most 8 bits per sample";
  }
  if (failure) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(std::string(failure) + ": " + path.string());
  }
  if (depth < 8) png_set_packing(png);
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.pixels.resize(out.width * out.height);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * out.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

/// Writes an 8-bit palette PNG.
inline void write_png_palette(const std::filesystem::path& path, const IndexImage& img,
                              const std::vector<std::array<std::uint8_t, 3>>& palette) {
  if (img.pixels.size() != img.width * img.height) throw IoError("index buffer size mismatch");
  if (palette.empty() || palette.size() > 256) throw IoError("palette must have 1..256 entries");
  for (std::uint8_t v : img.pixels) {
    if (v >= palette.size()) throw IoError("index " + std::to_string(v) + " outside palette");
  }
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  std::vector<png_color> colors(palette.size());
  for (std::size_t i = 0; i < palette.size(); ++i) colors[i] = {palette[i][0], palette[i][1], palette[i][2]};
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width);
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("cannot write PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_PLTE(png, info, colors.data(), static_cast<int>(colors.size()));
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace cytograd
