#include "facmap/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

namespace facmap::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct Raw {
  int width = 0;
  int height = 0;
  int channels = 0;
  int depth = 8;
  std::vector<std::uint16_t> samples;
};

Raw read_raw(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw DataError("cannot open image " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DataError("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed for " + path.string());
  }
  Raw raw;
  std::vector<png_bytep> rows;
  std::vector<png_byte> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);
  png_read_update_info(png, info);
  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.channels = png_get_channels(png, info);
  raw.depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(raw.height));
  rows.resize(static_cast<std::size_t>(raw.height));
  for (int y = 0; y < raw.height; ++y) rows[y] = buffer.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  const std::size_t n = static_cast<std::size_t>(raw.width) * raw.height * raw.channels;
  raw.samples.resize(n);
  if (raw.depth == 16) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint16_t v;
      std::memcpy(&v, buffer.data() + 2 * i, 2);
      raw.samples[i] = v;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) raw.samples[i] = buffer[i];
  }
  return raw;
}

void write_raw(const std::filesystem::path& path, int width, int height, int channels, int depth,
               const std::vector<std::uint16_t>& samples) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw DataError("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed for " + path.string());
  }
  const std::size_t bytes = depth / 8;
  std::vector<png_byte> buffer(samples.size() * bytes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (bytes == 2) {
      buffer[2 * i] = static_cast<png_byte>(samples[i] >> 8);  // PNG is big-endian
      buffer[2 * i + 1] = static_cast<png_byte>(samples[i] & 0xff);
    } else {
      buffer[i] = static_cast<png_byte>(samples[i]);
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  const std::size_t stride = static_cast<std::size_t>(width) * channels * bytes;
  for (int y = 0; y < height; ++y) rows[y] = buffer.data() + stride * y;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing PNG " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, width, height, depth, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Image read_png_rgb(const std::filesystem::path& path) {
  const Raw raw = read_raw(path);
  const double max = raw.depth == 16 ? 65535.0 : 255.0;
  Image img(raw.width, raw.height, 3);
  const bool gray = raw.channels <= 2;
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * raw.width + x) * raw.channels;
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = raw.samples[base + (gray ? 0 : c)] / max;
    }
  return img;
}

Image read_png_depth(const std::filesystem::path& path, double scale) {
  const Raw raw = read_raw(path);
  if (raw.channels != 1 || raw.depth != 16) throw DataError("depth image must be 16-bit single channel: " + path.string());
  Image img(raw.width, raw.height, 1);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = raw.samples[i] / scale;
  return img;
}

void write_png_rgb(const std::filesystem::path& path, const Image& rgb) {
  if (rgb.channels != 3) throw DataError("write_png_rgb: expected 3 channels");
  std::vector<std::uint16_t> s(rgb.data.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = static_cast<std::uint16_t>(std::lround(std::clamp(rgb.data[i], 0.0, 1.0) * 255.0));
  write_raw(path, rgb.width, rgb.height, 3, 8, s);
}

void write_png_depth(const std::filesystem::path& path, const Image& depth, double scale) {
  if (depth.channels != 1) throw DataError("write_png_depth: expected 1 channel");
  std::vector<std::uint16_t> s(depth.data.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double v = std::isfinite(depth.data[i]) ? depth.data[i] * scale : 0.0;
    s[i] = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 65535.0)));
  }
  write_raw(path, depth.width, depth.height, 1, 16, s);
}

}  // namespace facmap::io
