#pragma once

// 16-bit grayscale PNG input/output. 65535 maps to intensity 1.

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "neas/error.hpp"
#include "neas/phantom.hpp"

namespace neas {

/// Raw 16-bit samples, row-major.
struct Image16 {
  int width = 0, height = 0;
  std::vector<std::uint16_t> pixels;

  friend bool operator==(const Image16&, const Image16&) = default;
};

inline std::uint16_t quantize16(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return static_cast<std::uint16_t>(std::lround(c * 65535.0));
}

inline Image16 to_image16(const Image& img) {
  Image16 out{static_cast<int>(img.cols()), static_cast<int>(img.rows()), {}};
  out.pixels.resize(static_cast<std::size_t>(img.size()));
  for (Index i = 0; i < img.size(); ++i) out.pixels[static_cast<std::size_t>(i)] = quantize16(img.data()[i]);
  return out;
}

inline Image to_image(const Image16& img) {
  Image out(img.height, img.width);
  for (Index i = 0; i < out.size(); ++i) out.data()[i] = img.pixels[static_cast<std::size_t>(i)] / 65535.0;
  return out;
}

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write_png16(const std::filesystem::path& path, const Image16& img) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError(concat("cannot open '", path.string(), "' for writing"));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(concat("libpng failed while writing '", path.string(), "'"));
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 2);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const std::uint16_t v = img.pixels[static_cast<std::size_t>(y) * img.width + x];
      row[2 * static_cast<std::size_t>(x)] = static_cast<png_byte>(v >> 8);  // PNG is big-endian
      row[2 * static_cast<std::size_t>(x) + 1] = static_cast<png_byte>(v & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads a grayscale PNG. 8-bit files are widened so that 255 maps to 65535.
inline Image16 read_png16(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError(concat("cannot open '", path.string(), "'"));
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError(concat("'", path.string(), "' is not a PNG file"));
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(concat("libpng failed while reading '", path.string(), "'"));
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(concat("'", path.string(), "': expected a grayscale PNG"));
  }
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  Image16 img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  const int out_depth = png_get_bit_depth(png, info);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < img.width; ++x) {
      std::uint16_t v = 0;
      if (out_depth == 16) {
        v = static_cast<std::uint16_t>((row[2 * static_cast<std::size_t>(x)] << 8) | row[2 * static_cast<std::size_t>(x) + 1]);
      } else {
        v = static_cast<std::uint16_t>(row[static_cast<std::size_t>(x)] * 257);
      }
      img.pixels[static_cast<std::size_t>(y) * img.width + x] = v;
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) { write_png16(path, to_image16(img)); }
inline Image read_png(const std::filesystem::path& path) { return to_image(read_png16(path)); }

}  // namespace neas
