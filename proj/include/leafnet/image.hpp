#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "tensor.hpp"

namespace leafnet {

/// 8-bit interleaved RGB image, row-major.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels; // height * width * 3

  Image() = default;
  Image(std::size_t h, std::size_t w, std::uint8_t value = 0) : height(h), width(w), pixels(h * w * 3, value) {}

  std::uint8_t &at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  friend bool operator==(const Image &, const Image &) = default;
};

namespace detail {

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

extern "C" inline void leafnet_jpeg_error_exit(j_common_ptr info) {
  auto *err = reinterpret_cast<JpegErrorManager *>(info->err);
  (*info->err->format_message)(info, err->message);
  std::longjmp(err->jump, 1);
}

// Warnings (e.g. premature end of data) are tolerated silently.
extern "C" inline void leafnet_jpeg_output_message(j_common_ptr) {}

struct FileCloser {
  void operator()(std::FILE *f) const noexcept {
    if (f)
      std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Returns an empty string on success, the libjpeg message otherwise. Kept free
// of non-trivial locals between setjmp and the libjpeg calls.
inline std::string decode_jpeg_into(std::FILE *file, Image &out, bool header_only) {
  jpeg_decompress_struct info;
  JpegErrorManager err;
  info.err = jpeg_std_error(&err.base);
  err.base.error_exit = leafnet_jpeg_error_exit;
  err.base.output_message = leafnet_jpeg_output_message;
  err.message[0] = '\0';
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&info);
    return err.message[0] ? err.message : "JPEG decode failed";
  }
  jpeg_create_decompress(&info);
  jpeg_stdio_src(&info, file);
  jpeg_read_header(&info, TRUE);
  if (header_only) {
    jpeg_destroy_decompress(&info);
    return {};
  }
  info.out_color_space = JCS_RGB;
  jpeg_start_decompress(&info);
  if (info.output_components != 3) {
    jpeg_destroy_decompress(&info);
    return "unsupported JPEG color layout";
  }
  out.height = info.output_height;
  out.width = info.output_width;
  out.pixels.assign(out.height * out.width * 3, 0);
  while (info.output_scanline < info.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(info.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&info, &row, 1);
  }
  jpeg_finish_decompress(&info);
  jpeg_destroy_decompress(&info);
  return {};
}

inline FilePtr open_file(const std::filesystem::path &path, const char *mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f)
    throw IoError("cannot open " + path.string());
  return f;
}

} // namespace detail

/// Decodes a JPEG file to RGB (grayscale sources are expanded by libjpeg).
inline Image decode_jpeg(const std::filesystem::path &path) {
  auto f = detail::open_file(path, "rb");
  Image img;
  const std::string msg = detail::decode_jpeg_into(f.get(), img, false);
  if (!msg.empty())
    throw DecodeError(path.string() + ": " + msg);
  return img;
}

/// True when the file carries a parseable JPEG header.
inline bool probe_jpeg(const std::filesystem::path &path) {
  detail::FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f)
    return false;
  Image unused;
  return detail::decode_jpeg_into(f.get(), unused, true).empty();
}

inline void encode_jpeg(const Image &img, const std::filesystem::path &path, int quality = 95) {
  auto f = detail::open_file(path, "wb");
  jpeg_compress_struct info;
  detail::JpegErrorManager err;
  info.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::leafnet_jpeg_error_exit;
  err.message[0] = '\0';
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&info);
    throw IoError(path.string() + ": JPEG encode failed: " + err.message);
  }
  jpeg_create_compress(&info);
  jpeg_stdio_dest(&info, f.get());
  info.image_width = static_cast<JDIMENSION>(img.width);
  info.image_height = static_cast<JDIMENSION>(img.height);
  info.input_components = 3;
  info.in_color_space = JCS_RGB;
  jpeg_set_defaults(&info);
  jpeg_set_quality(&info, quality, TRUE);
  jpeg_start_compress(&info, TRUE);
  while (info.next_scanline < info.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(img.pixels.data() + static_cast<std::size_t>(info.next_scanline) * img.width * 3);
    jpeg_write_scanlines(&info, &row, 1);
  }
  jpeg_finish_compress(&info);
  jpeg_destroy_compress(&info);
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

/// Bilinear resampling on pixel centers: output pixel x samples source
/// coordinate (x + 0.5) * in / out - 0.5, clamped to the image. Equal sizes
/// return the input unchanged.
inline Image resize_bilinear(const Image &src, std::size_t out_h, std::size_t out_w) {
  if (src.height == 0 || src.width == 0 || out_h == 0 || out_w == 0)
    throw ArgumentError("resize of an empty image");
  if (src.height == out_h && src.width == out_w)
    return src;
  Image dst(out_h, out_w);
  const double sy = static_cast<double>(src.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(src.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bottom = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = to_byte(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return dst;
}

inline Image decode_resize(const std::filesystem::path &path, std::size_t height = 256, std::size_t width = 256) {
  return resize_bilinear(decode_jpeg(path), height, width);
}

/// Bytes scaled by 1/255 into a (1, h, w, 3) tensor.
template <typename T> Tensor<T> normalize(const Image &img) {
  Tensor<T> t(Shape{1, img.height, img.width, 3});
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    t[i] = static_cast<T>(img.pixels[i]) / T(255);
  return t;
}

/// Writes a normalized image into batch slot `slot` of an (n, h, w, 3) tensor.
template <typename T> void normalize_into(const Image &img, Tensor<T> &batch, std::size_t slot) {
  T *dst = batch.data() + slot * img.pixels.size();
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    dst[i] = static_cast<T>(img.pixels[i]) / T(255);
}

} // namespace leafnet
