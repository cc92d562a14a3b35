#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "image.hpp"
#include "rng.hpp"

namespace leafnet {

/// Random flips and rotation applied to training images.
///
/// `rotation_factor` is a fraction of a full turn: the angle is drawn
/// uniformly from [-factor * 2pi, +factor * 2pi].
struct AugmentConfig {
  bool enabled = true;
  double horizontal_flip = 0.5;
  double vertical_flip = 0.5;
  double rotation_factor = 0.2;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(horizontal_flip) || !prob(vertical_flip))
      throw ArgumentError("flip probabilities must lie in [0,1]");
    if (!(rotation_factor >= 0.0))
      throw ArgumentError("rotation factor must be >= 0");
  }
};

inline Image flip_horizontal(Image img) {
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width / 2; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        std::swap(img.at(y, x, c), img.at(y, img.width - 1 - x, c));
  return img;
}

inline Image flip_vertical(Image img) {
  const std::size_t row = img.width * 3;
  for (std::size_t y = 0; y < img.height / 2; ++y)
    std::swap_ranges(img.pixels.begin() + static_cast<std::ptrdiff_t>(y * row),
                     img.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * row),
                     img.pixels.begin() + static_cast<std::ptrdiff_t>((img.height - 1 - y) * row));
  return img;
}

/// Mirror index into [0, n) with the edge pixel repeated: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
inline std::size_t reflect_index(long i, std::size_t n) {
  const long period = 2 * static_cast<long>(n);
  long m = i % period;
  if (m < 0)
    m += period;
  return static_cast<std::size_t>(m < static_cast<long>(n) ? m : period - 1 - m);
}

/// Rotates counter-clockwise by `radians` about the image center using
/// inverse-mapped bilinear sampling; samples outside the frame are reflected.
inline Image rotate(const Image &src, double radians) {
  Image dst(src.height, src.width);
  const double cy = (static_cast<double>(src.height) - 1) / 2, cx = (static_cast<double>(src.width) - 1) / 2;
  const double cs = std::cos(radians), sn = std::sin(radians);
  for (std::size_t y = 0; y < src.height; ++y) {
    for (std::size_t x = 0; x < src.width; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      // Inverse rotation (image rows grow downward).
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double wx = sx - fx, wy = sy - fy;
      const std::size_t x0 = reflect_index(static_cast<long>(fx), src.width);
      const std::size_t x1 = reflect_index(static_cast<long>(fx) + 1, src.width);
      const std::size_t y0 = reflect_index(static_cast<long>(fy), src.height);
      const std::size_t y1 = reflect_index(static_cast<long>(fy) + 1, src.height);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bottom = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = to_byte(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return dst;
}

/// Applies horizontal flip, vertical flip, then rotation. Three uniforms are
/// always drawn in that order so the stream position does not depend on the
/// outcomes.
inline Image augment(Image img, Xoshiro256 &rng, const AugmentConfig &config) {
  if (!config.enabled)
    return img;
  const double u_h = rng.uniform(), u_v = rng.uniform(), u_r = rng.uniform();
  if (u_h < config.horizontal_flip)
    img = flip_horizontal(std::move(img));
  if (u_v < config.vertical_flip)
    img = flip_vertical(std::move(img));
  if (config.rotation_factor > 0) {
    const double angle = (2 * u_r - 1) * config.rotation_factor * 2 * std::numbers::pi;
    img = rotate(img, angle);
  }
  return img;
}

} // namespace leafnet
