#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace leafnet {

/// Extents of a dense array, 1 to 4 axes. Image tensors use (n, h, w, c).
///
/// A default-constructed Shape has rank 0 and zero elements; it only marks an
/// absent tensor (e.g. the parameters of a layer that has none).
class Shape {
public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;

  Shape(std::initializer_list<std::size_t> dims) { assign(dims.begin(), dims.size()); }

  explicit Shape(std::span<const std::size_t> dims) { assign(dims.data(), dims.size()); }

  std::size_t rank() const noexcept { return rank_; }
  std::size_t operator[](std::size_t axis) const noexcept { return dims_[axis]; }
  std::span<const std::size_t> dims() const noexcept { return {dims_.data(), rank_}; }
  std::size_t elements() const noexcept { return elements_; }

  friend bool operator==(const Shape &a, const Shape &b) noexcept {
    if (a.rank_ != b.rank_)
      return false;
    return std::equal(a.dims_.begin(), a.dims_.begin() + a.rank_, b.dims_.begin());
  }

  std::string to_string() const {
    std::string s = "(";
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i)
        s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

private:
  void assign(const std::size_t *dims, std::size_t rank) {
    if (rank == 0 || rank > kMaxRank)
      throw ShapeError("shape rank must be between 1 and 4, got " + std::to_string(rank));
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
      if (dims[i] == 0)
        throw ShapeError("shape extents must be positive");
      if (count > std::numeric_limits<std::uint64_t>::max() / dims[i])
        throw ShapeError("shape element count overflows 64 bits");
      count *= dims[i];
      dims_[i] = dims[i];
    }
    rank_ = rank;
    elements_ = count;
  }

  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
  std::size_t elements_ = 0;
};

/// Dense row-major array with the last axis fastest.
template <typename T> class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor holds float or double");

public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T value = T(0))
      : shape_(std::move(shape)), data_(shape_.elements(), value) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.elements())
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.to_string());
  }

  const Shape &shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T *data() noexcept { return data_.data(); }
  const T *data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T &operator[](std::size_t i) noexcept { return data_[i]; }
  const T &operator[](std::size_t i) const noexcept { return data_[i]; }

  T &at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T &at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }

  T &at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) noexcept {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }
  const T &at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const noexcept {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }

  /// Same data under a new shape with an equal element count.
  Tensor reshaped(Shape shape) const & {
    Tensor out = *this;
    return std::move(out).reshaped(std::move(shape));
  }
  Tensor reshaped(Shape shape) && {
    if (shape.elements() != data_.size())
      throw ShapeError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
    shape_ = std::move(shape);
    return std::move(*this);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor &a, const Tensor &b) noexcept {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T> Tensor<T> fill(const Shape &shape, T value) {
  if (shape.rank() == 0)
    throw ShapeError("fill requires a non-empty shape");
  return Tensor<T>(shape, value);
}

namespace detail {

template <typename T> void require_same_shape(const Tensor<T> &a, const Tensor<T> &b, const char *op) {
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().to_string() + " vs " +
                     b.shape().to_string());
}

template <typename T, typename F> Tensor<T> zip(const Tensor<T> &a, const Tensor<T> &b, const char *op, F f) {
  require_same_shape(a, b, op);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = f(a[i], b[i]);
  return out;
}

} // namespace detail

template <typename T> Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b) {
  return detail::zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <typename T> Tensor<T> sub(const Tensor<T> &a, const Tensor<T> &b) {
  return detail::zip(a, b, "sub", [](T x, T y) { return x - y; });
}

template <typename T> Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b) {
  return detail::zip(a, b, "mul", [](T x, T y) { return x * y; });
}

template <typename T> Tensor<T> scale(const Tensor<T> &a, T k) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = a[i] * k;
  return out;
}

template <typename T, typename F> Tensor<T> map(const Tensor<T> &a, F f) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = static_cast<T>(f(a[i]));
  return out;
}

namespace detail {

#if defined(__GNUC__)
#define LEAFNET_HAVE_VECTOR_EXT 1
typedef float f32x16 __attribute__((vector_size(64)));
typedef double f64x8 __attribute__((vector_size(64)));
template <typename T> struct simd;
template <> struct simd<float> {
  using type = f32x16;
};
template <> struct simd<double> {
  using type = f64x8;
};
#endif

// Register tile of the GEMM kernel: up to kRows x (kVectors * 64 bytes) of
// outputs stay in registers while the inner dimension is swept in ascending
// order.
inline constexpr std::size_t kRows = 6;
inline constexpr std::size_t kVectors = 2;
inline constexpr std::size_t kDepthBlock = 256;
template <typename T> constexpr std::size_t lanes() { return 64 / sizeof(T); }
template <typename T> constexpr std::size_t tile_cols() { return kVectors * lanes<T>(); }

#ifdef LEAFNET_HAVE_VECTOR_EXT
template <typename T, std::size_t MR>
inline void gemm_tile(std::size_t k, const T *a, std::size_t a_rs, std::size_t a_cs, const T *b,
                      std::size_t ldb, T *c, std::size_t ldc, bool accumulate) {
  using V = typename simd<T>::type;
  constexpr std::size_t L = lanes<T>();
  V acc[MR][kVectors];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t v = 0; v < kVectors; ++v) {
      if (accumulate)
        std::memcpy(&acc[r][v], c + r * ldc + v * L, sizeof(V));
      else
        acc[r][v] = V{};
    }
  for (std::size_t t = 0; t < k; ++t) {
    V bv[kVectors];
    for (std::size_t v = 0; v < kVectors; ++v)
      std::memcpy(&bv[v], b + t * ldb + v * L, sizeof(V));
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[r * a_rs + t * a_cs];
      for (std::size_t v = 0; v < kVectors; ++v)
        acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t v = 0; v < kVectors; ++v)
      std::memcpy(c + r * ldc + v * L, &acc[r][v], sizeof(V));
}
#endif

template <typename T>
inline void gemm_edge(std::size_t mr, std::size_t nr, std::size_t k, const T *a, std::size_t a_rs,
                      std::size_t a_cs, const T *b, std::size_t ldb, T *c, std::size_t ldc,
                      bool accumulate) {
  for (std::size_t r = 0; r < mr; ++r) {
    for (std::size_t j = 0; j < nr; ++j) {
      T acc = accumulate ? c[r * ldc + j] : T(0);
      for (std::size_t t = 0; t < k; ++t)
        acc += a[r * a_rs + t * a_cs] * b[t * ldb + j];
      c[r * ldc + j] = acc;
    }
  }
}

template <typename T>
inline void gemm_block(std::size_t mr, std::size_t nr, std::size_t k, const T *a, std::size_t a_rs,
                       std::size_t a_cs, const T *b, std::size_t ldb, T *c, std::size_t ldc,
                       bool accumulate) {
#ifdef LEAFNET_HAVE_VECTOR_EXT
  if (nr == tile_cols<T>()) {
    switch (mr) {
    case 6: return gemm_tile<T, 6>(k, a, a_rs, a_cs, b, ldb, c, ldc, accumulate);
    case 5: return gemm_tile<T, 5>(k, a, a_rs, a_cs, b, ldb, c, ldc, accumulate);
    case 4: return gemm_tile<T, 4>(k, a, a_rs, a_cs, b, ldb, c, ldc, accumulate);
    case 3: return gemm_tile<T, 3>(k, a, a_rs, a_cs, b, ldb, c, ldc, accumulate);
    case 2: return gemm_tile<T, 2>(k, a, a_rs, a_cs, b, ldb, c, ldc, accumulate);
    case 1: return gemm_tile<T, 1>(k, a, a_rs, a_cs, b, ldb, c, ldc, accumulate);
    default: break;
    }
  }
#endif
  gemm_edge(mr, nr, k, a, a_rs, a_cs, b, ldb, c, ldc, accumulate);
}

/// C(m x n) = [C +] A(m x k) * B(k x n).
///
/// A is addressed as a[i * a_rs + t * a_cs], so a transposed operand is passed
/// by swapping strides. B and C are row-major with leading dimensions ldb and
/// ldc. Every output accumulates its k products in ascending t order
/// regardless of blocking, so results are bitwise reproducible.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T *a, std::size_t a_rs, std::size_t a_cs,
          const T *b, std::size_t ldb, T *c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t NR = tile_cols<T>();
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < m; ++i)
        std::fill_n(c + i * ldc, n, T(0));
    return;
  }
  for (std::size_t t0 = 0; t0 < k; t0 += kDepthBlock) {
    const std::size_t kb = std::min(kDepthBlock, k - t0);
    const bool acc = accumulate || t0 > 0;
    const T *ab = a + t0 * a_cs;
    const T *bb = b + t0 * ldb;
    for (std::size_t i = 0; i < m; i += kRows) {
      const std::size_t mr = std::min(kRows, m - i);
      for (std::size_t j = 0; j < n; j += NR) {
        const std::size_t nr = std::min(NR, n - j);
        gemm_block(mr, nr, kb, ab + i * a_rs, a_rs, a_cs, bb + j, ldb, c + i * ldc + j, ldc, acc);
      }
    }
  }
}

} // namespace detail

/// Matrix product of two rank-2 tensors.
template <typename T> Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2)
    throw ShapeError("matmul expects two matrices, got " + a.shape().to_string() + " and " +
                     b.shape().to_string());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul inner extents differ: " + a.shape().to_string() + " x " +
                     b.shape().to_string());
  Tensor<T> out(Shape{m, n});
  detail::gemm(m, n, k, a.data(), k, std::size_t{1}, b.data(), n, out.data(), n, false);
  return out;
}

/// Index of the largest element; ties resolve to the lowest index.
template <typename T> std::size_t argmax(std::span<const T> v) {
  if (v.empty())
    throw ArgumentError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best])
      best = i;
  return best;
}

template <typename T> std::size_t argmax(const std::vector<T> &v) {
  return argmax(std::span<const T>(v));
}

} // namespace leafnet
