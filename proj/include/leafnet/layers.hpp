#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace leafnet {

/// 3x3 convolution weights in (kh, kw, c_in, c_out) order plus one bias per
/// output channel. The kernel tensor viewed as a (9 * c_in, c_out) matrix is
/// exactly the right operand of the im2col product.
template <typename T> struct ConvLayer {
  Tensor<T> kernels;
  Tensor<T> bias;

  ConvLayer() = default;
  ConvLayer(std::size_t in_channels, std::size_t out_channels)
      : kernels(Shape{3, 3, in_channels, out_channels}), bias(Shape{out_channels}) {}

  std::size_t in_channels() const noexcept { return kernels.shape()[2]; }
  std::size_t out_channels() const noexcept { return kernels.shape()[3]; }
  std::size_t parameter_count() const noexcept { return kernels.size() + bias.size(); }
};

template <typename T> struct ConvGradients {
  Tensor<T> input; // empty when not requested
  Tensor<T> kernels;
  Tensor<T> bias;
};

/// Weights are (fan_in, fan_out): out = x * W + b.
template <typename T> struct DenseLayer {
  Tensor<T> weights;
  Tensor<T> bias;

  DenseLayer() = default;
  DenseLayer(std::size_t fan_in, std::size_t fan_out)
      : weights(Shape{fan_in, fan_out}), bias(Shape{fan_out}) {}

  std::size_t fan_in() const noexcept { return weights.shape()[0]; }
  std::size_t fan_out() const noexcept { return weights.shape()[1]; }
  std::size_t parameter_count() const noexcept { return weights.size() + bias.size(); }
};

template <typename T> struct DenseGradients {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

/// Winner of each 2x2 pooling window, stored as its row-major offset (0..3)
/// inside the window.
struct PoolIndices {
  Shape input_shape;
  std::vector<std::uint8_t> offsets;
};

template <typename T> struct PoolResult {
  Tensor<T> output;
  PoolIndices indices;
};

namespace detail {

inline void require_rank4(const Shape &s, const char *what) {
  if (s.rank() != 4)
    throw ShapeError(std::string(what) + " expects an (n,h,w,c) tensor, got " + s.to_string());
}

// Unrolls the 3x3 receptive fields of one (h, w, c) image into a
// ((h-2)*(w-2), 9*c) row-major matrix whose column order matches the kernel
// layout (kh, kw, c_in).
template <typename T>
void im2col3x3(const T *image, std::size_t h, std::size_t w, std::size_t c, T *col) {
  const std::size_t ho = h - 2, wo = w - 2, row = 9 * c;
  for (std::size_t i = 0; i < ho; ++i) {
    for (std::size_t j = 0; j < wo; ++j) {
      T *dst = col + (i * wo + j) * row;
      for (std::size_t di = 0; di < 3; ++di) {
        const T *src = image + ((i + di) * w + j) * c;
        std::memcpy(dst + di * 3 * c, src, 3 * c * sizeof(T));
      }
    }
  }
}

// Adjoint of im2col3x3: scatter-adds columns back onto the image grid in
// ascending row order.
template <typename T>
void col2im3x3(const T *col, std::size_t h, std::size_t w, std::size_t c, T *image) {
  const std::size_t ho = h - 2, wo = w - 2, row = 9 * c;
  for (std::size_t i = 0; i < ho; ++i) {
    for (std::size_t j = 0; j < wo; ++j) {
      const T *src = col + (i * wo + j) * row;
      for (std::size_t di = 0; di < 3; ++di) {
        T *dst = image + ((i + di) * w + j) * c;
        const T *s = src + di * 3 * c;
        for (std::size_t q = 0; q < 3 * c; ++q)
          dst[q] += s[q];
      }
    }
  }
}

} // namespace detail

/// Stride-1, unpadded 3x3 convolution: (n,h,w,c_in) -> (n,h-2,w-2,c_out).
template <typename T> Tensor<T> conv3x3_valid_forward(const Tensor<T> &x, const ConvLayer<T> &layer) {
  detail::require_rank4(x.shape(), "conv3x3");
  const std::size_t n = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
  if (h < 3 || w < 3)
    throw ShapeError("conv3x3 needs spatial extent >= 3, got " + x.shape().to_string());
  if (c != layer.in_channels())
    throw ShapeError("conv3x3 expects " + std::to_string(layer.in_channels()) + " input channels, got " +
                     std::to_string(c));
  const std::size_t ho = h - 2, wo = w - 2, pixels = ho * wo, depth = 9 * c, co = layer.out_channels();
  Tensor<T> out(Shape{n, ho, wo, co});
  std::vector<T> col(pixels * depth);
  for (std::size_t s = 0; s < n; ++s) {
    detail::im2col3x3(x.data() + s * h * w * c, h, w, c, col.data());
    T *dst = out.data() + s * pixels * co;
    detail::gemm(pixels, co, depth, col.data(), depth, std::size_t{1}, layer.kernels.data(), co, dst, co,
                 false);
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t o = 0; o < co; ++o)
        dst[p * co + o] += layer.bias[o];
  }
  return out;
}

/// Gradients of conv3x3_valid_forward given the forward input. The input
/// gradient is skipped when `input_gradient` is false (first layer).
template <typename T>
ConvGradients<T> conv3x3_valid_backward(const Tensor<T> &grad_out, const Tensor<T> &input,
                                        const ConvLayer<T> &layer, bool input_gradient = true) {
  detail::require_rank4(input.shape(), "conv3x3 backward");
  const std::size_t n = input.shape()[0], h = input.shape()[1], w = input.shape()[2], c = input.shape()[3];
  if (h < 3 || w < 3 || c != layer.in_channels())
    throw ShapeError("conv3x3 backward: cached input " + input.shape().to_string() +
                     " does not fit the layer");
  const std::size_t ho = h - 2, wo = w - 2, pixels = ho * wo, depth = 9 * c, co = layer.out_channels();
  if (!(grad_out.shape() == Shape{n, ho, wo, co}))
    throw ShapeError("conv3x3 backward: gradient shape " + grad_out.shape().to_string() +
                     " does not match forward output " + Shape{n, ho, wo, co}.to_string());

  ConvGradients<T> g;
  g.kernels = Tensor<T>(layer.kernels.shape());
  g.bias = Tensor<T>(layer.bias.shape());
  if (input_gradient)
    g.input = Tensor<T>(input.shape());

  // Transposed kernel (c_out, 9*c_in) for the input-gradient product.
  std::vector<T> kernel_t;
  if (input_gradient) {
    kernel_t.resize(depth * co);
    for (std::size_t r = 0; r < depth; ++r)
      for (std::size_t o = 0; o < co; ++o)
        kernel_t[o * depth + r] = layer.kernels[r * co + o];
  }

  std::vector<T> col(pixels * depth);
  for (std::size_t s = 0; s < n; ++s) {
    const T *gs = grad_out.data() + s * pixels * co;
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t o = 0; o < co; ++o)
        g.bias[o] += gs[p * co + o];

    detail::im2col3x3(input.data() + s * h * w * c, h, w, c, col.data());
    // dK += col^T * G
    detail::gemm(depth, co, pixels, col.data(), std::size_t{1}, depth, gs, co, g.kernels.data(), co, true);

    if (input_gradient) {
      // dcol = G * K^T, then fold back onto the image grid.
      detail::gemm(pixels, depth, co, gs, co, std::size_t{1}, kernel_t.data(), depth, col.data(), depth,
                   false);
      detail::col2im3x3(col.data(), h, w, c, g.input.data() + s * h * w * c);
    }
  }
  return g;
}

/// Non-overlapping 2x2 max pooling with stride 2. A trailing odd row or
/// column is dropped. Ties go to the first element in row-major window order.
template <typename T> PoolResult<T> maxpool2x2_forward(const Tensor<T> &x) {
  detail::require_rank4(x.shape(), "maxpool2x2");
  const std::size_t n = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
  if (h < 2 || w < 2)
    throw ShapeError("maxpool2x2 needs spatial extent >= 2, got " + x.shape().to_string());
  const std::size_t ho = h / 2, wo = w / 2;
  PoolResult<T> r{Tensor<T>(Shape{n, ho, wo, c}), PoolIndices{x.shape(), {}}};
  r.indices.offsets.resize(r.output.size());
  std::size_t k = 0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < ho; ++i) {
      const T *row0 = x.data() + ((s * h + 2 * i) * w) * c;
      const T *row1 = row0 + w * c;
      for (std::size_t j = 0; j < wo; ++j) {
        const T *a = row0 + 2 * j * c, *b = a + c, *d = row1 + 2 * j * c, *e = d + c;
        for (std::size_t ch = 0; ch < c; ++ch, ++k) {
          T best = a[ch];
          std::uint8_t at = 0;
          if (b[ch] > best) {
            best = b[ch];
            at = 1;
          }
          if (d[ch] > best) {
            best = d[ch];
            at = 2;
          }
          if (e[ch] > best) {
            best = e[ch];
            at = 3;
          }
          r.output[k] = best;
          r.indices.offsets[k] = at;
        }
      }
    }
  }
  return r;
}

template <typename T> Tensor<T> maxpool2x2_backward(const Tensor<T> &grad_out, const PoolIndices &indices) {
  const Shape &in = indices.input_shape;
  detail::require_rank4(in, "maxpool2x2 backward");
  const std::size_t n = in[0], h = in[1], w = in[2], c = in[3], ho = h / 2, wo = w / 2;
  if (!(grad_out.shape() == Shape{n, ho, wo, c}) || indices.offsets.size() != grad_out.size())
    throw ShapeError("maxpool2x2 backward: gradient shape " + grad_out.shape().to_string() +
                     " does not match cached pooling of " + in.to_string());
  Tensor<T> gx(in);
  std::size_t k = 0;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        for (std::size_t ch = 0; ch < c; ++ch, ++k) {
          const std::uint8_t at = indices.offsets[k];
          gx.at(s, 2 * i + (at >> 1), 2 * j + (at & 1), ch) = grad_out[k];
        }
  return gx;
}

template <typename T> Tensor<T> relu_forward(const Tensor<T> &x) {
  return map(x, [](T v) { return v > T(0) ? v : T(0); });
}

/// `activation` may be either the forward input or the forward output: both
/// are positive exactly where the gradient passes. The subgradient at 0 is 0.
template <typename T> Tensor<T> relu_backward(const Tensor<T> &grad_out, const Tensor<T> &activation) {
  detail::require_same_shape(grad_out, activation, "relu backward");
  Tensor<T> gx(grad_out.shape());
  for (std::size_t i = 0; i < gx.size(); ++i)
    gx[i] = activation[i] > T(0) ? grad_out[i] : T(0);
  return gx;
}

/// (n,h,w,c) -> (n, h*w*c), keeping row-major (h, w, c) order.
template <typename T> Tensor<T> flatten(Tensor<T> x) {
  const Shape &s = x.shape();
  if (s.rank() < 2)
    throw ShapeError("flatten expects a batched tensor, got " + s.to_string());
  const std::size_t n = s[0];
  const std::size_t features = s.elements() / n;
  return std::move(x).reshaped(Shape{n, features});
}

template <typename T> Tensor<T> unflatten(Tensor<T> grad, const Shape &input_shape) {
  return std::move(grad).reshaped(input_shape);
}

template <typename T> Tensor<T> dense_forward(const Tensor<T> &x, const DenseLayer<T> &layer) {
  if (x.shape().rank() != 2 || x.shape()[1] != layer.fan_in())
    throw ShapeError("dense expects (n," + std::to_string(layer.fan_in()) + ") input, got " +
                     x.shape().to_string());
  const std::size_t n = x.shape()[0], fi = layer.fan_in(), fo = layer.fan_out();
  Tensor<T> out(Shape{n, fo});
  detail::gemm(n, fo, fi, x.data(), fi, std::size_t{1}, layer.weights.data(), fo, out.data(), fo, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < fo; ++j)
      out[i * fo + j] += layer.bias[j];
  return out;
}

template <typename T>
DenseGradients<T> dense_backward(const Tensor<T> &grad_out, const Tensor<T> &input, const DenseLayer<T> &layer,
                                 bool input_gradient = true) {
  if (input.shape().rank() != 2 || input.shape()[1] != layer.fan_in())
    throw ShapeError("dense backward: cached input " + input.shape().to_string() + " does not fit the layer");
  const std::size_t n = input.shape()[0], fi = layer.fan_in(), fo = layer.fan_out();
  if (!(grad_out.shape() == Shape{n, fo}))
    throw ShapeError("dense backward: gradient shape " + grad_out.shape().to_string() + " expected " +
                     Shape{n, fo}.to_string());
  DenseGradients<T> g;
  g.weights = Tensor<T>(layer.weights.shape());
  g.bias = Tensor<T>(layer.bias.shape());
  // dW = x^T * G
  detail::gemm(fi, fo, n, input.data(), std::size_t{1}, fi, grad_out.data(), fo, g.weights.data(), fo, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < fo; ++j)
      g.bias[j] += grad_out[i * fo + j];
  if (input_gradient) {
    std::vector<T> wt(fi * fo);
    for (std::size_t r = 0; r < fi; ++r)
      for (std::size_t j = 0; j < fo; ++j)
        wt[j * fi + r] = layer.weights[r * fo + j];
    g.input = Tensor<T>(input.shape());
    detail::gemm(n, fi, fo, grad_out.data(), fo, std::size_t{1}, wt.data(), fi, g.input.data(), fi, false);
  }
  return g;
}

/// Row-wise softmax with max subtraction.
template <typename T> Tensor<T> softmax(const Tensor<T> &logits) {
  if (logits.shape().rank() != 2)
    throw ShapeError("softmax expects (n,k) logits, got " + logits.shape().to_string());
  if (!logits.all_finite())
    throw NumericError("softmax received non-finite logits");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T *z = logits.data() + i * k;
    T *p = out.data() + i * k;
    T top = z[0];
    for (std::size_t j = 1; j < k; ++j)
      top = std::max(top, z[j]);
    T sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(z[j] - top);
      sum += p[j];
    }
    for (std::size_t j = 0; j < k; ++j)
      p[j] /= sum;
  }
  return out;
}

/// Vector-Jacobian product of softmax: dz = p * (g - <g, p>) per row.
template <typename T> Tensor<T> softmax_backward(const Tensor<T> &grad_probs, const Tensor<T> &probs) {
  detail::require_same_shape(grad_probs, probs, "softmax backward");
  const std::size_t n = probs.shape()[0], k = probs.shape()[1];
  Tensor<T> gz(probs.shape());
  for (std::size_t i = 0; i < n; ++i) {
    T dot = 0;
    for (std::size_t j = 0; j < k; ++j)
      dot += grad_probs[i * k + j] * probs[i * k + j];
    for (std::size_t j = 0; j < k; ++j)
      gz[i * k + j] = probs[i * k + j] * (grad_probs[i * k + j] - dot);
  }
  return gz;
}

} // namespace leafnet
