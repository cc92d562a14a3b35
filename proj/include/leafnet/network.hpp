#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "layers.hpp"
#include "rng.hpp"

namespace leafnet {

/// Wire tags of the model file; do not renumber.
enum class LayerKind : std::uint8_t {
  conv3x3_valid = 0,
  maxpool2x2 = 1,
  relu = 2,
  flatten = 3,
  dense = 4,
  softmax = 5,
};

inline const char *to_string(LayerKind k) {
  switch (k) {
  case LayerKind::conv3x3_valid: return "conv3x3-valid";
  case LayerKind::maxpool2x2: return "maxpool2x2";
  case LayerKind::relu: return "relu";
  case LayerKind::flatten: return "flatten";
  case LayerKind::dense: return "dense";
  case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

/// `width` is the number of output channels (conv) or nodes (dense), 0 for
/// the parameter-free kinds.
struct LayerSpec {
  LayerKind kind;
  std::uint32_t width = 0;

  friend bool operator==(const LayerSpec &, const LayerSpec &) = default;
};

/// Height, width and channels of one input image.
struct ImageShape {
  std::size_t height = 256;
  std::size_t width = 256;
  std::size_t channels = 3;

  friend bool operator==(const ImageShape &, const ImageShape &) = default;
};

struct ConvBlock {
  std::size_t filters;
  bool pool = true;
};

/// A conv/relu[/pool] stack followed by flatten, a ReLU hidden dense layer,
/// the class dense layer and softmax.
struct NetworkLayout {
  ImageShape input;
  std::vector<ConvBlock> blocks;
  std::size_t hidden = 64;
  std::size_t classes = 3;

  /// Five 3x3 conv layers (32, 64, 64, 64, 64 filters) each followed by
  /// 2x2 pooling, dense 64, dense 3: 277,891 trainable parameters.
  static NetworkLayout canonical(std::size_t classes = 3) {
    return NetworkLayout{ImageShape{256, 256, 3}, {{32}, {64}, {64}, {64}, {64}}, 64, classes};
  }
};

template <typename T> using LayerParameters = std::variant<std::monostate, ConvLayer<T>, DenseLayer<T>>;

/// Parameter gradients, one entry per layer with the same alternatives as
/// Network::layers.
template <typename T> using Gradients = std::vector<LayerParameters<T>>;

template <typename T> struct Network {
  std::vector<LayerSpec> specs;
  std::vector<LayerParameters<T>> layers;
  std::uint64_t seed = 0;
  ImageShape input;
  /// Bumped by every parameter update; forward caches record it.
  std::uint64_t revision = 0;

  std::size_t classes() const { return specs.empty() ? 0 : output_features(); }

  std::size_t output_features() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it)
      if (auto *d = std::get_if<DenseLayer<T>>(&*it))
        return d->fan_out();
    return 0;
  }
};

inline std::size_t parameter_count_of(const std::monostate &) { return 0; }
template <typename T> std::size_t parameter_count_of(const ConvLayer<T> &l) { return l.parameter_count(); }
template <typename T> std::size_t parameter_count_of(const DenseLayer<T> &l) { return l.parameter_count(); }

template <typename T> std::size_t parameter_count(const LayerParameters<T> &p) {
  return std::visit([](const auto &l) { return parameter_count_of(l); }, p);
}

template <typename T> std::size_t parameter_count(const Network<T> &net) {
  std::size_t total = 0;
  for (const auto &p : net.layers)
    total += parameter_count(p);
  return total;
}

/// The weight and bias tensors of every parameterized layer, in layer order.
template <typename T> std::vector<Tensor<T> *> parameter_tensors(std::vector<LayerParameters<T>> &layers) {
  std::vector<Tensor<T> *> out;
  for (auto &p : layers) {
    if (auto *c = std::get_if<ConvLayer<T>>(&p)) {
      out.push_back(&c->kernels);
      out.push_back(&c->bias);
    } else if (auto *d = std::get_if<DenseLayer<T>>(&p)) {
      out.push_back(&d->weights);
      out.push_back(&d->bias);
    }
  }
  return out;
}

template <typename T>
std::vector<const Tensor<T> *> parameter_tensors(const std::vector<LayerParameters<T>> &layers) {
  std::vector<const Tensor<T> *> out;
  for (auto *t : parameter_tensors(const_cast<std::vector<LayerParameters<T>> &>(layers)))
    out.push_back(t);
  return out;
}

/// Per-sample output shape of a layer: (h, w, c) for image layers, (features)
/// after flatten.
inline Shape layer_output_shape(const LayerSpec &spec, const Shape &in) {
  switch (spec.kind) {
  case LayerKind::conv3x3_valid:
    if (in.rank() != 3 || in[0] < 3 || in[1] < 3)
      throw ShapeError("conv3x3 cannot follow shape " + in.to_string());
    return Shape{in[0] - 2, in[1] - 2, spec.width};
  case LayerKind::maxpool2x2:
    if (in.rank() != 3 || in[0] < 2 || in[1] < 2)
      throw ShapeError("maxpool2x2 cannot follow shape " + in.to_string());
    return Shape{in[0] / 2, in[1] / 2, in[2]};
  case LayerKind::flatten: return Shape{in.elements()};
  case LayerKind::dense:
    if (in.rank() != 1)
      throw ShapeError("dense must follow flatten, got " + in.to_string());
    return Shape{spec.width};
  case LayerKind::relu:
  case LayerKind::softmax: return in;
  }
  throw ShapeError("unknown layer kind");
}

/// Per-sample output shape of every layer for the given input.
inline std::vector<Shape> shape_trace(const std::vector<LayerSpec> &specs, const ImageShape &input) {
  std::vector<Shape> trace;
  Shape s{input.height, input.width, input.channels};
  for (const auto &spec : specs) {
    s = layer_output_shape(spec, s);
    trace.push_back(s);
  }
  return trace;
}

/// Builds the network described by `layout`. Weights are He-uniform,
/// U(-sqrt(6/fan_in), +sqrt(6/fan_in)), drawn in layer order from a single
/// splitmix64 stream seeded with `seed` (u = (next() >> 11) * 2^-53,
/// w = (2u - 1) * bound); biases are zero.
template <typename T> Network<T> build_network(std::uint64_t seed, const NetworkLayout &layout) {
  Network<T> net;
  net.seed = seed;
  net.input = layout.input;
  for (const auto &b : layout.blocks) {
    net.specs.push_back({LayerKind::conv3x3_valid, static_cast<std::uint32_t>(b.filters)});
    net.specs.push_back({LayerKind::relu});
    if (b.pool)
      net.specs.push_back({LayerKind::maxpool2x2});
  }
  net.specs.push_back({LayerKind::flatten});
  net.specs.push_back({LayerKind::dense, static_cast<std::uint32_t>(layout.hidden)});
  net.specs.push_back({LayerKind::relu});
  net.specs.push_back({LayerKind::dense, static_cast<std::uint32_t>(layout.classes)});
  net.specs.push_back({LayerKind::softmax});

  SplitMix64 stream(seed);
  auto draw = [&stream](Tensor<T> &w, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto &v : w.values())
      v = static_cast<T>((2.0 * stream.uniform() - 1.0) * bound);
  };

  Shape s{layout.input.height, layout.input.width, layout.input.channels};
  for (const auto &spec : net.specs) {
    const Shape out = layer_output_shape(spec, s);
    if (spec.kind == LayerKind::conv3x3_valid) {
      ConvLayer<T> c(s[2], spec.width);
      draw(c.kernels, 9 * s[2]);
      net.layers.emplace_back(std::move(c));
    } else if (spec.kind == LayerKind::dense) {
      DenseLayer<T> d(s[0], spec.width);
      draw(d.weights, s[0]);
      net.layers.emplace_back(std::move(d));
    } else {
      net.layers.emplace_back(std::monostate{});
    }
    s = out;
  }
  return net;
}

template <typename T> Network<T> build_network(std::uint64_t seed) {
  return build_network<T>(seed, NetworkLayout::canonical());
}

enum class Mode { train, infer };

/// Values retained by one layer for the backward pass: the input of conv and
/// dense layers, the output of relu and softmax, the pooling winners, and the
/// pre-flatten shape.
template <typename T> struct LayerCache {
  Tensor<T> saved;
  PoolIndices pool;
  Shape input_shape;
};

template <typename T> struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  const void *owner = nullptr;
  std::uint64_t revision = 0;
  std::size_t batch = 0;
};

template <typename T> struct ForwardResult {
  Tensor<T> probs;
  Tensor<T> logits;
  /// Batched output shape of every layer.
  std::vector<Shape> trace;
  std::optional<ForwardCache<T>> cache;
};

template <typename T> ForwardResult<T> network_forward(const Network<T> &net, Tensor<T> x, Mode mode = Mode::infer) {
  const Shape expected{x.shape().rank() == 4 ? x.shape()[0] : 1, net.input.height, net.input.width,
                       net.input.channels};
  if (x.shape().rank() != 4 || !(x.shape() == expected))
    throw ShapeError("network expects input (n," + std::to_string(net.input.height) + "," +
                     std::to_string(net.input.width) + "," + std::to_string(net.input.channels) + "), got " +
                     x.shape().to_string());

  ForwardResult<T> r;
  const bool keep = mode == Mode::train;
  if (keep) {
    r.cache.emplace();
    r.cache->layers.resize(net.specs.size());
    r.cache->owner = &net;
    r.cache->revision = net.revision;
    r.cache->batch = x.shape()[0];
  }
  for (std::size_t i = 0; i < net.specs.size(); ++i) {
    LayerCache<T> *lc = keep ? &r.cache->layers[i] : nullptr;
    switch (net.specs[i].kind) {
    case LayerKind::conv3x3_valid: {
      Tensor<T> y = conv3x3_valid_forward(x, std::get<ConvLayer<T>>(net.layers[i]));
      if (lc)
        lc->saved = std::move(x);
      x = std::move(y);
      break;
    }
    case LayerKind::maxpool2x2: {
      auto p = maxpool2x2_forward(x);
      if (lc)
        lc->pool = std::move(p.indices);
      x = std::move(p.output);
      break;
    }
    case LayerKind::relu:
      for (auto &v : x.values())
        v = v > T(0) ? v : T(0);
      if (lc)
        lc->saved = x;
      break;
    case LayerKind::flatten:
      if (lc)
        lc->input_shape = x.shape();
      x = flatten(std::move(x));
      break;
    case LayerKind::dense: {
      Tensor<T> y = dense_forward(x, std::get<DenseLayer<T>>(net.layers[i]));
      if (lc)
        lc->saved = std::move(x);
      x = std::move(y);
      break;
    }
    case LayerKind::softmax:
      r.logits = x;
      x = softmax(x);
      if (lc)
        lc->saved = x;
      break;
    }
    r.trace.push_back(x.shape());
  }
  if (r.logits.empty())
    r.logits = x;
  r.probs = std::move(x);
  return r;
}

/// What the upstream gradient handed to network_backward is taken with
/// respect to. `logits` is the fused softmax + cross-entropy path.
enum class Upstream { logits, probabilities };

template <typename T>
Gradients<T> network_backward(const Network<T> &net, const ForwardCache<T> &cache, const Tensor<T> &upstream,
                              Upstream kind = Upstream::logits) {
  if (cache.owner != &net || cache.revision != net.revision || cache.layers.size() != net.specs.size())
    throw StateError("forward cache does not belong to the current network state");
  const std::size_t classes = net.output_features();
  if (!(upstream.shape() == Shape{cache.batch, classes}))
    throw ShapeError("upstream gradient " + upstream.shape().to_string() + " expected " +
                     Shape{cache.batch, classes}.to_string());

  Gradients<T> grads(net.layers.size());
  Tensor<T> g = upstream;
  std::size_t i = net.specs.size();
  if (i > 0 && net.specs[i - 1].kind == LayerKind::softmax) {
    if (kind == Upstream::probabilities)
      g = softmax_backward(g, cache.layers[i - 1].saved);
    --i;
  }
  while (i-- > 0) {
    const LayerCache<T> &lc = cache.layers[i];
    const bool need_input = i > 0;
    switch (net.specs[i].kind) {
    case LayerKind::conv3x3_valid: {
      const auto &layer = std::get<ConvLayer<T>>(net.layers[i]);
      auto cg = conv3x3_valid_backward(g, lc.saved, layer, need_input);
      g = std::move(cg.input);
      ConvLayer<T> out;
      out.kernels = std::move(cg.kernels);
      out.bias = std::move(cg.bias);
      grads[i] = std::move(out);
      break;
    }
    case LayerKind::maxpool2x2: g = maxpool2x2_backward(g, lc.pool); break;
    case LayerKind::relu: g = relu_backward(g, lc.saved); break;
    case LayerKind::flatten: g = unflatten(std::move(g), lc.input_shape); break;
    case LayerKind::dense: {
      const auto &layer = std::get<DenseLayer<T>>(net.layers[i]);
      auto dg = dense_backward(g, lc.saved, layer, need_input);
      g = std::move(dg.input);
      DenseLayer<T> out;
      out.weights = std::move(dg.weights);
      out.bias = std::move(dg.bias);
      grads[i] = std::move(out);
      break;
    }
    case LayerKind::softmax: g = softmax_backward(g, lc.saved); break;
    }
  }
  return grads;
}

/// One row of the layer table printed by `leafnet summary`.
struct SummaryRow {
  std::string name;
  Shape output; // per sample
  std::size_t parameters;
};

template <typename T> std::vector<SummaryRow> summarize(const Network<T> &net) {
  std::vector<SummaryRow> rows;
  const auto trace = shape_trace(net.specs, net.input);
  std::size_t conv = 0, pool = 0, dense = 0;
  for (std::size_t i = 0; i < net.specs.size(); ++i) {
    std::string name;
    switch (net.specs[i].kind) {
    case LayerKind::conv3x3_valid: name = "Conv2D (C" + std::to_string(++conv) + ")"; break;
    case LayerKind::maxpool2x2: name = "MaxPool2D (S" + std::to_string(++pool) + ")"; break;
    case LayerKind::relu: name = "ReLU"; break;
    case LayerKind::flatten: name = "Flatten"; break;
    case LayerKind::dense: name = "Dense (" + std::to_string(++dense) + ")"; break;
    case LayerKind::softmax: name = "Softmax"; break;
    }
    rows.push_back({name, trace[i], parameter_count(net.layers[i])});
  }
  return rows;
}

} // namespace leafnet
