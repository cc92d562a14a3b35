#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "network.hpp"

namespace leafnet {

// Model file layout, all integers little-endian:
//
//   "LEAF"            4 bytes magic
//   version           u16 (currently 1)
//   precision         u8  (0 = float32, 1 = float64)
//   seed              u64
//   layer count       u16
//   per layer:
//     kind            u8  (LayerKind)
//     width           u32
//     weight length   u64
//     bias length     u64
//     weights         weight length IEEE-754 values, row-major
//     bias            bias length IEEE-754 values

inline constexpr char kModelMagic[4] = {'L', 'E', 'A', 'F'};
inline constexpr std::uint16_t kModelVersion = 1;

enum class Precision : std::uint8_t { single = 0, double_ = 1 };

template <typename T> constexpr Precision precision_of() {
  return std::is_same_v<T, float> ? Precision::single : Precision::double_;
}

namespace detail {

class ByteWriter {
public:
  template <typename U> void put(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i)
      bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  template <typename T> void put_values(const Tensor<T> &t) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : t.values())
      put(std::bit_cast<Bits>(v));
  }

  std::vector<char> bytes;
};

class ByteReader {
public:
  explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

  template <typename U> U get(const char *what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  template <typename T> void get_values(Tensor<T> &t, const char *what) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    need(t.size() * sizeof(T), what);
    for (auto &v : t.values())
      v = std::bit_cast<T>(get<Bits>(what));
  }

  void need(std::uint64_t n, const char *what) const {
    if (n > data_.size() - pos_)
      throw FormatError(std::string("truncated model file while reading ") + what, pos_);
  }

  std::uint64_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }
  const std::vector<char> &data() const noexcept { return data_; }

private:
  std::vector<char> data_;
  std::uint64_t pos_ = 0;
};

inline std::vector<char> read_all(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open model " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace detail

template <typename T> std::vector<char> encode_model(const Network<T> &net) {
  detail::ByteWriter w;
  for (char c : kModelMagic)
    w.bytes.push_back(c);
  w.put(kModelVersion);
  w.put(static_cast<std::uint8_t>(precision_of<T>()));
  w.put(net.seed);
  w.put(static_cast<std::uint16_t>(net.specs.size()));
  for (std::size_t i = 0; i < net.specs.size(); ++i) {
    w.put(static_cast<std::uint8_t>(net.specs[i].kind));
    w.put(net.specs[i].width);
    const Tensor<T> *weights = nullptr, *bias = nullptr;
    if (auto *c = std::get_if<ConvLayer<T>>(&net.layers[i])) {
      weights = &c->kernels;
      bias = &c->bias;
    } else if (auto *d = std::get_if<DenseLayer<T>>(&net.layers[i])) {
      weights = &d->weights;
      bias = &d->bias;
    }
    w.put(static_cast<std::uint64_t>(weights ? weights->size() : 0));
    w.put(static_cast<std::uint64_t>(bias ? bias->size() : 0));
    if (weights) {
      w.put_values(*weights);
      w.put_values(*bias);
    }
  }
  return std::move(w.bytes);
}

template <typename T> void save_model(const Network<T> &net, const std::filesystem::path &path) {
  const auto bytes = encode_model(net);
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot write model " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw IoError("failed writing model " + path.string());
}

/// Precision tag of a model file (validates the magic and version only).
inline Precision peek_precision(const std::filesystem::path &path) {
  detail::ByteReader r(detail::read_all(path));
  r.need(4, "magic");
  if (std::memcmp(r.data().data(), kModelMagic, 4) != 0)
    throw FormatError("bad magic: expected \"LEAF\"", 0);
  r.get<std::uint32_t>("magic");
  if (r.get<std::uint16_t>("version") != kModelVersion)
    throw FormatError("unsupported model version", 4);
  const auto tag = r.get<std::uint8_t>("precision");
  if (tag > 1)
    throw FormatError("unknown precision tag " + std::to_string(tag), 6);
  return static_cast<Precision>(tag);
}

/// Parses a model. The file does not record the input image size, so the
/// caller states it (default 256x256x3) and the layer stack is checked
/// against it.
template <typename T> Network<T> decode_model(std::vector<char> bytes, const ImageShape &input = {}) {
  detail::ByteReader r(std::move(bytes));
  r.need(4, "magic");
  if (std::memcmp(r.data().data(), kModelMagic, 4) != 0)
    throw FormatError("bad magic: expected \"LEAF\"", 0);
  r.get<std::uint32_t>("magic");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kModelVersion)
    throw FormatError("unsupported model version " + std::to_string(version), 4);
  const auto tag = r.get<std::uint8_t>("precision");
  if (tag != static_cast<std::uint8_t>(precision_of<T>()))
    throw FormatError("precision tag " + std::to_string(tag) + " does not match the requested precision", 6);

  Network<T> net;
  net.input = input;
  net.seed = r.get<std::uint64_t>("seed");
  const auto count = r.get<std::uint16_t>("layer count");
  Shape s{input.height, input.width, input.channels};
  for (std::uint16_t i = 0; i < count; ++i) {
    const std::uint64_t layer_offset = r.offset();
    const auto kind_tag = r.get<std::uint8_t>("layer kind");
    if (kind_tag > static_cast<std::uint8_t>(LayerKind::softmax))
      throw FormatError("unknown layer kind " + std::to_string(kind_tag), layer_offset);
    const LayerSpec spec{static_cast<LayerKind>(kind_tag), r.get<std::uint32_t>("layer width")};
    const auto n_weights = r.get<std::uint64_t>("weight length");
    const auto n_bias = r.get<std::uint64_t>("bias length");
    Shape out;
    try {
      out = layer_output_shape(spec, s);
    } catch (const ShapeError &e) {
      throw FormatError(std::string("layer stack does not fit the input: ") + e.what(), layer_offset);
    }
    if (spec.kind == LayerKind::conv3x3_valid) {
      if (n_weights != 9 * s[2] * spec.width || n_bias != spec.width)
        throw FormatError("conv layer parameter lengths do not match its shape", layer_offset);
      r.need((n_weights + n_bias) * sizeof(T), "conv parameters");
      ConvLayer<T> c(s[2], spec.width);
      r.get_values(c.kernels, "conv kernels");
      r.get_values(c.bias, "conv bias");
      net.layers.emplace_back(std::move(c));
    } else if (spec.kind == LayerKind::dense) {
      if (n_weights != s[0] * spec.width || n_bias != spec.width)
        throw FormatError("dense layer parameter lengths do not match its shape", layer_offset);
      r.need((n_weights + n_bias) * sizeof(T), "dense parameters");
      DenseLayer<T> d(s[0], spec.width);
      r.get_values(d.weights, "dense weights");
      r.get_values(d.bias, "dense bias");
      net.layers.emplace_back(std::move(d));
    } else {
      if (n_weights != 0 || n_bias != 0 || spec.width != 0)
        throw FormatError(std::string(to_string(spec.kind)) + " layer must not carry parameters", layer_offset);
      net.layers.emplace_back(std::monostate{});
    }
    net.specs.push_back(spec);
    s = out;
  }
  if (!r.at_end())
    throw FormatError("trailing bytes after the last layer", r.offset());
  if (net.output_features() == 0)
    throw FormatError("model has no dense output layer", r.offset());
  return net;
}

template <typename T> Network<T> load_model(const std::filesystem::path &path, const ImageShape &input = {}) {
  return decode_model<T>(detail::read_all(path), input);
}

} // namespace leafnet
