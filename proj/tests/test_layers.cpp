#include <gtest/gtest.h>

#include <cmath>

#include "leafnet/leafnet.hpp"
#include "support/gradcheck.hpp"

using namespace leafnet;

namespace {

// Direct 6-loop valid convolution.
Tensor<double> naive_conv(const Tensor<double> &x, const ConvLayer<double> &l) {
  const std::size_t n = x.shape()[0], h = x.shape()[1], w = x.shape()[2], ci = x.shape()[3], co = l.out_channels();
  Tensor<double> out(Shape{n, h - 2, w - 2, co});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < h - 2; ++i)
      for (std::size_t j = 0; j < w - 2; ++j)
        for (std::size_t o = 0; o < co; ++o) {
          double acc = l.bias[o];
          for (std::size_t di = 0; di < 3; ++di)
            for (std::size_t dj = 0; dj < 3; ++dj)
              for (std::size_t c = 0; c < ci; ++c)
                acc += x.at(s, i + di, j + dj, c) * l.kernels[((di * 3 + dj) * ci + c) * co + o];
          out.at(s, i, j, o) = acc;
        }
  return out;
}

ConvLayer<double> random_conv(std::size_t ci, std::size_t co, Xoshiro256 &rng) {
  ConvLayer<double> l(ci, co);
  l.kernels = gradcheck::random_tensor(l.kernels.shape(), rng);
  l.bias = gradcheck::random_tensor(l.bias.shape(), rng);
  return l;
}

} // namespace

TEST(Conv, MatchesNaiveLoops) {
  Xoshiro256 rng(1);
  const auto x = gradcheck::random_tensor(Shape{2, 9, 7, 5}, rng);
  const auto l = random_conv(5, 6, rng);
  const auto got = conv3x3_valid_forward(x, l), want = naive_conv(x, l);
  ASSERT_EQ(got.shape(), want.shape());
  for (std::size_t i = 0; i < got.size(); ++i)
    EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Conv, FirstLayerShape) {
  ConvLayer<float> l(3, 32);
  EXPECT_EQ(conv3x3_valid_forward(Tensor<float>(Shape{2, 256, 256, 3}), l).shape(), (Shape{2, 254, 254, 32}));
  EXPECT_EQ(l.parameter_count(), 896u);
}

TEST(Conv, ZeroInputGivesBias) {
  ConvLayer<double> l(2, 3);
  l.bias = Tensor<double>(Shape{3}, {0.5, -1, 2});
  const auto out = conv3x3_valid_forward(Tensor<double>(Shape{1, 4, 5, 2}), l);
  for (std::size_t i = 0; i < out.size(); ++i)
    EXPECT_EQ(out[i], l.bias[i % 3]);
}

TEST(Conv, RejectsBadShapes) {
  ConvLayer<double> l(2, 3);
  EXPECT_THROW(conv3x3_valid_forward(Tensor<double>(Shape{1, 2, 5, 2}), l), ShapeError);
  EXPECT_THROW(conv3x3_valid_forward(Tensor<double>(Shape{1, 5, 5, 3}), l), ShapeError);
  EXPECT_THROW(conv3x3_valid_backward(Tensor<double>(Shape{1, 2, 2, 3}), Tensor<double>(Shape{1, 5, 5, 2}), l),
               ShapeError);
}

TEST(ConvBackward, ZeroAndOnesUpstream) {
  Xoshiro256 rng(2);
  const auto x = gradcheck::random_tensor(Shape{2, 6, 5, 2}, rng);
  const auto l = random_conv(2, 1, rng);
  const auto zero = conv3x3_valid_backward(Tensor<double>(Shape{2, 4, 3, 1}), x, l);
  for (const auto *t : {&zero.input, &zero.kernels, &zero.bias})
    for (double v : t->values())
      EXPECT_EQ(v, 0.0);
  const auto ones = conv3x3_valid_backward(Tensor<double>(Shape{2, 4, 3, 1}, 1.0), x, l);
  EXPECT_EQ(ones.bias[0], 2.0 * 4 * 3);
}

TEST(ConvBackward, FiniteDifferences) {
  Xoshiro256 rng(3);
  auto x = gradcheck::random_tensor(Shape{1, 6, 6, 2}, rng);
  auto l = random_conv(2, 3, rng);
  const auto up = gradcheck::random_tensor(Shape{1, 4, 4, 3}, rng);
  const auto g = conv3x3_valid_backward(up, x, l);
  auto loss = [&] { return gradcheck::weighted_sum(conv3x3_valid_forward(x, l), up); };
  EXPECT_LE(gradcheck::check(x, g.input, loss).max_rel, 1e-5);
  EXPECT_LE(gradcheck::check(l.kernels, g.kernels, loss).max_rel, 1e-5);
  EXPECT_LE(gradcheck::check(l.bias, g.bias, loss).max_rel, 1e-5);
}

TEST(ConvBackward, SkipsInputGradientOnRequest) {
  Xoshiro256 rng(4);
  const auto x = gradcheck::random_tensor(Shape{1, 5, 5, 2}, rng);
  const auto l = random_conv(2, 2, rng);
  EXPECT_TRUE(conv3x3_valid_backward(Tensor<double>(Shape{1, 3, 3, 2}, 1.0), x, l, false).input.empty());
}

TEST(Pool, HandExampleAndBackward) {
  const Tensor<double> x(Shape{1, 2, 2, 1}, {1, 2, 3, 4});
  const auto r = maxpool2x2_forward(x);
  EXPECT_EQ(r.output, Tensor<double>(Shape{1, 1, 1, 1}, {4}));
  EXPECT_EQ(r.indices.offsets, std::vector<std::uint8_t>{3});
  EXPECT_EQ(maxpool2x2_backward(Tensor<double>(Shape{1, 1, 1, 1}, {1}), r.indices),
            Tensor<double>(Shape{1, 2, 2, 1}, {0, 0, 0, 1}));
}

TEST(Pool, FloorSemanticsAndTies) {
  EXPECT_EQ(maxpool2x2_forward(Tensor<float>(Shape{1, 125, 125, 64})).output.shape(), (Shape{1, 62, 62, 64}));
  const auto r = maxpool2x2_forward(Tensor<double>(Shape{1, 5, 4, 2}, 7.0));
  for (double v : r.output.values())
    EXPECT_EQ(v, 7.0);
  for (auto o : r.indices.offsets)
    EXPECT_EQ(o, 0);
  EXPECT_THROW(maxpool2x2_forward(Tensor<double>(Shape{1, 1, 4, 1})), ShapeError);
}

TEST(Relu, ForwardBackward) {
  const Tensor<double> x(Shape{3}, {-1, 0, 2});
  const auto y = relu_forward(x);
  EXPECT_EQ(y, Tensor<double>(Shape{3}, {0, 0, 2}));
  EXPECT_EQ(relu_backward(Tensor<double>(Shape{3}, {5, 5, 5}), y), Tensor<double>(Shape{3}, {0, 0, 5}));
}

TEST(Flatten, OrderAndShape) {
  EXPECT_EQ(flatten(Tensor<float>(Shape{1, 6, 6, 64})).shape(), (Shape{1, 2304}));
  EXPECT_EQ(flatten(Tensor<double>(Shape{1, 1, 1, 3}, {4, 5, 6})), Tensor<double>(Shape{1, 3}, {4, 5, 6}));
  EXPECT_EQ(unflatten(Tensor<double>(Shape{1, 3}, {4, 5, 6}), Shape{1, 1, 1, 3}),
            Tensor<double>(Shape{1, 1, 1, 3}, {4, 5, 6}));
}

TEST(Dense, ZeroInputGivesBiasAndCounts) {
  DenseLayer<double> l(4, 2);
  l.bias = Tensor<double>(Shape{2}, {1, -2});
  const auto out = dense_forward(Tensor<double>(Shape{3, 4}), l);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(out.at(r, 0), 1);
    EXPECT_EQ(out.at(r, 1), -2);
  }
  EXPECT_EQ(DenseLayer<float>(2304, 64).parameter_count(), 147520u);
  EXPECT_THROW(dense_forward(Tensor<double>(Shape{3, 5}), l), ShapeError);
}

TEST(Dense, FiniteDifferences) {
  Xoshiro256 rng(5);
  auto x = gradcheck::random_tensor(Shape{3, 8}, rng);
  DenseLayer<double> l(8, 4);
  l.weights = gradcheck::random_tensor(l.weights.shape(), rng);
  l.bias = gradcheck::random_tensor(l.bias.shape(), rng);
  const auto up = gradcheck::random_tensor(Shape{3, 4}, rng);
  const auto g = dense_backward(up, x, l);
  auto loss = [&] { return gradcheck::weighted_sum(dense_forward(x, l), up); };
  EXPECT_LE(gradcheck::check(x, g.input, loss).max_rel, 1e-5);
  EXPECT_LE(gradcheck::check(l.weights, g.weights, loss).max_rel, 1e-5);
  EXPECT_LE(gradcheck::check(l.bias, g.bias, loss).max_rel, 1e-5);
}

TEST(Softmax, Values) {
  const auto u = softmax(Tensor<double>(Shape{1, 3}, {0, 0, 0}));
  for (double v : u.values())
    EXPECT_NEAR(v, 1.0 / 3, 1e-15);
  const auto p = softmax(Tensor<double>(Shape{1, 3}, {1, 2, 3}));
  EXPECT_NEAR(p[0], 0.09003057, 5e-9);
  EXPECT_NEAR(p[1], 0.24472847, 5e-9);
  EXPECT_NEAR(p[2], 0.66524096, 5e-9);
  const auto big = softmax(Tensor<float>(Shape{1, 2}, {1000.0f, 0.0f}));
  EXPECT_TRUE(big.all_finite());
  EXPECT_THROW(softmax(Tensor<double>(Shape{1, 2}, {NAN, 0})), NumericError);
  EXPECT_THROW(softmax(Tensor<double>(Shape{1, 2}, {INFINITY, 0})), NumericError);
}

TEST(Network, CanonicalParameterTable) {
  const auto net = build_network<float>(123);
  std::vector<std::size_t> counts;
  for (const auto &p : net.layers)
    if (auto n = parameter_count(p))
      counts.push_back(n);
  EXPECT_EQ(counts, (std::vector<std::size_t>{896, 18496, 36928, 36928, 36928, 147520, 195}));
  for (std::uint64_t s : {0ull, 1ull, 0xFFFFFFFFFFFFFFFFull})
    EXPECT_EQ(parameter_count(build_network<float>(s)), 277891u);
}

TEST(Network, EqualSeedsBuildBitwiseEqual) {
  const auto a = build_network<float>(9), b = build_network<float>(9), c = build_network<float>(10);
  const auto pa = parameter_tensors(a.layers), pb = parameter_tensors(b.layers), pc = parameter_tensors(c.layers);
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(*pa[i], *pb[i]);
    differs = differs || !(*pa[i] == *pc[i]);
  }
  EXPECT_TRUE(differs);
}

TEST(Network, HeUniformBounds) {
  const auto net = build_network<double>(3);
  for (const auto &p : net.layers) {
    if (const auto *c = std::get_if<ConvLayer<double>>(&p)) {
      const double bound = std::sqrt(6.0 / (9.0 * c->in_channels()));
      for (double v : c->kernels.values())
        EXPECT_LE(std::abs(v), bound);
      for (double v : c->bias.values())
        EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(Network, BatchForwardShapeAndRows) {
  const auto net = build_network<float>(4);
  Xoshiro256 rng(6);
  Tensor<float> x(Shape{4, 256, 256, 3});
  for (auto &v : x.values())
    v = static_cast<float>(rng.uniform());
  const auto fwd = network_forward(net, x);
  ASSERT_EQ(fwd.probs.shape(), (Shape{4, 3}));
  EXPECT_FALSE(fwd.cache.has_value());
  for (std::size_t r = 0; r < 4; ++r) {
    double sum = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_GE(fwd.probs.at(r, k), 0.0f);
      EXPECT_LE(fwd.probs.at(r, k), 1.0f);
      sum += fwd.probs.at(r, k);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  EXPECT_THROW(network_forward(net, Tensor<float>(Shape{1, 128, 128, 3})), ShapeError);
}

TEST(Network, SummaryRows) {
  const auto rows = summarize(build_network<float>(0));
  ASSERT_EQ(rows.size(), 20u);
  EXPECT_EQ(rows.front().name, "Conv2D (C1)");
  EXPECT_EQ(rows.front().parameters, 896u);
  EXPECT_EQ(rows[18].name, "Dense (2)");
  EXPECT_EQ(rows[18].parameters, 195u);
  EXPECT_EQ(rows[15].output, (Shape{2304}));
}

namespace {

struct Shrunk {
  Network<double> net = build_network<double>(31, NetworkLayout{ImageShape{8, 8, 3}, {{4, true}, {4, false}}, 4, 3});
  Tensor<double> x;
  std::vector<int> labels = {0, 2, 1};
  Shrunk() {
    Xoshiro256 rng(7);
    x = gradcheck::random_tensor(Shape{3, 8, 8, 3}, rng, 0, 1);
    gradcheck::randomize_biases(net, rng);
  }
};

} // namespace

TEST(NetworkBackward, ZeroUpstreamGivesZeroGradients) {
  Shrunk s;
  auto fwd = network_forward(s.net, s.x, Mode::train);
  const auto grads = network_backward(s.net, *fwd.cache, Tensor<double>(Shape{3, 3}));
  for (const auto *g : parameter_tensors(grads))
    for (double v : g->values())
      EXPECT_EQ(v, 0.0);
}

TEST(NetworkBackward, BiasGradientIsChannelDeltaSum) {
  Shrunk s;
  auto fwd = network_forward(s.net, s.x, Mode::train);
  const auto up = softmax_xent_gradient(fwd.probs, std::span<const int>(s.labels));
  const auto grads = network_backward(s.net, *fwd.cache, up);
  // Output layer: bias gradient = column sums of the logit deltas.
  const auto &dense = std::get<DenseLayer<double>>(grads[grads.size() - 2]);
  for (std::size_t k = 0; k < 3; ++k) {
    double col = 0;
    for (std::size_t r = 0; r < 3; ++r)
      col += up.at(r, k);
    EXPECT_NEAR(dense.bias[k], col, 1e-15);
  }
}

TEST(NetworkBackward, FiniteDifferencesOnShrunkenClone) {
  Shrunk s;
  auto fwd = network_forward(s.net, s.x, Mode::train);
  const auto grads =
      network_backward(s.net, *fwd.cache, softmax_xent_gradient(fwd.probs, std::span<const int>(s.labels)));
  auto loss = [&] { return cross_entropy(network_forward(s.net, s.x).probs, std::span<const int>(s.labels)).mean_loss; };
  auto pattern = [&] { return gradcheck::network_pattern(s.net, s.x); };
  auto params = parameter_tensors(s.net.layers);
  auto gs = parameter_tensors(grads);
  ASSERT_EQ(params.size(), 8u);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto r = gradcheck::check(*params[i], *gs[i], loss, pattern);
    EXPECT_GT(r.checked, 0u);
    EXPECT_LE(r.max_rel, 1e-4) << "parameter tensor " << i;
  }
}

TEST(NetworkBackward, StaleCacheIsRejected) {
  Shrunk s;
  auto fwd = network_forward(s.net, s.x, Mode::train);
  const Tensor<double> up(Shape{3, 3}, 0.1);
  AdamState<double> adam;
  adam_step(s.net, network_backward(s.net, *fwd.cache, up), adam);
  EXPECT_THROW(network_backward(s.net, *fwd.cache, up), StateError);
  Shrunk other;
  EXPECT_THROW(network_backward(other.net, *fwd.cache, up), StateError);
}
