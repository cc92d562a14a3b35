#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "network.hpp"

namespace leafnet {

struct LossValue {
  double mean_loss = 0;      // nats per sample
  double batch_accuracy = 0; // in [0, 1]
};

namespace detail {

template <typename T> void check_labels(const Tensor<T> &probs, std::span<const int> labels) {
  if (probs.shape().rank() != 2)
    throw ShapeError("expected (n,k) probabilities, got " + probs.shape().to_string());
  const std::size_t n = probs.shape()[0], k = probs.shape()[1];
  if (labels.size() != n)
    throw ArgumentError("got " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw ArgumentError("label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
}

} // namespace detail

inline constexpr double kLogClamp = 1e-12;

/// Fraction of rows whose argmax equals the label (ties -> lowest index).
template <typename T> double accuracy(const Tensor<T> &probs, std::span<const int> labels) {
  detail::check_labels(probs, labels);
  const std::size_t n = probs.shape()[0], k = probs.shape()[1];
  if (n == 0)
    return 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (argmax(std::span<const T>(probs.data() + i * k, k)) == static_cast<std::size_t>(labels[i]))
      ++hits;
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// Mean categorical cross-entropy, -log(max(p_true, 1e-12)), plus accuracy.
template <typename T> LossValue cross_entropy(const Tensor<T> &probs, std::span<const int> labels) {
  detail::check_labels(probs, labels);
  const std::size_t n = probs.shape()[0], k = probs.shape()[1];
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = static_cast<double>(probs[i * k + static_cast<std::size_t>(labels[i])]);
    sum -= std::log(std::max(p, kLogClamp));
  }
  LossValue v;
  v.mean_loss = n ? sum / static_cast<double>(n) : 0.0;
  v.batch_accuracy = accuracy(probs, labels);
  return v;
}

/// Gradient of mean cross-entropy w.r.t. the logits feeding softmax:
/// (p - onehot(label)) / n.
template <typename T> Tensor<T> softmax_xent_gradient(const Tensor<T> &probs, std::span<const int> labels) {
  detail::check_labels(probs, labels);
  const std::size_t n = probs.shape()[0], k = probs.shape()[1];
  Tensor<T> g(probs.shape());
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const T target = static_cast<std::size_t>(labels[i]) == j ? T(1) : T(0);
      g[i * k + j] = (probs[i * k + j] - target) * inv;
    }
  return g;
}

/// Adam moments for a list of parameter tensors. Defaults: lr 0.01,
/// beta1 0.9, beta2 0.999, epsilon 1e-7.
template <typename T> struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;

  AdamState() = default;
  explicit AdamState(double learning_rate) : lr(learning_rate) {}
};

/// One in-place Adam update. Moments are created lazily on the first step.
/// Gradients are checked for finiteness before anything is modified.
template <typename T>
void adam_step(std::span<Tensor<T> *const> params, std::span<const Tensor<T> *const> grads, AdamState<T> &state) {
  if (params.size() != grads.size())
    throw ShapeError("adam: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(params[i]->shape() == grads[i]->shape()))
      throw ShapeError("adam: gradient " + grads[i]->shape().to_string() + " does not match parameter " +
                       params[i]->shape().to_string());
    if (!grads[i]->all_finite())
      throw NumericError("adam: non-finite gradient in parameter tensor " + std::to_string(i));
  }
  if (state.m.empty()) {
    for (auto *p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  } else {
    if (state.m.size() != params.size())
      throw ShapeError("adam: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                       std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i)
      if (!(state.m[i].shape() == params[i]->shape()))
        throw ShapeError("adam: state shape mismatch for tensor " + std::to_string(i));
  }

  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T ob1 = static_cast<T>(1.0 - state.beta1), ob2 = static_cast<T>(1.0 - state.beta2);
  const T lr = static_cast<T>(state.lr), eps = static_cast<T>(state.epsilon);
  const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T *p = params[i]->data();
    const T *g = grads[i]->data();
    T *m = state.m[i].data();
    T *v = state.v[i].data();
    for (std::size_t j = 0, n = params[i]->size(); j < n; ++j) {
      m[j] = b1 * m[j] + ob1 * g[j];
      v[j] = b2 * v[j] + ob2 * g[j] * g[j];
      const T mhat = m[j] * ic1;
      const T vhat = v[j] * ic2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

/// Adam over every parameter of a network; bumps its revision.
template <typename T> void adam_step(Network<T> &net, const Gradients<T> &grads, AdamState<T> &state) {
  if (grads.size() != net.layers.size())
    throw ShapeError("adam: gradient structure does not mirror the network");
  auto params = parameter_tensors(net.layers);
  auto gs = parameter_tensors(grads);
  adam_step<T>(std::span<Tensor<T> *const>(params), std::span<const Tensor<T> *const>(gs), state);
  ++net.revision;
}

} // namespace leafnet
