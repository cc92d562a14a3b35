#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "image.hpp"
#include "network.hpp"
#include "optim.hpp"

namespace leafnet {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augmentation{};
  /// No prefetch thread, and wall_seconds is recorded as 0 so that metric
  /// histories compare bytewise.
  bool deterministic = false;

  void validate() const {
    if (epochs < 1)
      throw ArgumentError("epochs must be >= 1");
    if (batch_size < 1)
      throw ArgumentError("batch size must be >= 1");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate))
      throw ArgumentError("learning rate must be positive");
    augmentation.validate();
  }
};

struct EpochMetrics {
  std::size_t epoch = 0; // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double wall_seconds = 0;

  friend bool operator==(const EpochMetrics &, const EpochMetrics &) = default;
};

struct EvalReport {
  double loss = 0;
  double accuracy = 0;
  std::vector<std::vector<std::size_t>> confusion; // [true][predicted]
  std::vector<double> per_class_recall;
  std::size_t samples = 0;

  friend bool operator==(const EvalReport &, const EvalReport &) = default;
};

struct EvalOptions {
  std::size_t batch_size = 32;
  ImageCache *cache = nullptr;
  bool prefetch = false;
};

/// Scores `index` without augmentation or parameter changes. The confusion
/// matrix is indexed [true class][predicted class].
template <typename T> EvalReport evaluate(const Network<T> &net, const DatasetIndex &index, const EvalOptions &opt = {}) {
  if (index.empty())
    throw DatasetError("cannot evaluate an empty index");
  const std::size_t k = net.classes();
  EvalReport r;
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  BatchOptions bo;
  bo.batch_size = opt.batch_size;
  bo.shuffle = false;
  bo.image = net.input;
  bo.cache = opt.cache;
  bo.prefetch = opt.prefetch;
  BatchStream<T> stream(index, bo);
  double loss_sum = 0;
  while (auto batch = stream.next()) {
    auto fwd = network_forward(net, std::move(batch->x), Mode::infer);
    const LossValue lv = cross_entropy(fwd.probs, std::span<const int>(batch->y));
    loss_sum += lv.mean_loss * static_cast<double>(batch->size());
    for (std::size_t i = 0; i < batch->size(); ++i) {
      const std::size_t pred = argmax(std::span<const T>(fwd.probs.data() + i * k, k));
      ++r.confusion[static_cast<std::size_t>(batch->y[i])][pred];
    }
    r.samples += batch->size();
  }
  std::size_t diag = 0;
  r.per_class_recall.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    diag += r.confusion[c][c];
    std::size_t row = 0;
    for (std::size_t p = 0; p < k; ++p)
      row += r.confusion[c][p];
    r.per_class_recall[c] = row ? static_cast<double>(r.confusion[c][c]) / static_cast<double>(row) : 0.0;
  }
  r.accuracy = static_cast<double>(diag) / static_cast<double>(r.samples);
  r.loss = loss_sum / static_cast<double>(r.samples);
  return r;
}

/// Epoch-at-a-time training driver. Owns the Adam state; the network is
/// updated in place.
template <typename T> class Trainer {
public:
  Trainer(Network<T> &net, const DataSplits &data, TrainConfig cfg, ImageCache *cache = nullptr)
      : net_(net), data_(data), cfg_(std::move(cfg)), adam_(cfg_.learning_rate), cache_(cache) {
    cfg_.validate();
    if (data_.train.empty())
      throw DatasetError("training split is empty");
  }

  EpochMetrics run_epoch() {
    const auto start = std::chrono::steady_clock::now();
    const std::size_t epoch = history_.size();
    BatchOptions bo;
    bo.batch_size = cfg_.batch_size;
    bo.seed = cfg_.seed;
    bo.epoch = epoch;
    bo.image = net_.input;
    bo.cache = cache_;
    bo.prefetch = !cfg_.deterministic;
    if (cfg_.augment)
      bo.augment = cfg_.augmentation;
    BatchStream<T> stream(data_.train, bo);

    double loss_sum = 0, hits = 0;
    std::size_t seen = 0;
    while (auto batch = stream.next()) {
      const std::string where =
          "epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(batch->index_in_epoch + 1);
      const std::span<const int> labels(batch->y);
      LossValue lv;
      try {
        auto fwd = network_forward(net_, std::move(batch->x), Mode::train);
        lv = cross_entropy(fwd.probs, labels);
        if (!std::isfinite(lv.mean_loss) || !fwd.probs.all_finite())
          throw NumericError("non-finite loss");
        const Tensor<T> grad = softmax_xent_gradient(fwd.probs, labels);
        const Gradients<T> grads = network_backward(net_, *fwd.cache, grad, Upstream::logits);
        adam_step(net_, grads, adam_);
      } catch (const NumericError &e) {
        throw NumericError(std::string(e.what()) + " at " + where);
      }
      ++steps_;
      loss_sum += lv.mean_loss * static_cast<double>(batch->size());
      hits += lv.batch_accuracy * static_cast<double>(batch->size());
      seen += batch->size();
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_accuracy = hits / static_cast<double>(seen);
    if (!data_.validation.empty()) {
      EvalOptions eo;
      eo.batch_size = cfg_.batch_size;
      eo.cache = cache_;
      eo.prefetch = !cfg_.deterministic;
      const EvalReport val = evaluate(net_, data_.validation, eo);
      m.val_loss = val.loss;
      m.val_accuracy = val.accuracy;
    }
    m.wall_seconds =
        cfg_.deterministic ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history_.push_back(m);
    return m;
  }

  const std::vector<EpochMetrics> &history() const noexcept { return history_; }
  std::uint64_t optimizer_steps() const noexcept { return steps_; }
  const AdamState<T> &optimizer() const noexcept { return adam_; }

private:
  Network<T> &net_;
  const DataSplits &data_;
  TrainConfig cfg_;
  AdamState<T> adam_;
  ImageCache *cache_;
  std::vector<EpochMetrics> history_;
  std::uint64_t steps_ = 0;
};

using MetricsSink = std::function<void(const EpochMetrics &)>;

/// Runs cfg.epochs epochs; validation metrics are taken without
/// augmentation after every epoch. Returns the full history.
template <typename T>
std::vector<EpochMetrics> train(Network<T> &net, const DataSplits &data, const TrainConfig &cfg,
                                const MetricsSink &sink = {}, ImageCache *cache = nullptr) {
  Trainer<T> trainer(net, data, cfg, cache);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const EpochMetrics m = trainer.run_epoch();
    if (sink)
      sink(m);
  }
  return trainer.history();
}

template <typename T> struct Prediction {
  int label = 0;
  std::string name;
  T confidence = 0;
  std::vector<T> distribution;
};

template <typename T>
Prediction<T> predict_image(const Network<T> &net, const Image &img, const std::vector<std::string> &class_names = {}) {
  const Image sized = resize_bilinear(img, net.input.height, net.input.width);
  auto fwd = network_forward(net, normalize<T>(sized), Mode::infer);
  Prediction<T> p;
  p.distribution.assign(fwd.probs.values().begin(), fwd.probs.values().end());
  const std::size_t best = argmax(p.distribution);
  p.label = static_cast<int>(best);
  p.confidence = p.distribution[best];
  p.name = best < class_names.size() ? class_names[best] : std::to_string(best);
  return p;
}

/// decode -> resize -> normalize -> forward(infer).
template <typename T>
Prediction<T> predict(const Network<T> &net, const fs::path &image_path, const std::vector<std::string> &class_names = {}) {
  return predict_image(net, decode_jpeg(image_path), class_names);
}

namespace detail {
inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
} // namespace detail

inline void export_metrics(const std::vector<EpochMetrics> &history, const fs::path &path) {
  if (history.empty())
    throw ArgumentError("cannot export an empty metrics history");
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds\n";
  for (const auto &m : history) {
    out << m.epoch << ',' << detail::format_real(m.train_loss) << ',' << detail::format_real(m.train_accuracy)
        << ',' << detail::format_real(m.val_loss) << ',' << detail::format_real(m.val_accuracy) << ','
        << detail::format_real(m.wall_seconds) << '\n';
  }
  if (!out)
    throw IoError("failed writing " + path.string());
}

/// `class,true_count,predicted_count,recall` per class, then a summary row
/// `all,<samples>,<samples>,<accuracy>`.
inline void write_eval_report(const EvalReport &r, const std::vector<std::string> &class_names, const fs::path &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << "class,true_count,predicted_count,recall\n";
  const std::size_t k = r.confusion.size();
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t truth = 0, predicted = 0;
    for (std::size_t p = 0; p < k; ++p) {
      truth += r.confusion[c][p];
      predicted += r.confusion[p][c];
    }
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    out << name << ',' << truth << ',' << predicted << ',' << detail::format_real(r.per_class_recall[c]) << '\n';
  }
  out << "all," << r.samples << ',' << r.samples << ',' << detail::format_real(r.accuracy) << '\n';
  if (!out)
    throw IoError("failed writing " + path.string());
}

} // namespace leafnet
