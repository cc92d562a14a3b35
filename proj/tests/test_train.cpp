#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "leafnet/leafnet.hpp"
#include "support/toy_data.hpp"

using namespace leafnet;
namespace fs = std::filesystem;

namespace {

// Reduced network on 32x32 inputs so that training-loop tests stay quick.
const NetworkLayout kSmall{ImageShape{32, 32, 3}, {{8}, {8}}, 16, 3};

std::vector<char> slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

DataSplits train_only(const DatasetIndex &index) {
  DataSplits d;
  d.train = index;
  d.validation.class_names = d.test.class_names = index.class_names;
  return d;
}

class ToySet : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    root_ = toy::scratch("train");
    toy::write_dataset(root_, 8, 24);
    index_ = scan_dataset(root_);
    // One overfit run on the reduced network, shared by the tests below.
    overfit_ = build_network<float>(3, kSmall);
    TrainConfig cfg;
    cfg.seed = 3;
    cfg.deterministic = true;
    Trainer<float> trainer(overfit_, data_ = train_only(index_), cfg);
    // Until every sample is classified and the loss is close to zero.
    auto done = [&] {
      const auto &h = trainer.history();
      return !h.empty() && h.back().train_accuracy == 1.0 && h.back().train_loss < 0.05;
    };
    while (trainer.history().size() < 200 && !done())
      trainer.run_epoch();
    final_loss_ = trainer.history().back().train_loss;
    final_accuracy_ = trainer.history().back().train_accuracy;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path root_;
  static DatasetIndex index_;
  static DataSplits data_;
  static Network<float> overfit_;
  static double final_accuracy_;
  static double final_loss_;
};
fs::path ToySet::root_;
DatasetIndex ToySet::index_;
DataSplits ToySet::data_;
Network<float> ToySet::overfit_;
double ToySet::final_accuracy_ = 0;
double ToySet::final_loss_ = 0;

} // namespace

TEST_F(ToySet, OverfitReachesFullTrainAccuracy) {
  EXPECT_EQ(final_accuracy_, 1.0);
  EXPECT_LT(final_loss_, 0.05);
}

TEST_F(ToySet, EvaluateAfterOverfit) {
  const auto r = evaluate(overfit_, index_);
  EXPECT_EQ(r.samples, 24u);
  EXPECT_EQ(r.accuracy, 1.0);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t p = 0; p < 3; ++p)
      EXPECT_EQ(r.confusion[t][p], t == p ? 8u : 0u);
  EXPECT_EQ(r, evaluate(overfit_, index_));
}

TEST_F(ToySet, PredictTrainingImageConfidently) {
  for (std::size_t i = 0; i < index_.size(); i += 5) {
    const auto p = predict(overfit_, index_.entries[i].path, index_.class_names);
    EXPECT_EQ(p.label, index_.entries[i].label);
    EXPECT_GT(p.confidence, 0.9f);
    EXPECT_EQ(p.name, index_.class_names[static_cast<std::size_t>(p.label)]);
    double sum = 0;
    for (float v : p.distribution)
      sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_EQ(p.confidence, *std::max_element(p.distribution.begin(), p.distribution.end()));
  }
}

TEST_F(ToySet, SingleSampleConfusionHasOneCell) {
  DatasetIndex one = index_;
  one.entries.resize(1);
  const auto r = evaluate(overfit_, one);
  std::size_t nonzero = 0;
  for (const auto &row : r.confusion)
    for (auto v : row)
      nonzero += v != 0;
  EXPECT_EQ(nonzero, 1u);
  DatasetIndex none = index_;
  none.entries.clear();
  EXPECT_THROW(evaluate(overfit_, none), DatasetError);
}

TEST_F(ToySet, EqualSeedsGiveBitwiseEqualParameters) {
  auto run = [&] {
    auto net = build_network<float>(11, kSmall);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 11;
    cfg.deterministic = true;
    train(net, data_, cfg);
    return net;
  };
  const auto a = run(), b = run();
  const auto pa = parameter_tensors(a.layers), pb = parameter_tensors(b.layers);
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_EQ(std::memcmp(pa[i]->data(), pb[i]->data(), pa[i]->size() * sizeof(float)), 0);
}

TEST_F(ToySet, PrefetchDoesNotChangeTraining) {
  auto run = [&](bool deterministic) {
    auto net = build_network<float>(12, kSmall);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 12;
    cfg.deterministic = deterministic;
    auto h = train(net, data_, cfg);
    return std::pair{net, h};
  };
  const auto [a, ha] = run(true);
  const auto [b, hb] = run(false);
  for (std::size_t i = 0; i < ha.size(); ++i) {
    EXPECT_EQ(ha[i].train_loss, hb[i].train_loss);
    EXPECT_EQ(ha[i].train_accuracy, hb[i].train_accuracy);
  }
  const auto pa = parameter_tensors(a.layers), pb = parameter_tensors(b.layers);
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_EQ(*pa[i], *pb[i]);
}

TEST(Trainer, StepCounting) {
  const fs::path root = toy::scratch("steps");
  toy::write_dataset(root, 22, 16);
  auto index = scan_dataset(root);
  index.entries.resize(64);
  auto net = build_network<float>(1, kSmall);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.deterministic = true;
  const DataSplits data = train_only(index);
  Trainer<float> trainer(net, data, cfg);
  const auto m = trainer.run_epoch();
  EXPECT_EQ(trainer.optimizer_steps(), 2u);
  EXPECT_EQ(trainer.history().size(), 1u);
  EXPECT_EQ(m.epoch, 1u);
  EXPECT_EQ(m.val_loss, 0.0);
  EXPECT_EQ(m.wall_seconds, 0.0);
  EXPECT_EQ(net.revision, 2u);
  fs::remove_all(root);
}

TEST(Trainer, EmptyTrainSplitAndDivergence) {
  auto net = build_network<float>(1, kSmall);
  DataSplits empty;
  EXPECT_THROW(Trainer<float>(net, empty, TrainConfig{}), DatasetError);

  const fs::path root = toy::scratch("diverge");
  toy::write_dataset(root, 4, 16);
  const DataSplits data = train_only(scan_dataset(root));
  TrainConfig cfg;
  cfg.learning_rate = 1e30;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.deterministic = true;
  try {
    train(net, data, cfg);
    FAIL() << "expected a numeric error";
  } catch (const NumericError &e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos);
  }
  fs::remove_all(root);
}

// Expected to fail: with He-uniform weights the untrained logits spread too
// far for this bound (worst case near 0.56 over 100 seeds). Registered in
// CMake as an expected failure.
TEST(KnownDeviation, UntrainedIsNearUniform) {
  Xoshiro256 rng(5);
  const Image img = toy::noisy_image(1, 256, 256, rng);
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto p = predict_image(build_network<float>(seed), img);
    for (float v : p.distribution)
      worst = std::max(worst, std::abs(static_cast<double>(v) - 1.0 / 3));
  }
  EXPECT_LE(worst, 0.15);
}

TEST(Serialize, RoundTripIsBitwise) {
  const fs::path dir = toy::scratch("serialize");
  const auto net = build_network<float>(8, kSmall);
  save_model(net, dir / "m.leaf");
  const auto back = load_model<float>(dir / "m.leaf", kSmall.input);
  EXPECT_EQ(back.seed, 8u);
  EXPECT_EQ(back.specs, net.specs);
  Xoshiro256 rng(2);
  Tensor<float> x(Shape{3, 32, 32, 3});
  for (auto &v : x.values())
    v = static_cast<float>(rng.uniform());
  const auto a = network_forward(net, x).probs, b = network_forward(back, x).probs;
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);

  const auto dnet = build_network<double>(8, kSmall);
  const auto dback = decode_model<double>(encode_model(dnet), kSmall.input);
  EXPECT_EQ(*parameter_tensors(dback.layers)[0], *parameter_tensors(dnet.layers)[0]);
  EXPECT_THROW(decode_model<float>(encode_model(dnet), kSmall.input), FormatError);
  fs::remove_all(dir);
}

TEST(Serialize, CorruptionIsAFormatError) {
  const auto bytes = encode_model(build_network<float>(8, kSmall));
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    try {
      (void)decode_model<float>(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n)),
                                kSmall.input);
      ADD_FAILURE() << "truncation at " << n << " accepted";
    } catch (const FormatError &e) {
      EXPECT_LE(e.offset(), n);
      EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    }
  }
  auto wrong = bytes;
  wrong[0] = 'X';
  try {
    (void)decode_model<float>(wrong, kSmall.input);
    FAIL();
  } catch (const FormatError &e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
    EXPECT_EQ(e.offset(), 0u);
  }
  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW(decode_model<float>(version, kSmall.input), FormatError);
  // The stack does not fit a different input size.
  EXPECT_THROW(decode_model<float>(bytes, ImageShape{256, 256, 3}), FormatError);
  EXPECT_THROW(load_model<float>("/nonexistent/model.leaf"), IoError);
}

TEST(Metrics, CsvLinesAndDeterminism) {
  const fs::path dir = toy::scratch("metrics");
  std::vector<EpochMetrics> h;
  for (std::size_t e = 1; e <= 50; ++e)
    h.push_back({e, 1.0 / e, 0.5, 0.25, 0.125, 0.0});
  export_metrics(h, dir / "a.csv");
  export_metrics(h, dir / "b.csv");
  const auto a = slurp(dir / "a.csv");
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 51);
  EXPECT_EQ(a, slurp(dir / "b.csv"));
  EXPECT_EQ(std::string(a.begin(), a.begin() + 6), "epoch,");
  EXPECT_THROW(export_metrics({}, dir / "c.csv"), ArgumentError);
  EXPECT_THROW(export_metrics(h, dir / "missing" / "d.csv"), IoError);
  fs::remove_all(dir);
}

TEST(Metrics, EvalReportRows) {
  const fs::path dir = toy::scratch("report");
  EvalReport r;
  r.confusion = {{3, 1}, {0, 4}};
  r.per_class_recall = {0.75, 1.0};
  r.samples = 8;
  r.accuracy = 0.875;
  write_eval_report(r, {"a", "b"}, dir / "r.csv");
  const auto text = slurp(dir / "r.csv");
  EXPECT_EQ(std::string(text.begin(), text.end()),
            "class,true_count,predicted_count,recall\na,4,3,0.75\nb,4,5,1\nall,8,8,0.875\n");
  fs::remove_all(dir);
}
