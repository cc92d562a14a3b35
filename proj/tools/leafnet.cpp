// leafnet command-line front end: train / eval / predict / summary.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "leafnet/leafnet.hpp"

namespace fs = std::filesystem;
using namespace leafnet;

namespace {

enum Exit : int {
  kOk = 0,
  kUnexpected = 1,
  kConfig = 2,
  kDataset = 3,
  kNumeric = 4,
  kModel = 5,
  kNoPredictions = 6,
};

const std::vector<std::string> kDefaultClassNames = {"Early_blight", "Healthy", "Late_blight"};

struct Flags {
  std::string config;
  std::string dataset;
  std::string out;
  std::size_t epochs = 0;
  std::size_t batch = 0;
  double lr = 0;
  std::uint64_t seed = 0;
  bool no_augment = false;
  bool deterministic = false;
  std::string split = "test";
  std::string model;
  std::vector<std::string> images;
};

struct Options {
  CLI::Option *config = nullptr, *dataset = nullptr, *out = nullptr, *epochs = nullptr, *batch = nullptr,
              *lr = nullptr, *seed = nullptr;
};

void add_run_flags(CLI::App *cmd, Flags &f, Options &o) {
  o.config = cmd->add_option("--config", f.config, "key=value run configuration file");
  o.dataset = cmd->add_option("--dataset", f.dataset, "dataset root (one subdirectory per class)");
  o.out = cmd->add_option("--out", f.out, "output directory");
  o.seed = cmd->add_option("--seed", f.seed, "64-bit seed for initialization, split and shuffling");
  cmd->add_flag("--deterministic", f.deterministic, "single-threaded, timing-free run");
}

RunConfig resolve(const Flags &f, const Options &o) {
  RunConfig cfg;
  if (o.config && o.config->count())
    load_config_file(cfg, f.config);
  if (o.dataset && o.dataset->count())
    cfg.dataset_root = f.dataset;
  if (o.out && o.out->count())
    cfg.output_dir = f.out;
  if (o.epochs && o.epochs->count())
    cfg.train.epochs = f.epochs;
  if (o.batch && o.batch->count())
    cfg.train.batch_size = f.batch;
  if (o.lr && o.lr->count())
    cfg.train.learning_rate = f.lr;
  if (o.seed && o.seed->count())
    cfg.train.seed = f.seed;
  if (f.no_augment)
    cfg.train.augment = false;
  if (f.deterministic)
    cfg.train.deterministic = true;
  return cfg;
}

void print_confusion(const EvalReport &r, const std::vector<std::string> &names) {
  std::printf("confusion (rows = true, columns = predicted):\n");
  for (std::size_t c = 0; c < r.confusion.size(); ++c) {
    std::printf("  %-24s", c < names.size() ? names[c].c_str() : std::to_string(c).c_str());
    for (std::size_t v : r.confusion[c])
      std::printf(" %6zu", v);
    std::printf("\n");
  }
}

std::vector<std::string> class_names_near(const fs::path &model_path, std::size_t classes) {
  const fs::path manifest = model_path.parent_path() / "split_manifest.tsv";
  std::error_code ec;
  if (fs::exists(manifest, ec)) {
    try {
      auto splits = read_manifest(manifest, model_path.parent_path());
      if (splits.train.class_names.size() == classes)
        return splits.train.class_names;
    } catch (const Error &) {
      // fall through to the defaults
    }
  }
  if (classes == kDefaultClassNames.size())
    return kDefaultClassNames;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < classes; ++i)
    names.push_back(std::to_string(i));
  return names;
}

int cmd_train(const Flags &f, const Options &o) {
  RunConfig cfg;
  try {
    cfg = resolve(f, o);
    cfg.validate();
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  }

  DataSplits splits;
  try {
    DatasetIndex index = scan_dataset(cfg.dataset_root);
    for (const auto &s : index.skipped)
      std::cerr << "warning: skipped " << s << "\n";
    splits = split(index, cfg.effective_split());
    std::printf("dataset: %zu images, %zu classes; split %zu / %zu / %zu\n", index.size(), index.class_names.size(),
                splits.train.size(), splits.validation.size(), splits.test.size());
  } catch (const IoError &e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kDataset;
  } catch (const Error &e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kDataset;
  }

  auto net = build_network<float>(cfg.train.seed, NetworkLayout::canonical(splits.train.class_names.size()));
  ImageCache cache;
  std::vector<EpochMetrics> history;
  try {
    history = train(
        net, splits, cfg.train,
        [&cfg](const EpochMetrics &m) {
          std::printf("epoch %zu/%zu  train_loss %.6f  train_acc %.4f  val_loss %.6f  val_acc %.4f  (%.1fs)\n",
                      m.epoch, cfg.train.epochs, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy,
                      m.wall_seconds);
          std::fflush(stdout);
        },
        &cache);
  } catch (const NumericError &e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const DecodeError &e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kDataset;
  }

  fs::create_directories(cfg.output_dir);
  save_model(net, cfg.output_dir / "model.leaf");
  export_metrics(history, cfg.output_dir / "metrics.csv");
  write_manifest(splits, cfg.output_dir / "split_manifest.tsv");
  const EpochMetrics &last = history.back();
  std::printf("final train accuracy %.4f, validation accuracy %.4f\n", last.train_accuracy, last.val_accuracy);
  std::printf("wrote %s\n", (cfg.output_dir / "model.leaf").string().c_str());
  return kOk;
}

int cmd_eval(const Flags &f, const Options &o) {
  RunConfig cfg;
  try {
    cfg = resolve(f, o);
    if (cfg.dataset_root.empty())
      throw ConfigError("eval needs --dataset");
    if (f.split != "train" && f.split != "validation" && f.split != "test")
      throw ConfigError("--split must be train, validation or test");
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  }

  Network<float> net;
  try {
    net = load_model<float>(f.model);
  } catch (const Error &e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kModel;
  }

  const fs::path model_dir = fs::path(f.model).parent_path();
  DataSplits splits;
  try {
    const fs::path manifest = model_dir / "split_manifest.tsv";
    if (fs::exists(manifest)) {
      splits = read_manifest(manifest, cfg.dataset_root);
    } else {
      SplitSpec spec = cfg.effective_split();
      if (!(o.seed && o.seed->count()) && !cfg.split_seed_set)
        spec.seed = net.seed;
      splits = split(scan_dataset(cfg.dataset_root), spec);
    }
  } catch (const Error &e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kDataset;
  }
  const DatasetIndex &part = f.split == "train" ? splits.train : f.split == "validation" ? splits.validation : splits.test;

  EvalReport report;
  try {
    EvalOptions eo;
    eo.prefetch = !cfg.train.deterministic;
    report = evaluate(net, part, eo);
  } catch (const NumericError &e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error &e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kDataset;
  }

  std::printf("split %s: %zu samples\nloss %.6f\naccuracy %.4f\n", f.split.c_str(), report.samples, report.loss,
              report.accuracy);
  print_confusion(report, part.class_names);
  const fs::path out_dir = (o.out && o.out->count()) ? fs::path(f.out) : model_dir;
  if (!out_dir.empty())
    fs::create_directories(out_dir);
  write_eval_report(report, part.class_names, out_dir / "eval_report.csv");
  return kOk;
}

int cmd_predict(const Flags &f) {
  Network<float> net;
  try {
    net = load_model<float>(f.model);
  } catch (const Error &e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kModel;
  }
  const auto names = class_names_near(f.model, net.classes());
  std::size_t ok = 0;
  for (const auto &path : f.images) {
    try {
      const auto p = predict(net, path, names);
      std::printf("%s\t%s\t%.6f", path.c_str(), p.name.c_str(), static_cast<double>(p.confidence));
      for (float v : p.distribution)
        std::printf("\t%.6f", static_cast<double>(v));
      std::printf("\n");
      ++ok;
    } catch (const Error &e) {
      std::cerr << "warning: " << path << ": " << e.what() << "\n";
    }
  }
  return ok > 0 ? kOk : kNoPredictions;
}

int cmd_summary(const Flags &f) {
  Network<float> net;
  if (!f.model.empty()) {
    try {
      net = load_model<float>(f.model);
    } catch (const Error &e) {
      std::cerr << "model error: " << e.what() << "\n";
      return kModel;
    }
  } else {
    net = build_network<float>(f.seed);
  }
  std::printf("%-18s%-18s%s\n", "Layer", "Output shape", "Param #");
  std::size_t total = 0;
  for (const auto &row : summarize(net)) {
    std::string shape;
    for (std::size_t d : row.output.dims())
      shape += (shape.empty() ? "" : "x") + std::to_string(d);
    std::printf("%-18s%-18s%zu\n", row.name.c_str(), shape.c_str(), row.parameters);
    total += row.parameters;
  }
  std::printf("Total %zu\n", total);
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"leafnet: potato leaf disease CNN (train, eval, predict, summary)"};
  app.require_subcommand(1);
  Flags f;

  Options train_opts;
  auto *train_cmd = app.add_subcommand("train", "train the network on a dataset directory");
  add_run_flags(train_cmd, f, train_opts);
  train_opts.epochs = train_cmd->add_option("--epochs", f.epochs, "training epochs")->check(CLI::PositiveNumber);
  train_opts.batch = train_cmd->add_option("--batch", f.batch, "batch size")->check(CLI::PositiveNumber);
  train_opts.lr = train_cmd->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--no-augment", f.no_augment, "disable flips and rotation");

  Options eval_opts;
  auto *eval_cmd = app.add_subcommand("eval", "evaluate a model on one split");
  add_run_flags(eval_cmd, f, eval_opts);
  eval_cmd->add_option("--model", f.model, "model file")->required();
  eval_cmd->add_option("--split", f.split, "train, validation or test");

  auto *predict_cmd = app.add_subcommand("predict", "classify images");
  predict_cmd->add_option("--model", f.model, "model file")->required();
  predict_cmd->add_option("images", f.images, "JPEG files")->required();

  auto *summary_cmd = app.add_subcommand("summary", "print the layer table");
  summary_cmd->add_option("--model", f.model, "model file (default: fresh canonical build)");
  summary_cmd->add_option("--seed", f.seed, "seed of the fresh build");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*train_cmd)
      return cmd_train(f, train_opts);
    if (*eval_cmd)
      return cmd_eval(f, eval_opts);
    if (*predict_cmd)
      return cmd_predict(f);
    if (*summary_cmd)
      return cmd_summary(f);
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUnexpected;
  }
  return kConfig;
}
