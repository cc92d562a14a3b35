#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "dataset.hpp"
#include "train.hpp"

namespace leafnet {

/// Invalid run configuration (unknown key, unparsable value, bad range).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Everything a `train` run needs. Defaults reproduce the reference
/// experiment: 50 epochs, batch 32, lr 0.01, 70/15/15 split, flips with
/// p = 0.5 and rotation factor 0.2.
struct RunConfig {
  std::filesystem::path dataset_root;
  std::filesystem::path output_dir = "run";
  TrainConfig train{};
  SplitSpec split{};
  bool split_seed_set = false;

  void validate() const {
    try {
      train.validate();
      split.validate();
    } catch (const ArgumentError &e) {
      throw ConfigError(e.what());
    }
    if (dataset_root.empty())
      throw ConfigError("no dataset root given");
  }

  SplitSpec effective_split() const {
    SplitSpec s = split;
    if (!split_seed_set)
      s.seed = train.seed;
    return s;
  }
};

namespace detail {

inline std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos)
    return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename U> U parse_number(const std::string &key, const std::string &value) {
  U out{};
  const char *first = value.data(), *last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last)
    throw ConfigError("bad value '" + value + "' for " + key);
  return out;
}

inline double parse_real(const std::string &key, const std::string &value) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception &) {
    throw ConfigError("bad value '" + value + "' for " + key);
  }
  if (used != value.size())
    throw ConfigError("bad value '" + value + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string &key, const std::string &value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on")
    return true;
  if (value == "false" || value == "0" || value == "no" || value == "off")
    return false;
  throw ConfigError("bad boolean '" + value + "' for " + key);
}

} // namespace detail

/// Applies one `key=value` setting.
inline void apply_setting(RunConfig &cfg, const std::string &key, const std::string &value) {
  using namespace detail;
  if (key == "dataset") cfg.dataset_root = value;
  else if (key == "out") cfg.output_dir = value;
  else if (key == "epochs") cfg.train.epochs = parse_number<std::size_t>(key, value);
  else if (key == "batch") cfg.train.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "lr") cfg.train.learning_rate = parse_real(key, value);
  else if (key == "seed") cfg.train.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "augment") cfg.train.augment = parse_bool(key, value);
  else if (key == "deterministic") cfg.train.deterministic = parse_bool(key, value);
  else if (key == "train_fraction") cfg.split.train = parse_real(key, value);
  else if (key == "validation_fraction") cfg.split.validation = parse_real(key, value);
  else if (key == "test_fraction") cfg.split.test = parse_real(key, value);
  else if (key == "split_seed") {
    cfg.split.seed = parse_number<std::uint64_t>(key, value);
    cfg.split_seed_set = true;
  } else if (key == "hflip") cfg.train.augmentation.horizontal_flip = parse_real(key, value);
  else if (key == "vflip") cfg.train.augmentation.vertical_flip = parse_real(key, value);
  else if (key == "rotation_factor") cfg.train.augmentation.rotation_factor = parse_real(key, value);
  else throw ConfigError("unknown configuration key '" + key + "'");
}

/// Reads a flat `key=value` file; blank lines and `#` comments are ignored.
inline void load_config_file(RunConfig &cfg, const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot read config file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = detail::trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    apply_setting(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

} // namespace leafnet
