#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "augment.hpp"
#include "image.hpp"
#include "network.hpp"
#include "rng.hpp"

namespace leafnet {

namespace fs = std::filesystem;

struct DatasetEntry {
  fs::path path;
  int label = 0;
};

/// Image catalog: `root/<class_name>/<file>`, class index = position of the
/// class directory in lexicographic order.
struct DatasetIndex {
  fs::path root;
  std::vector<std::string> class_names;
  std::vector<DatasetEntry> entries;
  /// Files that were present but not decodable, with the reason.
  std::vector<std::string> skipped;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(class_names.size(), 0);
    for (const auto &e : entries)
      ++counts[static_cast<std::size_t>(e.label)];
    return counts;
  }

  fs::path relative(const DatasetEntry &e) const { return e.path.lexically_relative(root); }
};

inline DatasetIndex scan_dataset(const fs::path &root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec))
    throw IoError("dataset root " + root.string() + " is not a directory");
  DatasetIndex index;
  index.root = root;
  std::vector<fs::path> class_dirs;
  for (const auto &d : fs::directory_iterator(root))
    if (d.is_directory())
      class_dirs.push_back(d.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty())
    throw DatasetError("no class directories under " + root.string());

  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto &f : fs::directory_iterator(class_dirs[c]))
      if (f.is_regular_file())
        files.push_back(f.path());
    std::sort(files.begin(), files.end());
    std::size_t kept = 0;
    for (const auto &f : files) {
      if (probe_jpeg(f)) {
        index.entries.push_back({f, static_cast<int>(c)});
        ++kept;
      } else {
        index.skipped.push_back(f.string() + ": not a decodable JPEG");
      }
    }
    if (kept == 0)
      throw DatasetError("class directory " + class_dirs[c].string() + " holds no decodable images");
    index.class_names.push_back(class_dirs[c].filename().string());
  }
  return index;
}

/// Partition fractions and the seed of the per-class shuffle.
struct SplitSpec {
  double train = 0.70;
  double validation = 0.15;
  double test = 0.15;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(train > 0 && validation > 0 && test > 0))
      throw ArgumentError("split fractions must be positive");
    if (std::abs(train + validation + test - 1.0) > 1e-9)
      throw ArgumentError("split fractions must sum to 1");
  }
};

struct DataSplits {
  DatasetIndex train;
  DatasetIndex validation;
  DatasetIndex test;
};

inline constexpr std::uint64_t kSplitStream = 0x53504C4954ULL;   // "SPLIT"
inline constexpr std::uint64_t kShuffleStream = 0x53485546ULL;   // "SHUF"
inline constexpr std::uint64_t kAugmentStream = 0x4155474DULL;   // "AUGM"

/// Fisher-Yates, i from n-1 down to 1, j = rng.below(i + 1).
template <typename V> void shuffle_in_place(std::vector<V> &v, Xoshiro256 &rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng.below(i)]);
}

/// Stratified split. Within each class (in class order) the entries are
/// shuffled with one Xoshiro256 stream seeded from spec.seed; the train part
/// gets floor(0.70 c), validation floor(0.15 c), test the remainder.
inline DataSplits split(const DatasetIndex &index, const SplitSpec &spec) {
  spec.validate();
  DataSplits out;
  for (DatasetIndex *part : {&out.train, &out.validation, &out.test}) {
    part->root = index.root;
    part->class_names = index.class_names;
  }
  Xoshiro256 rng(derive_seed({spec.seed, kSplitStream}));
  for (std::size_t c = 0; c < index.class_names.size(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < index.entries.size(); ++i)
      if (index.entries[i].label == static_cast<int>(c))
        members.push_back(i);
    if (members.size() < 3)
      throw DatasetError("class " + index.class_names[c] + " has " + std::to_string(members.size()) +
                         " images; at least 3 are needed to split");
    shuffle_in_place(members, rng);
    const double count = static_cast<double>(members.size());
    // The epsilon keeps products such as 0.7 * 1000 from flooring to 699.
    const auto n_train = static_cast<std::size_t>(std::floor(spec.train * count + 1e-9));
    const auto n_val = static_cast<std::size_t>(std::floor(spec.validation * count + 1e-9));
    for (std::size_t k = 0; k < members.size(); ++k) {
      DatasetIndex &dst = k < n_train ? out.train : (k < n_train + n_val ? out.validation : out.test);
      dst.entries.push_back(index.entries[members[k]]);
    }
  }
  return out;
}

/// `<relative_path>\t<class_index>\t<partition>` per entry; train, then
/// validation, then test.
inline void write_manifest(const DataSplits &splits, const fs::path &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + path.string());
  auto emit = [&](const DatasetIndex &part, const char *name) {
    for (const auto &e : part.entries)
      out << part.relative(e).generic_string() << '\t' << e.label << '\t' << name << '\n';
  };
  emit(splits.train, "train");
  emit(splits.validation, "validation");
  emit(splits.test, "test");
  if (!out)
    throw IoError("failed writing " + path.string());
}

/// Reads a manifest against `root`. Class names are recovered from the first
/// path component of each class's entries.
inline DataSplits read_manifest(const fs::path &path, const fs::path &root) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot read manifest " + path.string());
  DataSplits out;
  std::map<int, std::string> names;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty())
      continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      throw DatasetError("manifest line " + std::to_string(line_no) + " is malformed");
    const std::string rel = line.substr(0, t1);
    int label = 0;
    try {
      label = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
    } catch (const std::exception &) {
      throw DatasetError("manifest line " + std::to_string(line_no) + " has a bad class index");
    }
    if (label < 0)
      throw DatasetError("manifest line " + std::to_string(line_no) + " has a negative class index");
    const std::string part = line.substr(t2 + 1);
    DatasetIndex *dst = part == "train" ? &out.train
                        : part == "validation" ? &out.validation
                        : part == "test" ? &out.test
                                         : nullptr;
    if (!dst)
      throw DatasetError("manifest line " + std::to_string(line_no) + " names unknown partition '" + part + "'");
    const fs::path relp(rel);
    names.emplace(label, relp.begin() != relp.end() ? relp.begin()->string() : rel);
    dst->entries.push_back({root / relp, label});
  }
  std::vector<std::string> class_names;
  for (int c = 0; c < static_cast<int>(names.size()); ++c) {
    auto it = names.find(c);
    if (it == names.end())
      throw DatasetError("manifest class indices are not contiguous");
    class_names.push_back(it->second);
  }
  for (DatasetIndex *p : {&out.train, &out.validation, &out.test}) {
    p->root = root;
    p->class_names = class_names;
  }
  return out;
}

/// Decoded, resized images keyed by path and target size. Safe to share
/// between the prefetch worker and the consumer. Stops inserting once
/// `capacity_bytes` is reached.
class ImageCache {
public:
  explicit ImageCache(std::size_t capacity_bytes = std::size_t{1} << 30) : capacity_(capacity_bytes) {}

  std::shared_ptr<const Image> get(const fs::path &path, std::size_t height, std::size_t width) {
    const std::string key = path.string() + '#' + std::to_string(height) + 'x' + std::to_string(width);
    {
      std::lock_guard lock(mutex_);
      if (auto it = images_.find(key); it != images_.end())
        return it->second;
    }
    auto img = std::make_shared<const Image>(decode_resize(path, height, width));
    std::lock_guard lock(mutex_);
    if (bytes_ + img->pixels.size() <= capacity_) {
      images_.emplace(key, img);
      bytes_ += img->pixels.size();
    }
    return img;
  }

  std::size_t bytes() const {
    std::lock_guard lock(mutex_);
    return bytes_;
  }

private:
  mutable std::mutex mutex_;
  std::unordered_map<std::string, std::shared_ptr<const Image>> images_;
  std::size_t capacity_;
  std::size_t bytes_ = 0;
};

template <typename T> struct Batch {
  Tensor<T> x; // (n, h, w, 3), values in [0, 1]
  std::vector<int> y;
  std::vector<std::size_t> entries; // positions in the source index
  std::size_t epoch = 0;
  std::size_t index_in_epoch = 0;

  std::size_t size() const noexcept { return y.size(); }
};

struct BatchOptions {
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  bool shuffle = true;
  std::optional<AugmentConfig> augment;
  ImageShape image{};
  /// Prepare up to two batches ahead on a worker thread.
  bool prefetch = false;
  ImageCache *cache = nullptr;
};

/// Ordered stream of batches over one epoch.
///
/// The order is a Fisher-Yates shuffle seeded from (seed, epoch); the
/// augmentation stream of each sample is seeded from (seed, epoch, position),
/// so the delivered sequence does not depend on prefetching or timing.
template <typename T> class BatchStream {
public:
  BatchStream(const DatasetIndex &index, BatchOptions options)
      : index_(index), options_(std::move(options)) {
    if (index_.empty())
      throw DatasetError("cannot batch an empty index");
    if (options_.batch_size == 0)
      throw ArgumentError("batch size must be positive");
    if (options_.augment)
      options_.augment->validate();
    order_.resize(index_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (options_.shuffle) {
      Xoshiro256 rng(derive_seed({options_.seed, static_cast<std::uint64_t>(options_.epoch), kShuffleStream}));
      shuffle_in_place(order_, rng);
    }
    count_ = (order_.size() + options_.batch_size - 1) / options_.batch_size;
    if (options_.prefetch)
      worker_ = std::thread([this] { produce(); });
  }

  BatchStream(const BatchStream &) = delete;
  BatchStream &operator=(const BatchStream &) = delete;

  ~BatchStream() {
    if (worker_.joinable()) {
      {
        std::lock_guard lock(mutex_);
        stop_ = true;
      }
      ready_.notify_all();
      worker_.join();
    }
  }

  std::size_t batch_count() const noexcept { return count_; }
  const std::vector<std::size_t> &order() const noexcept { return order_; }

  std::optional<Batch<T>> next() {
    if (!options_.prefetch) {
      if (next_ >= count_)
        return std::nullopt;
      return make_batch(next_++);
    }
    std::unique_lock lock(mutex_);
    ready_.wait(lock, [this] { return !queue_.empty() || error_ || produced_ == count_; });
    if (!queue_.empty()) {
      Batch<T> b = std::move(queue_.front());
      queue_.pop_front();
      lock.unlock();
      ready_.notify_all();
      return b;
    }
    if (error_)
      std::rethrow_exception(error_);
    return std::nullopt;
  }

  /// Builds batch `b` directly, independent of the stream position.
  Batch<T> make_batch(std::size_t b) const {
    const std::size_t begin = b * options_.batch_size;
    const std::size_t end = std::min(begin + options_.batch_size, order_.size());
    const ImageShape &is = options_.image;
    Batch<T> batch;
    batch.epoch = options_.epoch;
    batch.index_in_epoch = b;
    batch.x = Tensor<T>(Shape{end - begin, is.height, is.width, is.channels});
    for (std::size_t pos = begin; pos < end; ++pos) {
      const DatasetEntry &e = index_.entries[order_[pos]];
      Image img = load(e.path);
      if (options_.augment && options_.augment->enabled) {
        Xoshiro256 rng(derive_seed(
            {options_.seed, static_cast<std::uint64_t>(options_.epoch), kAugmentStream, static_cast<std::uint64_t>(pos)}));
        img = augment(std::move(img), rng, *options_.augment);
      }
      normalize_into(img, batch.x, pos - begin);
      batch.y.push_back(e.label);
      batch.entries.push_back(order_[pos]);
    }
    return batch;
  }

private:
  Image load(const fs::path &path) const {
    const ImageShape &is = options_.image;
    if (options_.cache)
      return *options_.cache->get(path, is.height, is.width);
    return decode_resize(path, is.height, is.width);
  }

  void produce() {
    for (std::size_t b = 0; b < count_; ++b) {
      {
        std::unique_lock lock(mutex_);
        ready_.wait(lock, [this] { return stop_ || queue_.size() < kLookahead; });
        if (stop_)
          return;
      }
      try {
        Batch<T> batch = make_batch(b);
        std::lock_guard lock(mutex_);
        queue_.push_back(std::move(batch));
        ++produced_;
      } catch (...) {
        std::lock_guard lock(mutex_);
        error_ = std::current_exception();
        ready_.notify_all();
        return;
      }
      ready_.notify_all();
    }
  }

  static constexpr std::size_t kLookahead = 2;

  const DatasetIndex &index_;
  BatchOptions options_;
  std::vector<std::size_t> order_;
  std::size_t count_ = 0;
  std::size_t next_ = 0;

  std::thread worker_;
  std::mutex mutex_;
  std::condition_variable ready_;
  std::deque<Batch<T>> queue_;
  std::size_t produced_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
};

} // namespace leafnet
