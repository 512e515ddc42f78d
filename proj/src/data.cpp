#include "sprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "sprune/error.hpp"

namespace sprune {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Tensor Dataset::gather(std::span<const int> indices) const {
  const int c = channels(), h = height(), w = width();
  const std::size_t plane = static_cast<std::size_t>(c) * h * w;
  Tensor batch({static_cast<int>(indices.size()), c, h, w});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int i = indices[k];
    require(i >= 0 && i < size(), ErrorKind::contract, "sample index out of range");
    std::memcpy(batch.ptr() + k * plane, images.ptr() + static_cast<std::size_t>(i) * plane,
                plane * sizeof(float));
  }
  return batch;
}

std::vector<int> Dataset::gather_labels(std::span<const int> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

void expect_split(const Dataset& data, Split expected, std::string_view consumer) {
  require(data.split == expected, ErrorKind::split,
          std::string(consumer) + " expects the " + std::string(to_string(expected)) +
              " split, got " + std::string(to_string(data.split)));
}

// ---- CIFAR-10 ----------------------------------------------------------------

Dataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& name) {
  const std::size_t whole = bytes.size() / kCifarRecordBytes;
  if (bytes.size() % kCifarRecordBytes != 0 || bytes.empty()) {
    fail(ErrorKind::format, name + ": truncated record at byte offset " +
                                std::to_string(whole * kCifarRecordBytes) + " (file is " +
                                std::to_string(bytes.size()) + " bytes, records are " +
                                std::to_string(kCifarRecordBytes) + ")");
  }
  Dataset d;
  d.class_count = 10;
  d.images = Tensor({static_cast<int>(whole), 3, 32, 32});
  d.labels.resize(whole);
  d.origin.resize(whole);
  for (std::size_t r = 0; r < whole; ++r) {
    const std::size_t off = r * kCifarRecordBytes;
    const std::uint8_t label = bytes[off];
    if (label > 9) {
      fail(ErrorKind::corruption, name + ": label byte " + std::to_string(label) +
                                      " at byte offset " + std::to_string(off));
    }
    d.labels[r] = label;
    d.origin[r] = static_cast<int>(r);
    float* dst = d.images.ptr() + r * kCifarImageBytes;
    for (std::size_t b = 0; b < kCifarImageBytes; ++b) {
      dst[b] = static_cast<float>(bytes[off + 1 + b]) / 255.0f;
    }
  }
  return d;
}

std::vector<std::uint8_t> encode_cifar10(const Dataset& data) {
  require(data.images.rank() == 4 && data.channels() == 3 && data.height() == 32 &&
              data.width() == 32,
          ErrorKind::dimension, "CIFAR-10 records hold 3x32x32 images");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(data.size()) * kCifarRecordBytes);
  for (int r = 0; r < data.size(); ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * kCifarRecordBytes;
    const int label = data.labels[static_cast<std::size_t>(r)];
    require(label >= 0 && label <= 9, ErrorKind::label, "CIFAR-10 labels are 0..9");
    out[off] = static_cast<std::uint8_t>(label);
    const float* src = data.images.ptr() + static_cast<std::size_t>(r) * kCifarImageBytes;
    for (std::size_t b = 0; b < kCifarImageBytes; ++b) {
      const float v = std::clamp(src[b], 0.0f, 1.0f) * 255.0f;
      out[off + 1 + b] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  return out;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Dataset concat(std::vector<Dataset> parts) {
  Dataset out;
  int total = 0;
  for (const auto& p : parts) total += p.size();
  out.images = Tensor({total, 3, 32, 32});
  out.class_count = 10;
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::memcpy(out.images.ptr() + at, p.images.ptr(), p.images.numel() * sizeof(float));
    at += p.images.numel();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.origin.resize(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) out.origin[static_cast<std::size_t>(i)] = i;
  return out;
}

}  // namespace

TrainTestPair load_cifar10(const std::string& directory) {
  const std::filesystem::path dir(directory);
  std::vector<Dataset> parts;
  for (int b = 1; b <= 5; ++b) {
    const auto path = dir / ("data_batch_" + std::to_string(b) + ".bin");
    const auto bytes = read_file(path);
    require(bytes.size() == kCifarRecordBytes * kCifarBatchRecords, ErrorKind::format,
            path.string() + ": expected " +
                std::to_string(kCifarRecordBytes * kCifarBatchRecords) + " bytes, found " +
                std::to_string(bytes.size()) + "; first bad byte offset " +
                std::to_string(std::min(bytes.size(), kCifarRecordBytes * kCifarBatchRecords)));
    parts.push_back(parse_cifar10(bytes, path.string()));
  }
  const auto test_path = dir / "test_batch.bin";
  const auto test_bytes = read_file(test_path);
  require(test_bytes.size() == kCifarRecordBytes * kCifarBatchRecords, ErrorKind::format,
          test_path.string() + ": expected " +
              std::to_string(kCifarRecordBytes * kCifarBatchRecords) + " bytes, found " +
              std::to_string(test_bytes.size()));
  TrainTestPair pair{concat(std::move(parts)), parse_cifar10(test_bytes, test_path.string())};
  pair.train.split = Split::train;
  pair.train.augment = true;
  pair.test.split = Split::test;
  const auto stats = channel_stats(pair.train);
  normalize(pair.train, stats);
  normalize(pair.test, stats);
  return pair;
}

// ---- preprocessing -----------------------------------------------------------

ChannelStats channel_stats(const Dataset& data) {
  const int c = data.channels();
  const std::size_t hw = static_cast<std::size_t>(data.height()) * data.width();
  ChannelStats s{std::vector<float>(static_cast<std::size_t>(c)),
                 std::vector<float>(static_cast<std::size_t>(c))};
  require(data.size() > 0, ErrorKind::statistics, "normalization statistics of an empty dataset");
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0, sq = 0;
    for (int n = 0; n < data.size(); ++n) {
      const float* p = data.images.ptr() + (static_cast<std::size_t>(n) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum += p[i];
        sq += static_cast<double>(p[i]) * p[i];
      }
    }
    const double m = static_cast<double>(data.size()) * static_cast<double>(hw);
    const double mean = sum / m;
    s.mean[static_cast<std::size_t>(ch)] = static_cast<float>(mean);
    s.std[static_cast<std::size_t>(ch)] =
        static_cast<float>(std::sqrt(std::max(sq / m - mean * mean, 1e-12)));
  }
  return s;
}

void normalize(Dataset& data, const ChannelStats& stats) {
  const int c = data.channels();
  const std::size_t hw = static_cast<std::size_t>(data.height()) * data.width();
  require(stats.mean.size() == static_cast<std::size_t>(c), ErrorKind::dimension,
          "normalization statistics do not match channel count");
  for (int n = 0; n < data.size(); ++n) {
    for (int ch = 0; ch < c; ++ch) {
      float* p = data.images.ptr() + (static_cast<std::size_t>(n) * c + ch) * hw;
      const float m = stats.mean[static_cast<std::size_t>(ch)];
      const float s = stats.std[static_cast<std::size_t>(ch)];
      for (std::size_t i = 0; i < hw; ++i) p[i] = (p[i] - m) / s;
    }
  }
  data.channel_mean = stats.mean;
  data.channel_std = stats.std;
}

void augment_batch(Tensor& batch, std::mt19937_64& rng, int pad) {
  const int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  std::uniform_int_distribution<int> shift(-pad, pad);
  std::bernoulli_distribution flip(0.5);
  std::vector<float> plane(static_cast<std::size_t>(h) * w);
  for (int b = 0; b < n; ++b) {
    const int dy = shift(rng), dx = shift(rng);
    const bool mirror = flip(rng);
    for (int ch = 0; ch < c; ++ch) {
      float* p = batch.ptr() + (static_cast<std::size_t>(b) * c + ch) * h * w;
      std::copy(p, p + plane.size(), plane.begin());
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const int sy = y + dy;
          const int sx0 = x + dx;
          const int sx = mirror ? (w - 1 - sx0) : sx0;
          const bool inside = sy >= 0 && sy < h && sx0 >= 0 && sx0 < w;
          p[y * w + x] = inside ? plane[static_cast<std::size_t>(sy) * w + sx] : 0.0f;
        }
      }
    }
  }
}

namespace {

Dataset subset(const Dataset& src, const std::vector<int>& idx, Split split) {
  Dataset d;
  d.images = src.gather(idx);
  d.labels = src.gather_labels(idx);
  d.origin.reserve(idx.size());
  for (int i : idx) d.origin.push_back(src.origin.empty() ? i : src.origin[static_cast<std::size_t>(i)]);
  d.split = split;
  d.class_count = src.class_count;
  d.channel_mean = src.channel_mean;
  d.channel_std = src.channel_std;
  d.augment = split == Split::train && src.augment;
  return d;
}

}  // namespace

std::pair<Dataset, Dataset> make_validation_split(const Dataset& train, int per_class,
                                                  std::uint64_t seed) {
  require(per_class >= 0, ErrorKind::split, "per-class validation count must be >= 0");
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(train.class_count));
  for (int i = 0; i < train.size(); ++i) {
    const int y = train.labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < train.class_count, ErrorKind::label, "label outside class range");
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<char> to_val(static_cast<std::size_t>(train.size()), 0);
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& members = by_class[k];
    require(static_cast<int>(members.size()) >= per_class, ErrorKind::split,
            "class " + std::to_string(k) + " has " + std::to_string(members.size()) +
                " samples, cannot hold out " + std::to_string(per_class));
    std::shuffle(members.begin(), members.end(), rng);
    for (int i = 0; i < per_class; ++i) to_val[static_cast<std::size_t>(members[static_cast<std::size_t>(i)])] = 1;
  }
  std::vector<int> keep, val;
  for (int i = 0; i < train.size(); ++i) (to_val[static_cast<std::size_t>(i)] ? val : keep).push_back(i);
  return {subset(train, keep, Split::train), subset(train, val, Split::val)};
}

// ---- synthetic ---------------------------------------------------------------

Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed, Split split) {
  require(spec.classes >= 2, ErrorKind::precondition, "synthetic data needs at least 2 classes");
  require(spec.per_class >= 0 && spec.size >= 1 && spec.channels >= 1 && spec.noise >= 0,
          ErrorKind::precondition, "invalid synthetic data spec");
  const int s = spec.size, c = spec.channels;
  const std::size_t plane = static_cast<std::size_t>(c) * s * s;

  // Templates: per class and channel, a sum of three low-frequency waves,
  // standardized to zero mean and unit variance over the image.
  std::mt19937_64 task(spec.task_seed * 0x9E3779B97F4A7C15ull + 17);
  std::uniform_int_distribution<int> freq(-2, 2);
  std::uniform_real_distribution<double> phase(0, 2 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.5, 1.0);
  std::vector<std::vector<float>> templates(static_cast<std::size_t>(spec.classes));
  for (auto& t : templates) {
    t.assign(plane, 0.0f);
    for (int ch = 0; ch < c; ++ch) {
      std::vector<double> img(static_cast<std::size_t>(s) * s, 0.0);
      for (int m = 0; m < 3; ++m) {
        int fx = 0, fy = 0;
        while (fx == 0 && fy == 0) {
          fx = freq(task);
          fy = freq(task);
        }
        const double ph = phase(task), a = amp(task);
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x)
            img[static_cast<std::size_t>(y) * s + x] +=
                a * std::cos(2 * std::numbers::pi * (fx * x + fy * y) / s + ph);
      }
      double mean = 0, sq = 0;
      for (double v : img) mean += v;
      mean /= static_cast<double>(img.size());
      for (double v : img) sq += (v - mean) * (v - mean);
      const double sd = std::sqrt(sq / static_cast<double>(img.size())) + 1e-12;
      for (std::size_t i = 0; i < img.size(); ++i) {
        t[static_cast<std::size_t>(ch) * s * s + i] = static_cast<float>((img[i] - mean) / sd);
      }
    }
  }

  Dataset d;
  const int n = spec.classes * spec.per_class;
  d.images = Tensor({n, c, s, s});
  d.labels.resize(static_cast<std::size_t>(n));
  d.origin.resize(static_cast<std::size_t>(n));
  d.class_count = spec.classes;
  d.split = split;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise));
  for (int i = 0; i < n; ++i) {
    const int y = i % spec.classes;  // interleaved classes
    d.labels[static_cast<std::size_t>(i)] = y;
    d.origin[static_cast<std::size_t>(i)] = i;
    float* dst = d.images.ptr() + static_cast<std::size_t>(i) * plane;
    const auto& t = templates[static_cast<std::size_t>(y)];
    for (std::size_t k = 0; k < plane; ++k) {
      dst[k] = t[k] + (spec.noise > 0 ? noise(rng) : 0.0f);
    }
  }
  return d;
}

DataSplits synth_splits(const SynthSpec& spec, int val_per_class, int test_per_class,
                        std::uint64_t seed) {
  auto full = synth_dataset(spec, seed, Split::train);
  auto [train, val] = make_validation_split(full, val_per_class, seed ^ 0xA5A5A5A5ull);
  SynthSpec test_spec = spec;
  test_spec.per_class = test_per_class;
  auto test = synth_dataset(test_spec, seed ^ 0x7E57DA7Aull, Split::test);
  const auto stats = channel_stats(train);
  normalize(train, stats);
  normalize(val, stats);
  normalize(test, stats);
  return {std::move(train), std::move(val), std::move(test)};
}

}  // namespace sprune
