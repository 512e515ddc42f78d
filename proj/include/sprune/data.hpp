#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sprune/tensor.hpp"

namespace sprune {

enum class Split { train, val, test };

std::string_view to_string(Split split);

/// Images [N, C, H, W] with labels. `origin` maps every sample back to its
/// index in the source it was split from.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::vector<int> origin;
  Split split = Split::train;
  int class_count = 0;
  std::vector<float> channel_mean;  // normalization applied to `images`
  std::vector<float> channel_std;
  bool augment = false;  // pad-4 random crop + horizontal flip when batching for training

  int size() const noexcept { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }

  /// Copies the selected samples into a [B, C, H, W] batch.
  Tensor gather(std::span<const int> indices) const;
  std::vector<int> gather_labels(std::span<const int> indices) const;
};

/// Throws a split error unless `data` carries the expected tag.
void expect_split(const Dataset& data, Split expected, std::string_view consumer);

struct TrainTestPair {
  Dataset train;
  Dataset test;
};

struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// ---- CIFAR-10 binary format ------------------------------------------------

constexpr std::size_t kCifarRecordBytes = 3073;
constexpr std::size_t kCifarImageBytes = 3072;
constexpr std::size_t kCifarBatchRecords = 10000;

/// Decodes whole CIFAR-10 records (label byte + R, G, B 32x32 planes) into
/// pixel values scaled to [0, 1]. `name` labels diagnostics.
Dataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& name);

/// Encodes a dataset of 3x32x32 images with values in [0, 1] back into bytes.
std::vector<std::uint8_t> encode_cifar10(const Dataset& data);

/// Reads data_batch_1..5.bin and test_batch.bin, normalizes with training-set
/// statistics, and enables augmentation on the training split.
TrainTestPair load_cifar10(const std::string& directory);

// ---- preprocessing ---------------------------------------------------------

struct ChannelStats {
  std::vector<float> mean;
  std::vector<float> std;
};

ChannelStats channel_stats(const Dataset& data);
void normalize(Dataset& data, const ChannelStats& stats);

/// Zero-pad by `pad`, crop back to the original size at a random offset, and
/// flip horizontally with probability 1/2. Operates in place on a batch.
void augment_batch(Tensor& batch, std::mt19937_64& rng, int pad = 4);

/// Moves exactly `per_class` samples of each class into a validation split,
/// chosen by a seeded shuffle.
std::pair<Dataset, Dataset> make_validation_split(const Dataset& train, int per_class,
                                                  std::uint64_t seed);

// ---- synthetic data --------------------------------------------------------

struct SynthSpec {
  int classes = 3;
  int per_class = 500;
  int size = 8;
  int channels = 3;
  double noise = 4.0;
  std::uint64_t task_seed = 0;  // selects the class templates
};

/// Class-conditional smooth templates plus seeded Gaussian pixel noise. The
/// templates depend only on `task_seed`, so splits drawn with different seeds
/// share one task.
Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed, Split split = Split::train);

/// Synthetic train/val/test splits: train and test from independent draws, val
/// carved out of train; normalized with training statistics.
DataSplits synth_splits(const SynthSpec& spec, int val_per_class, int test_per_class,
                        std::uint64_t seed);

}  // namespace sprune
