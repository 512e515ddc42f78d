#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sprune/arch.hpp"
#include "sprune/data.hpp"
#include "sprune/gate_learn.hpp"
#include "sprune/search.hpp"
#include "sprune/trainer.hpp"

namespace sprune {

/// Kept/original channel ratio of every gated layer, in layer order.
struct StructureFeature {
  std::vector<double> ratios;
  std::string label;
  std::uint64_t seed = 0;
  int epoch = 0;  // 0: pruned from random initialization

  bool operator==(const StructureFeature&) const = default;
};

StructureFeature structure_feature(const ChannelConfig& config, const ArchSpec& base,
                                   std::string label = {}, std::uint64_t seed = 0,
                                   int epoch = 0);

struct SimilarityMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> values;

  std::size_t size() const noexcept { return labels.size(); }
  bool operator==(const SimilarityMatrix&) const = default;
};

double pearson(std::span<const double> a, std::span<const double> b);

/// Pearson correlation of every pair of features. Needs at least two
/// features of equal length, none of them constant.
SimilarityMatrix correlation_matrix(std::span<const StructureFeature> features);

/// Mean of the off-diagonal entries (i < j) for which `include(i, j)` holds.
double mean_pairwise(const SimilarityMatrix& m,
                     const std::function<bool(std::size_t, std::size_t)>& include = {});

// ---- pre-training effect study ---------------------------------------------

struct StudyConfig {
  std::string arch = "vgg-small";
  double expand = 1.25;
  double budget_ratio = 0.5;
  std::vector<int> checkpoint_epochs;  // the random initialization is always included
  std::vector<std::uint64_t> seeds{0};
  ImportanceConfig importance;
  SearchConfig search;        // budget is derived from budget_ratio
  TrainSchedule baseline;     // full-model training that produces checkpoints
  TrainSchedule scratch;      // base schedule for the pruned structures
  bool budget_training = true;
};

struct StudyStructure {
  std::string label;
  std::uint64_t seed = 0;
  int epoch = 0;
  StructureFeature feature;
  SearchResult search;
  std::size_t snapshot = 0;
  TrainReport scratch;
  double flops_ratio = 0;
};

struct StudySummaryRow {
  std::string label;  // structure source, pooled over seeds
  double mean_acc = 0;
  double std_acc = 0;
  double flops_ratio = 0;
  int runs = 0;
};

struct StudyBundle {
  ArchSpec arch;  // expanded architecture the structures were searched in
  GatePlacement placement;
  std::int64_t full_flops = 0;
  std::vector<StudyStructure> structures;
  std::vector<SimilarityMatrix> per_seed;  // one per seed with at least two structures
  SimilarityMatrix cross_checkpoint;       // every checkpoint-derived structure
  SimilarityMatrix cross_random;           // random-init structures of all seeds
  std::vector<StudySummaryRow> summary;
};

std::string source_label(int epoch);

/// For each seed: trains the full model, capturing checkpoints; learns gates
/// from the random initialization and from every checkpoint; searches a
/// structure at the budget; trains each structure from scratch.
StudyBundle run_pretrain_effect_study(const StudyConfig& cfg, const DataSplits& data);

/// Mean correlation of checkpoint structures (epoch >= min_epoch) across
/// different seeds, and the same for random-init structures.
struct SimilarityTrend {
  double checkpoint_cross_seed = 0;
  double random_cross_seed = 0;
  int checkpoint_pairs = 0;
  int random_pairs = 0;
};
SimilarityTrend similarity_trend(const StudyBundle& bundle, int min_epoch);

std::vector<StudySummaryRow> summarize(std::span<const StudyStructure> structures);

/// Writes similarity matrices, channel counts, per-structure results and the
/// summary as CSV into `out_dir`. Output depends only on the bundle.
std::vector<std::string> emit_report(const StudyBundle& bundle, const std::string& out_dir);

std::string matrix_csv(const SimilarityMatrix& m);
SimilarityMatrix parse_matrix_csv(const std::string& text);

}  // namespace sprune
