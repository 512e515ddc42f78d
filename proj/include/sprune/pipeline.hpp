#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sprune/analysis.hpp"
#include "sprune/data.hpp"
#include "sprune/gate_learn.hpp"
#include "sprune/record.hpp"
#include "sprune/search.hpp"
#include "sprune/trainer.hpp"

namespace sprune {

struct DatasetSource {
  std::string spec = "synth";  // "synth" or "cifar10:<directory>"
  SynthSpec synth;
  int val_per_class = 50;      // 500 for CIFAR-10
  int test_per_class = 200;    // synthetic only
};

struct PipelineConfig {
  std::string arch = "vgg-small";
  double expand = 1.25;
  double budget = 0.5;                    // target fraction of full FLOPS
  std::optional<double> sparsity_r;       // defaults to `budget`
  ImportanceConfig importance;
  SearchConfig search;                    // budget filled in from `budget`
  TrainSchedule schedule;                 // pruned model, base epochs
  bool budget_training = true;
  TrainSchedule baseline;                 // full model for checkpoints
  std::vector<int> checkpoint_epochs;
  bool lottery_init = false;
  bool require_convergence = true;
  DatasetSource dataset;
  std::vector<std::uint64_t> seeds{0};
  std::string out = "runs";

  PipelineConfig();
  double target_sparsity() const { return sparsity_r.value_or(budget); }
};

void validate(const PipelineConfig& cfg);

std::string config_to_json(const PipelineConfig& cfg);
/// Values present in `text` override those of `base`; unknown keys are errors.
PipelineConfig config_from_json(const std::string& text, const PipelineConfig& base = {});
PipelineConfig load_config(const std::string& path, const PipelineConfig& base = {});

/// Train/val/test splits for the configured source. The validation carve-out
/// of CIFAR-10 is seeded by `seed`.
DataSplits load_data(const DatasetSource& source, std::uint64_t seed);

/// The expanded architecture the pipeline prunes, sized for `data`.
ArchSpec pipeline_arch(const PipelineConfig& cfg, const Dataset& data);

struct PruneOutcome {
  RunRecord record;
  std::string record_path;
  double flops_ratio = 0;
  double test_accuracy = 0;
  bool converged = false;
};

/// Random init, gate learning, snapshot selection, structure search and
/// budget training for one seed. The record is sealed and saved in
/// `cfg.out`, with a failure marker when a stage throws; the error is then
/// rethrown with the stage name.
PruneOutcome run_prune(const PipelineConfig& cfg, const DataSplits& data, std::uint64_t seed);

StudyConfig study_config(const PipelineConfig& cfg);

}  // namespace sprune
