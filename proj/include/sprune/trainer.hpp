#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sprune/data.hpp"
#include "sprune/network.hpp"
#include "sprune/optim.hpp"

namespace sprune {

enum class OptimizerKind { sgd, adam };
enum class LrPolicy { step, cosine };

std::string_view to_string(OptimizerKind kind);
std::string_view to_string(LrPolicy policy);
OptimizerKind optimizer_from_string(std::string_view s);
LrPolicy lr_policy_from_string(std::string_view s);

struct TrainSchedule {
  int base_epochs = 30;
  int effective_epochs = 30;
  OptimizerKind optimizer = OptimizerKind::sgd;
  SgdConfig sgd;
  AdamConfig adam;
  LrPolicy lr_policy = LrPolicy::step;
  double lr0 = 0.1;
  std::vector<double> milestones{0.5, 0.75};  // fractions of effective_epochs
  double decay = 0.1;
  int batch_size = 128;
  double label_smoothing = 0.0;
};

void validate(const TrainSchedule& s);

/// round(base * full / pruned).
int budget_epochs(int base_epochs, std::int64_t full_flops, std::int64_t pruned_flops);

double cosine_lr(long step, long total_steps, double lr0);

/// lr0 * decay^k where k counts the milestones already passed at `epoch` (0-based).
double step_lr(int epoch, int total_epochs, double lr0, std::span<const double> milestones,
               double decay);

/// Learning rate for a given optimizer step; cosine is annealed per step.
double scheduled_lr(const TrainSchedule& s, int epoch, long step, long total_steps);

/// Mean cross-entropy of logits [N, K] against smoothed one-hot targets.
double label_smooth_loss(const Tensor& logits, std::span<const int> labels, double eps);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_acc = 0;

  bool operator==(const EpochMetrics&) const = default;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  double initial_train_loss = 0;  // mean batch loss of the untrained model
  double final_train_loss = 0;
  double test_accuracy = 0;
  double wall_seconds = 0;
  std::uint64_t seed = 0;
  int effective_epochs = 0;
  std::int64_t flops = 0;

  bool operator==(const TrainReport&) const = default;
};

/// Called after every completed epoch (1-based) with the current model.
using EpochHook = std::function<void(int epoch, const Network& model)>;

/// Trains `model` in place. The test split is evaluated once, after the
/// last epoch. Batches follow a shuffle seeded only by `seed`.
TrainReport train_network(Network& model, const DataSplits& data, const TrainSchedule& schedule,
                          std::uint64_t seed, const EpochHook& on_epoch = {});

/// G(config) initialized from `seed`, then trained.
TrainReport train_from_scratch(const ArchSpec& arch, const ChannelConfig& config,
                               const DataSplits& data, const TrainSchedule& schedule,
                               std::uint64_t seed);

/// Columns epoch, lr, train_loss, val_acc.
std::string metrics_csv(const TrainReport& report);
void write_metrics_csv(const TrainReport& report, const std::string& path);

}  // namespace sprune
