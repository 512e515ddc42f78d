#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sprune/data.hpp"
#include "sprune/gate_state.hpp"
#include "sprune/network.hpp"
#include "sprune/optim.hpp"

namespace sprune {

enum class PenaltyKind {
  squared_mean,  // (mean gate - r)^2
  l1,            // mean gate, the plain lasso term kept for ablations
};

struct ImportanceConfig {
  double gamma = 0.5;
  double target_sparsity = 0.5;
  int epochs = 10;
  double lr = 0.01;
  int batch_size = 128;
  AdamConfig adam;
  PenaltyKind penalty = PenaltyKind::squared_mean;
  int evals_per_epoch = 1;
};

void validate(const ImportanceConfig& cfg);

double sparsity_penalty(const GateState& gates, double r);
/// Subgradient of sparsity_penalty, shaped like `gates`.
GateState sparsity_penalty_grad(const GateState& gates, double r);

double penalty_value(const GateState& gates, const ImportanceConfig& cfg);
GateState penalty_grad(const GateState& gates, const ImportanceConfig& cfg);

GateState project_gates(GateState gates);

GateState gate_state(const Network& net);
void set_gate_state(Network& net, const GateState& gates);

struct GateObjective {
  double cross_entropy = 0;
  double penalty = 0;
  double total = 0;
  GateState grad;
};

/// CE + gamma * penalty on one batch with the network's current gates, and
/// its gradient with respect to every gate. Weights receive no gradient.
/// With `update_running_stats` off the call has no side effects.
template <typename T>
GateObjective gate_objective(Network& net, const BasicTensor<T>& batch,
                             std::span<const int> labels, const ImportanceConfig& cfg,
                             bool update_running_stats = false);

/// Per-epoch means of the batch objective terms.
struct ImportanceProgress {
  std::vector<double> train_cross_entropy;
  std::vector<double> penalty;
};

/// Learns gates on the frozen weights of `model` (gates must start at 1).
/// Returns one snapshot per evaluation point. Weight tensors are left
/// untouched; BN running statistics track the gated network.
std::vector<GateSnapshot> learn_channel_importance(Network& model, const Dataset& train,
                                                   const Dataset& val,
                                                   const ImportanceConfig& cfg,
                                                   std::uint64_t seed,
                                                   ImportanceProgress* progress = nullptr);

/// Index of the chosen snapshot: best validation accuracy among those with
/// sparsity <= r, later snapshot on ties; falls back to the sparsest one
/// with a warning.
std::size_t select_best_snapshot(std::span<const GateSnapshot> snapshots, double r);
GateState select_best_gates(std::span<const GateSnapshot> snapshots, double r);

}  // namespace sprune
