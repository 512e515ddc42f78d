#include "sprune/gate_learn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "sprune/error.hpp"
#include "sprune/log.hpp"

namespace sprune {

void validate(const ImportanceConfig& cfg) {
  require(cfg.gamma >= 0, ErrorKind::precondition, "gamma must be >= 0");
  require(cfg.target_sparsity > 0 && cfg.target_sparsity <= 1, ErrorKind::precondition,
          "target sparsity r must lie in (0, 1]");
  require(cfg.epochs >= 0, ErrorKind::precondition, "epochs must be >= 0");
  require(cfg.lr > 0, ErrorKind::precondition, "learning rate must be positive");
  require(cfg.batch_size >= 1, ErrorKind::precondition, "batch size must be >= 1");
  require(cfg.evals_per_epoch >= 1, ErrorKind::precondition, "evals_per_epoch must be >= 1");
}

double sparsity_penalty(const GateState& gates, double r) {
  const double d = gates.sparsity() - r;
  return d * d;
}

namespace {

GateState filled_like(const GateState& gates, float value) {
  GateState g;
  g.step = gates.step;
  for (const auto& l : gates.lambda) g.lambda.emplace_back(l.size(), value);
  return g;
}

}  // namespace

GateState sparsity_penalty_grad(const GateState& gates, double r) {
  const auto n = static_cast<double>(gates.total());
  return filled_like(gates, n > 0 ? static_cast<float>(2.0 * (gates.sparsity() - r) / n) : 0.0f);
}

double penalty_value(const GateState& gates, const ImportanceConfig& cfg) {
  return cfg.penalty == PenaltyKind::l1 ? gates.sparsity()
                                        : sparsity_penalty(gates, cfg.target_sparsity);
}

GateState penalty_grad(const GateState& gates, const ImportanceConfig& cfg) {
  if (cfg.penalty == PenaltyKind::l1) {
    const auto n = static_cast<double>(gates.total());
    return filled_like(gates, n > 0 ? static_cast<float>(1.0 / n) : 0.0f);
  }
  return sparsity_penalty_grad(gates, cfg.target_sparsity);
}

GateState project_gates(GateState gates) {
  for (auto& l : gates.lambda)
    for (float& v : l) v = std::clamp(v, 0.0f, 1.0f);
  return gates;
}

GateState gate_state(const Network& net) {
  GateState g;
  for (const Tensor& t : net.gates()) g.lambda.emplace_back(t.data().begin(), t.data().end());
  return g;
}

void set_gate_state(Network& net, const GateState& gates) {
  auto& dst = net.gates();
  require(dst.size() == gates.lambda.size(), ErrorKind::config,
          "gate state has " + std::to_string(gates.lambda.size()) + " layers, network has " +
              std::to_string(dst.size()));
  for (std::size_t j = 0; j < dst.size(); ++j) {
    require(dst[j].numel() == gates.lambda[j].size(), ErrorKind::config,
            "gate layer " + std::to_string(j) + " width mismatch");
    std::copy(gates.lambda[j].begin(), gates.lambda[j].end(), dst[j].data().begin());
  }
}

template <typename T>
GateObjective gate_objective(Network& net, const BasicTensor<T>& batch,
                             std::span<const int> labels, const ImportanceConfig& cfg,
                             bool update_running_stats) {
  BasicTape<T> tape;
  ForwardOptions opt;
  opt.bn_mode = BnMode::train;
  opt.use_gates = true;
  opt.gates_require_grad = true;
  opt.update_running_stats = update_running_stats;
  const ForwardTrace trace = net.forward(tape, batch, opt);
  const VarId loss = ops::cross_entropy(tape, trace.logits, labels);
  const auto grads = tape.backward(loss, trace.gates);

  const GateState gates = gate_state(net);
  GateObjective out;
  out.cross_entropy = static_cast<double>(tape.value(loss)[0]);
  out.penalty = penalty_value(gates, cfg);
  out.total = out.cross_entropy + cfg.gamma * out.penalty;
  out.grad = penalty_grad(gates, cfg);
  for (std::size_t j = 0; j < trace.gates.size(); ++j) {
    const auto& g = grads.at(trace.gates[j]);
    auto& dst = out.grad.lambda[j];
    for (std::size_t c = 0; c < dst.size(); ++c) {
      dst[c] = static_cast<float>(static_cast<double>(g[c]) + cfg.gamma * dst[c]);
    }
  }
  return out;
}

template GateObjective gate_objective<float>(Network&, const BasicTensor<float>&,
                                             std::span<const int>, const ImportanceConfig&, bool);
template GateObjective gate_objective<double>(Network&, const BasicTensor<double>&,
                                              std::span<const int>, const ImportanceConfig&, bool);

std::vector<GateSnapshot> learn_channel_importance(Network& model, const Dataset& train,
                                                   const Dataset& val,
                                                   const ImportanceConfig& cfg,
                                                   std::uint64_t seed,
                                                   ImportanceProgress* progress) {
  validate(cfg);
  expect_split(train, Split::train, "importance learning");
  expect_split(val, Split::val, "snapshot selection");
  require(train.size() > 0, ErrorKind::precondition, "importance learning needs training data");
  for (const Tensor& g : model.gates()) {
    require(std::all_of(g.data().begin(), g.data().end(), [](float v) { return v == 1.0f; }),
            ErrorKind::precondition, "gates must be initialized to 1 before importance learning");
  }

  std::mt19937_64 rng(seed);
  Adam adam(cfg.adam);
  std::vector<Tensor*> gate_ptrs;
  for (Tensor& g : model.gates()) gate_ptrs.push_back(&g);

  const int n = train.size();
  const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<GateSnapshot> snapshots;
  std::vector<int> order(static_cast<std::size_t>(n));
  long global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    int next_eval = 1;
    double ce_sum = 0, pen_sum = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      const int lo = s * cfg.batch_size;
      const int hi = std::min(n, lo + cfg.batch_size);
      std::span<const int> idx(order.data() + lo, static_cast<std::size_t>(hi - lo));
      Tensor batch = train.gather(idx);
      if (train.augment) augment_batch(batch, rng);
      const std::vector<int> labels = train.gather_labels(idx);

      GateObjective obj;
      try {
        obj = gate_objective(model, batch, labels, cfg, true);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::divergence) throw;
        fail(ErrorKind::divergence, "importance learning diverged at step " +
                                        std::to_string(global_step) + ": " + e.what());
      }
      require(std::isfinite(obj.total), ErrorKind::divergence,
              "importance learning loss is not finite at step " + std::to_string(global_step));

      ce_sum += obj.cross_entropy;
      pen_sum += obj.penalty;
      std::vector<Tensor> grads;
      for (std::size_t j = 0; j < obj.grad.lambda.size(); ++j) {
        grads.emplace_back(Shape{static_cast<int>(obj.grad.lambda[j].size())},
                           obj.grad.lambda[j]);
      }
      adam.step(gate_ptrs, grads, cfg.lr);
      for (Tensor* g : gate_ptrs)
        for (float& v : g->data()) v = std::clamp(v, 0.0f, 1.0f);
      ++global_step;

      // Evaluation points are spread evenly; the last one closes the epoch.
      const int due = static_cast<int>(
          (static_cast<long>(next_eval) * steps_per_epoch + cfg.evals_per_epoch - 1) /
          cfg.evals_per_epoch);
      if (s + 1 >= due && next_eval <= cfg.evals_per_epoch) {
        GateSnapshot snap;
        snap.gates = gate_state(model);
        snap.gates.step = static_cast<int>(global_step);
        snap.epoch = epoch;
        snap.val_accuracy = val.size() ? accuracy(model, val.images, val.labels, true) : 0.0;
        snapshots.push_back(std::move(snap));
        ++next_eval;
      }
    }
    if (progress) {
      progress->train_cross_entropy.push_back(ce_sum / steps_per_epoch);
      progress->penalty.push_back(pen_sum / steps_per_epoch);
    }
  }
  return snapshots;
}

std::size_t select_best_snapshot(std::span<const GateSnapshot> snapshots, double r) {
  require(!snapshots.empty(), ErrorKind::contract, "no gate snapshots to select from");
  std::size_t best = snapshots.size();
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    const auto& s = snapshots[i];
    if (s.sparsity() > r) continue;
    if (best == snapshots.size()) {
      best = i;
      continue;
    }
    const auto& b = snapshots[best];
    // later wins ties; list order breaks ties within an epoch
    if (s.val_accuracy > b.val_accuracy ||
        (s.val_accuracy == b.val_accuracy && s.epoch >= b.epoch)) {
      best = i;
    }
  }
  if (best != snapshots.size()) return best;

  best = 0;
  for (std::size_t i = 1; i < snapshots.size(); ++i) {
    if (snapshots[i].sparsity() < snapshots[best].sparsity()) best = i;
  }
  std::ostringstream msg;
  msg << "no gate snapshot reached sparsity <= " << r << "; using the sparsest (epoch "
      << snapshots[best].epoch << ", sparsity " << snapshots[best].sparsity() << ")";
  log_warning(msg.str());
  return best;
}

GateState select_best_gates(std::span<const GateSnapshot> snapshots, double r) {
  return snapshots[select_best_snapshot(snapshots, r)].gates;
}

}  // namespace sprune
