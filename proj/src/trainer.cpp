#include "sprune/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "sprune/error.hpp"

namespace sprune {

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "adam";
}

std::string_view to_string(LrPolicy policy) {
  return policy == LrPolicy::step ? "step" : "cosine";
}

OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  fail(ErrorKind::config, "unknown optimizer '" + std::string(s) + "'");
}

LrPolicy lr_policy_from_string(std::string_view s) {
  if (s == "step") return LrPolicy::step;
  if (s == "cosine") return LrPolicy::cosine;
  fail(ErrorKind::config, "unknown lr policy '" + std::string(s) + "'");
}

void validate(const TrainSchedule& s) {
  require(s.base_epochs >= 0 && s.effective_epochs >= 0, ErrorKind::precondition,
          "epoch counts must be >= 0");
  require(s.lr0 > 0, ErrorKind::precondition, "lr0 must be positive");
  require(s.batch_size >= 1, ErrorKind::precondition, "batch size must be >= 1");
  require(s.label_smoothing >= 0 && s.label_smoothing < 1, ErrorKind::precondition,
          "label smoothing must lie in [0, 1)");
  require(s.decay > 0, ErrorKind::precondition, "lr decay factor must be positive");
  for (double m : s.milestones) {
    require(m > 0 && m <= 1, ErrorKind::precondition, "milestones are fractions in (0, 1]");
  }
}

int budget_epochs(int base_epochs, std::int64_t full_flops, std::int64_t pruned_flops) {
  require(pruned_flops > 0, ErrorKind::precondition, "pruned FLOPS must be positive");
  require(pruned_flops <= full_flops, ErrorKind::precondition,
          "pruned FLOPS exceed the full model's");
  require(base_epochs >= 0, ErrorKind::precondition, "base epochs must be >= 0");
  return static_cast<int>(std::llround(static_cast<double>(base_epochs) *
                                       static_cast<double>(full_flops) /
                                       static_cast<double>(pruned_flops)));
}

double cosine_lr(long step, long total_steps, double lr0) {
  require(total_steps > 0 && step >= 0 && step <= total_steps, ErrorKind::precondition,
          "cosine schedule step out of range");
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

double step_lr(int epoch, int total_epochs, double lr0, std::span<const double> milestones,
               double decay) {
  double lr = lr0;
  for (double m : milestones) {
    if (epoch >= static_cast<int>(std::lround(m * total_epochs))) lr *= decay;
  }
  return lr;
}

double scheduled_lr(const TrainSchedule& s, int epoch, long step, long total_steps) {
  if (s.lr_policy == LrPolicy::cosine) return cosine_lr(step, std::max(total_steps, 1L), s.lr0);
  return step_lr(epoch, s.effective_epochs, s.lr0, s.milestones, s.decay);
}

double label_smooth_loss(const Tensor& logits, std::span<const int> labels, double eps) {
  require(eps >= 0 && eps < 1, ErrorKind::precondition, "label smoothing must lie in [0, 1)");
  Tape tape;
  const VarId x = tape.leaf(logits, false);
  return tape.value(ops::cross_entropy(tape, x, labels, eps))[0];
}

namespace {

double train_mode_loss(Network& model, const Dataset& train, int batch_size, double eps) {
  double total = 0;
  int batches = 0;
  std::vector<int> idx;
  for (int lo = 0; lo < train.size(); lo += batch_size) {
    const int hi = std::min(train.size(), lo + batch_size);
    idx.resize(static_cast<std::size_t>(hi - lo));
    std::iota(idx.begin(), idx.end(), lo);
    Tape tape;
    ForwardOptions opt;
    opt.update_running_stats = false;
    const auto trace = model.forward(tape, train.gather(idx), opt);
    total += tape.value(ops::cross_entropy(tape, trace.logits, train.gather_labels(idx), eps))[0];
    ++batches;
  }
  return batches ? total / batches : 0.0;
}

}  // namespace

TrainReport train_network(Network& model, const DataSplits& data, const TrainSchedule& schedule,
                          std::uint64_t seed, const EpochHook& on_epoch) {
  validate(schedule);
  expect_split(data.train, Split::train, "training");
  expect_split(data.val, Split::val, "validation");
  expect_split(data.test, Split::test, "final evaluation");
  require(data.train.size() > 0, ErrorKind::precondition, "training needs samples");
  const auto start = std::chrono::steady_clock::now();

  TrainReport report;
  report.seed = seed;
  report.effective_epochs = schedule.effective_epochs;
  report.flops = model.flops();
  report.initial_train_loss =
      train_mode_loss(model, data.train, schedule.batch_size, schedule.label_smoothing);
  report.final_train_loss = report.initial_train_loss;

  std::mt19937_64 order_rng(seed);
  std::mt19937_64 augment_rng(seed ^ 0xA06Eull);
  Sgd sgd(schedule.sgd);
  Adam adam(schedule.adam);
  const std::vector<Tensor*> params = model.parameters();

  const int n = data.train.size();
  const int steps_per_epoch = (n + schedule.batch_size - 1) / schedule.batch_size;
  const long total_steps = static_cast<long>(steps_per_epoch) * schedule.effective_epochs;
  std::vector<int> order(static_cast<std::size_t>(n));
  long step = 0;

  for (int epoch = 0; epoch < schedule.effective_epochs; ++epoch) try {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0;
    const double epoch_lr = scheduled_lr(schedule, epoch, step, total_steps);
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      const int lo = s * schedule.batch_size;
      const int hi = std::min(n, lo + schedule.batch_size);
      std::span<const int> idx(order.data() + lo, static_cast<std::size_t>(hi - lo));
      Tensor batch = data.train.gather(idx);
      if (data.train.augment) augment_batch(batch, augment_rng);
      const std::vector<int> labels = data.train.gather_labels(idx);

      Tape tape;
      ForwardOptions opt;
      opt.params_require_grad = true;
      const auto trace = model.forward(tape, batch, opt);
      const VarId loss = ops::cross_entropy(tape, trace.logits, labels, schedule.label_smoothing);
      const double loss_value = tape.value(loss)[0];
      auto gmap = tape.backward(loss, trace.params);
      std::vector<Tensor> grads;
      grads.reserve(trace.params.size());
      for (VarId id : trace.params) grads.push_back(std::move(gmap.at(id)));
      require(std::isfinite(loss_value), ErrorKind::training,
              "training loss is not finite in epoch " + std::to_string(epoch + 1));
      const double lr = scheduled_lr(schedule, epoch, step, total_steps);
      if (schedule.optimizer == OptimizerKind::sgd) {
        sgd.step(params, grads, lr);
      } else {
        adam.step(params, grads, lr);
      }
      loss_sum += loss_value;
    }
    for (const Tensor* p : params) {
      require(all_finite(*p), ErrorKind::training,
              "parameters became non-finite in epoch " + std::to_string(epoch + 1));
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = epoch_lr;
    m.train_loss = loss_sum / steps_per_epoch;
    m.val_acc = data.val.size() ? accuracy(model, data.val.images, data.val.labels) : 0.0;
    report.epochs.push_back(m);
    report.final_train_loss = m.train_loss;
    if (on_epoch) on_epoch(m.epoch, model);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::divergence) throw;
    fail(ErrorKind::training,
         "training diverged in epoch " + std::to_string(epoch + 1) + ": " + e.what());
  }

  report.test_accuracy = accuracy(model, data.test.images, data.test.labels);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

TrainReport train_from_scratch(const ArchSpec& arch, const ChannelConfig& config,
                               const DataSplits& data, const TrainSchedule& schedule,
                               std::uint64_t seed) {
  Network model = generate_model(arch, config, seed);
  return train_network(model, data, schedule, seed);
}

std::string metrics_csv(const TrainReport& report) {
  std::string out = "epoch,lr,train_loss,val_acc\n";
  char line[128];
  for (const auto& m : report.epochs) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g\n", m.epoch, m.lr, m.train_loss,
                  m.val_acc);
    out += line;
  }
  return out;
}

void write_metrics_csv(const TrainReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path);
  f << metrics_csv(report);
  require(static_cast<bool>(f), ErrorKind::io, "failed writing " + path);
}

}  // namespace sprune
