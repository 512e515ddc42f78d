#pragma once

#include <vector>

namespace sprune {

/// Gate vectors of all gated layers, one entry per channel, each in [0, 1].
struct GateState {
  std::vector<std::vector<float>> lambda;
  int step = 0;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& l : lambda) n += l.size();
    return n;
  }

  /// Element-wise mean of all gates.
  double sparsity() const {
    double s = 0;
    for (const auto& l : lambda)
      for (float v : l) s += v;
    const auto n = total();
    return n ? s / static_cast<double>(n) : 0.0;
  }

  static GateState ones(const std::vector<int>& widths) {
    GateState g;
    for (int w : widths) g.lambda.emplace_back(static_cast<std::size_t>(w), 1.0f);
    return g;
  }

  bool operator==(const GateState&) const = default;
};

/// Gate values captured during importance learning with their validation score.
struct GateSnapshot {
  GateState gates;
  double val_accuracy = 0.0;
  int epoch = 0;

  double sparsity() const { return gates.sparsity(); }
  bool operator==(const GateSnapshot&) const = default;
};

}  // namespace sprune
