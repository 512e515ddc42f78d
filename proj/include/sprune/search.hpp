#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sprune/arch.hpp"
#include "sprune/gate_state.hpp"

namespace sprune {

struct SearchConfig {
  std::int64_t budget = 0;  // target MACs
  int max_iters = 20;
  double rel_tolerance = 0.02;
  double tau_min = 0.0;
  double tau_max = 1.0;
};

struct SearchStep {
  int iteration = 0;
  double tau = 0;
  std::int64_t flops = 0;
  double rel_gap = 0;

  bool operator==(const SearchStep&) const = default;
};

struct SearchResult {
  double tau_star = 0;
  ChannelConfig config;
  std::int64_t achieved_flops = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<SearchStep> trace;
  std::string diagnostics;  // set when the search did not converge

  bool operator==(const SearchResult&) const = default;
};

/// Bisection on a global gate threshold until the pruned structure's MACs
/// are within the relative tolerance of the budget.
SearchResult search_structure(const GateState& gates, const ArchSpec& arch,
                              const SearchConfig& cfg);

}  // namespace sprune
