#include "sprune/search.hpp"

#include <cmath>
#include <sstream>

#include "sprune/error.hpp"

namespace sprune {

SearchResult search_structure(const GateState& gates, const ArchSpec& arch,
                              const SearchConfig& cfg) {
  require(cfg.tau_min >= 0 && cfg.tau_min < cfg.tau_max && cfg.tau_max <= 1,
          ErrorKind::precondition, "search interval must satisfy 0 <= tau_min < tau_max <= 1");
  require(cfg.rel_tolerance > 0, ErrorKind::precondition, "relative tolerance must be positive");
  require(cfg.max_iters >= 1, ErrorKind::precondition, "max_iters must be >= 1");
  require(cfg.budget > 0, ErrorKind::precondition, "FLOPS budget must be positive");
  const GatePlacement placement = place_gates(arch);
  const std::int64_t full = count_flops(arch);
  require(cfg.budget <= full, ErrorKind::precondition,
          "budget " + std::to_string(cfg.budget) + " exceeds full-model FLOPS " +
              std::to_string(full));
  const auto widths = gated_widths(arch, placement);
  require(gates.lambda.size() == widths.size(), ErrorKind::config,
          "gate state does not match the architecture's gate placement");
  for (std::size_t j = 0; j < widths.size(); ++j) {
    require(gates.lambda[j].size() == static_cast<std::size_t>(widths[j]), ErrorKind::config,
            "gate layer " + std::to_string(j) + " width mismatch");
  }

  const double c = static_cast<double>(cfg.budget);
  double lo = cfg.tau_min, hi = cfg.tau_max;
  SearchResult result;
  double best_gap = INFINITY;
  for (int t = 1; t <= cfg.max_iters; ++t) {
    const double tau = 0.5 * (lo + hi);
    ChannelConfig config = prune_by_threshold(gates, tau);
    const std::int64_t flops = count_flops(arch, placement, config);
    const double gap = std::abs(static_cast<double>(flops) - c) / c;
    result.trace.push_back({t, tau, flops, gap});
    result.iterations = t;
    if (gap < best_gap) {
      best_gap = gap;
      result.tau_star = tau;
      result.config = std::move(config);
      result.achieved_flops = flops;
    }
    if (gap <= cfg.rel_tolerance) {
      result.tau_star = tau;
      result.config = prune_by_threshold(gates, tau);
      result.achieved_flops = flops;
      result.converged = true;
      return result;
    }
    // Raising tau removes channels, so an under-budget structure moves the
    // threshold down.
    if (static_cast<double>(flops) < c) {
      hi = tau;
    } else {
      lo = tau;
    }
  }
  std::ostringstream msg;
  msg << "no threshold within " << cfg.rel_tolerance << " of budget " << cfg.budget
      << " after " << cfg.max_iters << " iterations; best tau " << result.tau_star
      << " gives " << result.achieved_flops << " MACs (gap " << best_gap << ")";
  double gmin = INFINITY, gmax = -INFINITY;
  for (const auto& l : gates.lambda)
    for (float v : l) {
      gmin = std::min(gmin, static_cast<double>(v));
      gmax = std::max(gmax, static_cast<double>(v));
    }
  if (gmax - gmin < 1e-12) msg << "; all gates equal " << gmin << ", so only two structures exist";
  result.diagnostics = msg.str();
  return result;
}

}  // namespace sprune
