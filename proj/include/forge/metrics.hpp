#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mctd.hpp"
#include "rng.hpp"

namespace forge {

struct EpisodeMetrics {
  int episode = 0;
  bool success = false;
  double terminal_error = 0.0;
  double relation_sat = 0.0;
  int collisions = 0;
  int planner_iterations = 0;
  long nfe = 0;
  double best_return = 0.0;
  std::string failure;
};

struct Interval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap (seeded, 1000 resamples) for the mean.
inline Interval bootstrap_mean(const std::vector<double>& xs, uint64_t seed,
                               int resamples = 1000) {
  Interval out;
  if (xs.empty()) return out;
  double s = 0.0;
  for (double x : xs) s += x;
  out.mean = s / xs.size();
  Rng rng(derive_seed(seed, {0xb007}));
  std::vector<double> means(resamples);
  for (int r = 0; r < resamples; ++r) {
    double acc = 0.0;
    for (size_t i = 0; i < xs.size(); ++i)
      acc += xs[rng.uniform_int(0, static_cast<int>(xs.size()) - 1)];
    means[r] = acc / xs.size();
  }
  std::sort(means.begin(), means.end());
  out.lo = means[static_cast<size_t>(0.025 * (resamples - 1))];
  out.hi = means[static_cast<size_t>(0.975 * (resamples - 1))];
  return out;
}

struct MetricsReport {
  std::string label;
  std::vector<EpisodeMetrics> episodes;
  Interval success_rate;
  Interval terminal_error;
  Interval relation_sat;
  Interval collisions;
  double mean_nfe = 0.0;
  double mean_iterations = 0.0;

  void aggregate(uint64_t seed) {
    std::sort(episodes.begin(), episodes.end(),
              [](const EpisodeMetrics& a, const EpisodeMetrics& b) { return a.episode < b.episode; });
    std::vector<double> sr, te, rs, co;
    double nfe = 0.0, it = 0.0;
    for (const auto& e : episodes) {
      sr.push_back(e.success ? 1.0 : 0.0);
      te.push_back(e.terminal_error);
      rs.push_back(e.relation_sat);
      co.push_back(e.collisions);
      nfe += static_cast<double>(e.nfe);
      it += e.planner_iterations;
    }
    success_rate = bootstrap_mean(sr, derive_seed(seed, {1}));
    terminal_error = bootstrap_mean(te, derive_seed(seed, {2}));
    relation_sat = bootstrap_mean(rs, derive_seed(seed, {3}));
    collisions = bootstrap_mean(co, derive_seed(seed, {4}));
    if (!episodes.empty()) {
      mean_nfe = nfe / episodes.size();
      mean_iterations = it / episodes.size();
    }
    // success implies all goals met and zero hard collisions by construction;
    // enforce the reporting invariant defensively
    for (const auto& e : episodes)
      if (e.success && e.collisions != 0)
        throw std::logic_error("metrics: successful episode with hard collisions");
  }
};

}  // namespace forge
