#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <vector>

#include "skd/eval.hpp"

namespace skd::testing {

// Brute force: every distinct score is a threshold; precision and recall are
// recounted from scratch for each one.
inline double brute_force_ap_r40(const std::vector<ScoredFlag>& dets, int num_gt) {
  if (num_gt == 0) return 0.0;
  std::set<double> thresholds;
  for (const auto& d : dets) thresholds.insert(d.score);
  double total = 0.0;
  for (int i = 1; i <= 40; ++i) {
    double best = 0.0;
    for (double t : thresholds) {
      long tp = 0, n = 0;
      for (const auto& d : dets)
        if (d.score >= t) {
          ++n;
          tp += d.tp;
        }
      if (tp * 40 >= static_cast<long>(i) * num_gt)
        best = std::max(best, static_cast<double>(tp) / static_cast<double>(n));
    }
    total += best;
  }
  return total / 40.0;
}

struct ApInstance {
  std::vector<ScoredFlag> dets;
  int num_gt = 0;
};

// Scores drawn from a small grid so ties are common.
inline ApInstance random_ap_instance(std::mt19937_64& rng) {
  ApInstance in;
  std::uniform_int_distribution<int> ngt(0, 10), ndet(0, 20), grid(0, 8);
  in.num_gt = ngt(rng);
  const int n = ndet(rng);
  int tps = 0;
  for (int k = 0; k < n; ++k) {
    bool tp = std::bernoulli_distribution(0.5)(rng) && tps < in.num_gt;
    tps += tp;
    in.dets.push_back({grid(rng) / 8.0, tp});
  }
  return in;
}

}  // namespace skd::testing
