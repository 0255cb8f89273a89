#pragma once

// Central finite-difference checks. The checker only ever evaluates graphs
// forward, so it is independent of the backward code it audits.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "skd/autodiff.hpp"

namespace skd {

// Builds a scalar loss on `tape` from leaves bound to the given parameters.
using GraphBuilder = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

struct GradCheckOptions {
  double step = 1e-6;
  // Coordinates probed per parameter tensor; <= 0 means all of them.
  int coords_per_tensor = 0;
  std::uint64_t seed = 1;
  // |analytic - numeric| / max(|analytic|, |numeric|, floor)
  double denominator_floor = 1e-3;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coords_checked = 0;
  std::string worst;  // "param[i] coord j: analytic a numeric n"
};

GradCheckResult check_gradients(const GraphBuilder& build, const std::vector<Tensor>& params,
                                const GradCheckOptions& opt = {});

// A random smooth composite expression over a few 3x3 leaves, at least three
// ops deep. Returns the builder and the leaf values it expects.
struct RandomGraph {
  GraphBuilder build;
  std::vector<Tensor> params;
  std::string description;
};
RandomGraph random_composite_graph(std::uint64_t seed);

}  // namespace skd
