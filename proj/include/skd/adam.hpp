#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "skd/tensor.hpp"

namespace skd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;

  // Zero moments shaped like `params`.
  static AdamState like(std::span<const Tensor> params);
};

// One bias-corrected Adam update, in place. `names` (optional) labels the
// parameter in the error raised for a non-finite gradient.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
               double lr, const AdamConfig& cfg = {},
               std::span<const std::string> names = {});

}  // namespace skd
