#pragma once

// Loss terms. Row-wise variants return one value per RoI (rank-1, length R)
// so callers can average over a whole batch; the scalar variants are thin
// wrappers used by tests and tools.

#include <span>
#include <vector>

#include "skd/autodiff.hpp"
#include "skd/geometry.hpp"
#include "skd/model.hpp"

namespace skd {

constexpr double kUdAlpha = 0.1;
constexpr double kFocalGamma = 2.0;
constexpr double kProjectionZMin = 0.1;  // meters

// SmoothL1 with unit margin, elementwise (same shape as a).
Var smooth_l1_elem(Var a);

// L_d. Rank-1 8-vectors give a scalar; R x 8 matrices give R per-row means.
Var distillation_core_loss(Var dsn_box, Var mdn_box);

// L_ud = L_d / min(mean U, alpha) + min(mean U, alpha)^2, elementwise over RoIs.
// With detach_denominator the division sees a constant copy of min(., alpha).
Var uncertainty_distillation_loss(Var l_d, Var u_dsn, Var u_mdn, double alpha = kUdAlpha,
                                  bool detach_denominator = false);

// Token-grid depth targets: valid-pixel mean per cell, 0 where no valid pixel.
struct DepthTargets {
  std::vector<int> bin;  // -1 for invalid tokens
  std::vector<double> depth;
  int valid = 0;
};
DepthTargets depth_targets(const Tensor& pseudo_depth, std::span<const std::uint8_t> valid_mask,
                           const ModelConfig& c);
int depth_bin(double depth, const ModelConfig& c);

// Per-token focal CE, tokens x 1 rank-1; zero rows for invalid tokens.
Var focal_depth_rows(Var depth_logits, const DepthTargets& t);
// Mean over valid tokens; 0 (with a warning on stderr) when none are valid.
Var depth_loss(Var depth_logits, const Tensor& pseudo_depth,
               std::span<const std::uint8_t> valid_mask, const ModelConfig& c);

// Per-RoI projection loss of metric boxes (R x 8) against annotations.
Var projection_loss_rows(Var metric, std::span<const Box2D> anns, const ModelConfig& c);
double projection_loss(const Box3D& pred, const Box2D& ann, const ModelConfig& c);

// Per-RoI mean SmoothL1 of the three log-dimension ratios against 0.
Var prior_loss_rows(Var raw_targets);

// 2D head targets for one scene: the token holding each annotation center.
Var twod_loss(Var twod_logits, std::span<const Box2D> anns, const ModelConfig& c);

// Forward values of one training objective, for logging.
struct LossBreakdown {
  double l_ud = 0, l_dep = 0, l_base = 0;
  double l_proj_dsn = 0, l_proj_mdn = 0, l_2d = 0, l_prior = 0;
  double total = 0;
  double alpha = kUdAlpha;
};

}  // namespace skd
