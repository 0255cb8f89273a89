#include "skd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "skd/errors.hpp"

namespace skd {

Var smooth_l1_elem(Var a) {
  // 0.5 m^2 + (|a| - m) with m = min(|a|, 1) is exactly SmoothL1 on both branches
  Var r = abs(a);
  Var m = min_const(r, 1.0);
  return square(m) * 0.5 + (r - m);
}

Var distillation_core_loss(Var dsn_box, Var mdn_box) {
  SKD_REQUIRE(dsn_box.shape() == mdn_box.shape(), "box shapes differ");
  Var e = smooth_l1_elem(dsn_box - mdn_box);
  if (e.value().rank() <= 1) return mean(e);
  return sum_cols(e) * (1.0 / static_cast<double>(e.value().cols()));
}

Var uncertainty_distillation_loss(Var l_d, Var u_dsn, Var u_mdn, double alpha,
                                  bool detach_denominator) {
  for (Var u : {u_dsn, u_mdn})
    for (double x : u.value().data())
      SKD_REQUIRE(x > 0.0, "uncertainty must be positive");
  SKD_REQUIRE(alpha > 0.0, "alpha must be positive");
  Var m = min_const((u_dsn + u_mdn) * 0.5, alpha);
  Var denom = detach_denominator ? m.tape()->constant(m.value()) : m;
  return l_d / denom + square(m);
}

int depth_bin(double depth, const ModelConfig& c) {
  const double lo = c.scene.depth_min, hi = c.scene.depth_max;
  const int K = c.depth_bins;
  const int b = static_cast<int>(std::floor((depth - lo) / (hi - lo) * K));
  return std::clamp(b, 0, K - 1);
}

DepthTargets depth_targets(const Tensor& pseudo_depth, std::span<const std::uint8_t> valid,
                           const ModelConfig& c) {
  const std::size_t W = c.scene.image_width, H = c.scene.image_height, G = c.grid();
  const std::size_t cell = static_cast<std::size_t>(c.patch * c.pool);
  SKD_REQUIRE(pseudo_depth.numel() == W * H && valid.size() == W * H,
              "pseudo depth must match the image size");
  DepthTargets t;
  t.bin.assign(G * G, -1);
  t.depth.assign(G * G, 0.0);
  for (std::size_t i = 0; i < G; ++i)
    for (std::size_t j = 0; j < G; ++j) {
      double s = 0;
      int n = 0;
      for (std::size_t y = i * cell; y < (i + 1) * cell; ++y)
        for (std::size_t x = j * cell; x < (j + 1) * cell; ++x)
          if (valid[y * W + x]) {
            s += pseudo_depth[y * W + x];
            ++n;
          }
      if (n == 0) continue;
      t.depth[i * G + j] = s / n;
      t.bin[i * G + j] = depth_bin(s / n, c);
      ++t.valid;
    }
  return t;
}

Var focal_depth_rows(Var logits, const DepthTargets& t) {
  Tape& tape = *logits.tape();
  const std::size_t T = logits.value().rows(), K = logits.value().cols();
  SKD_REQUIRE(t.bin.size() == T, "depth targets do not match the token count");
  Tensor onehot(Shape{T, K}), keep(Shape{T});
  for (std::size_t i = 0; i < T; ++i)
    if (t.bin[i] >= 0) {
      onehot.at(i, static_cast<std::size_t>(t.bin[i])) = 1.0;
      keep[i] = 1.0;
    }
  // stable log-softmax: shift each row by its max
  Var rmax = row_max(logits);
  Var shift = matmul(reshape(rmax, Shape{T, 1}), tape.constant(Tensor(Shape{1, K}, 1.0)));
  Var lse = log(sum_cols(exp(logits - shift))) + rmax;
  Var logp = sum_cols(logits * tape.constant(onehot)) - lse;
  Var pt = exp(logp);
  Var one_minus = 1.0 - pt;
  Var focal = square(one_minus) * (-logp);
  static_assert(kFocalGamma == 2.0, "focal weight is written as a square");
  return focal * tape.constant(keep);
}

Var depth_loss(Var logits, const Tensor& pseudo_depth, std::span<const std::uint8_t> valid,
               const ModelConfig& c) {
  const DepthTargets t = depth_targets(pseudo_depth, valid, c);
  if (t.valid == 0) {
    std::cerr << "warning: no valid depth tokens, depth loss is 0\n";
    return logits.tape()->constant(0.0);
  }
  return sum(focal_depth_rows(logits, t)) * (1.0 / t.valid);
}

Var projection_loss_rows(Var metric, std::span<const Box2D> anns, const ModelConfig& c) {
  Tape& tape = *metric.tape();
  const std::size_t R = anns.size();
  SKD_REQUIRE(metric.shape() == (Shape{R, 8}), "metric boxes must be R x 8");
  Tensor al(Shape{1, 8}), aw(Shape{1, 8}), ah(Shape{1, 8});
  for (std::size_t k = 0; k < 8; ++k) {
    al[k] = (k & 4) ? 0.5 : -0.5;
    aw[k] = (k & 2) ? 0.5 : -0.5;
    ah[k] = (k & 1) ? 0.5 : -0.5;
  }
  Var Al = tape.constant(al), Aw = tape.constant(aw), Ah = tape.constant(ah);
  Var ones = tape.constant(Tensor(Shape{1, 8}, 1.0));
  auto col = [&](std::size_t j) { return slice(metric, 1, j, 1); };
  Var x = col(0), y = col(1), z = col(2), h = col(3), w = col(4), l = col(5), s = col(6),
      co = col(7);
  Var X = matmul(x, ones) + matmul(l * co, Al) + matmul(w * s, Aw);
  Var Y = matmul(y, ones) + matmul(h, Ah);
  Var Z = matmul(z, ones) - matmul(l * s, Al) + matmul(w * co, Aw);
  // corners behind z_min are clamped there and pay the clamp distance
  Var Zc = relu(Z - kProjectionZMin) + kProjectionZMin;
  Var penalty = sum_cols(relu(kProjectionZMin - Z));
  const CameraIntrinsics& cam = c.scene.cam;
  const double W = c.scene.image_width, H = c.scene.image_height;
  Var U = ((X / Zc) * cam.fx + cam.cx) * (1.0 / W);
  Var V = ((Y / Zc) * cam.fy + cam.cy) * (1.0 / H);
  auto as_col = [&](Var v) { return reshape(v, Shape{R, 1}); };
  Var pred = concat({as_col(row_min(U)), as_col(row_min(V)), as_col(row_max(U)),
                     as_col(row_max(V))},
                    1);
  Tensor target(Shape{R, 4});
  for (std::size_t r = 0; r < R; ++r) {
    target.at(r, 0) = anns[r].u_min / W;
    target.at(r, 1) = anns[r].v_min / H;
    target.at(r, 2) = anns[r].u_max / W;
    target.at(r, 3) = anns[r].v_max / H;
  }
  return sum_cols(smooth_l1_elem(pred - tape.constant(target))) * 0.25 + penalty;
}

double projection_loss(const Box3D& b, const Box2D& ann, const ModelConfig& c) {
  Tape tape;
  Var m = tape.constant(Tensor(Shape{1, 8}, std::vector<double>{b.x, b.y, b.z, b.h, b.w, b.l,
                                                                std::sin(b.theta),
                                                                std::cos(b.theta)}));
  return projection_loss_rows(m, std::span<const Box2D>(&ann, 1), c).value()[0];
}

Var prior_loss_rows(Var raw) {
  return sum_cols(smooth_l1_elem(slice(raw, 1, 3, 3))) * (1.0 / 3.0);
}

Var twod_loss(Var logits, std::span<const Box2D> anns, const ModelConfig& c) {
  Tape& tape = *logits.tape();
  const std::size_t G = c.grid(), T = G * G;
  SKD_REQUIRE(logits.shape() == (Shape{T, 5}), "2D logits must be tokens x 5");
  const double cell = c.cell();
  Tensor obj(Shape{T}), mask(Shape{T, 4}), target(Shape{T, 4});
  std::vector<double> owner_area(T, -1.0);
  for (const Box2D& a : anns) {
    const auto j = static_cast<std::size_t>(
        std::clamp(std::floor(a.center_u() / cell), 0.0, static_cast<double>(G - 1)));
    const auto i = static_cast<std::size_t>(
        std::clamp(std::floor(a.center_v() / cell), 0.0, static_cast<double>(G - 1)));
    const std::size_t t = i * G + j;
    // two centers in one cell: the larger box owns it
    if (a.area() <= owner_area[t]) continue;
    owner_area[t] = a.area();
    obj[t] = 1.0;
    target.at(t, 0) = a.center_u() / cell - (static_cast<double>(j) + 0.5);
    target.at(t, 1) = a.center_v() / cell - (static_cast<double>(i) + 0.5);
    target.at(t, 2) = std::log(a.width() / cell);
    target.at(t, 3) = std::log(a.height() / cell);
    for (int k = 0; k < 4; ++k) mask.at(t, k) = 1.0;
  }
  Var z = reshape(slice(logits, 1, 0, 1), Shape{T});
  Var bce = mean(softplus(z) - z * tape.constant(obj));
  int npos = 0;
  for (double o : obj.data()) npos += o > 0;
  if (npos == 0) return bce;
  Var off = slice(logits, 1, 1, 4);
  Var reg = sum(smooth_l1_elem(off - tape.constant(target)) * tape.constant(mask)) *
            (1.0 / (4.0 * npos));
  return bce + reg;
}

}  // namespace skd
