#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "skd/errors.hpp"
#include "skd/geometry.hpp"
#include "skd/losses.hpp"
#include "skd/model.hpp"
#include "skd/scenes.hpp"

using namespace skd;
namespace fs = std::filesystem;

TEST_CASE("model config json roundtrip and checksum") {
  ModelConfig c;
  c.width = 12;
  const ModelConfig d = model_config_from_json(to_json(c));
  CHECK(to_json(d) == to_json(c));
  CHECK(model_checksum(d) == model_checksum(c));
  c.width = 13;
  CHECK(model_checksum(d) != model_checksum(c));
  ModelConfig bad;
  bad.patch = 5;  // does not divide the image
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
}

TEST_CASE("parameter init is a function of the seed") {
  ModelConfig c;
  const ModelParams a = ModelParams::init(c, 3), b = ModelParams::init(c, 3),
                    d = ModelParams::init(c, 4);
  CHECK(a.tensors() == b.tensors());
  CHECK(a.tensors() != d.tensors());
  CHECK(a.all_finite());
  CHECK(a.names() == d.names());
}

TEST_CASE("roi sampling rows are convex combinations") {
  ModelConfig c;
  for (const Box2D& b : {Box2D{3, 5, 40, 22}, Box2D{0, 0, 64, 64}, Box2D{-10, 50, 8, 80}}) {
    const Tensor m = roi_sampling_matrix(b, c);
    REQUIRE(m.rows() == static_cast<std::size_t>(c.roi_size * c.roi_size));
    REQUIRE(m.cols() == static_cast<std::size_t>(c.tokens()));
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double s = 0;
      for (std::size_t k = 0; k < m.cols(); ++k) {
        CHECK(m.at(r, k) >= 0.0);
        s += m.at(r, k);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("a tiny box at a token center samples that token only") {
  ModelConfig c;
  const double cell = c.cell();
  const double u = 3.5 * cell, v = 5.5 * cell;
  const Tensor m = roi_sampling_matrix(Box2D{u - 1e-9, v - 1e-9, u + 1e-9, v + 1e-9}, c);
  const auto token = static_cast<std::size_t>(5 * c.grid() + 3);
  for (std::size_t r = 0; r < m.rows(); ++r)
    CHECK(m.at(r, token) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("forward shapes and attention normalization") {
  ModelConfig c;
  const Scene s = generate_scene(c.scene, 1);
  const ModelParams params = ModelParams::init(c, 0);
  Tape t;
  BoundParams p(t, params);
  Var tokens = encode_global_features(t, p, c, s.features);
  const auto T = static_cast<std::size_t>(c.tokens());
  CHECK(tokens.shape() == (Shape{T, static_cast<std::size_t>(c.width)}));
  const DsnOutput d = dsn_forward(p, c, tokens, s.ann_boxes2d);
  const std::size_t R = s.ann_boxes2d.size();
  CHECK(d.depth_logits.shape() == (Shape{T, static_cast<std::size_t>(c.depth_bins)}));
  CHECK(d.boxes.raw_targets.shape() == (Shape{R, 8}));
  CHECK(d.boxes.metric.shape() == (Shape{R, 8}));
  for (const Var& a : {d.self_attention, d.cross_attention}) {
    const Tensor& v = a.value();
    for (std::size_t r = 0; r < v.rows(); ++r) {
      double sum = 0;
      for (std::size_t k = 0; k < v.cols(); ++k) sum += v.at(r, k);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  const HeadOutput m = mdn_forward(p, c, tokens, s.ann_boxes2d);
  for (double u : m.uncertainties()) CHECK(u > 0.0);
  const Tensor& met = m.metric.value();
  for (std::size_t r = 0; r < R; ++r)
    CHECK(met.at(r, 6) * met.at(r, 6) + met.at(r, 7) * met.at(r, 7) ==
          doctest::Approx(1.0).epsilon(1e-9));
  CHECK(twod_forward(p, c, tokens).shape() == (Shape{T, 5}));
  const HeadOutput empty = mdn_forward(p, c, tokens, {});
  CHECK(empty.count() == 0);
  CHECK(empty.boxes().empty());
}

TEST_CASE("graph decode agrees with the scalar decode") {
  ModelConfig c;
  const std::vector<Box2D> rois = {{10, 20, 30, 34}, {40, 8, 60, 30}};
  const Tensor raw = Tensor::matrix(2, 8, {0.1, -0.05, 1.2, 0.1, -0.1, 0.05, 0.3, 0.8,
                                           -0.2, 0.15, 0.4, -0.2, 0.2, 0.0, -0.6, -0.5});
  Tape t;
  const Tensor met = decode_metric(t.constant(raw), rois, c).value();
  const BoxPriors pri{c.scene.prior_h, c.scene.prior_w, c.scene.prior_l};
  for (std::size_t r = 0; r < 2; ++r) {
    const Box3D b = decode_box(std::span<const double>(&raw[r * 8], 8), rois[r], c.scene.cam,
                               pri, c.z_scale);
    CHECK(met.at(r, 0) == doctest::Approx(b.x).epsilon(1e-12));
    CHECK(met.at(r, 1) == doctest::Approx(b.y).epsilon(1e-12));
    CHECK(met.at(r, 2) == doctest::Approx(b.z).epsilon(1e-12));
    CHECK(met.at(r, 5) == doctest::Approx(b.l).epsilon(1e-12));
    CHECK(std::atan2(met.at(r, 6), met.at(r, 7)) == doctest::Approx(b.theta).epsilon(1e-12));
  }
}

TEST_CASE("pseudo depth has no path to the MDN parameters") {
  ModelConfig c;
  const Scene s = generate_scene(c.scene, 2);
  const ModelParams params = ModelParams::init(c, 1);
  Tape t;
  BoundParams p(t, params);
  Var tokens = encode_global_features(t, p, c, s.features);
  const DsnOutput d = dsn_forward(p, c, tokens, s.ann_boxes2d);
  Var l = depth_loss(d.depth_logits, s.pseudo_depth, s.valid_mask, c);
  const Gradients g = t.backward(l);
  bool encoder_touched = false;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor gk = g.at(p.vars()[k]);
    if (params.groups()[k] == ParamGroup::MdnHead || params.groups()[k] == ParamGroup::TwoDHead)
      for (double v : gk.data()) CHECK(v == 0.0);
    if (params.groups()[k] == ParamGroup::Encoder)
      for (double v : gk.data()) encoder_touched |= v != 0.0;
  }
  CHECK(encoder_touched);
}

TEST_CASE("detected proposals are thresholded and capped") {
  ModelConfig c;
  const auto T = static_cast<std::size_t>(c.tokens());
  Tensor lg(Shape{T, 5});
  for (std::size_t k = 0; k < T; ++k) lg.at(k, 0) = -5.0;
  lg.at(9, 0) = 3.0;
  lg.at(20, 0) = 1.0;
  lg.at(30, 0) = 2.0;
  const auto props = detect_proposals(lg, c, 0.5, 2);
  REQUIRE(props.size() == 2);
  CHECK(props[0].objectness > props[1].objectness);
  // token 9 sits at grid (1, 1); zero offsets and log sizes give a one-cell box there
  CHECK(props[0].box.center_u() == doctest::Approx(1.5 * c.cell()));
  CHECK(props[0].box.width() == doctest::Approx(c.cell()));
  CHECK(detect_proposals(lg, c, 0.99, 8).empty());
}

TEST_CASE("checkpoint roundtrip and corruption guard") {
  ModelConfig c;
  c.width = 8;
  const ModelParams params = ModelParams::init(c, 9);
  const fs::path p = fs::temp_directory_path() / "skd_test.ckpt";
  save_checkpoint(p, c, params);
  const Checkpoint ck = load_checkpoint(p);
  CHECK(ck.params.tensors() == params.tensors());
  CHECK(ck.params.names() == params.names());
  CHECK(to_json(ck.config) == to_json(c));
  const std::string sum = file_checksum(p);
  save_checkpoint(p, c, params);
  CHECK(file_checksum(p) == sum);

  // flip one byte in the middle of the config JSON
  std::string bytes;
  {
    std::ifstream in(p, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  const auto at = bytes.find("\"width\"");
  REQUIRE(at != std::string::npos);
  bytes[at + 1] = 'W';
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
  }
  CHECK_THROWS_AS(load_checkpoint(p), IoError);
  fs::remove(p);
  CHECK_THROWS_AS(load_checkpoint(p), IoError);
  std::ofstream(p) << "nonsense";
  CHECK_THROWS_AS(load_checkpoint(p), IoError);
  fs::remove(p);
}
