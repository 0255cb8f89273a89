#include <cmath>
#include <random>

#include "ap_oracle.hpp"
#include "doctest.h"
#include "skd/errors.hpp"
#include "skd/eval.hpp"
#include "skd/geometry.hpp"
#include "skd/model.hpp"
#include "skd/scenes.hpp"

using namespace skd;

namespace {

Detection det(const Box3D& b, double score) { return {b, Box2D{0, 0, 1, 1}, score}; }

const IouFn kBev = [](const Box3D& a, const Box3D& b) { return bev_iou(a, b); };

}  // namespace

TEST_CASE("ap_r40 matches the brute-force oracle") {
  std::mt19937_64 rng(2024);
  for (int k = 0; k < 500; ++k) {
    const auto in = testing::random_ap_instance(rng);
    CHECK(ap_r40(in.dets, in.num_gt).ap == testing::brute_force_ap_r40(in.dets, in.num_gt));
  }
}

TEST_CASE("ap_r40 edge cases") {
  std::vector<ScoredFlag> perfect;
  for (int i = 0; i < 7; ++i) perfect.push_back({1.0 - 0.1 * i, true});
  CHECK(ap_r40(perfect, 7).ap == 1.0);
  CHECK(ap_r40({}, 7).ap == 0.0);
  const PRCurve none = ap_r40({}, 0);
  CHECK(none.no_ground_truth);
  CHECK(none.ap == 0.0);
  CHECK(none.recall.size() == 40);
  CHECK_THROWS_AS(ap_r40({}, -1), ContractViolation);
  // half the objects found, all correct: recall points 1..20 at precision 1
  std::vector<ScoredFlag> half = {{0.9, true}, {0.8, true}};
  CHECK(ap_r40(half, 4).ap == 0.5);
  // a false positive ranked first
  std::vector<ScoredFlag> fp_first = {{0.9, false}, {0.8, true}};
  CHECK(ap_r40(fp_first, 1).ap == 0.5);
}

TEST_CASE("tied scores form one operating point") {
  // order inside the tie must not matter
  std::vector<ScoredFlag> a = {{0.5, true}, {0.5, false}};
  std::vector<ScoredFlag> b = {{0.5, false}, {0.5, true}};
  CHECK(ap_r40(a, 1).ap == 0.5);
  CHECK(ap_r40(b, 1).ap == 0.5);
}

TEST_CASE("greedy matching by score") {
  const Box3D g1{0, 1, 10, 1.5, 1.6, 3.9, 0};
  const Box3D g2{5, 1, 20, 1.5, 1.6, 3.9, 0};
  Box3D near1 = g1;
  near1.x += 0.2;
  std::vector<Detection> dets = {det(near1, 0.3), det(g1, 0.9), det(g2, 0.5)};
  const std::vector<Box3D> gts = {g1, g2};
  const auto tp = match_detections(dets, gts, kBev, 0.5);
  // the exact copy scores higher and claims g1; the shifted one is a duplicate
  CHECK_FALSE(tp[0]);
  CHECK(tp[1]);
  CHECK(tp[2]);
  const auto strict = match_detections(dets, gts, kBev, 1.01);
  for (bool t : strict) CHECK_FALSE(t);
  CHECK(match_detections({}, gts, kBev, 0.5).empty());
  const auto nogt = match_detections(dets, {}, kBev, 0.5);
  for (bool t : nogt) CHECK_FALSE(t);
}

TEST_CASE("score_detections: perfect and empty detectors") {
  std::vector<std::vector<Box3D>> gts = {{{0, 1, 10, 1.5, 1.6, 3.9, 0.3}},
                                         {{2, 1, 12, 1.5, 1.6, 3.9, -1.0},
                                          {-4, 1, 25, 1.4, 1.7, 4.2, 2.0}}};
  std::vector<std::vector<Detection>> perfect(gts.size()), empty(gts.size());
  for (std::size_t s = 0; s < gts.size(); ++s)
    for (const Box3D& b : gts[s]) perfect[s].push_back(det(b, 0.7));
  EvalReport r;
  score_detections(r, perfect, gts);
  CHECK(r.ap_3d_07 == 1.0);
  CHECK(r.ap_bev_05 == 1.0);
  CHECK(r.num_gts == 3);
  EvalReport e;
  score_detections(e, empty, gts);
  CHECK(e.ap_3d_05 == 0.0);
  CHECK(e.num_detections == 0);
}

TEST_CASE("mode and branch names roundtrip") {
  for (auto m : {ProposalMode::GtProposals, ProposalMode::DetectedProposals})
    CHECK(proposal_mode_from_string(to_string(m)) == m);
  for (auto b : {Branch::Mdn, Branch::Dsn}) CHECK(branch_from_string(to_string(b)) == b);
  CHECK_THROWS_AS(branch_from_string("both"), ContractViolation);
}

TEST_CASE("a lower-ranked false positive does not lower AP") {
  const std::vector<ScoredFlag> d = {{0.9, true}, {0.5, false}};
  CHECK(ap_r40(d, 1).ap == 1.0);
}

TEST_CASE("AP monotonicity under added detections") {
  std::mt19937_64 rng(77);
  for (int k = 0; k < 300; ++k) {
    auto in = testing::random_ap_instance(rng);
    if (in.num_gt == 0) continue;
    const double base = ap_r40(in.dets, in.num_gt).ap;
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
    int tps = 0;
    for (const auto& d : in.dets) tps += d.tp;
    if (tps < in.num_gt) {
      auto more = in.dets;
      more.push_back({std::uniform_real_distribution<double>(0, 1)(rng), true});
      CHECK(ap_r40(more, in.num_gt).ap >= base);
    }
    auto fp = in.dets;
    fp.push_back({-1.0, false});
    CHECK(ap_r40(fp, in.num_gt).ap <= base);
    const PRCurve c = ap_r40(in.dets, in.num_gt);
    for (std::size_t i = 1; i < c.precision.size(); ++i)
      CHECK(c.precision[i] <= c.precision[i - 1]);
  }
}

TEST_CASE("matching at the IoU threshold boundary") {
  const Box3D g{0, 1, 10, 1.0, 1.0, 1.0, 0};
  // unit cubes offset along x: IoU = (1 - s) / (1 + s)
  auto shifted = [&](double iou) {
    Box3D b = g;
    b.x += (1 - iou) / (1 + iou);
    return b;
  };
  const std::vector<Box3D> gts = {g};
  const IouFn full = [](const Box3D& a, const Box3D& b) { return iou_3d(a, b); };
  std::vector<Detection> d49 = {det(shifted(0.49), 0.9)};
  std::vector<Detection> d51 = {det(shifted(0.51), 0.9)};
  CHECK_FALSE(match_detections(d49, gts, full, 0.5)[0]);
  CHECK(match_detections(d51, gts, full, 0.5)[0]);
}

TEST_CASE("stricter IoU never raises AP") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int k = 0; k < 50; ++k) {
    std::vector<std::vector<Box3D>> gts(3);
    std::vector<std::vector<Detection>> dets(3);
    for (int s = 0; s < 3; ++s)
      for (int i = 0; i < 3; ++i) {
        const Box3D g{8.0 * i - 8, 1, 15 + 5 * u(rng), 1.5, 1.6, 3.9, 3 * u(rng)};
        gts[s].push_back(g);
        Box3D p = g;
        p.x += u(rng) - 0.5;
        p.z += 2 * (u(rng) - 0.5);
        p.theta += u(rng) - 0.5;
        dets[s].push_back(det(p, u(rng)));
      }
    EvalReport r;
    score_detections(r, dets, gts);
    CHECK(r.ap_3d_07 <= r.ap_3d_05);
    CHECK(r.ap_bev_07 <= r.ap_bev_05);
    CHECK(r.ap_3d_05 <= r.ap_bev_05);
  }
}

TEST_CASE("dataset evaluation matches a manual match + AP pass") {
  ModelConfig mc;
  Dataset data;
  data.config = mc.scene;
  data.split = "val";
  for (int i = 0; i < 6; ++i) data.scenes.push_back(generate_scene(data.config, i));
  Checkpoint ck{mc, ModelParams::init(mc, 8)};
  const EvalReport rep = evaluate_dataset(ck, "x", data, InferOptions{});
  std::vector<ScoredFlag> flags;
  int gts = 0;
  const IouFn full = [](const Box3D& a, const Box3D& b) { return iou_3d(a, b); };
  for (std::size_t s = 0; s < data.scenes.size(); ++s) {
    const auto& g = data.scenes[s].gt_boxes3d;
    gts += static_cast<int>(g.size());
    const auto tp = match_detections(rep.detections[s], g, full, 0.5);
    for (std::size_t k = 0; k < tp.size(); ++k) flags.push_back({rep.detections[s][k].score, tp[k]});
  }
  CHECK(rep.num_gts == gts);
  CHECK(rep.ap_3d_05 == ap_r40(flags, gts).ap);
  CHECK(rep.ap_3d_05 == testing::brute_force_ap_r40(flags, gts));
  Dataset other = data;
  other.config.cam.fx = 120;
  CHECK_THROWS_AS(evaluate_dataset(ck, "x", other, InferOptions{}), ContractViolation);
}

TEST_CASE("ground truth scored as detections gives AP 1 through the dataset path") {
  ModelConfig mc;
  std::vector<std::vector<Box3D>> gts;
  std::vector<std::vector<Detection>> dets;
  for (int i = 0; i < 5; ++i) {
    const Scene s = generate_scene(mc.scene, i);
    gts.push_back(s.gt_boxes3d);
    dets.emplace_back();
    for (std::size_t k = 0; k < s.gt_boxes3d.size(); ++k)
      dets.back().push_back({s.gt_boxes3d[k], s.ann_boxes2d[k], 1.0});
  }
  EvalReport r;
  score_detections(r, dets, gts);
  CHECK(r.ap_bev_05 == 1.0);
  CHECK(r.ap_3d_05 == 1.0);
  CHECK(r.ap_3d_07 == 1.0);
}
