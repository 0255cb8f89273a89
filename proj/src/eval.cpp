#include "skd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "skd/errors.hpp"
#include "skd/kitti.hpp"
#include "skd/parallel.hpp"

namespace skd {

namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> score_order(std::size_t n, const std::function<double(std::size_t)>& s) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return s(a) > s(b); });
  return idx;
}

}  // namespace

std::vector<bool> match_detections(std::span<const Detection> dets, std::span<const Box3D> gts,
                                   const IouFn& iou, double threshold) {
  std::vector<bool> tp(dets.size(), false);
  std::vector<bool> claimed(gts.size(), false);
  for (std::size_t i : score_order(dets.size(), [&](std::size_t k) { return dets[k].score; })) {
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g]) continue;
      const double v = iou(dets[i].box3d, gts[g]);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size() && best >= threshold) {
      claimed[best_g] = true;
      tp[i] = true;
    }
  }
  return tp;
}

PRCurve ap_r40(std::span<const ScoredFlag> dets, int num_gt) {
  SKD_REQUIRE(num_gt >= 0, "num_gt must be >= 0");
  PRCurve c;
  for (int i = 1; i <= 40; ++i) c.recall.push_back(i / 40.0);
  c.precision.assign(40, 0.0);
  if (num_gt == 0) {
    c.no_ground_truth = true;
    return c;
  }
  const auto order = score_order(dets.size(), [&](std::size_t k) { return dets[k].score; });
  // (tp, fp) after each distinct score threshold
  std::vector<std::pair<long, long>> points;
  long tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (dets[order[k]].tp ? tp : fp) += 1;
    if (k + 1 == order.size() || dets[order[k + 1]].score != dets[order[k]].score)
      points.emplace_back(tp, fp);
  }
  double total = 0.0;
  for (int i = 1; i <= 40; ++i) {
    double best = 0.0;
    for (auto [t, f] : points)
      if (t * 40 >= static_cast<long>(i) * num_gt)
        best = std::max(best, static_cast<double>(t) / static_cast<double>(t + f));
    c.precision[i - 1] = best;
    total += best;
  }
  c.ap = total / 40.0;
  return c;
}

std::string to_string(ProposalMode m) {
  return m == ProposalMode::GtProposals ? "gt-proposals" : "detected-proposals";
}

ProposalMode proposal_mode_from_string(const std::string& s) {
  if (s == "gt-proposals") return ProposalMode::GtProposals;
  if (s == "detected-proposals") return ProposalMode::DetectedProposals;
  throw ContractViolation("unknown proposal mode '" + s + "'");
}

std::string to_string(Branch b) { return b == Branch::Mdn ? "mdn" : "dsn"; }

Branch branch_from_string(const std::string& s) {
  if (s == "mdn") return Branch::Mdn;
  if (s == "dsn") return Branch::Dsn;
  throw ContractViolation("unknown branch '" + s + "'");
}

std::vector<Detection> infer_scene(const ModelConfig& config, const ModelParams& params,
                                   const Scene& scene, const InferOptions& opt) {
  Tape tape;
  BoundParams p(tape, params);
  Var tokens = encode_global_features(tape, p, config, scene.features);
  std::vector<Box2D> rois;
  std::vector<double> objectness;
  if (opt.mode == ProposalMode::GtProposals) {
    rois = scene.ann_boxes2d;
    objectness.assign(rois.size(), 1.0);
  } else {
    Var logits = twod_forward(p, config, tokens);
    for (const Proposal& pr :
         detect_proposals(logits.value(), config, opt.objectness_threshold, opt.top_k)) {
      if (pr.box.width() <= 0.0 || pr.box.height() <= 0.0) continue;
      rois.push_back(pr.box);
      objectness.push_back(pr.objectness);
    }
  }
  const HeadOutput head = opt.branch == Branch::Dsn ? dsn_forward(p, config, tokens, rois).boxes
                                                    : mdn_forward(p, config, tokens, rois);
  const auto boxes = head.boxes();
  const auto us = head.uncertainties();
  std::vector<Detection> out;
  for (std::size_t r = 0; r < rois.size(); ++r)
    out.push_back({boxes[r], rois[r], objectness[r] * std::exp(-us[r])});
  return out;
}

nlohmann::json EvalReport::to_json() const {
  return {
      {"mode", mode},
      {"split", split},
      {"branch", branch},
      {"ap_bev_05", ap_bev_05},
      {"ap_3d_05", ap_3d_05},
      {"ap_bev_07", ap_bev_07},
      {"ap_3d_07", ap_3d_07},
      {"num_scenes", num_scenes},
      {"num_gts", num_gts},
      {"num_detections", num_detections},
      {"checkpoint_checksum", checkpoint_checksum},
  };
}

void score_detections(EvalReport& report, const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<Box3D>>& gts) {
  SKD_REQUIRE(dets.size() == gts.size(), "one detection list per scene");
  report.num_scenes = static_cast<int>(gts.size());
  report.num_gts = 0;
  report.num_detections = 0;
  for (std::size_t s = 0; s < gts.size(); ++s) {
    report.num_gts += static_cast<int>(gts[s].size());
    report.num_detections += static_cast<int>(dets[s].size());
  }
  auto ap = [&](const IouFn& fn, double thr) {
    std::vector<ScoredFlag> flags;
    for (std::size_t s = 0; s < gts.size(); ++s) {
      const auto tp = match_detections(dets[s], gts[s], fn, thr);
      for (std::size_t k = 0; k < tp.size(); ++k) flags.push_back({dets[s][k].score, tp[k]});
    }
    return ap_r40(flags, report.num_gts).ap;
  };
  const IouFn bev = [](const Box3D& a, const Box3D& b) { return bev_iou(a, b); };
  const IouFn full = [](const Box3D& a, const Box3D& b) { return iou_3d(a, b); };
  report.ap_bev_05 = ap(bev, 0.5);
  report.ap_3d_05 = ap(full, 0.5);
  report.ap_bev_07 = ap(bev, 0.7);
  report.ap_3d_07 = ap(full, 0.7);
}

EvalReport evaluate_dataset(const Checkpoint& ckpt, const std::string& checkpoint_checksum,
                            const Dataset& data, const InferOptions& opt, int threads) {
  const SceneConfig& a = ckpt.config.scene;
  const SceneConfig& b = data.config;
  SKD_REQUIRE(a.image_width == b.image_width && a.image_height == b.image_height &&
                  a.cam.fx == b.cam.fx && a.cam.fy == b.cam.fy && a.cam.cx == b.cam.cx &&
                  a.cam.cy == b.cam.cy,
              "checkpoint camera/image config does not match the dataset");
  EvalReport r;
  r.mode = to_string(opt.mode);
  r.split = data.split;
  r.branch = to_string(opt.branch);
  r.checkpoint_checksum = checkpoint_checksum;
  r.detections.resize(data.scenes.size());
  parallel_for(data.scenes.size(), threads, [&](std::size_t i) {
    r.detections[i] = infer_scene(ckpt.config, ckpt.params, data.scenes[i], opt);
  });
  std::vector<std::vector<Box3D>> gts;
  for (const Scene& s : data.scenes) gts.push_back(s.gt_boxes3d);
  score_detections(r, r.detections, gts);
  return r;
}

std::string kitti_detection_line(const Detection& d) {
  return write_kitti_label(box_to_record(d.box3d, d.box2d, d.score), LabelPrecision::Lossless);
}

void write_eval_outputs(const fs::path& dir, const EvalReport& report) {
  fs::create_directories(dir / "detections");
  for (std::size_t i = 0; i < report.detections.size(); ++i) {
    const fs::path p = dir / "detections" / (std::to_string(i) + ".txt");
    std::ofstream out(p);
    if (!out) throw IoError("cannot write " + p.string());
    for (const Detection& d : report.detections[i]) out << kitti_detection_line(d) << '\n';
  }
  std::ofstream rep(dir / "report.json");
  if (!rep) throw IoError("cannot write " + (dir / "report.json").string());
  rep << report.to_json().dump(2) << '\n';
}

}  // namespace skd
