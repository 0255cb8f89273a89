#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "skd/geometry.hpp"
#include "skd/model.hpp"
#include "skd/scenes.hpp"

namespace skd {

struct Detection {
  Box3D box3d;
  Box2D box2d;
  double score = 0.0;
};

using IouFn = std::function<double(const Box3D&, const Box3D&)>;

// Greedy matching in descending score order (stable for ties). Each detection
// takes the unclaimed GT of highest IoU if that IoU >= threshold. Flags are
// returned in the order of `dets`.
std::vector<bool> match_detections(std::span<const Detection> dets, std::span<const Box3D> gts,
                                   const IouFn& iou, double threshold);

struct ScoredFlag {
  double score = 0.0;
  bool tp = false;
};

struct PRCurve {
  std::vector<double> recall;     // 1/40 .. 40/40
  std::vector<double> precision;  // interpolated
  double ap = 0.0;
  bool no_ground_truth = false;
};

// Operating points are score thresholds, so tied scores enter together.
PRCurve ap_r40(std::span<const ScoredFlag> dets, int num_gt);

enum class ProposalMode { GtProposals, DetectedProposals };
enum class Branch { Mdn, Dsn };

std::string to_string(ProposalMode m);
ProposalMode proposal_mode_from_string(const std::string& s);
std::string to_string(Branch b);
Branch branch_from_string(const std::string& s);

struct InferOptions {
  ProposalMode mode = ProposalMode::GtProposals;
  Branch branch = Branch::Mdn;
  double objectness_threshold = 0.5;
  int top_k = 8;
};

// Forward pass for one scene.
std::vector<Detection> infer_scene(const ModelConfig& config, const ModelParams& params,
                                   const Scene& scene, const InferOptions& opt);

struct EvalReport {
  std::string mode, split, branch;
  double ap_bev_05 = 0, ap_3d_05 = 0, ap_bev_07 = 0, ap_3d_07 = 0;
  int num_scenes = 0, num_gts = 0, num_detections = 0;
  std::string checkpoint_checksum;
  std::vector<std::vector<Detection>> detections;  // per scene

  nlohmann::json to_json() const;
};

// APs of per-scene detections against per-scene ground truth.
void score_detections(EvalReport& report, const std::vector<std::vector<Detection>>& dets,
                      const std::vector<std::vector<Box3D>>& gts);

// Refuses (ContractViolation) when the checkpoint was trained for a
// different camera or image size than the split uses.
EvalReport evaluate_dataset(const Checkpoint& ckpt, const std::string& checkpoint_checksum,
                            const Dataset& data, const InferOptions& opt, int threads = 1);

// report.json plus detections/{i}.txt in KITTI 16-field format.
void write_eval_outputs(const std::filesystem::path& dir, const EvalReport& report);
std::string kitti_detection_line(const Detection& d);

}  // namespace skd
