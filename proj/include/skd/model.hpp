#pragma once

// The two subnetworks sharing one token encoder:
//
//   DSN  features -> F_G -> depth head (F_D, depth logits)
//                         -> SA(F_D) -> CA(., F_G) -> FFN  = F_G3D
//                         -> RoI pool(F_G3D) -> depth-aware 3D head
//   MDN  features -> F_G -> RoI pool(F_G)    -> 2D-to-3D head
//   2D   F_G -> per-token objectness + box offsets
//
// Every 3D head emits 9 numbers per RoI: 8 raw box targets
// [du, dv, z, log h/h0, log w/w0, log l/l0, sin, cos] and a raw uncertainty.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "skd/autodiff.hpp"
#include "skd/geometry.hpp"
#include "skd/scenes.hpp"

namespace skd {

struct ModelConfig {
  int patch = 4;
  int width = 16;  // token width d
  int pool = 2;
  int depth_bins = 64;
  int roi_size = 4;
  int head_hidden = 32;
  int ffn_hidden = 32;
  double z_scale = 10.0;  // z = z_scale * softplus(raw)
  SceneConfig scene;      // image size, intrinsics, priors, depth range

  int patch_grid() const { return scene.image_width / patch; }
  int grid() const { return patch_grid() / pool; }
  int tokens() const { return grid() * grid(); }
  double cell() const { return static_cast<double>(patch * pool); }
  int patch_dim() const { return kFeatureChannels * patch * patch; }
  int roi_features() const { return roi_size * roi_size * width + kRoiGeometry; }

  static constexpr int kRoiGeometry = 5;
  static constexpr int kBoxTargets = 8;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
std::string model_checksum(const ModelConfig& c);

// Which subnetwork a parameter belongs to; used by ablations and tests.
enum class ParamGroup { Encoder, DepthHead, Fusion, DsnHead, MdnHead, TwoDHead };

class ModelParams {
 public:
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }
  std::size_t index_of(const std::string& name) const;
  const Tensor& get(const std::string& name) const { return tensors_[index_of(name)]; }
  Tensor& get(const std::string& name) { return tensors_[index_of(name)]; }
  bool all_finite() const;

  void add(std::string name, ParamGroup group, Tensor t);

 private:
  std::vector<std::string> names_;
  std::vector<ParamGroup> groups_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

// Parameters as leaves of one tape.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ModelParams& params);
  // Caller-made leaves, one per parameter, in parameter order.
  BoundParams(const ModelParams& params, std::vector<Var> vars);
  Var operator[](const std::string& name) const { return vars_[params_->index_of(name)]; }
  const std::vector<Var>& vars() const { return vars_; }

 private:
  const ModelParams* params_;
  std::vector<Var> vars_;
};

// Per-RoI outputs of a 3D head. All graph nodes have R rows.
struct HeadOutput {
  Var raw_targets;  // R x 8
  Var uncertainty;  // R, softplus of the raw uncertainty, > 0
  Var metric;       // R x 8: [x, y, z, h, w, l, sin, cos], unit (sin, cos)
  std::vector<Box2D> rois;

  std::size_t count() const { return rois.size(); }
  // Decoded boxes from the forward values.
  std::vector<Box3D> boxes() const;
  std::vector<double> uncertainties() const;
};

struct DsnOutput {
  Var depth_features;  // F_D, tokens x d
  Var depth_logits;    // tokens x K
  Var fused;           // F_G3D, tokens x d
  Var self_attention;  // tokens x tokens (rows sum to 1)
  Var cross_attention;
  HeadOutput boxes;
};

// Constant [P, C*p*p] patch matrix for one scene's features.
Tensor patchify(const Tensor& features, const ModelConfig& c);
// F_G: tokens x d.
Var encode_global_features(Tape& tape, const BoundParams& p, const ModelConfig& c,
                           const Tensor& features);

// Bilinear lattice sampling matrix [S*S, tokens] for one box (pixels).
Tensor roi_sampling_matrix(const Box2D& box, const ModelConfig& c);
// S*S x d tile for one box.
Var roi_pool(Var tokens, const Box2D& box, const ModelConfig& c);
// Normalized box geometry appended to pooled features.
std::vector<double> roi_geometry(const Box2D& box, const ModelConfig& c);

DsnOutput dsn_forward(const BoundParams& p, const ModelConfig& c, Var global_tokens,
                      std::span<const Box2D> rois);
HeadOutput mdn_forward(const BoundParams& p, const ModelConfig& c, Var global_tokens,
                       std::span<const Box2D> rois);
// tokens x 5: objectness logit, du, dv (cells), log(w/cell), log(h/cell).
Var twod_forward(const BoundParams& p, const ModelConfig& c, Var global_tokens);

// Graph version of the decode: raw R x 8 -> metric R x 8.
Var decode_metric(Var raw, std::span<const Box2D> rois, const ModelConfig& c);

struct BoxPriors {
  double h = 1.5, w = 1.6, l = 3.9;
};
// Scalar decode of one raw target vector (z already in raw softplus space).
Box3D decode_box(std::span<const double> raw, const Box2D& roi, const CameraIntrinsics& cam,
                 const BoxPriors& priors, double z_scale);

struct Proposal {
  Box2D box;
  double objectness = 0.0;
};
// Thresholded objectness, best first, at most top_k.
std::vector<Proposal> detect_proposals(const Tensor& twod_logits, const ModelConfig& c,
                                       double threshold, int top_k);

// Checkpoints: "SKDCKPT1", config JSON and its checksum, then named tensors.
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams& params);
// Throws IoError on a missing/corrupt file or a config checksum mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string file_checksum(const std::filesystem::path& path);

}  // namespace skd
