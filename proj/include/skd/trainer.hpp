#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "skd/adam.hpp"
#include "skd/gradcheck.hpp"
#include "skd/losses.hpp"
#include "skd/model.hpp"
#include "skd/scenes.hpp"

namespace skd {

enum class TrainMode { Full, MdnOnly, DsnOnly };
std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

// What the two heads are compared on: decoded boxes [x, y, z, h, w, l, sin, cos]
// or the raw regression targets.
enum class DistillSpace { Metric, Raw };
DistillSpace distill_space_from_string(const std::string& s);

struct TrainConfig {
  ModelConfig model;
  int epochs = 60;
  int batch_size = 8;
  double warmup_epochs = 5.0;
  double lr_start = 1e-5;
  double lr_peak = 1e-3;
  std::vector<double> decay_at = {0.6, 0.8};  // fractions of all steps
  double decay_rate = 0.1;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::Full;
  bool tms_enabled = true;
  bool ud_enabled = true;
  bool detach_ud_denominator = false;
  double tms_ema = 0.0;       // 0 applies the raw per-batch factors
  bool prior_on_mdn = false;  // dimension prior on the MDN head as well
  DistillSpace distill_space = DistillSpace::Metric;
  int log_every = 1;          // steps
  int checkpoint_every = 0;   // epochs, 0 = final only
  int stop_after_steps = -1;  // save state and return early (resume testing)
  std::string data_dir;       // holds train/ and val/
  std::string out_dir;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Keys missing from `j` keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

// Learning rate at a global step.
double learning_rate(const TrainConfig& c, long step, long steps_per_epoch);

struct TmsFactors {
  double dsn = 1.0, mdn = 1.0;
};
// Inputs are detached batch means; both zero gives (1, 1).
TmsFactors tms_factors(double l_proj_dsn, double l_proj_mdn);

struct TrainState {
  long step = 0;
  int epoch = 0;
  AdamState adam;
  double ema_total = 0.0, ema_l_ud = 0.0;  // running loss EMAs for logging
  double tms_ema_dsn = 0.0, tms_ema_mdn = 0.0;
  bool tms_ema_started = false;
  std::mt19937_64 rng;

  void save(const std::filesystem::path& path, const ModelParams& params) const;
  static TrainState load(const std::filesystem::path& path, ModelParams& params);
};

struct StepResult {
  LossBreakdown losses;
  TmsFactors factors;
  double lr = 0.0;
};

// Full objective for a batch, gradients summed over scenes.
struct BatchGradients {
  LossBreakdown losses;
  TmsFactors factors;
  std::vector<Tensor> grads;
  // Per scene: gradient at each head's [metric boxes, uncertainty] outputs,
  // i.e. below the gates, flattened. Empty unless the batch has both heads.
  std::vector<Tensor> head_grad_dsn, head_grad_mdn;
};

struct BatchOptions {
  std::optional<TmsFactors> force_factors;  // override the computed factors
  bool ud_only = false;                     // backward from L_ud alone
  int threads = 1;
};

BatchGradients batch_gradients(std::span<const Scene* const> scenes, const ModelParams& params,
                               const TrainConfig& config, const BatchOptions& opt,
                               TrainState* state = nullptr);

// Objective of a one-scene batch from the given parameter leaves.
Var scene_objective(Tape& tape, const BoundParams& p, const Scene& scene,
                    const TrainConfig& config, TmsFactors factors = {});

struct TensorGradCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst;
};
struct ModelGradCheck {
  double max_rel_error = 0.0;
  int coords_checked = 0;
  std::vector<TensorGradCheck> tensors;
};
// Finite differences of scene_objective against backward, per parameter tensor.
ModelGradCheck check_model_gradients(const TrainConfig& config, const Scene& scene,
                                     const ModelParams& params, int coords_per_tensor,
                                     std::uint64_t seed);

// Gradient computation plus one Adam update.
StepResult train_step(std::span<const Scene* const> scenes, ModelParams& params,
                      TrainState& state, const TrainConfig& config, long steps_per_epoch,
                      int threads = 1);

struct TrainResult {
  std::filesystem::path final_checkpoint;
  bool finished = false;  // false if stopped by stop_after_steps
  long steps = 0;
};

// Reads data_dir/train, trains, writes out_dir/{config.json, metrics.csv,
// state.bin, final.ckpt}; resumes from state.bin when present and `resume`.
TrainResult run_training(const TrainConfig& config, bool resume = false, int threads = 1,
                         bool verbose = false);

// Trains on an in-memory dataset (used by the CLI wrapper and tests).
TrainResult run_training(const TrainConfig& config, const Dataset& train, bool resume,
                         int threads, bool verbose);

}  // namespace skd
