#include "skd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>

#include "skd/errors.hpp"
#include "skd/eval.hpp"
#include "skd/hashing.hpp"
#include "skd/parallel.hpp"

namespace skd {

namespace fs = std::filesystem;

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Full: return "full";
    case TrainMode::MdnOnly: return "mdn-only";
    case TrainMode::DsnOnly: return "dsn-only";
  }
  return "?";
}

DistillSpace distill_space_from_string(const std::string& s) {
  if (s == "metric") return DistillSpace::Metric;
  if (s == "raw") return DistillSpace::Raw;
  throw ContractViolation("unknown distillation space '" + s + "'");
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "full") return TrainMode::Full;
  if (s == "mdn-only") return TrainMode::MdnOnly;
  if (s == "dsn-only") return TrainMode::DsnOnly;
  throw ContractViolation("unknown train mode '" + s + "'");
}

void TrainConfig::validate() const {
  model.validate();
  SKD_REQUIRE(epochs > 0 && batch_size > 0, "epochs and batch_size must be positive");
  SKD_REQUIRE(warmup_epochs >= 0.0 && warmup_epochs < epochs, "warmup_epochs must be < epochs");
  SKD_REQUIRE(lr_start > 0.0 && lr_peak > 0.0, "learning rates must be positive");
  for (std::size_t i = 0; i < decay_at.size(); ++i) {
    SKD_REQUIRE(decay_at[i] > 0.0 && decay_at[i] < 1.0, "decay points must lie in (0, 1)");
    SKD_REQUIRE(i == 0 || decay_at[i] > decay_at[i - 1], "decay points must increase");
  }
  SKD_REQUIRE(decay_rate > 0.0, "decay_rate must be positive");
  SKD_REQUIRE(tms_ema >= 0.0 && tms_ema < 1.0, "tms_ema must be in [0, 1)");
  SKD_REQUIRE(log_every > 0 && checkpoint_every >= 0, "bad logging intervals");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"model", to_json(c.model)},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"warmup_epochs", c.warmup_epochs},
      {"lr_start", c.lr_start},
      {"lr_peak", c.lr_peak},
      {"decay_at", c.decay_at},
      {"decay_rate", c.decay_rate},
      {"seed", c.seed},
      {"mode", to_string(c.mode)},
      {"tms_enabled", c.tms_enabled},
      {"ud_enabled", c.ud_enabled},
      {"detach_ud_denominator", c.detach_ud_denominator},
      {"tms_ema", c.tms_ema},
      {"prior_on_mdn", c.prior_on_mdn},
      {"distill_space", c.distill_space == DistillSpace::Metric ? "metric" : "raw"},
      {"log_every", c.log_every},
      {"checkpoint_every", c.checkpoint_every},
      {"data_dir", c.data_dir},
      {"out_dir", c.out_dir},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.lr_start = j.value("lr_start", c.lr_start);
  c.lr_peak = j.value("lr_peak", c.lr_peak);
  c.decay_at = j.value("decay_at", c.decay_at);
  c.decay_rate = j.value("decay_rate", c.decay_rate);
  c.seed = j.value("seed", c.seed);
  c.mode = train_mode_from_string(j.value("mode", to_string(c.mode)));
  c.tms_enabled = j.value("tms_enabled", c.tms_enabled);
  c.ud_enabled = j.value("ud_enabled", c.ud_enabled);
  c.detach_ud_denominator = j.value("detach_ud_denominator", c.detach_ud_denominator);
  c.tms_ema = j.value("tms_ema", c.tms_ema);
  c.prior_on_mdn = j.value("prior_on_mdn", c.prior_on_mdn);
  c.distill_space = distill_space_from_string(
      j.value("distill_space", std::string(c.distill_space == DistillSpace::Metric ? "metric" : "raw")));
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.data_dir = j.value("data_dir", c.data_dir);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.validate();
  return c;
}

double learning_rate(const TrainConfig& c, long step, long steps_per_epoch) {
  SKD_REQUIRE(steps_per_epoch > 0 && step >= 0, "bad step arguments");
  const double total = static_cast<double>(c.epochs) * static_cast<double>(steps_per_epoch);
  const double warm = c.warmup_epochs * static_cast<double>(steps_per_epoch);
  const double s = static_cast<double>(step);
  if (s < warm) return c.lr_start + (c.lr_peak - c.lr_start) * (s / warm);
  double lr = c.lr_peak;
  for (double f : c.decay_at)
    if (s >= std::round(f * total)) lr *= c.decay_rate;
  return lr;
}

TmsFactors tms_factors(double a, double b) {
  SKD_REQUIRE(a >= 0.0 && b >= 0.0 && std::isfinite(a) && std::isfinite(b),
              "projection losses must be finite and >= 0");
  if (a + b == 0.0) return {1.0, 1.0};
  const double s = a + b;
  const double f_dsn = 2.0 * a / s;
  // derive the second from the first so the pair sums to exactly 2
  return {f_dsn, 2.0 - f_dsn};
}

// ---- batch objective ----------------------------------------------------------

namespace {

struct SceneTerms {
  HeadOutput dsn, mdn;
  Var l_2d, dep_sum, proj_dsn_sum, proj_mdn_sum, prior_sum;
  std::size_t rois = 0;
  int valid_tokens = 0;
};

struct SceneGraph {
  std::unique_ptr<Tape> tape;
  std::unique_ptr<BoundParams> bound;
  SceneTerms terms;
};

bool has_dsn(const TrainConfig& c) { return c.mode != TrainMode::MdnOnly; }
bool has_mdn(const TrainConfig& c) { return c.mode != TrainMode::DsnOnly; }

SceneTerms scene_terms(Tape& t, const BoundParams& p, const Scene& scene,
                       const TrainConfig& cfg) {
  const ModelConfig& mc = cfg.model;
  SceneTerms g;
  const std::span<const Box2D> rois = scene.ann_boxes2d;
  g.rois = rois.size();
  Var tokens = encode_global_features(t, p, mc, scene.features);
  g.l_2d = twod_loss(twod_forward(p, mc, tokens), rois, mc);
  Var zero = t.constant(0.0);
  g.dep_sum = g.proj_dsn_sum = g.proj_mdn_sum = g.prior_sum = zero;
  if (has_dsn(cfg)) {
    DsnOutput d = dsn_forward(p, mc, tokens, rois);
    const DepthTargets dt = depth_targets(scene.pseudo_depth, scene.valid_mask, mc);
    g.valid_tokens = dt.valid;
    if (dt.valid > 0) g.dep_sum = sum(focal_depth_rows(d.depth_logits, dt));
    g.dsn = d.boxes;
    if (g.rois) {
      g.proj_dsn_sum = sum(projection_loss_rows(g.dsn.metric, rois, mc));
      g.prior_sum = sum(prior_loss_rows(g.dsn.raw_targets));
    }
  }
  if (has_mdn(cfg)) {
    g.mdn = mdn_forward(p, mc, tokens, rois);
    if (g.rois) {
      g.proj_mdn_sum = sum(projection_loss_rows(g.mdn.metric, rois, mc));
      if (cfg.prior_on_mdn) g.prior_sum = g.prior_sum + sum(prior_loss_rows(g.mdn.raw_targets));
    }
  }
  return g;
}

Var distilled(const HeadOutput& h, const TrainConfig& cfg) {
  return cfg.distill_space == DistillSpace::Metric ? h.metric : h.raw_targets;
}

// Sum over RoIs of the (gated) distillation term; 0 unless both heads exist.
Var distillation_sum(Tape& t, const SceneTerms& g, const TrainConfig& cfg, TmsFactors f) {
  if (cfg.mode != TrainMode::Full || g.rois == 0) return t.constant(0.0);
  Var bd = grad_gate(distilled(g.dsn, cfg), f.dsn), bm = grad_gate(distilled(g.mdn, cfg), f.mdn);
  Var rows = distillation_core_loss(bd, bm);
  if (cfg.ud_enabled) {
    Var u_dsn = grad_gate(g.dsn.uncertainty, f.dsn);
    Var u_mdn = grad_gate(g.mdn.uncertainty, f.mdn);
    rows = uncertainty_distillation_loss(rows, u_dsn, u_mdn, kUdAlpha, cfg.detach_ud_denominator);
  }
  return sum(rows);
}

double prior_head_count(const TrainConfig& cfg) {
  return static_cast<double>(has_dsn(cfg)) + static_cast<double>(has_mdn(cfg) && cfg.prior_on_mdn);
}

Tensor flat_concat(const Tensor& a, const Tensor& b) {
  std::vector<double> v(a.data());
  v.insert(v.end(), b.data().begin(), b.data().end());
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

}  // namespace

BatchGradients batch_gradients(std::span<const Scene* const> scenes, const ModelParams& params,
                               const TrainConfig& cfg, const BatchOptions& opt,
                               TrainState* state) {
  SKD_REQUIRE(!scenes.empty(), "empty batch");
  const std::size_t n = scenes.size();
  std::vector<SceneGraph> graphs(n);
  parallel_for(n, opt.threads, [&](std::size_t i) {
    SceneGraph& g = graphs[i];
    g.tape = std::make_unique<Tape>();
    g.bound = std::make_unique<BoundParams>(*g.tape, params);
    g.terms = scene_terms(*g.tape, *g.bound, *scenes[i], cfg);
  });

  // batch-level normalizers, summed in scene order
  std::size_t R = 0;
  long V = 0;
  double s_2d = 0, s_dep = 0, s_pd = 0, s_pm = 0, s_prior = 0;
  for (const SceneGraph& sg : graphs) {
    const SceneTerms& g = sg.terms;
    R += g.rois;
    V += g.valid_tokens;
    s_2d += g.l_2d.item();
    s_dep += g.dep_sum.item();
    s_pd += g.proj_dsn_sum.item();
    s_pm += g.proj_mdn_sum.item();
    s_prior += g.prior_sum.item();
  }
  const bool both = cfg.mode == TrainMode::Full;
  const double prior_heads = prior_head_count(cfg);
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_r = R ? 1.0 / static_cast<double>(R) : 0.0;
  const double inv_v = V ? 1.0 / static_cast<double>(V) : 0.0;
  const double inv_prior = (R && prior_heads > 0) ? 1.0 / (static_cast<double>(R) * prior_heads) : 0.0;
  if (has_dsn(cfg) && V == 0) std::cerr << "warning: no valid depth tokens in batch\n";

  BatchGradients out;
  LossBreakdown& L = out.losses;
  L.l_2d = s_2d * inv_n;
  L.l_dep = s_dep * inv_v;
  L.l_proj_dsn = s_pd * inv_r;
  L.l_proj_mdn = s_pm * inv_r;
  L.l_prior = s_prior * inv_prior;
  L.l_base = L.l_2d + L.l_proj_dsn + L.l_proj_mdn + L.l_prior;

  TmsFactors f;
  if (both && cfg.tms_enabled) {
    f = tms_factors(L.l_proj_dsn, L.l_proj_mdn);
    if (cfg.tms_ema > 0.0 && state) {
      if (!state->tms_ema_started) {
        state->tms_ema_dsn = f.dsn;
        state->tms_ema_mdn = f.mdn;
        state->tms_ema_started = true;
      } else {
        state->tms_ema_dsn = cfg.tms_ema * state->tms_ema_dsn + (1 - cfg.tms_ema) * f.dsn;
        state->tms_ema_mdn = cfg.tms_ema * state->tms_ema_mdn + (1 - cfg.tms_ema) * f.mdn;
      }
      f = {state->tms_ema_dsn, state->tms_ema_mdn};
    }
  }
  if (opt.force_factors) f = *opt.force_factors;
  out.factors = f;

  // second phase: gated distillation and the per-scene share of the total
  std::vector<double> ud_part(n, 0.0), totals(n, 0.0);
  std::vector<std::vector<Tensor>> scene_grads(n);
  if (both) {
    out.head_grad_dsn.resize(n);
    out.head_grad_mdn.resize(n);
  }
  parallel_for(n, opt.threads, [&](std::size_t i) {
    Tape& t = *graphs[i].tape;
    const SceneTerms& g = graphs[i].terms;
    Var ud = distillation_sum(t, g, cfg, f) * inv_r;
    ud_part[i] = ud.item();
    Var total = ud;
    if (!opt.ud_only)
      total = total + g.l_2d * inv_n + g.dep_sum * inv_v + g.proj_dsn_sum * inv_r +
              g.proj_mdn_sum * inv_r + g.prior_sum * inv_prior;
    totals[i] = total.item();
    if (!std::isfinite(totals[i])) return;  // reported below, in scene order
    Gradients gr = t.backward(total);
    scene_grads[i].reserve(params.size());
    for (Var v : graphs[i].bound->vars()) scene_grads[i].push_back(gr.at(v));
    if (both && g.rois) {
      out.head_grad_dsn[i] = flat_concat(gr.at(distilled(g.dsn, cfg)), gr.at(g.dsn.uncertainty));
      out.head_grad_mdn[i] = flat_concat(gr.at(distilled(g.mdn, cfg)), gr.at(g.mdn.uncertainty));
    }
  });

  double s_ud = 0, s_total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    s_ud += ud_part[i];
    s_total += totals[i];
  }
  L.l_ud = s_ud;
  L.total = opt.ud_only ? s_ud : L.l_ud + L.l_dep + L.l_base;
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(totals[i]) || !std::isfinite(L.total)) {
      std::ostringstream os;
      os << "non-finite loss at scene " << scenes[i]->index << ": l_ud=" << L.l_ud
         << " l_dep=" << L.l_dep << " l_base=" << L.l_base << " l_proj_dsn=" << L.l_proj_dsn
         << " l_proj_mdn=" << L.l_proj_mdn << " l_2d=" << L.l_2d << " l_prior=" << L.l_prior;
      throw NumericError(os.str());
    }

  out.grads.reserve(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor acc = scene_grads[0][k];
    for (std::size_t i = 1; i < n; ++i)
      for (std::size_t e = 0; e < acc.numel(); ++e) acc[e] += scene_grads[i][k][e];
    out.grads.push_back(std::move(acc));
  }
  return out;
}

Var scene_objective(Tape& tape, const BoundParams& p, const Scene& scene,
                    const TrainConfig& cfg, TmsFactors f) {
  const SceneTerms g = scene_terms(tape, p, scene, cfg);
  const double prior_heads = prior_head_count(cfg);
  const double inv_r = g.rois ? 1.0 / static_cast<double>(g.rois) : 0.0;
  const double inv_v = g.valid_tokens ? 1.0 / g.valid_tokens : 0.0;
  const double inv_prior = (g.rois && prior_heads > 0) ? inv_r / prior_heads : 0.0;
  return distillation_sum(tape, g, cfg, f) * inv_r + g.l_2d + g.dep_sum * inv_v +
         g.proj_dsn_sum * inv_r + g.proj_mdn_sum * inv_r + g.prior_sum * inv_prior;
}

ModelGradCheck check_model_gradients(const TrainConfig& cfg, const Scene& scene,
                                     const ModelParams& params, int coords_per_tensor,
                                     std::uint64_t seed) {
  ModelGradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const GraphBuilder build = [&, k](Tape& tape, const std::vector<Var>& leaf) {
      std::vector<Var> vars;
      for (std::size_t j = 0; j < params.size(); ++j)
        vars.push_back(j == k ? leaf[0] : tape.constant(params.tensors()[j]));
      return scene_objective(tape, BoundParams(params, std::move(vars)), scene, cfg);
    };
    GradCheckOptions opt;
    opt.coords_per_tensor = coords_per_tensor;
    opt.seed = mix_seed(seed, k);
    const GradCheckResult r = check_gradients(build, {params.tensors()[k]}, opt);
    out.tensors.push_back({params.names()[k], r.max_rel_error, r.worst});
    out.max_rel_error = std::max(out.max_rel_error, r.max_rel_error);
    out.coords_checked += r.coords_checked;
  }
  return out;
}

StepResult train_step(std::span<const Scene* const> scenes, ModelParams& params,
                      TrainState& state, const TrainConfig& config, long steps_per_epoch,
                      int threads) {
  SKD_REQUIRE(params.all_finite(), "parameters are not finite");
  BatchOptions opt;
  opt.threads = threads;
  BatchGradients bg = batch_gradients(scenes, params, config, opt, &state);
  StepResult r;
  r.losses = bg.losses;
  r.factors = bg.factors;
  r.lr = learning_rate(config, state.step, steps_per_epoch);
  adam_step(params.tensors(), bg.grads, state.adam, r.lr, AdamConfig{}, params.names());
  const double k = state.step == 0 ? 0.0 : 0.98;
  state.ema_total = k * state.ema_total + (1 - k) * r.losses.total;
  state.ema_l_ud = k * state.ema_l_ud + (1 - k) * r.losses.l_ud;
  ++state.step;
  return r;
}

// ---- state files --------------------------------------------------------------

namespace {

void write_tensor_data(std::ostream& o, const Tensor& t) {
  o.write(reinterpret_cast<const char*>(t.data().data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

void read_tensor_data(std::istream& in, Tensor& t, const fs::path& p) {
  if (!in.read(reinterpret_cast<char*>(t.data().data()),
               static_cast<std::streamsize>(t.numel() * sizeof(double))))
    throw IoError("truncated " + p.string());
}

}  // namespace

void TrainState::save(const fs::path& path, const ModelParams& params) const {
  std::ostringstream rng_text;
  rng_text << rng;
  const nlohmann::json head = {
      {"step", step},
      {"epoch", epoch},
      {"adam_step", adam.step},
      {"ema_total", ema_total},
      {"ema_l_ud", ema_l_ud},
      {"tms_ema_dsn", tms_ema_dsn},
      {"tms_ema_mdn", tms_ema_mdn},
      {"tms_ema_started", tms_ema_started},
      {"rng", rng_text.str()},
      {"tensors", params.size()},
  };
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    const std::string h = head.dump();
    const std::uint64_t len = h.size();
    out.write("SKDSTAT1", 8);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      write_tensor_data(out, params.tensors()[i]);
      write_tensor_data(out, adam.m[i]);
      write_tensor_data(out, adam.v[i]);
    }
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

TrainState TrainState::load(const fs::path& path, ModelParams& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, 8) || std::string(magic, 8) != "SKDSTAT1" ||
      !in.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 24))
    throw IoError("not a training state file: " + path.string());
  std::string h(len, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(len))) throw IoError("truncated " + path.string());
  const auto head = nlohmann::json::parse(h);
  if (head.at("tensors").get<std::size_t>() != params.size())
    throw IoError("state does not match the model: " + path.string());
  TrainState s;
  s.step = head.at("step");
  s.epoch = head.at("epoch");
  s.ema_total = head.at("ema_total");
  s.ema_l_ud = head.at("ema_l_ud");
  s.tms_ema_dsn = head.at("tms_ema_dsn");
  s.tms_ema_mdn = head.at("tms_ema_mdn");
  s.tms_ema_started = head.at("tms_ema_started");
  std::istringstream rng_text(head.at("rng").get<std::string>());
  rng_text >> s.rng;
  s.adam = AdamState::like(params.tensors());
  s.adam.step = head.at("adam_step");
  for (std::size_t i = 0; i < params.size(); ++i) {
    read_tensor_data(in, params.tensors()[i], path);
    read_tensor_data(in, s.adam.m[i], path);
    read_tensor_data(in, s.adam.v[i], path);
  }
  return s;
}

// ---- training loop ------------------------------------------------------------

namespace {

const char* kMetricsHeader =
    "step,epoch,lr,l_ud,l_dep,l_base,l_proj_dsn,l_proj_mdn,f_dsn,f_mdn,total,l_2d,l_prior";

std::string metrics_row(long step, int epoch, const StepResult& r) {
  char buf[512];
  const LossBreakdown& L = r.losses;
  std::snprintf(buf, sizeof buf,
                "%ld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step,
                epoch, r.lr, L.l_ud, L.l_dep, L.l_base, L.l_proj_dsn, L.l_proj_mdn, r.factors.dsn,
                r.factors.mdn, L.total, L.l_2d, L.l_prior);
  return buf;
}

// Keeps the header and rows for steps before `upto`.
void trim_metrics(const fs::path& p, long upto) {
  std::ifstream in(p);
  std::vector<std::string> keep;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (!line.empty() && std::stol(line.substr(0, line.find(','))) < upto) keep.push_back(line);
  }
  in.close();
  std::ofstream out(p, std::ios::trunc);
  out << kMetricsHeader << '\n';
  for (const auto& l : keep) out << l << '\n';
}

std::vector<std::size_t> epoch_order(std::mt19937_64& rng, std::uint64_t seed, int epoch,
                                     std::size_t n) {
  rng.seed(mix_seed(seed, 0x65706f6368ULL + static_cast<std::uint64_t>(epoch)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

}  // namespace

TrainResult run_training(const TrainConfig& config_in, const Dataset& train, bool resume,
                         int threads, bool verbose) {
  TrainConfig config = config_in;
  config.model.scene = train.config;
  config.validate();
  SKD_REQUIRE(!train.scenes.empty(), "training split is empty");
  SKD_REQUIRE(!config.out_dir.empty(), "out_dir is required");
  const fs::path out = config.out_dir;
  fs::create_directories(out);
  {
    std::ofstream echo(out / "config.json");
    if (!echo) throw IoError("cannot write " + (out / "config.json").string());
    echo << to_json(config).dump(2) << '\n';
  }

  ModelParams params = ModelParams::init(config.model, config.seed);
  TrainState state;
  state.adam = AdamState::like(params.tensors());
  const fs::path state_path = out / "state.bin";
  const fs::path metrics_path = out / "metrics.csv";
  if (resume && fs::exists(state_path)) {
    state = TrainState::load(state_path, params);
    trim_metrics(metrics_path, state.step);
  } else {
    std::ofstream m(metrics_path, std::ios::trunc);
    m << kMetricsHeader << '\n';
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());

  const std::size_t N = train.scenes.size();
  const long spe = static_cast<long>((N + config.batch_size - 1) / config.batch_size);
  const long total_steps = spe * config.epochs;
  TrainResult result;
  std::vector<std::size_t> order;
  int order_epoch = -1;
  double epoch_total = 0;
  int epoch_batches = 0;
  while (state.step < total_steps) {
    const int epoch = static_cast<int>(state.step / spe);
    const long b = state.step % spe;
    if (epoch != order_epoch) {
      order = epoch_order(state.rng, config.seed, epoch, N);
      order_epoch = epoch;
    }
    state.epoch = epoch;
    std::vector<const Scene*> batch;
    for (std::size_t k = b * config.batch_size; k < std::min<std::size_t>(N, (b + 1) * config.batch_size); ++k)
      batch.push_back(&train.scenes[order[k]]);
    const long step = state.step;
    const StepResult r = train_step(batch, params, state, config, spe, threads);
    if (step % config.log_every == 0) metrics << metrics_row(step, epoch, r) << '\n';
    epoch_total += r.losses.total;
    ++epoch_batches;
    if (state.step % spe == 0) {
      if (verbose)
        std::printf("epoch %d/%d  loss %.5f  lr %.2e  f_dsn %.3f\n", epoch + 1, config.epochs,
                    epoch_total / epoch_batches, r.lr, r.factors.dsn);
      epoch_total = 0;
      epoch_batches = 0;
      if (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
        save_checkpoint(out / ("epoch_" + std::to_string(epoch + 1) + ".ckpt"), config.model,
                        params);
        metrics.flush();
        state.save(state_path, params);
      }
    }
    if (config.stop_after_steps >= 0 && state.step == config.stop_after_steps &&
        state.step < total_steps) {
      metrics.flush();
      state.save(state_path, params);
      result.steps = state.step;
      return result;
    }
  }
  metrics.flush();
  state.save(state_path, params);
  result.final_checkpoint = out / "final.ckpt";
  save_checkpoint(result.final_checkpoint, config.model, params);
  result.finished = true;
  result.steps = state.step;
  return result;
}

TrainResult run_training(const TrainConfig& config, bool resume, int threads, bool verbose) {
  SKD_REQUIRE(!config.data_dir.empty(), "data_dir is required");
  const fs::path data = config.data_dir;
  if (!fs::exists(data / "train" / "meta.json"))
    throw IoError("missing dataset " + (data / "train").string());
  const Dataset train = read_split(data / "train");
  TrainResult r = run_training(config, train, resume, threads, verbose);
  if (r.finished && fs::exists(data / "val" / "meta.json")) {
    const Dataset val = read_split(data / "val");
    InferOptions opt;
    opt.branch = config.mode == TrainMode::DsnOnly ? Branch::Dsn : Branch::Mdn;
    const Checkpoint ck = load_checkpoint(r.final_checkpoint);
    const EvalReport rep = evaluate_dataset(ck, file_checksum(r.final_checkpoint), val, opt, threads);
    write_eval_outputs(fs::path(config.out_dir) / "eval_val", rep);
    if (verbose)
      std::printf("val (%s, %s): AP_3D@0.5 %.4f  AP_BEV@0.5 %.4f\n", rep.branch.c_str(),
                  rep.mode.c_str(), rep.ap_3d_05, rep.ap_bev_05);
  }
  return r;
}

}  // namespace skd
