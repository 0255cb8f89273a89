// skd: data generation, training, evaluation and checks from one binary.
//
// Exit codes: 0 ok, 1 missing/unreadable files, 2 usage, 3 contract
// violation, 4 numeric failure or failed check.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "skd/errors.hpp"
#include "skd/eval.hpp"
#include "skd/gradcheck.hpp"
#include "skd/parallel.hpp"
#include "skd/scenes.hpp"
#include "skd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitMissing = 1;
constexpr int kExitUsage = 2;
constexpr int kExitContract = 3;
constexpr int kExitNumeric = 4;

json read_json_file(const std::string& path) {
  if (!fs::exists(path)) throw skd::IoError("missing file " + path);
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw skd::ContractViolation("cannot parse " + path + ": " + e.what());
  }
}

std::vector<skd::SplitInfo> parse_splits(const std::string& text) {
  std::vector<skd::SplitInfo> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    SKD_REQUIRE(colon != std::string::npos && colon > 0, "split must be name:count, got " + item);
    int count = 0;
    try {
      count = std::stoi(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw skd::ContractViolation("bad split count in " + item);
    }
    SKD_REQUIRE(count >= 0, "split count must be >= 0");
    out.push_back({item.substr(0, colon), count});
  }
  SKD_REQUIRE(!out.empty(), "no splits given");
  return out;
}

// ---- gen-data -----------------------------------------------------------------

struct GenArgs {
  std::string config, out, splits = "train:200,val:50";
};

int run_gen(const GenArgs& a) {
  skd::SceneConfig sc;
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    sc = skd::scene_config_from_json(j.contains("scene") ? j.at("scene") : j);
  }
  for (const auto& s : parse_splits(a.splits)) {
    const std::string sum = skd::write_split(fs::path(a.out) / s.name, sc, s);
    std::printf("%s: %d scenes, checksum %s\n", s.name.c_str(), s.count, sum.c_str());
  }
  return 0;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  bool no_tms = false, no_ud = false, mdn_only = false, dsn_only = false;
  bool detach = false, prior_on_mdn = false, resume = false, quiet = false;
  std::optional<int> epochs, batch_size, stop_after;
  std::optional<std::uint64_t> seed;
  std::optional<double> tms_ema;
  std::string distill_space;
};

int run_train(const TrainArgs& a) {
  skd::TrainConfig c;
  if (!a.config.empty()) {
    json j = read_json_file(a.config);
    c = skd::train_config_from_json(j.contains("train") ? j.at("train") : j);
  }
  SKD_REQUIRE(!(a.mdn_only && a.dsn_only), "--mdn-only and --dsn-only are exclusive");
  if (a.mdn_only) c.mode = skd::TrainMode::MdnOnly;
  if (a.dsn_only) c.mode = skd::TrainMode::DsnOnly;
  if (a.no_tms) c.tms_enabled = false;
  if (a.no_ud) c.ud_enabled = false;
  if (a.detach) c.detach_ud_denominator = true;
  if (a.prior_on_mdn) c.prior_on_mdn = true;
  if (a.epochs) c.epochs = *a.epochs;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.seed) c.seed = *a.seed;
  if (a.tms_ema) c.tms_ema = *a.tms_ema;
  if (a.stop_after) c.stop_after_steps = *a.stop_after;
  if (!a.distill_space.empty()) c.distill_space = skd::distill_space_from_string(a.distill_space);
  c.data_dir = a.data;
  c.out_dir = a.out;
  c.validate();
  const auto r = skd::run_training(c, a.resume, skd::thread_budget(), !a.quiet);
  if (r.finished)
    std::printf("trained %ld steps -> %s\n", r.steps, r.final_checkpoint.string().c_str());
  else
    std::printf("stopped after %ld steps; resume with --resume\n", r.steps);
  return 0;
}

// ---- eval / infer -------------------------------------------------------------

skd::Checkpoint open_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw skd::IoError("missing file " + path);
  return skd::load_checkpoint(path);
}

skd::Dataset open_split(const std::string& data, const std::string& split) {
  const fs::path dir = fs::path(data) / split;
  if (!fs::exists(dir / "meta.json")) throw skd::IoError("missing dataset " + dir.string());
  return skd::read_split(dir);
}

struct EvalArgs {
  std::string checkpoint, data, split = "val", mode = "gt-proposals", branch = "mdn", out;
  double threshold = 0.5;
  int top_k = 8;
};

skd::InferOptions infer_options(const EvalArgs& a) {
  skd::InferOptions o;
  o.mode = skd::proposal_mode_from_string(a.mode);
  o.branch = skd::branch_from_string(a.branch);
  o.objectness_threshold = a.threshold;
  o.top_k = a.top_k;
  return o;
}

int run_eval(const EvalArgs& a) {
  const skd::InferOptions opt = infer_options(a);
  const auto ck = open_checkpoint(a.checkpoint);
  const auto data = open_split(a.data, a.split);
  const auto rep = skd::evaluate_dataset(ck, skd::file_checksum(a.checkpoint), data, opt,
                                         skd::thread_budget());
  const fs::path out =
      a.out.empty() ? fs::path(a.checkpoint).parent_path() / ("eval_" + a.split) : fs::path(a.out);
  skd::write_eval_outputs(out, rep);
  std::printf("%s %s %s: AP_BEV@0.5 %.4f AP_3D@0.5 %.4f AP_BEV@0.7 %.4f AP_3D@0.7 %.4f (%d gts)\n",
              rep.split.c_str(), rep.mode.c_str(), rep.branch.c_str(), rep.ap_bev_05,
              rep.ap_3d_05, rep.ap_bev_07, rep.ap_3d_07, rep.num_gts);
  std::printf("report: %s\n", (out / "report.json").string().c_str());
  return 0;
}

struct InferArgs : EvalArgs {
  int scene = 0;
};

int run_infer(const InferArgs& a) {
  const skd::InferOptions opt = infer_options(a);
  const auto ck = open_checkpoint(a.checkpoint);
  const auto data = open_split(a.data, a.split);
  SKD_REQUIRE(a.scene >= 0 && a.scene < static_cast<int>(data.scenes.size()),
              "scene index out of range");
  const auto dets = skd::infer_scene(ck.config, ck.params, data.scenes[a.scene], opt);
  const fs::path out = a.out.empty() ? fs::path(std::to_string(a.scene) + ".txt") : fs::path(a.out);
  std::ofstream f(out);
  if (!f) throw skd::IoError("cannot write " + out.string());
  for (const auto& d : dets) {
    const auto& b = d.box3d;
    std::printf("x %.3f y %.3f z %.3f  h %.3f w %.3f l %.3f  yaw %.3f  score %.4f\n", b.x, b.y,
                b.z, b.h, b.w, b.l, b.theta, d.score);
    f << skd::kitti_detection_line(d) << '\n';
  }
  std::printf("%zu detections -> %s\n", dets.size(), out.string().c_str());
  return 0;
}

// ---- grad-check ---------------------------------------------------------------

struct GradArgs {
  int graphs = 50, coords = 10;
  long long seed = 7;
};

int run_grad_check(const GradArgs& a) {
  double worst_graph = 0;
  for (int i = 0; i < a.graphs; ++i) {
    const auto g = skd::random_composite_graph(static_cast<std::uint64_t>(a.seed) * 1000 + i);
    worst_graph = std::max(worst_graph, skd::check_gradients(g.build, g.params).max_rel_error);
  }
  std::printf("composite graphs: %d, max rel error %.3e (limit 1e-4)\n", a.graphs, worst_graph);

  skd::SceneConfig sc;
  sc.seed = static_cast<std::uint64_t>(a.seed);
  const skd::Scene scene = skd::generate_scene(sc, 0);
  skd::TrainConfig tc;
  tc.model.scene = sc;
  const auto params = skd::ModelParams::init(tc.model, static_cast<std::uint64_t>(a.seed));
  const auto m = skd::check_model_gradients(tc, scene, params, a.coords, a.seed);
  for (const auto& t : m.tensors)
    if (t.max_rel_error >= 1e-3) std::printf("  %s: %.3e %s\n", t.name.c_str(), t.max_rel_error, t.worst.c_str());
  std::printf("model tensors: %zu, %d coords, max rel error %.3e (limit 1e-3)\n",
              m.tensors.size(), m.coords_checked, m.max_rel_error);
  const bool ok = worst_graph < 1e-4 && m.max_rel_error < 1e-3;
  std::printf("%s\n", ok ? "grad-check passed" : "grad-check FAILED");
  return ok ? 0 : kExitNumeric;
}

// ---- export-metrics -----------------------------------------------------------

int run_export(const std::string& run, const std::string& format) {
  const fs::path p = fs::path(run) / "metrics.csv";
  if (!fs::exists(p)) throw skd::IoError("missing file " + p.string());
  std::ifstream in(p);
  if (format == "csv") {
    std::cout << in.rdbuf();
    return 0;
  }
  std::string line;
  std::getline(in, line);
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  json rows = json::array();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    json row = json::object();
    for (std::size_t k = 0; k < cols.size() && std::getline(ss, cell, ','); ++k) {
      if (cols[k] == "step" || cols[k] == "epoch")
        row[cols[k]] = std::stoll(cell);
      else
        row[cols[k]] = std::stod(cell);
    }
    rows.push_back(row);
  }
  std::cout << rows.dump(1) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skd: self-teaching monocular 3D detection on synthetic scenes"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate dataset splits");
  g->add_option("--config", gen.config, "scene config JSON");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--splits", gen.splits, "name:count[,name:count...]");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--config", tr.config, "train config JSON");
  t->add_option("--data", tr.data, "dataset directory (train/, val/)")->required();
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_flag("--no-tms", tr.no_tms, "disable transfer modulation");
  t->add_flag("--no-ud", tr.no_ud, "plain distillation loss instead of the uncertainty-aware one");
  t->add_flag("--mdn-only", tr.mdn_only, "train the monocular network alone");
  t->add_flag("--dsn-only", tr.dsn_only, "train the depth-guided network alone");
  t->add_flag("--detach-ud-denominator", tr.detach, "no gradient through min(U, alpha) in the divisor");
  t->add_flag("--prior-on-mdn", tr.prior_on_mdn, "apply the dimension prior to the MDN too");
  t->add_flag("--resume", tr.resume, "continue from RUN/state.bin");
  t->add_flag("--quiet", tr.quiet, "no per-epoch output");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--seed", tr.seed);
  t->add_option("--tms-ema", tr.tms_ema, "EMA decay for the modulation factors (0 = off)");
  t->add_option("--stop-after-steps", tr.stop_after, "save state and stop early");
  t->add_option("--distill-space", tr.distill_space, "compare decoded boxes or raw targets")
      ->check(CLI::IsMember({"metric", "raw"}));

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--split", ev.split);
  e->add_option("--mode", ev.mode)->check(CLI::IsMember({"gt-proposals", "detected-proposals"}));
  e->add_option("--branch", ev.branch)->check(CLI::IsMember({"mdn", "dsn"}));
  e->add_option("--out", ev.out, "output directory (default: next to the checkpoint)");
  e->add_option("--threshold", ev.threshold, "objectness threshold for detected proposals");
  e->add_option("--top-k", ev.top_k);

  InferArgs in;
  auto* f = app.add_subcommand("infer", "predict boxes for one scene");
  f->add_option("--checkpoint", in.checkpoint)->required();
  f->add_option("--data", in.data)->required();
  f->add_option("--split", in.split);
  f->add_option("--scene", in.scene)->required();
  f->add_option("--mode", in.mode)->check(CLI::IsMember({"gt-proposals", "detected-proposals"}));
  f->add_option("--branch", in.branch)->check(CLI::IsMember({"mdn", "dsn"}));
  f->add_option("--out", in.out, "KITTI detection file (default: <scene>.txt)");
  f->add_option("--threshold", in.threshold);
  f->add_option("--top-k", in.top_k);

  GradArgs gc;
  auto* c = app.add_subcommand("grad-check", "finite-difference gradient suite");
  c->add_option("--graphs", gc.graphs);
  c->add_option("--coords", gc.coords);
  c->add_option("--seed", gc.seed);

  std::string run, format = "csv";
  auto* x = app.add_subcommand("export-metrics", "re-emit logged training metrics");
  x->add_option("--run", run)->required();
  x->add_option("--format", format)->check(CLI::IsMember({"csv", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  }

  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*f) return run_infer(in);
    if (*c) return run_grad_check(gc);
    if (*x) return run_export(run, format);
  } catch (const skd::IoError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitMissing;
  } catch (const skd::ParseError& err) {
    std::cerr << "error: unreadable label file: " << err.what() << '\n';
    return kExitMissing;
  } catch (const skd::ContractViolation& err) {
    std::cerr << "contract violation: " << err.what() << '\n';
    return kExitContract;
  } catch (const skd::NumericError& err) {
    std::cerr << "numeric error: " << err.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitMissing;
  }
  return kExitUsage;
}
