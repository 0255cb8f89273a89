// Acceptance run: one PASS/FAIL line per criterion with its measured values.
// Exits 0 once every criterion has been evaluated; set SKD_ACCEPT_STRICT=1 to
// turn any FAIL into a nonzero exit.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ap_oracle.hpp"
#include "skd/autodiff.hpp"
#include "skd/eval.hpp"
#include "skd/geometry.hpp"
#include "skd/gradcheck.hpp"
#include "skd/kitti.hpp"
#include "skd/losses.hpp"
#include "skd/model.hpp"
#include "skd/parallel.hpp"
#include "skd/scenes.hpp"
#include "skd/trainer.hpp"

using namespace skd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void verdict(int n, const char* name, bool ok, const std::string& detail) {
  std::printf("criterion %2d %-28s %s  %s\n", n, name, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  failures += !ok;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---- 1 ----

void gradient_integrity() {
  const auto t0 = Clock::now();
  double graphs = 0;
  for (int i = 0; i < 50; ++i) {
    const RandomGraph g = random_composite_graph(7000 + i);
    graphs = std::max(graphs, check_gradients(g.build, g.params).max_rel_error);
  }
  SceneConfig sc;
  sc.seed = 7;
  TrainConfig tc;
  tc.model.scene = sc;
  const ModelParams params = ModelParams::init(tc.model, 7);
  const ModelGradCheck m = check_model_gradients(tc, generate_scene(sc, 0), params, 10, 7);
  const double t = seconds_since(t0);
  verdict(1, "gradient integrity", graphs < 1e-4 && m.max_rel_error < 1e-3 && t < 60.0,
          fmt("graphs %.2e (<1e-4), model %zu tensors %.2e (<1e-3), %.1fs (<60s)", graphs,
              m.tensors.size(), m.max_rel_error, t));
}

// ---- 2 ----

void tms_exactness() {
  Dataset d;
  for (int i = 0; i < 3; ++i) d.scenes.push_back(generate_scene(d.config, i));
  std::vector<const Scene*> batch;
  for (const Scene& s : d.scenes) batch.push_back(&s);
  TrainConfig c;
  const ModelParams params = ModelParams::init(c.model, 3);
  BatchOptions plain, gated;
  plain.ud_only = gated.ud_only = true;
  plain.force_factors = TmsFactors{1.0, 1.0};
  gated.force_factors = tms_factors(3.0, 1.0);
  const BatchGradients a = batch_gradients(batch, params, c, plain);
  const BatchGradients b = batch_gradients(batch, params, c, gated);
  bool exact = b.factors.dsn == 1.5 && b.factors.mdn == 0.5;
  long coords = 0, nonzero = 0;
  for (std::size_t s = 0; s < batch.size(); ++s)
    for (std::size_t k = 0; k < a.head_grad_dsn[s].numel(); ++k) {
      exact &= b.head_grad_dsn[s][k] == 1.5 * a.head_grad_dsn[s][k];
      exact &= b.head_grad_mdn[s][k] == 0.5 * a.head_grad_mdn[s][k];
      nonzero += a.head_grad_dsn[s][k] != 0.0;
      coords += 2;
    }
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  int sums = 0;
  for (int i = 0; i < 1000; ++i) {
    const TmsFactors f = tms_factors(u(rng), u(rng));
    sums += f.dsn + f.mdn == 2.0;
  }
  verdict(2, "TMS exactness", exact && nonzero > 0 && sums == 1000,
          fmt("%ld head-gradient coords bit-exact: %s; f_dsn+f_mdn==2 in %d/1000", coords,
              exact ? "yes" : "no", sums));
}

// ---- 3 ----

void ud_closed_form() {
  auto value = [](double ld, double u) {
    Tape t;
    return uncertainty_distillation_loss(t.constant(Tensor::vector({ld})),
                                         t.constant(Tensor::vector({u})),
                                         t.constant(Tensor::vector({u})))
        .value()[0];
  };
  const double a = value(1.0, 0.2), b = value(0.0, 0.05), c = value(1.0, 0.06);
  bool ok = std::abs(a - 10.01) <= 1e-9 && std::abs(b - 0.0025) <= 1e-9 &&
            std::abs(c - 16.670266666666667) <= 1e-9;
  int zero = 0;
  for (double u : {0.1000001, 0.15, 0.3, 2.0}) {
    Tape t;
    Var ud = t.variable(Tensor::vector({u})), um = t.variable(Tensor::vector({u + 0.01}));
    const Gradients g = t.backward(
        sum(uncertainty_distillation_loss(t.constant(Tensor::vector({0.8})), ud, um)));
    zero += g.at(ud)[0] == 0.0 && g.at(um)[0] == 0.0;
  }
  ok &= zero == 4;
  verdict(3, "L_ud closed form", ok,
          fmt("%.12g %.12g %.12g; dL/dU == 0 above alpha in %d/4", a, b, c, zero));
}

// ---- 4 ----

void smooth_l1_continuity() {
  auto eval = [](double x) {
    Tape t;
    Var a = t.variable(Tensor::vector({x}));
    Var y = sum(smooth_l1_elem(a));
    return std::pair{y.item(), t.backward(y).at(a)[0]};
  };
  bool ok = true;
  double worst = 0;
  for (double s : {1.0, -1.0}) {
    const auto in = eval(s * std::nextafter(1.0, 0.0)), at = eval(s),
               out = eval(s * std::nextafter(1.0, 2.0));
    worst = std::max({worst, std::abs(in.first - out.first), std::abs(in.first - at.first)});
    ok &= std::abs(in.second - s) <= 1e-12 && at.second == s && out.second == s;
  }
  ok &= worst <= 1e-12;
  verdict(4, "SmoothL1 continuity", ok,
          fmt("value jump %.1e (<=1e-12), one-sided slopes 1 vs 1: %s", worst, ok ? "yes" : "no"));
}

// ---- 5 ----

Box3D random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {u(rng) * 10 - 5, u(rng) * 2,          6 + 30 * u(rng), 1.2 + u(rng),
          1.3 + u(rng),     2.5 + 2.5 * u(rng), u(rng) * 6.2 - 3.1};
}

double monte_carlo_bev_iou(const Box3D& a, const Box3D& b, int samples, std::mt19937_64& rng) {
  const auto fa = bev_footprint(a), fb = bev_footprint(b);
  double lo_x = 1e18, hi_x = -1e18, lo_z = 1e18, hi_z = -1e18;
  for (const auto* f : {&fa, &fb})
    for (const Vec2& p : *f) {
      lo_x = std::min(lo_x, p.x);
      hi_x = std::max(hi_x, p.x);
      lo_z = std::min(lo_z, p.y);
      hi_z = std::max(hi_z, p.y);
    }
  // point in convex CCW quad: left of every edge
  auto inside = [](const std::array<Vec2, 4>& q, double x, double z) {
    for (int k = 0; k < 4; ++k) {
      const Vec2 &p = q[k], &n = q[(k + 1) % 4];
      if ((n.x - p.x) * (z - p.y) - (n.y - p.y) * (x - p.x) < 0) return false;
    }
    return true;
  };
  std::uniform_real_distribution<double> ux(lo_x, hi_x), uz(lo_z, hi_z);
  long both = 0, any = 0;
  for (int i = 0; i < samples; ++i) {
    const double x = ux(rng), z = uz(rng);
    const bool ia = inside(fa, x, z), ib = inside(fb, x, z);
    both += ia && ib;
    any += ia || ib;
  }
  return any ? static_cast<double>(both) / static_cast<double>(any) : 0.0;
}

void geometry() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const CameraIntrinsics cam;
  double scale_err = 0;
  for (int i = 0; i < 1000; ++i) {
    const Box3D b = random_box(rng);
    const double k = 0.25 + 3.0 * u(rng);
    const Box3D s{b.x * k, b.y * k, b.z * k, b.h * k, b.w * k, b.l * k, b.theta};
    const Box2D p = project_box3d_to_box2d(b, cam), q = project_box3d_to_box2d(s, cam);
    scale_err = std::max({scale_err, std::abs(p.u_min - q.u_min), std::abs(p.v_min - q.v_min),
                          std::abs(p.u_max - q.u_max), std::abs(p.v_max - q.v_max)});
  }
  double mc_err = 0;
  int overlapping = 0;
  for (int i = 0; i < 100; ++i) {
    const Box3D a = random_box(rng);
    Box3D b = random_box(rng);
    b.x = a.x + (u(rng) - 0.5) * 3.0;
    b.z = a.z + (u(rng) - 0.5) * 3.0;
    const double exact = bev_iou(a, b);
    overlapping += exact > 0;
    mc_err = std::max(mc_err, std::abs(exact - monte_carlo_bev_iou(a, b, 1000000, rng)));
  }
  const Box3D sq{0, 0, 10, 1, 1, 1, 0};
  Box3D shifted = sq;
  shifted.x += 0.5;
  const double same = bev_iou(sq, sq), third = bev_iou(sq, shifted);
  const bool ok = scale_err <= 1e-9 && mc_err <= 2e-2 && std::abs(same - 1.0) <= 1e-9 &&
                  std::abs(third - 1.0 / 3.0) <= 1e-9;
  verdict(5, "geometry", ok,
          fmt("scale %.1e (<=1e-9), MC max |diff| %.4f over 100 pairs (%d overlapping, <=2e-2), "
              "identical %.12f, offset squares %.12f",
              scale_err, mc_err, overlapping, same, third));
}

// ---- 6 ----

void ap_oracle() {
  std::mt19937_64 rng(606);
  int equal = 0;
  for (int i = 0; i < 500; ++i) {
    const auto in = testing::random_ap_instance(rng);
    equal += ap_r40(in.dets, in.num_gt).ap == testing::brute_force_ap_r40(in.dets, in.num_gt);
  }
  std::vector<ScoredFlag> perfect;
  for (int i = 0; i < 10; ++i) perfect.push_back({1.0 - 0.05 * i, true});
  const double p = ap_r40(perfect, 10).ap, e = ap_r40({}, 10).ap;
  verdict(6, "AP oracle equivalence", equal == 500 && p == 1.0 && e == 0.0,
          fmt("%d/500 exact, perfect %.3f, empty %.3f", equal, p, e));
}

// ---- 7, 8 ----

struct Variant {
  const char* name;
  TrainMode mode;
  bool ud, tms;
};

const std::vector<Variant> kVariants = {
    {"mdn-only", TrainMode::MdnOnly, true, true},
    {"dsn-only", TrainMode::DsnOnly, true, true},
    {"full", TrainMode::Full, true, true},
    {"baseline", TrainMode::Full, false, false},
    {"baseline+ud", TrainMode::Full, true, false},
    {"baseline+tms", TrainMode::Full, false, true},
};

fs::path make_data(const fs::path& root, std::uint64_t seed) {
  const fs::path dir = root / ("data_" + std::to_string(seed));
  SceneConfig sc;
  sc.seed = seed;
  write_split(dir / "train", sc, {"train", 200});
  write_split(dir / "val", sc, {"val", 50});
  return dir;
}

struct RunAp {
  double ap_3d = 0, ap_bev = 0;
};

RunAp train_and_eval(const fs::path& data, const fs::path& out, const Variant& v,
                     std::uint64_t seed, int threads) {
  TrainConfig c;
  c.seed = seed;
  c.mode = v.mode;
  c.ud_enabled = v.ud;
  c.tms_enabled = v.tms;
  c.data_dir = data.string();
  c.out_dir = out.string();
  run_training(c, false, threads, false);
  const auto rep = nlohmann::json::parse(slurp(out / "eval_val" / "report.json"));
  return {rep.at("ap_3d_05").get<double>(), rep.at("ap_bev_05").get<double>()};
}

void ablations(const fs::path& root, int threads) {
  const int seeds = 3;
  std::map<std::string, double> mean;
  std::vector<double> seed_time(seeds, 0.0);
  for (int s = 0; s < seeds; ++s) {
    const fs::path data = make_data(root, static_cast<std::uint64_t>(s));
    for (const Variant& v : kVariants) {
      const auto t0 = Clock::now();
      const RunAp ap = train_and_eval(data, root / fmt("run_%d_%s", s, v.name), v,
                                       static_cast<std::uint64_t>(s), threads);
      const double dt = seconds_since(t0);
      if (std::string(v.name) == "mdn-only" || std::string(v.name) == "dsn-only" ||
          std::string(v.name) == "full")
        seed_time[s] += dt;
      mean[v.name] += ap.ap_3d / seeds;
      std::printf("  seed %d %-13s AP_3D@0.5 %.4f  AP_BEV@0.5 %.4f  (%.0fs)\n", s, v.name, ap.ap_3d,
                  ap.ap_bev, dt);
      std::fflush(stdout);
    }
  }
  const double worst_time = *std::max_element(seed_time.begin(), seed_time.end());
  const double mdn = mean["mdn-only"], dsn = mean["dsn-only"], full = mean["full"];
  verdict(7, "table 4 directional", mdn <= 0.05 && dsn > 0.0 && full - dsn >= 0.05 &&
                                         full >= 0.50 && worst_time <= 600.0,
          fmt("mean AP_3D@0.5 mdn-only %.4f (<=0.05), dsn-only %.4f (>0), full %.4f "
              "(>=dsn+0.05, >=0.50); slowest seed %.0fs (<=600s)",
              mdn, dsn, full, worst_time));
  const double base = mean["baseline"], ud = mean["baseline+ud"], tms = mean["baseline+tms"];
  const double pt = 0.01;
  verdict(8, "table 5 directional",
          ud - base >= pt && tms - base >= pt && full - ud >= pt && full - tms >= pt,
          fmt("mean AP_3D@0.5 baseline %.4f, +ud %.4f, +tms %.4f, full %.4f (gaps >= 0.01)", base,
              ud, tms, full));
}

// ---- 9 ----

void determinism(const fs::path& root, int threads) {
  const fs::path data = root / "det_data";
  SceneConfig sc;
  sc.seed = 42;
  write_split(data / "train", sc, {"train", 24});
  write_split(data / "val", sc, {"val", 8});
  TrainConfig c;
  c.epochs = 4;
  c.batch_size = 4;
  c.warmup_epochs = 1;
  c.seed = 42;
  c.data_dir = data.string();
  auto run = [&](const std::string& name, int stop, bool resume, int th) {
    TrainConfig k = c;
    k.out_dir = (root / name).string();
    k.stop_after_steps = stop;
    return run_training(k, resume, th, false);
  };
  run("det_a", -1, false, 1);
  const int many = std::max(threads, 3);
  run("det_b", -1, false, many);
  run("det_r", 10, false, 1);
  run("det_r", -1, true, many);
  auto same = [&](const std::string& x, const std::string& y, const std::string& file) {
    const std::string a = slurp(root / x / file);
    return !a.empty() && a == slurp(root / y / file);
  };
  bool ok = true;
  for (const char* f : {"final.ckpt", "metrics.csv", "eval_val/report.json"})
    ok &= same("det_a", "det_b", f) && same("det_a", "det_r", f);
  for (int i = 0; i < 8; ++i) {
    const std::string f = "eval_val/detections/" + std::to_string(i) + ".txt";
    ok &= slurp(root / "det_a" / f) == slurp(root / "det_b" / f);
    ok &= slurp(root / "det_a" / f) == slurp(root / "det_r" / f);
  }
  verdict(9, "determinism", ok,
          fmt("checkpoint, metrics, report, detections identical across reruns (%d threads) and "
              "resume at step 10: %s",
              many, ok ? "yes" : "no"));
}

// ---- 10 ----

void kitti_roundtrip() {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int exact = 0;
  for (int i = 0; i < 1000; ++i) {
    KittiLabelRecord r;
    r.type = i % 3 ? "Car" : "Pedestrian";
    r.truncated = std::abs(u(rng));
    r.occluded = static_cast<double>(i % 4);
    r.alpha = 3.14 * u(rng);
    for (double& b : r.bbox) b = 600 * std::abs(u(rng)) * std::pow(10.0, 3 * u(rng));
    r.h = 2 + u(rng);
    r.w = 2 + u(rng);
    r.l = 4 + u(rng);
    r.x = 20 * u(rng);
    r.y = 1.6 + u(rng) * 1e-7;
    r.z = 30 + 25 * u(rng);
    r.rotation_y = 3.14159 * u(rng);
    if (i % 2) r.score = std::abs(u(rng)) * std::pow(10.0, -6 * std::abs(u(rng)));
    const std::string first = write_kitti_label(r, LabelPrecision::Lossless);
    const KittiLabelRecord back = parse_kitti_label(first);
    exact += back == r && write_kitti_label(back, LabelPrecision::Lossless) == first;
  }
  verdict(10, "KITTI label roundtrip", exact == 1000, fmt("%d/1000 bit-exact", exact));
}

}  // namespace

int main(int argc, char** argv) {
  // --skip-training leaves criteria 7 and 8 out (quick local runs)
  bool skip_training = false;
  for (int i = 1; i < argc; ++i)
    if (std::string(argv[i]) == "--skip-training") skip_training = true;
  const int threads = thread_budget();
  const fs::path root = fs::temp_directory_path() / "skd_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto t0 = Clock::now();
  try {
    gradient_integrity();
    tms_exactness();
    ud_closed_form();
    smooth_l1_continuity();
    geometry();
    ap_oracle();
    if (skip_training) {
      std::printf("criterion  7 table 4 directional        SKIP\n");
      std::printf("criterion  8 table 5 directional        SKIP\n");
    } else {
      ablations(root, threads);
    }
    determinism(root, threads);
    kitti_roundtrip();
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  fs::remove_all(root);
  std::printf("%d criteria failed, %.0fs total\n", failures, seconds_since(t0));
  const char* strict = std::getenv("SKD_ACCEPT_STRICT");
  return strict && std::string(strict) == "1" && failures ? 1 : 0;
}
