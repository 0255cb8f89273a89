#include "skd/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "skd/errors.hpp"
#include "skd/hashing.hpp"

namespace skd {

namespace fs = std::filesystem;

void ModelConfig::validate() const {
  scene.validate();
  SKD_REQUIRE(patch > 0 && pool > 0 && width > 0, "model sizes must be positive");
  SKD_REQUIRE(scene.image_width == scene.image_height, "square images only");
  SKD_REQUIRE(scene.image_width % (patch * pool) == 0, "image size must divide patch*pool");
  SKD_REQUIRE(depth_bins >= 2 && roi_size >= 1, "depth_bins >= 2, roi_size >= 1");
  SKD_REQUIRE(head_hidden > 0 && ffn_hidden > 0, "hidden sizes must be positive");
  SKD_REQUIRE(z_scale > 0.0, "z_scale must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"patch", c.patch},           {"width", c.width},
      {"pool", c.pool},             {"depth_bins", c.depth_bins},
      {"roi_size", c.roi_size},     {"head_hidden", c.head_hidden},
      {"ffn_hidden", c.ffn_hidden}, {"z_scale", c.z_scale},
      {"scene", to_json(c.scene)},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.patch = j.value("patch", c.patch);
  c.width = j.value("width", c.width);
  c.pool = j.value("pool", c.pool);
  c.depth_bins = j.value("depth_bins", c.depth_bins);
  c.roi_size = j.value("roi_size", c.roi_size);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  c.z_scale = j.value("z_scale", c.z_scale);
  if (j.contains("scene")) c.scene = scene_config_from_json(j.at("scene"));
  c.validate();
  return c;
}

std::string model_checksum(const ModelConfig& c) {
  Fnv1a h;
  h.update(to_json(c).dump());
  return h.hex();
}

// ---- parameters -------------------------------------------------------------

void ModelParams::add(std::string name, ParamGroup group, Tensor t) {
  SKD_REQUIRE(!index_.count(name), "duplicate parameter " + name);
  index_[name] = tensors_.size();
  names_.push_back(std::move(name));
  groups_.push_back(group);
  tensors_.push_back(std::move(t));
}

std::size_t ModelParams::index_of(const std::string& name) const {
  auto it = index_.find(name);
  SKD_REQUIRE(it != index_.end(), "unknown parameter " + name);
  return it->second;
}

bool ModelParams::all_finite() const {
  return std::all_of(tensors_.begin(), tensors_.end(),
                     [](const Tensor& t) { return t.all_finite(); });
}

namespace {

// Xavier-uniform, scaled.
Tensor glorot(std::mt19937_64& rng, std::size_t in, std::size_t out, double gain = 1.0) {
  const double a = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> U(-a, a);
  Tensor t(Shape{in, out});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = U(rng);
  return t;
}

double inv_softplus(double y) { return std::log(std::expm1(y)); }

}  // namespace

ModelParams ModelParams::init(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(mix_seed(seed, 0x6d6f64656cULL));
  const std::size_t d = c.width, P = c.patch_dim(), K = c.depth_bins, Hh = c.head_hidden,
                    F = c.ffn_hidden, R = c.roi_features(), T = ModelConfig::kBoxTargets + 1;
  ModelParams p;
  auto zeros = [](std::size_t n) { return Tensor(Shape{n}, 0.0); };
  // small positive so blank patches do not sit exactly on the relu kink
  auto hidden_bias = [](std::size_t n) { return Tensor(Shape{n}, 0.01); };

  p.add("enc.w0", ParamGroup::Encoder, glorot(rng, P, d, std::sqrt(2.0)));
  p.add("enc.b0", ParamGroup::Encoder, hidden_bias(d));
  p.add("enc.w1", ParamGroup::Encoder, glorot(rng, d, d, std::sqrt(2.0)));
  p.add("enc.b1", ParamGroup::Encoder, hidden_bias(d));
  p.add("enc.w2", ParamGroup::Encoder, glorot(rng, d, d));
  p.add("enc.b2", ParamGroup::Encoder, zeros(d));

  p.add("dep.w0", ParamGroup::DepthHead, glorot(rng, d, d, std::sqrt(2.0)));
  p.add("dep.b0", ParamGroup::DepthHead, hidden_bias(d));
  p.add("dep.w1", ParamGroup::DepthHead, glorot(rng, d, K));
  p.add("dep.b1", ParamGroup::DepthHead, zeros(K));

  for (const char* blk : {"sa", "ca"})
    for (const char* m : {"wq", "wk", "wv", "wo"})
      p.add(std::string(blk) + "." + m, ParamGroup::Fusion, glorot(rng, d, d));
  p.add("ffn.w0", ParamGroup::Fusion, glorot(rng, d, F, std::sqrt(2.0)));
  p.add("ffn.b0", ParamGroup::Fusion, hidden_bias(F));
  p.add("ffn.w1", ParamGroup::Fusion, glorot(rng, F, d));
  p.add("ffn.b1", ParamGroup::Fusion, zeros(d));

  // Head output biases start at a plausible box: z ~ 15 m, yaw 0, U ~ 0.05.
  Tensor head_bias(Shape{T}, 0.0);
  head_bias[2] = inv_softplus(15.0 / c.z_scale);
  head_bias[7] = 1.0;
  head_bias[8] = inv_softplus(0.05);
  for (auto [pre, group] : {std::pair{"dsn", ParamGroup::DsnHead},
                            std::pair{"mdn", ParamGroup::MdnHead}}) {
    const std::string s = pre;
    p.add(s + ".w0", group, glorot(rng, R, Hh, std::sqrt(2.0)));
    p.add(s + ".b0", group, hidden_bias(Hh));
    p.add(s + ".w1", group, glorot(rng, Hh, T, 0.1));
    p.add(s + ".b1", group, head_bias);
  }

  p.add("det.w0", ParamGroup::TwoDHead, glorot(rng, d, Hh, std::sqrt(2.0)));
  p.add("det.b0", ParamGroup::TwoDHead, hidden_bias(Hh));
  p.add("det.w1", ParamGroup::TwoDHead, glorot(rng, Hh, 5, 0.1));
  p.add("det.b1", ParamGroup::TwoDHead, Tensor(Shape{5}, std::vector<double>{-2.0, 0, 0, 0, 0}));
  return p;
}

BoundParams::BoundParams(Tape& tape, const ModelParams& params) : params_(&params) {
  vars_.reserve(params.size());
  for (const Tensor& t : params.tensors()) vars_.push_back(tape.variable(t));
}

BoundParams::BoundParams(const ModelParams& params, std::vector<Var> vars)
    : params_(&params), vars_(std::move(vars)) {
  SKD_REQUIRE(vars_.size() == params.size(), "one leaf per parameter expected");
}

// ---- encoder ----------------------------------------------------------------

Tensor patchify(const Tensor& features, const ModelConfig& c) {
  const std::size_t W = c.scene.image_width, H = c.scene.image_height;
  SKD_REQUIRE(features.shape() == (Shape{static_cast<std::size_t>(kFeatureChannels), H * W}),
              "features must be " + shape_str(Shape{3, H * W}) + ", got " +
                  shape_str(features.shape()));
  const std::size_t p = c.patch, G = c.patch_grid(), D = c.patch_dim();
  Tensor out(Shape{G * G, D});
  for (std::size_t gy = 0; gy < G; ++gy)
    for (std::size_t gx = 0; gx < G; ++gx) {
      double* row = &out[(gy * G + gx) * D];
      for (std::size_t ch = 0; ch < static_cast<std::size_t>(kFeatureChannels); ++ch)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            row[ch * p * p + dy * p + dx] =
                features[ch * H * W + (gy * p + dy) * W + (gx * p + dx)];
    }
  return out;
}

namespace {

Tensor pool_matrix(const ModelConfig& c) {
  const std::size_t G = c.grid(), Gp = c.patch_grid(), k = c.pool;
  Tensor m(Shape{G * G, Gp * Gp});
  const double wgt = 1.0 / static_cast<double>(k * k);
  for (std::size_t ty = 0; ty < G; ++ty)
    for (std::size_t tx = 0; tx < G; ++tx)
      for (std::size_t dy = 0; dy < k; ++dy)
        for (std::size_t dx = 0; dx < k; ++dx)
          m.at(ty * G + tx, (ty * k + dy) * Gp + (tx * k + dx)) = wgt;
  return m;
}

Var linear(Var x, Var w, Var b) { return matmul(x, w) + b; }

// Single-head scaled dot-product attention; returns (output, attention).
std::pair<Var, Var> attention(const BoundParams& p, const std::string& blk, Var queries,
                              Var keys_values, int d) {
  Var q = matmul(queries, p[blk + ".wq"]);
  Var k = matmul(keys_values, p[blk + ".wk"]);
  Var v = matmul(keys_values, p[blk + ".wv"]);
  Var a = softmax_rows(matmul(q, transpose(k)) * (1.0 / std::sqrt(static_cast<double>(d))));
  return {matmul(matmul(a, v), p[blk + ".wo"]), a};
}

}  // namespace

Var encode_global_features(Tape& tape, const BoundParams& p, const ModelConfig& c,
                           const Tensor& features) {
  Var x = tape.constant(patchify(features, c));
  Var h = relu(linear(x, p["enc.w0"], p["enc.b0"]));
  h = relu(linear(h, p["enc.w1"], p["enc.b1"]));
  h = linear(h, p["enc.w2"], p["enc.b2"]);
  return matmul(tape.constant(pool_matrix(c)), h);
}

// ---- RoI pooling ------------------------------------------------------------

Tensor roi_sampling_matrix(const Box2D& box, const ModelConfig& c) {
  SKD_REQUIRE(box.width() > 0.0 && box.height() > 0.0, "RoI must have positive area");
  const std::size_t S = c.roi_size, G = c.grid();
  const double cell = c.cell(), gmax = static_cast<double>(G - 1);
  Tensor m(Shape{S * S, G * G});
  for (std::size_t sy = 0; sy < S; ++sy)
    for (std::size_t sx = 0; sx < S; ++sx) {
      const double u = box.u_min + (static_cast<double>(sx) + 0.5) / S * box.width();
      const double v = box.v_min + (static_cast<double>(sy) + 0.5) / S * box.height();
      // token (i, j) sits at pixel ((j + .5) cell, (i + .5) cell)
      const double gx = std::clamp(u / cell - 0.5, 0.0, gmax);
      const double gy = std::clamp(v / cell - 0.5, 0.0, gmax);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(gx));
      const std::size_t y0 = static_cast<std::size_t>(std::floor(gy));
      const std::size_t x1 = std::min(x0 + 1, G - 1), y1 = std::min(y0 + 1, G - 1);
      const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
      const std::size_t r = sy * S + sx;
      m.at(r, y0 * G + x0) += (1 - fx) * (1 - fy);
      m.at(r, y0 * G + x1) += fx * (1 - fy);
      m.at(r, y1 * G + x0) += (1 - fx) * fy;
      m.at(r, y1 * G + x1) += fx * fy;
    }
  return m;
}

Var roi_pool(Var tokens, const Box2D& box, const ModelConfig& c) {
  return matmul(tokens.tape()->constant(roi_sampling_matrix(box, c)), tokens);
}

std::vector<double> roi_geometry(const Box2D& box, const ModelConfig& c) {
  const double W = c.scene.image_width, H = c.scene.image_height;
  return {box.center_u() / W - 0.5, box.center_v() / H - 0.5, box.width() / W,
          box.height() / H, std::log(box.width() / box.height())};
}

namespace {

// R x (S*S*d + 5) head input for a set of RoIs.
Var roi_features(Var tokens, std::span<const Box2D> rois, const ModelConfig& c) {
  Tape& tape = *tokens.tape();
  const std::size_t S2 = static_cast<std::size_t>(c.roi_size * c.roi_size), T = c.tokens(),
                    R = rois.size(), d = c.width;
  Tensor samp(Shape{R * S2, T});
  Tensor geo(Shape{R, static_cast<std::size_t>(ModelConfig::kRoiGeometry)});
  for (std::size_t r = 0; r < R; ++r) {
    const Tensor m = roi_sampling_matrix(rois[r], c);
    std::copy(m.data().begin(), m.data().end(), samp.data().begin() + r * S2 * T);
    const auto g = roi_geometry(rois[r], c);
    std::copy(g.begin(), g.end(), geo.data().begin() + r * g.size());
  }
  Var pooled = reshape(matmul(tape.constant(std::move(samp)), tokens), Shape{R, S2 * d});
  return concat({pooled, tape.constant(std::move(geo))}, 1);
}

HeadOutput run_head(const BoundParams& p, const ModelConfig& c, const std::string& pre,
                    Var tokens, std::span<const Box2D> rois) {
  HeadOutput out;
  out.rois.assign(rois.begin(), rois.end());
  if (rois.empty()) return out;
  Var x = roi_features(tokens, rois, c);
  Var h = relu(linear(x, p[pre + ".w0"], p[pre + ".b0"]));
  Var o = linear(h, p[pre + ".w1"], p[pre + ".b1"]);
  out.raw_targets = slice(o, 1, 0, ModelConfig::kBoxTargets);
  out.uncertainty =
      reshape(softplus(slice(o, 1, ModelConfig::kBoxTargets, 1)), Shape{rois.size()});
  out.metric = decode_metric(out.raw_targets, rois, c);
  return out;
}

}  // namespace

// ---- subnetworks ------------------------------------------------------------

DsnOutput dsn_forward(const BoundParams& p, const ModelConfig& c, Var global_tokens,
                      std::span<const Box2D> rois) {
  DsnOutput out;
  out.depth_features = relu(linear(global_tokens, p["dep.w0"], p["dep.b0"]));
  out.depth_logits = linear(out.depth_features, p["dep.w1"], p["dep.b1"]);
  auto [sa, sa_att] = attention(p, "sa", out.depth_features, out.depth_features, c.width);
  Var x = out.depth_features + sa;
  auto [ca, ca_att] = attention(p, "ca", x, global_tokens, c.width);
  Var y = x + ca;
  Var ffn = linear(relu(linear(y, p["ffn.w0"], p["ffn.b0"])), p["ffn.w1"], p["ffn.b1"]);
  out.fused = y + ffn;
  out.self_attention = sa_att;
  out.cross_attention = ca_att;
  out.boxes = run_head(p, c, "dsn", out.fused, rois);
  return out;
}

HeadOutput mdn_forward(const BoundParams& p, const ModelConfig& c, Var global_tokens,
                       std::span<const Box2D> rois) {
  return run_head(p, c, "mdn", global_tokens, rois);
}

Var twod_forward(const BoundParams& p, const ModelConfig& c, Var global_tokens) {
  (void)c;
  Var h = relu(linear(global_tokens, p["det.w0"], p["det.b0"]));
  return linear(h, p["det.w1"], p["det.b1"]);
}

// ---- decoding ---------------------------------------------------------------

Var decode_metric(Var raw, std::span<const Box2D> rois, const ModelConfig& c) {
  Tape& tape = *raw.tape();
  const std::size_t R = rois.size();
  SKD_REQUIRE(raw.shape() == (Shape{R, static_cast<std::size_t>(ModelConfig::kBoxTargets)}),
              "raw targets must be R x 8");
  Tensor cu(Shape{R, 1}), cv(Shape{R, 1}), rw(Shape{R, 1}), rh(Shape{R, 1});
  for (std::size_t r = 0; r < R; ++r) {
    cu[r] = rois[r].center_u();
    cv[r] = rois[r].center_v();
    rw[r] = rois[r].width();
    rh[r] = rois[r].height();
  }
  auto col = [&](std::size_t j) { return slice(raw, 1, j, 1); };
  const CameraIntrinsics& cam = c.scene.cam;
  Var u = tape.constant(cu) + col(0) * tape.constant(rw);
  Var v = tape.constant(cv) + col(1) * tape.constant(rh);
  Var z = softplus(col(2)) * c.z_scale;
  Var x = affine(u, 1.0 / cam.fx, -cam.cx / cam.fx) * z;
  Var y = affine(v, 1.0 / cam.fy, -cam.cy / cam.fy) * z;
  Var h = exp(col(3)) * c.scene.prior_h;
  Var w = exp(col(4)) * c.scene.prior_w;
  Var l = exp(col(5)) * c.scene.prior_l;
  Var s = col(6), co = col(7);
  Var n = sqrt(square(s) + square(co) + 1e-12);
  return concat({x, y, z, h, w, l, s / n, co / n}, 1);
}

Box3D decode_box(std::span<const double> raw, const Box2D& roi, const CameraIntrinsics& cam,
                 const BoxPriors& priors, double z_scale) {
  SKD_REQUIRE(raw.size() >= 8, "decode_box needs 8 raw targets");
  const double u = roi.center_u() + raw[0] * roi.width();
  const double v = roi.center_v() + raw[1] * roi.height();
  Box3D b;
  b.z = z_scale * softplus_scalar(raw[2]);
  b.x = (u - cam.cx) * b.z / cam.fx;
  b.y = (v - cam.cy) * b.z / cam.fy;
  b.h = priors.h * std::exp(raw[3]);
  b.w = priors.w * std::exp(raw[4]);
  b.l = priors.l * std::exp(raw[5]);
  b.theta = std::atan2(raw[6], raw[7]);
  return b;
}

std::vector<Box3D> HeadOutput::boxes() const {
  std::vector<Box3D> out;
  if (rois.empty()) return out;
  const Tensor& m = metric.value();
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const double* q = &m[r * 8];
    out.push_back({q[0], q[1], q[2], q[3], q[4], q[5], std::atan2(q[6], q[7])});
  }
  return out;
}

std::vector<double> HeadOutput::uncertainties() const {
  if (rois.empty()) return {};
  const auto d = uncertainty.value().data();
  return {d.begin(), d.end()};
}

std::vector<Proposal> detect_proposals(const Tensor& logits, const ModelConfig& c,
                                       double threshold, int top_k) {
  const std::size_t G = c.grid();
  SKD_REQUIRE(logits.shape() == (Shape{G * G, 5}), "2D logits must be tokens x 5");
  const double cell = c.cell();
  std::vector<Proposal> out;
  for (std::size_t i = 0; i < G; ++i)
    for (std::size_t j = 0; j < G; ++j) {
      const double* q = &logits[(i * G + j) * 5];
      const double obj = 1.0 / (1.0 + std::exp(-q[0]));
      if (obj < threshold) continue;
      const double cu = (static_cast<double>(j) + 0.5 + q[1]) * cell;
      const double cv = (static_cast<double>(i) + 0.5 + q[2]) * cell;
      const double w = cell * std::exp(std::clamp(q[3], -5.0, 5.0));
      const double h = cell * std::exp(std::clamp(q[4], -5.0, 5.0));
      out.push_back({{cu - w / 2, cv - h / 2, cu + w / 2, cv + h / 2}, obj});
    }
  std::stable_sort(out.begin(), out.end(),
                   [](const Proposal& a, const Proposal& b) { return a.objectness > b.objectness; });
  if (top_k >= 0 && out.size() > static_cast<std::size_t>(top_k)) out.resize(top_k);
  return out;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

template <class T>
void put(std::ostream& o, T v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_str(std::ostream& o, const std::string& s) {
  put<std::uint32_t>(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
template <class T>
T get(std::istream& in, const fs::path& p) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated " + p.string());
  return v;
}
std::string get_str(std::istream& in, const fs::path& p) {
  const auto n = get<std::uint32_t>(in, p);
  if (n > (1u << 24)) throw IoError("corrupt string in " + p.string());
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw IoError("truncated " + p.string());
  return s;
}

constexpr char kMagic[8] = {'S', 'K', 'D', 'C', 'K', 'P', 'T', '1'};

}  // namespace

void save_checkpoint(const fs::path& path, const ModelConfig& config, const ModelParams& params) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_str(out, to_json(config).dump());
  put_str(out, model_checksum(config));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params.tensors()[i];
    put_str(out, params.names()[i]);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(params.groups()[i]));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw IoError("short write to " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("not a checkpoint: " + path.string());
  const std::string cfg_text = get_str(in, path);
  const std::string stored = get_str(in, path);
  Checkpoint ck;
  try {
    ck.config = model_config_from_json(nlohmann::json::parse(cfg_text));
  } catch (const std::exception& e) {
    throw IoError("bad config in " + path.string() + ": " + e.what());
  }
  if (model_checksum(ck.config) != stored)
    throw IoError("config checksum mismatch in " + path.string());
  const ModelParams fresh = ModelParams::init(ck.config, 0);
  const auto n = get<std::uint32_t>(in, path);
  if (n != fresh.size()) throw IoError("parameter count mismatch in " + path.string());
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = get_str(in, path);
    const auto group = static_cast<ParamGroup>(get<std::uint8_t>(in, path));
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 4) throw IoError("corrupt tensor header in " + path.string());
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::uint64_t>(in, path));
    if (name != fresh.names()[i] || shape != fresh.tensors()[i].shape())
      throw IoError("unexpected tensor " + name + " in " + path.string());
    Tensor t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double))))
      throw IoError("truncated " + path.string());
    ck.params.add(std::move(name), group, std::move(t));
  }
  return ck;
}

std::string file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  Fnv1a h;
  h.update(os.str());
  return h.hex();
}

}  // namespace skd
