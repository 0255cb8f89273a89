#include "skd/scenes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "skd/errors.hpp"
#include "skd/hashing.hpp"
#include "skd/kitti.hpp"

namespace skd {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written in host order; add byte swapping for big-endian hosts");

namespace fs = std::filesystem;

void SceneConfig::validate() const {
  SKD_REQUIRE(image_width > 0 && image_height > 0, "image size must be positive");
  SKD_REQUIRE(cam.fx > 0.0 && cam.fy > 0.0, "focal lengths must be positive");
  SKD_REQUIRE(min_objects >= 1 && max_objects >= min_objects, "objects_per_scene must be >= 1");
  SKD_REQUIRE(depth_min > 0.0 && depth_max > depth_min, "depth range must be positive");
  SKD_REQUIRE(prior_h > 0.0 && prior_w > 0.0 && prior_l > 0.0, "dimension priors must be positive");
  SKD_REQUIRE(dim_jitter >= 0.0 && depth_noise_std >= 0.0, "noise stds must be >= 0");
  SKD_REQUIRE(camera_height > 0.0, "camera height must be positive");
}

nlohmann::json to_json(const SceneConfig& c) {
  return {
      {"image_width", c.image_width},
      {"image_height", c.image_height},
      {"fx", c.cam.fx},
      {"fy", c.cam.fy},
      {"cx", c.cam.cx},
      {"cy", c.cam.cy},
      {"min_objects", c.min_objects},
      {"max_objects", c.max_objects},
      {"depth_min", c.depth_min},
      {"depth_max", c.depth_max},
      {"prior_h", c.prior_h},
      {"prior_w", c.prior_w},
      {"prior_l", c.prior_l},
      {"dim_jitter", c.dim_jitter},
      {"depth_noise_std", c.depth_noise_std},
      {"depth_noise_bias", c.depth_noise_bias},
      {"camera_height", c.camera_height},
      {"max_overlap_2d", c.max_overlap_2d},
      {"seed", c.seed},
  };
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.image_width = j.value("image_width", c.image_width);
  c.image_height = j.value("image_height", c.image_height);
  c.cam.fx = j.value("fx", c.cam.fx);
  c.cam.fy = j.value("fy", c.cam.fy);
  c.cam.cx = j.value("cx", c.cam.cx);
  c.cam.cy = j.value("cy", c.cam.cy);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.depth_min = j.value("depth_min", c.depth_min);
  c.depth_max = j.value("depth_max", c.depth_max);
  c.prior_h = j.value("prior_h", c.prior_h);
  c.prior_w = j.value("prior_w", c.prior_w);
  c.prior_l = j.value("prior_l", c.prior_l);
  c.dim_jitter = j.value("dim_jitter", c.dim_jitter);
  c.depth_noise_std = j.value("depth_noise_std", c.depth_noise_std);
  c.depth_noise_bias = j.value("depth_noise_bias", c.depth_noise_bias);
  c.camera_height = j.value("camera_height", c.camera_height);
  c.max_overlap_2d = j.value("max_overlap_2d", c.max_overlap_2d);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::uint64_t split_seed(std::uint64_t seed, const std::string& split) {
  Fnv1a h;
  h.update(split);
  return mix_seed(seed, h.value());
}

namespace {

constexpr double kMarginPx = 2.0;
constexpr int kPlacementAttempts = 200;
constexpr double kMaxGroundRange = 80.0;

bool fits_image(const Box2D& b, const SceneConfig& c) {
  return b.u_min >= kMarginPx && b.v_min >= kMarginPx &&
         b.u_max <= c.image_width - kMarginPx && b.v_max <= c.image_height - kMarginPx;
}

bool all_corners_in_front(const Box3D& b) {
  for (const Vec3& p : box_corners(b))
    if (p[2] <= 0.0) return false;
  return true;
}

// Entry depth (z of the hit point) of the ray through (du, dv, 1), or +inf.
double ray_box_depth(double du, double dv, const Box3D& b) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const Vec3 el{c, 0.0, -s}, ew{s, 0.0, c}, eh{0.0, 1.0, 0.0};
  const Vec3 dir{du, dv, 1.0};
  const Vec3 rel{-b.x, -b.y, -b.z};  // origin minus center
  const double half[3] = {0.5 * b.l, 0.5 * b.w, 0.5 * b.h};
  const Vec3* axes[3] = {&el, &ew, &eh};
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const Vec3& e = *axes[a];
    const double o = rel[0] * e[0] + rel[1] * e[1] + rel[2] * e[2];
    const double d = dir[0] * e[0] + dir[1] * e[1] + dir[2] * e[2];
    if (std::fabs(d) < 1e-15) {
      if (std::fabs(o) > half[a]) return std::numeric_limits<double>::infinity();
      continue;
    }
    double ta = (-half[a] - o) / d, tb = (half[a] - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::numeric_limits<double>::infinity();
  }
  return t0;
}

double object_identity(std::uint64_t seed, std::int64_t index, std::size_t k) {
  const std::uint64_t h = mix_seed(mix_seed(seed, static_cast<std::uint64_t>(index)), k + 17);
  return 0.5 + 0.5 * static_cast<double>(h >> 11) / static_cast<double>(1ULL << 53);
}

struct Placement {
  std::vector<Box3D> boxes;
  std::vector<Box2D> boxes2d;
  bool ok = false;
};

Placement place_objects(const SceneConfig& c, std::mt19937_64& rng) {
  Placement p;
  std::uniform_int_distribution<int> count_dist(c.min_objects, c.max_objects);
  std::uniform_real_distribution<double> depth_dist(c.depth_min, c.depth_max);
  std::uniform_real_distribution<double> u_dist(0.0, c.image_width);
  std::uniform_real_distribution<double> yaw_dist(-std::numbers::pi, std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const int n = count_dist(rng);
  for (int k = 0; k < n; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      Box3D b;
      b.z = depth_dist(rng);
      b.h = c.prior_h * std::exp(c.dim_jitter * jitter(rng));
      b.w = c.prior_w * std::exp(c.dim_jitter * jitter(rng));
      b.l = c.prior_l * std::exp(c.dim_jitter * jitter(rng));
      b.theta = normalize_angle(yaw_dist(rng));
      b.x = (u_dist(rng) - c.cam.cx) * b.z / c.cam.fx;
      b.y = c.camera_height - 0.5 * b.h;
      if (!all_corners_in_front(b)) continue;
      const Box2D b2 = project_box3d_to_box2d(b, c.cam);
      if (!fits_image(b2, c)) continue;
      bool clash = false;
      for (std::size_t j = 0; j < p.boxes.size() && !clash; ++j) {
        clash = bev_intersection_area(b, p.boxes[j]) > 0.0 ||
                iou_2d(b2, p.boxes2d[j]) > c.max_overlap_2d;
      }
      if (clash) continue;
      p.boxes.push_back(b);
      p.boxes2d.push_back(b2);
      placed = true;
    }
    if (!placed) return p;
  }
  p.ok = true;
  return p;
}

}  // namespace

Scene generate_scene(const SceneConfig& c, std::int64_t index) {
  c.validate();
  Scene scene;
  scene.index = index;
  const std::uint64_t base = mix_seed(c.seed, static_cast<std::uint64_t>(index));
  Placement placement;
  for (int regen = 0;; ++regen) {
    std::mt19937_64 rng(mix_seed(base, static_cast<std::uint64_t>(regen)));
    placement = place_objects(c, rng);
    if (placement.ok) {
      scene.regenerations = regen;
      break;
    }
    SKD_REQUIRE(regen < 1000, "scene placement keeps failing; config is infeasible");
  }
  scene.gt_boxes3d = placement.boxes;
  scene.ann_boxes2d = placement.boxes2d;

  const std::size_t H = c.image_height, W = c.image_width;
  scene.features = Tensor(Shape{static_cast<std::size_t>(kFeatureChannels), H * W});
  scene.rendered_depth = Tensor(Shape{H, W});
  scene.pseudo_depth = Tensor(Shape{H, W});
  scene.valid_mask.assign(H * W, 0);

  std::vector<double> ident(scene.gt_boxes3d.size());
  for (std::size_t k = 0; k < ident.size(); ++k) ident[k] = object_identity(c.seed, index, k);

  std::mt19937_64 noise_rng(mix_seed(base, 0xd3b7ULL));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t v = 0; v < H; ++v) {
    for (std::size_t u = 0; u < W; ++u) {
      const double du = (static_cast<double>(u) + 0.5 - c.cam.cx) / c.cam.fx;
      const double dv = (static_cast<double>(v) + 0.5 - c.cam.cy) / c.cam.fy;
      double depth = std::numeric_limits<double>::infinity();
      int hit = -1;
      for (std::size_t k = 0; k < scene.gt_boxes3d.size(); ++k) {
        const double d = ray_box_depth(du, dv, scene.gt_boxes3d[k]);
        if (d < depth) {
          depth = d;
          hit = static_cast<int>(k);
        }
      }
      if (hit < 0 && dv > 0.0) {
        const double g = c.camera_height / dv;
        if (g <= kMaxGroundRange) depth = g;
      }
      // Noise is drawn for every pixel so the stream does not depend on content.
      const double eps = noise(noise_rng);
      const std::size_t px = v * W + u;
      if (!std::isfinite(depth)) continue;
      scene.valid_mask[px] = 1;
      scene.rendered_depth[px] = depth;
      double pd = depth;
      if (c.depth_noise_std > 0.0 || c.depth_noise_bias != 0.0)
        pd = std::max(0.1, depth + c.depth_noise_bias + c.depth_noise_std * eps);
      scene.pseudo_depth[px] = pd;
      scene.features[0 * H * W + px] = hit >= 0 ? 1.0 : 0.0;
      scene.features[1 * H * W + px] = hit >= 0 ? ident[hit] : 0.0;
      scene.features[2 * H * W + px] = c.depth_min / depth;
    }
  }
  return scene;
}

// ---------------------------------------------------------------------------

void write_tensor_file(const fs::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("SKDT", 4);
  const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&rank), sizeof rank);
  for (std::size_t d : t.shape()) {
    const std::uint64_t d64 = d;
    out.write(reinterpret_cast<const char*>(&d64), sizeof d64);
  }
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!out) throw IoError("short write to " + path.string());
}

Tensor read_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SKDT", 4) != 0) throw IoError("bad tensor magic in " + path.string());
  std::uint32_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), sizeof rank);
  if (!in || rank > 8) throw IoError("bad tensor header in " + path.string());
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t d64 = 0;
    in.read(reinterpret_cast<char*>(&d64), sizeof d64);
    d = static_cast<std::size_t>(d64);
  }
  std::vector<double> data(shape_numel(shape));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw IoError("truncated tensor file " + path.string());
  return Tensor(std::move(shape), std::move(data));
}

namespace {

fs::path features_path(const fs::path& dir, int i) {
  return dir / "features" / (std::to_string(i) + ".bin");
}
fs::path depth_path(const fs::path& dir, int i) {
  return dir / "depth" / (std::to_string(i) + ".bin");
}
fs::path labels_path(const fs::path& dir, int i) {
  return dir / "labels" / (std::to_string(i) + ".txt");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

std::string checksum_split_files(const fs::path& dir, int count) {
  Fnv1a h;
  for (int i = 0; i < count; ++i) {
    h.update(slurp(features_path(dir, i)));
    h.update(slurp(depth_path(dir, i)));
    h.update(slurp(labels_path(dir, i)));
  }
  return h.hex();
}

std::string write_split(const fs::path& dir, const SceneConfig& config, const SplitInfo& split) {
  config.validate();
  SKD_REQUIRE(split.count >= 0, "split count must be >= 0");
  fs::create_directories(dir / "features");
  fs::create_directories(dir / "depth");
  fs::create_directories(dir / "labels");
  SceneConfig sc = config;
  sc.seed = split_seed(config.seed, split.name);
  nlohmann::json regen = nlohmann::json::array();
  for (int i = 0; i < split.count; ++i) {
    const Scene s = generate_scene(sc, i);
    write_tensor_file(features_path(dir, i), s.features);
    write_tensor_file(depth_path(dir, i), s.pseudo_depth);
    std::ofstream lab(labels_path(dir, i));
    if (!lab) throw IoError("cannot write " + labels_path(dir, i).string());
    for (std::size_t k = 0; k < s.gt_boxes3d.size(); ++k)
      lab << write_kitti_label(box_to_record(s.gt_boxes3d[k], s.ann_boxes2d[k]),
                               LabelPrecision::Lossless)
          << '\n';
    if (s.regenerations > 0) regen.push_back({{"index", i}, {"regenerations", s.regenerations}});
  }
  const std::string sum = checksum_split_files(dir, split.count);
  nlohmann::json meta{{"split", split.name},
                      {"count", split.count},
                      {"config", to_json(config)},
                      {"checksum", sum},
                      {"regenerated_scenes", regen}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  return sum;
}

Dataset read_split(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw IoError("missing " + meta_path.string());
  const nlohmann::json meta = nlohmann::json::parse(slurp(meta_path));
  Dataset ds;
  ds.config = scene_config_from_json(meta.at("config"));
  ds.split = meta.at("split").get<std::string>();
  const int count = meta.at("count").get<int>();
  ds.checksum = checksum_split_files(dir, count);
  if (ds.checksum != meta.at("checksum").get<std::string>())
    throw IoError("dataset checksum mismatch in " + dir.string());
  const std::size_t H = ds.config.image_height, W = ds.config.image_width;
  for (int i = 0; i < count; ++i) {
    Scene s;
    s.index = i;
    s.features = read_tensor_file(features_path(dir, i));
    s.pseudo_depth = read_tensor_file(depth_path(dir, i));
    if (s.features.shape() != Shape{static_cast<std::size_t>(kFeatureChannels), H * W} ||
        s.pseudo_depth.shape() != Shape{H, W})
      throw IoError("scene " + std::to_string(i) + " has unexpected tensor shapes");
    s.valid_mask.resize(H * W);
    for (std::size_t p = 0; p < H * W; ++p) s.valid_mask[p] = s.pseudo_depth[p] > 0.0;
    std::istringstream lab(slurp(labels_path(dir, i)));
    std::string line;
    while (std::getline(lab, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const KittiLabelRecord r = parse_kitti_label(line);
      s.gt_boxes3d.push_back(record_to_box(r));
      s.ann_boxes2d.push_back(Box2D{r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]});
    }
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

}  // namespace skd
