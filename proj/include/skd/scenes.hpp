#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "skd/geometry.hpp"
#include "skd/tensor.hpp"

namespace skd {

struct SceneConfig {
  int image_width = 64;
  int image_height = 64;
  CameraIntrinsics cam{100.0, 100.0, 32.0, 32.0};
  int min_objects = 1;
  int max_objects = 4;
  double depth_min = 5.0;
  double depth_max = 40.0;
  double prior_h = 1.5;
  double prior_w = 1.6;
  double prior_l = 3.9;
  double dim_jitter = 0.15;       // relative std of each dimension
  double depth_noise_std = 0.5;   // meters, per pixel
  double depth_noise_bias = 0.0;  // meters, constant offset (off by default)
  double camera_height = 1.65;    // ground plane sits at y = camera_height
  double max_overlap_2d = 0.5;    // 2D IoU cap between annotations of one scene
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SceneConfig& c);
SceneConfig scene_config_from_json(const nlohmann::json& j);

constexpr int kFeatureChannels = 3;

struct Scene {
  std::int64_t index = 0;
  Tensor features;                 // [3, H*W]: occupancy, identity, inverse depth
  std::vector<Box3D> gt_boxes3d;   // evaluation only
  std::vector<Box2D> ann_boxes2d;  // training supervision
  Tensor pseudo_depth;             // [H, W], meters, 0 where invalid
  std::vector<std::uint8_t> valid_mask;
  Tensor rendered_depth;           // [H, W], noise-free, 0 where invalid
  int regenerations = 0;           // placement restarts that were needed
};

// Pure function of (config, index).
Scene generate_scene(const SceneConfig& config, std::int64_t index);

// Scene sub-seed for a named split, so train and val never share scenes.
std::uint64_t split_seed(std::uint64_t seed, const std::string& split);

// ---- on-disk datasets ------------------------------------------------------
//
// <dir>/features/{i}.bin, depth/{i}.bin : "SKDT" magic, u32 rank, u64 dims,
//                                          little-endian f64 payload
// <dir>/labels/{i}.txt                  : KITTI, lossless precision
// <dir>/meta.json                       : config echo, count, checksum

void write_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_file(const std::filesystem::path& path);

struct SplitInfo {
  std::string name;
  int count = 0;
};

// Writes one split directory and returns its checksum.
std::string write_split(const std::filesystem::path& dir, const SceneConfig& config,
                        const SplitInfo& split);

struct Dataset {
  SceneConfig config;
  std::string split;
  std::string checksum;
  std::vector<Scene> scenes;
};

// Re-hashes the files and refuses (IoError) if meta.json disagrees.
Dataset read_split(const std::filesystem::path& dir);
std::string checksum_split_files(const std::filesystem::path& dir, int count);

}  // namespace skd
