#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "skd/geometry.hpp"

namespace skd {

// One line of a KITTI object label file. Location is the bottom-face center.
struct KittiLabelRecord {
  std::string type = "Car";
  double truncated = 0.0;
  double occluded = 0.0;
  double alpha = 0.0;
  double bbox[4] = {0, 0, 0, 0};  // left, top, right, bottom
  double h = 0, w = 0, l = 0;
  double x = 0, y = 0, z = 0;
  double rotation_y = 0.0;
  std::optional<double> score;

  bool operator==(const KittiLabelRecord& o) const;
};

enum class LabelPrecision {
  TwoDecimals,  // the usual KITTI text form
  Lossless,     // shortest text that parses back to the same double
};

// Accepts 15 (ground truth) or 16 (detection) whitespace-separated fields.
// Throws ParseError carrying the 1-based column that failed.
KittiLabelRecord parse_kitti_label(std::string_view line);
std::string write_kitti_label(const KittiLabelRecord& r,
                              LabelPrecision precision = LabelPrecision::TwoDecimals);

// Bottom-center <-> geometric-center conversion (y_center = y_bottom - h/2).
Box3D record_to_box(const KittiLabelRecord& r);
KittiLabelRecord box_to_record(const Box3D& b, const Box2D& bbox,
                               std::optional<double> score = std::nullopt);

}  // namespace skd
