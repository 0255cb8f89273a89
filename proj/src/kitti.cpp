#include "skd/kitti.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <vector>

#include "skd/errors.hpp"

namespace skd {

bool KittiLabelRecord::operator==(const KittiLabelRecord& o) const {
  for (int i = 0; i < 4; ++i)
    if (bbox[i] != o.bbox[i]) return false;
  return type == o.type && truncated == o.truncated && occluded == o.occluded &&
         alpha == o.alpha && h == o.h && w == o.w && l == o.l && x == o.x && y == o.y &&
         z == o.z && rotation_y == o.rotation_y && score == o.score;
}

namespace {

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

double parse_number(std::string_view tok, int column) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last)
    throw ParseError("non-numeric field '" + std::string(tok) + "' at column " +
                         std::to_string(column),
                     column);
  return v;
}

void append_number(std::string& out, double v, LabelPrecision p) {
  char buf[64];
  if (p == LabelPrecision::Lossless) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, ptr);
  } else {
    std::snprintf(buf, sizeof buf, "%.2f", v);
    out.append(buf);
  }
}

}  // namespace

KittiLabelRecord parse_kitti_label(std::string_view line) {
  const auto f = split_ws(line);
  if (f.size() != 15 && f.size() != 16) {
    const int col = f.size() < 15 ? static_cast<int>(f.size()) + 1 : 17;
    throw ParseError("expected 15 or 16 fields, got " + std::to_string(f.size()) +
                         " (column " + std::to_string(col) + ")",
                     col);
  }
  KittiLabelRecord r;
  r.type = std::string(f[0]);
  double v[15];
  for (std::size_t i = 1; i < f.size(); ++i) v[i - 1] = parse_number(f[i], static_cast<int>(i) + 1);
  r.truncated = v[0];
  r.occluded = v[1];
  r.alpha = v[2];
  for (int i = 0; i < 4; ++i) r.bbox[i] = v[3 + i];
  r.h = v[7];
  r.w = v[8];
  r.l = v[9];
  r.x = v[10];
  r.y = v[11];
  r.z = v[12];
  r.rotation_y = v[13];
  if (f.size() == 16) r.score = v[14];
  return r;
}

std::string write_kitti_label(const KittiLabelRecord& r, LabelPrecision p) {
  std::string out = r.type;
  auto put = [&](double v) {
    out.push_back(' ');
    append_number(out, v, p);
  };
  put(r.truncated);
  if (p == LabelPrecision::TwoDecimals) {
    out += ' ' + std::to_string(static_cast<long long>(std::lround(r.occluded)));
  } else {
    put(r.occluded);
  }
  put(r.alpha);
  for (double b : r.bbox) put(b);
  put(r.h);
  put(r.w);
  put(r.l);
  put(r.x);
  put(r.y);
  put(r.z);
  put(r.rotation_y);
  if (r.score) put(*r.score);
  return out;
}

Box3D record_to_box(const KittiLabelRecord& r) {
  SKD_REQUIRE(r.h > 0.0 && r.w > 0.0 && r.l > 0.0, "label has nonpositive dimensions");
  return Box3D{r.x, r.y - 0.5 * r.h, r.z, r.h, r.w, r.l, r.rotation_y};
}

KittiLabelRecord box_to_record(const Box3D& b, const Box2D& bbox, std::optional<double> score) {
  SKD_REQUIRE(b.h > 0.0 && b.w > 0.0 && b.l > 0.0, "box has nonpositive dimensions");
  KittiLabelRecord r;
  r.alpha = normalize_angle(b.theta - std::atan2(b.x, b.z));
  r.bbox[0] = bbox.u_min;
  r.bbox[1] = bbox.v_min;
  r.bbox[2] = bbox.u_max;
  r.bbox[3] = bbox.v_max;
  r.h = b.h;
  r.w = b.w;
  r.l = b.l;
  r.x = b.x;
  r.y = b.y + 0.5 * b.h;
  r.z = b.z;
  r.rotation_y = b.theta;
  r.score = score;
  return r;
}

}  // namespace skd
