#include "sizefit/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "sizefit/errors.hpp"
#include "sizefit/image_io.hpp"

namespace sizefit::synth {

namespace fs = std::filesystem;
using geometry::Joint;
using geometry::Point2;

namespace {

constexpr double kArmpitDepth = 12.0;    // shoulder line to armpit line, px
constexpr double kCollarHeight = 2.0;
constexpr double kTorsoZoneHalf = 30.0;  // half width of the torso/leg label boxes
constexpr double kLegGap = 1.5;

// Stroke along a polyline between arclengths [from, to]. Ends are flat;
// interior vertices get round joins so the stroke has no wedge gaps.
struct Stroke {
  std::array<Point2, 4> path;
  double from = 0.0;
  double to = 0.0;
  double radius = 0.0;
  bool round_end = false;
};

double seg_length(Point2 a, Point2 b) { return std::hypot(b.x - a.x, b.y - a.y); }

// Index of the segment whose stretch of the stroke contains q, or -1.
int stroke_segment(const Stroke& s, Point2 q) {
  if (s.to <= s.from) return -1;
  double start = 0.0;
  const double r2 = s.radius * s.radius;
  for (int i = 0; i < 3; ++i) {
    const Point2 a = s.path[i], b = s.path[i + 1];
    const double len = seg_length(a, b);
    const double end = start + len;
    const double lo = std::max(s.from, start), hi = std::min(s.to, end);
    if (hi > lo && len > 0) {
      const double ux = (b.x - a.x) / len, uy = (b.y - a.y) / len;
      const double t = (q.x - a.x) * ux + (q.y - a.y) * uy + start;
      const double perp = -(q.x - a.x) * uy + (q.y - a.y) * ux;
      if (t >= lo && t <= hi && std::abs(perp) <= s.radius) return i;
    }
    // Round join at the far vertex when the stroke continues past it. Only
    // the wedge between the two segment ends is filled; a full disk would
    // cover the first radius of the next segment and stall area growth there.
    if (i < 2 && s.to > end && s.from < end && len > 0) {
      const Point2 c = s.path[i + 2];
      const double next = seg_length(b, c);
      const double dx = q.x - b.x, dy = q.y - b.y;
      const bool past_prev = dx * (b.x - a.x) + dy * (b.y - a.y) >= 0;
      const bool before_next = next <= 0 || dx * (c.x - b.x) + dy * (c.y - b.y) <= 0;
      if (past_prev && before_next && dx * dx + dy * dy <= r2) return i;
    }
    start = end;
  }
  if (s.round_end) {
    // Cap at the position where the stroke stops.
    double acc = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double len = seg_length(s.path[i], s.path[i + 1]);
      if (s.to <= acc + len || i == 2) {
        const double f = len > 0 ? std::clamp((s.to - acc) / len, 0.0, 1.0) : 0.0;
        const Point2 e{s.path[i].x + f * (s.path[i + 1].x - s.path[i].x),
                       s.path[i].y + f * (s.path[i + 1].y - s.path[i].y)};
        const double dx = q.x - e.x, dy = q.y - e.y;
        if (dx * dx + dy * dy <= r2) return i;
        break;
      }
      acc += len;
    }
  }
  return -1;
}

double path_length(const std::array<Point2, 4>& p) {
  return seg_length(p[0], p[1]) + seg_length(p[1], p[2]) + seg_length(p[2], p[3]);
}

double hip_y(const BodyConfig& b) { return b.neck_y + b.torso_length; }
double shoulder_y(const BodyConfig& b) { return b.neck_y + b.shoulder_drop; }
double head_center_y(const BodyConfig& b) { return b.neck_y - b.head_radius - 2.0; }

bool in_disk(double x, double y, double cx, double cy, double r) {
  return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
}

bool in_neck_skin(const BodyConfig& b, double x, double y) { return in_disk(x, y, b.center_x, b.neck_y, b.neck_half); }

bool in_head(const BodyConfig& b, double x, double y) {
  if (in_disk(x, y, b.center_x, head_center_y(b), b.head_radius)) return true;
  if (std::abs(x - b.center_x) <= b.neck_half && y >= head_center_y(b) && y <= b.neck_y) return true;
  return in_neck_skin(b, x, y);
}

bool in_body_torso(const BodyConfig& b, double x, double y) {
  const double ys = shoulder_y(b), yh = hip_y(b);
  if (y < ys || y > yh) return false;
  const double t = (y - ys) / (yh - ys);
  const double half = b.shoulder_half + (b.hip_half - b.shoulder_half) * t;
  return std::abs(x - b.center_x) <= half;
}

bool in_legs(const BodyConfig& b, double x, double y) {
  if (y < hip_y(b) || y > kCanvas - 1 - kMargin) return false;
  const double d = std::abs(x - b.center_x);
  return d >= kLegGap && d <= b.hip_half;
}

void check_fits(const BodyConfig& b, const SizeVector& s) {
  const double lo = kMargin, hi = kCanvas - 1 - kMargin;
  auto inside = [&](double v, double pad) { return v - pad >= lo && v + pad <= hi; };
  bool ok = inside(head_center_y(b), b.head_radius) && inside(b.center_x, kTorsoZoneHalf);
  const double rho = b.mm_per_pixel;
  ok = ok && (b.neck_y + s.body_length_back / rho) <= hi;
  ok = ok && inside(b.center_x, std::max({s.body_width, s.shoulder_width, s.neck_size}) / (2 * rho));
  for (bool left : {true, false})
    for (const Point2& p : arm_path(b, left)) ok = ok && inside(p.x, b.sleeve_radius) && inside(p.y, b.sleeve_radius);
  if (!ok) throw DataError("figure leaves the canvas margin of " + std::to_string(kMargin) + " px");
}

double luminance(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

constexpr std::array<double, kPartLabelCount> kPartShade = {0.0, 0.9, 0.7, 0.5, 0.4, 0.3};

}  // namespace

std::vector<std::string> validate(const SizeVector& s) {
  std::vector<std::string> errs;
  const auto v = s.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]) || v[i] <= 0.0)
      errs.push_back(std::string(kSizeFieldNames[i]) + ": must be a positive finite length in mm");
  if (errs.empty()) {
    if (!(s.shoulder_width > s.neck_size)) errs.push_back("neck_size: must be smaller than shoulder_width");
    if (!(s.sleeve_length < 2.0 * s.body_length_back))
      errs.push_back("sleeve_length: must be less than twice body_length_back");
  }
  return errs;
}

void require_valid(const SizeVector& s) {
  const auto errs = validate(s);
  if (!errs.empty()) throw DataError("invalid size vector: " + errs.front());
}

nlohmann::json to_json(const SizeVector& s) {
  nlohmann::json j;
  const auto v = s.values();
  for (std::size_t i = 0; i < v.size(); ++i) j[kSizeFieldNames[i]] = v[i];
  return j;
}

SizeVector size_from_json(const nlohmann::json& j) {
  std::array<double, 5> v{};
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!j.contains(kSizeFieldNames[i]) || !j[kSizeFieldNames[i]].is_number())
      throw DataError(std::string(kSizeFieldNames[i]) + ": missing or not a number");
    v[i] = j[kSizeFieldNames[i]].get<double>();
  }
  return SizeVector::from_values(v);
}

SizeVector canonical_m() { return {700.0, 600.0, 450.0, 500.0, 180.0}; }

std::string size_name(SizeLabel s) {
  switch (s) {
    case SizeLabel::S: return "S";
    case SizeLabel::M: return "M";
    case SizeLabel::L: return "L";
    case SizeLabel::XL: return "XL";
  }
  return "?";
}

SizeLabel size_from_name(const std::string& name) {
  for (SizeLabel s : kSizeLabels)
    if (size_name(s) == name) return s;
  throw DataError("unknown size label '" + name + "'");
}

int grading_step(SizeLabel s) { return static_cast<int>(s) - 1; }

SizeVector graded(const SizeVector& base, int step, double grading) {
  SizeVector s = base;
  const double f = 1.0 + grading * step;
  s.body_width *= f;
  s.sleeve_length *= f;
  return s;
}

GarmentStyle garment_style(int garment_id) {
  Rng rng(derive_seed(0x6a72'6d6e'7473ULL, static_cast<std::uint64_t>(garment_id)));
  GarmentStyle g;
  g.id = garment_id;
  // Cuts vary by a few percent around the canonical table, well inside one
  // grading step, so a held-out garment is never far from the ones seen in
  // training.
  g.length_scale = rng.uniform(0.97, 1.03);
  g.sleeve_scale = rng.uniform(0.88, 0.94);
  g.shoulder_scale = rng.uniform(0.98, 1.02);
  g.width_scale = rng.uniform(0.98, 1.02);
  g.neck_scale = rng.uniform(0.98, 1.02);
  for (auto& c : g.base_rgb) c = rng.uniform(0.25, 0.85);
  for (std::size_t i = 0; i < 3; ++i) g.stripe_rgb[i] = g.base_rgb[i] > 0.55 ? g.base_rgb[i] - 0.3 : g.base_rgb[i] + 0.3;
  g.stripe_period = rng.uniform(4.0, 8.0);
  g.stripe_angle = rng.uniform(-0.5, 0.5);
  return g;
}

SizeVector garment_base_size(int garment_id) {
  const GarmentStyle g = garment_style(garment_id);
  SizeVector s = canonical_m();
  s.body_length_back *= g.length_scale;
  s.sleeve_length *= g.sleeve_scale;
  s.shoulder_width *= g.shoulder_scale;
  s.body_width *= g.width_scale;
  s.neck_size *= g.neck_scale;
  return s;
}

SizeVector garment_size(int garment_id, SizeLabel label) {
  return graded(garment_base_size(garment_id), grading_step(label));
}

tensor::Tensor garment_texture(int garment_id, int height, int width) {
  const GarmentStyle g = garment_style(garment_id);
  tensor::Tensor t({3, static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
  const double ca = std::cos(g.stripe_angle), sa = std::sin(g.stripe_angle);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = x * sa + y * ca;
      const double phase = u / g.stripe_period - std::floor(u / g.stripe_period);
      const auto& c = phase < 0.5 ? g.base_rgb : g.stripe_rgb;
      for (std::size_t ch = 0; ch < 3; ++ch) t.at(ch, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = c[ch];
    }
  }
  return t;
}

BodyConfig sample_body(std::uint64_t seed, int body_id, int pose_id) {
  Rng rng(derive_seed(seed, 0x626f6479ULL + static_cast<std::uint64_t>(body_id)));
  BodyConfig b;
  b.center_x = 64.0 + rng.uniform(-1.0, 1.0);
  b.head_radius = rng.uniform(7.0, 8.5);
  b.neck_y = rng.uniform(24.0, 28.0);
  b.shoulder_half = rng.uniform(16.0, 19.0);
  b.neck_half = rng.uniform(4.0, 5.0);
  b.torso_length = rng.uniform(42.0, 47.0);
  b.hip_half = rng.uniform(14.0, 16.5);
  b.upper_arm = rng.uniform(24.0, 27.0);
  b.lower_arm = rng.uniform(21.0, 23.0);
  b.hand = rng.uniform(13.0, 14.0);
  b.arm_radius = rng.uniform(3.5, 4.3);
  b.sleeve_radius = b.arm_radius + 1.5;

  Rng pose(derive_seed(seed, (0x706f7365ULL << 16) + static_cast<std::uint64_t>(body_id) * 131 +
                                 static_cast<std::uint64_t>(pose_id)));
  for (ArmPose* arm : {&b.left, &b.right}) {
    arm->shoulder_angle = pose.uniform(0.54, 0.64);
    arm->elbow_angle = arm->shoulder_angle - pose.uniform(0.18, 0.26);
    arm->wrist_angle = arm->elbow_angle - pose.uniform(0.0, 0.1);
  }
  return b;
}

BodyConfig jitter_pose(const BodyConfig& body, double jitter, Rng& rng) {
  BodyConfig b = body;
  if (jitter <= 0.0) return b;
  for (ArmPose* arm : {&b.left, &b.right}) {
    arm->elbow_angle += rng.uniform(-jitter, jitter);
    arm->wrist_angle += rng.uniform(-jitter, jitter);
  }
  return b;
}

std::array<Point2, 4> arm_path(const BodyConfig& b, bool left) {
  const double dir = left ? -1.0 : 1.0;
  const ArmPose& a = left ? b.left : b.right;
  std::array<Point2, 4> p;
  p[0] = {b.center_x + dir * b.shoulder_half, shoulder_y(b)};
  p[1] = {p[0].x + dir * b.upper_arm * std::sin(a.shoulder_angle), p[0].y + b.upper_arm * std::cos(a.shoulder_angle)};
  p[2] = {p[1].x + dir * b.lower_arm * std::sin(a.elbow_angle), p[1].y + b.lower_arm * std::cos(a.elbow_angle)};
  p[3] = {p[2].x + dir * b.hand * std::sin(a.wrist_angle), p[2].y + b.hand * std::cos(a.wrist_angle)};
  return p;
}

Rendering render_person(const BodyConfig& b, const SizeVector& s, int garment_id) {
  require_valid(s);
  check_fits(b, s);
  const double rho = b.mm_per_pixel;
  const int H = kCanvas, W = kCanvas;
  const double ys = shoulder_y(b), ya = ys + kArmpitDepth, hem = b.neck_y + s.body_length_back / rho;
  const double top_half = s.shoulder_width / (2 * rho), body_half = s.body_width / (2 * rho);
  const double collar_half = s.neck_size / (2 * rho);
  const double sleeve_px = s.sleeve_length / rho;

  std::array<Stroke, 2> sleeves, arm_labels, arm_skin, exposed;
  for (int side = 0; side < 2; ++side) {
    const auto path = arm_path(b, side == 0);
    const double total = path_length(path);
    sleeves[side] = {path, 0.0, std::min(sleeve_px, total), b.sleeve_radius, false};
    arm_labels[side] = {path, 0.0, total, b.sleeve_radius, true};
    arm_skin[side] = {path, 0.0, total, b.arm_radius, true};
    exposed[side] = {path, std::min(sleeve_px, total), total, b.arm_radius, true};
  }
  const tensor::Tensor tex = garment_texture(garment_id, H, W);

  Rendering r;
  r.image = tensor::Tensor({3, static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
  r.mask = Mask(H, W);
  r.sleeves = Mask(H, W);
  r.parts = PartLabelMap(H, W);

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double fx = x, fy = y;
      const Point2 q{fx, fy};

      PartLabel label = PartLabel::background;
      if (std::abs(fx - b.center_x) <= kTorsoZoneHalf && fy >= ys - 3.0)
        label = fy < hip_y(b) ? PartLabel::torso : PartLabel::upper_leg;
      for (const Stroke& st : arm_labels) {
        const int seg = stroke_segment(st, q);
        if (seg >= 0) label = seg == 0 ? PartLabel::upper_arm : PartLabel::lower_arm;
      }
      if (in_head(b, fx, fy)) label = PartLabel::head;
      r.parts.at(y, x) = label;

      bool garment = false;
      if (fy >= ys && fy <= hem) {
        const double half = fy < ya ? top_half + (body_half - top_half) * (fy - ys) / kArmpitDepth : body_half;
        garment = std::abs(fx - b.center_x) <= half;
      }
      if (fy >= b.neck_y && fy <= b.neck_y + kCollarHeight && std::abs(fx - b.center_x) <= collar_half) garment = true;
      if (garment && in_neck_skin(b, fx, fy)) garment = false;
      if (garment && (stroke_segment(exposed[0], q) >= 0 || stroke_segment(exposed[1], q) >= 0)) garment = false;
      const bool sleeve = stroke_segment(sleeves[0], q) >= 0 || stroke_segment(sleeves[1], q) >= 0;
      garment = garment || sleeve;
      if (sleeve) r.sleeves.at(y, x) = 1.0;

      const bool skin = in_head(b, fx, fy) || in_body_torso(b, fx, fy) || in_legs(b, fx, fy) ||
                        stroke_segment(arm_skin[0], q) >= 0 || stroke_segment(arm_skin[1], q) >= 0;
      const auto ux = static_cast<std::size_t>(x), uy = static_cast<std::size_t>(y);
      if (garment) {
        r.mask.at(y, x) = 1.0;
        r.image.at(0, uy, ux) = 1.0;
        r.image.at(1, uy, ux) = kPartShade[static_cast<std::size_t>(label)];
        r.image.at(2, uy, ux) = luminance({tex.at(0, uy, ux), tex.at(1, uy, ux), tex.at(2, uy, ux)});
      } else if (skin) {
        r.image.at(0, uy, ux) = 1.0;
        r.image.at(1, uy, ux) = kPartShade[static_cast<std::size_t>(label)];
        r.image.at(2, uy, ux) = 0.8;
      }
    }
  }

  auto& k = r.keypoints;
  auto set = [&k](Joint j, Point2 p) { k[j] = {p.x, p.y, true}; };
  set(Joint::head, {b.center_x, head_center_y(b)});
  set(Joint::neck, {b.center_x, b.neck_y});
  const auto lp = arm_path(b, true), rp = arm_path(b, false);
  set(Joint::l_shoulder, lp[0]);
  set(Joint::r_shoulder, rp[0]);
  set(Joint::l_elbow, lp[1]);
  set(Joint::r_elbow, rp[1]);
  set(Joint::l_wrist, lp[2]);
  set(Joint::r_wrist, rp[2]);
  set(Joint::l_hip, {b.center_x - b.hip_half, hip_y(b)});
  set(Joint::r_hip, {b.center_x + b.hip_half, hip_y(b)});
  return r;
}

PairedSample make_pair(const BodyConfig& body, int garment_id, const SizeVector& s_ref, const SizeVector& s_try,
                       double jitter, Rng& rng) {
  require_valid(s_ref);
  require_valid(s_try);
  PairedSample p;
  p.garment_id = garment_id;
  p.s_ref = s_ref;
  p.s_try = s_try;
  p.ref = render_person(body, s_ref, garment_id);
  p.jittered = jitter > 0.0;
  p.tryon = render_person(jitter_pose(body, jitter, rng), s_try, garment_id);
  return p;
}

nlohmann::json to_json(const DatasetConfig& c) {
  return {{"n_bodies", c.n_bodies},
          {"n_poses", c.n_poses},
          {"n_garments", c.n_garments},
          {"sizes_per_garment", c.sizes_per_garment},
          {"held_out_bodies", c.held_out_bodies},
          {"held_out_garments", c.held_out_garments},
          {"val_fraction", c.val_fraction},
          {"jitter", c.jitter},
          {"seed", c.seed}};
}

DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  try {
    c.n_bodies = j.value("n_bodies", c.n_bodies);
    c.n_poses = j.value("n_poses", c.n_poses);
    c.n_garments = j.value("n_garments", c.n_garments);
    c.sizes_per_garment = j.value("sizes_per_garment", c.sizes_per_garment);
    c.held_out_bodies = j.value("held_out_bodies", c.held_out_bodies);
    c.held_out_garments = j.value("held_out_garments", c.held_out_garments);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.jitter = j.value("jitter", c.jitter);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed dataset config: ") + e.what());
  }
  return c;
}

std::vector<ManifestEntry> plan_dataset(const DatasetConfig& c) {
  if (c.n_bodies < 1 || c.n_poses < 1 || c.n_garments < 1 || c.sizes_per_garment < 1)
    throw DataError("dataset counts must be at least 1");
  if (c.sizes_per_garment > static_cast<int>(kSizeLabels.size()))
    throw DataError("at most " + std::to_string(kSizeLabels.size()) + " sizes per garment");
  if (c.held_out_bodies < 0 || c.held_out_garments < 0) throw DataError("held-out counts must be non-negative");
  if (c.held_out_bodies >= c.n_bodies)
    throw DataError("new-person split needs more bodies than held out (" + std::to_string(c.n_bodies) + " bodies, " +
                    std::to_string(c.held_out_bodies) + " held out)");
  if (c.held_out_garments >= c.n_garments)
    throw DataError("new-clothes split needs more garments than held out (" + std::to_string(c.n_garments) +
                    " garments, " + std::to_string(c.held_out_garments) + " held out)");
  if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0)) throw DataError("val_fraction must lie in [0, 1)");
  if (!(c.jitter >= 0.0)) throw DataError("jitter must be non-negative");

  std::vector<ManifestEntry> trainval, out;
  for (int b = 0; b < c.n_bodies; ++b) {
    const bool new_person = b >= c.n_bodies - c.held_out_bodies;
    for (int p = 0; p < c.n_poses; ++p) {
      for (int g = 0; g < c.n_garments; ++g) {
        const bool new_clothes = g >= c.n_garments - c.held_out_garments;
        if (new_person && new_clothes) continue;
        for (int i = 0; i < c.sizes_per_garment; ++i) {
          for (int k = 0; k < c.sizes_per_garment; ++k) {
            const bool held = new_person || new_clothes;
            if (held && i == k) continue;
            ManifestEntry e;
            e.body_id = b;
            e.pose_id = p;
            e.garment_id = g;
            e.ref_label = kSizeLabels[static_cast<std::size_t>(i)];
            e.try_label = kSizeLabels[static_cast<std::size_t>(k)];
            e.pair_id = "b" + std::to_string(b) + "_p" + std::to_string(p) + "_g" + std::to_string(g) + "_" +
                        size_name(e.ref_label) + "-" + size_name(e.try_label);
            e.split = new_person ? "test_new_person" : new_clothes ? "test_new_clothes" : "train";
            (held ? out : trainval).push_back(e);
          }
        }
      }
    }
  }
  // Seeded Fisher-Yates picks the validation subset; the original order is
  // kept in the output.
  std::vector<std::size_t> order(trainval.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(c.seed, 0x76616cULL));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_val = static_cast<std::size_t>(std::llround(c.val_fraction * static_cast<double>(trainval.size())));
  for (std::size_t i = 0; i < n_val; ++i) trainval[order[i]].split = "val";
  if (trainval.size() == n_val) throw DataError("dataset configuration leaves no training pairs");

  trainval.insert(trainval.end(), out.begin(), out.end());
  return trainval;
}

PairedSample render_entry(const DatasetConfig& c, const ManifestEntry& e) {
  const BodyConfig body = sample_body(c.seed, e.body_id, e.pose_id);
  std::uint64_t tag = 0;
  for (char ch : e.pair_id) tag = tag * 131 + static_cast<unsigned char>(ch);
  Rng rng(derive_seed(c.seed, tag));
  PairedSample p = make_pair(body, e.garment_id, garment_size(e.garment_id, e.ref_label),
                             garment_size(e.garment_id, e.try_label), c.jitter, rng);
  p.pair_id = e.pair_id;
  p.body_id = e.body_id;
  p.pose_id = e.pose_id;
  p.ref_label = e.ref_label;
  p.try_label = e.try_label;
  return p;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("write failed for " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

constexpr std::array<const char*, 4> kHalfFiles = {"image.png", "mask.pgm", "parts.pgm", "kps.json"};

void write_half(const Rendering& r, const fs::path& dir, const std::string& prefix) {
  io::write_png(dir / (prefix + "_image.png"), io::tensor_to_rgb(r.image));
  io::write_pgm(dir / (prefix + "_mask.pgm"), io::mask_to_image(r.mask));
  io::write_pgm(dir / (prefix + "_parts.pgm"), io::parts_to_image(r.parts));
  write_text(dir / (prefix + "_kps.json"), geometry::to_json(r.keypoints).dump(2) + "\n");
}

}  // namespace

void write_pair(const PairedSample& p, const fs::path& dir) {
  fs::create_directories(dir);
  write_half(p.ref, dir, "ref");
  write_half(p.tryon, dir, "try");
  const nlohmann::json sizes = {{"s_ref", to_json(p.s_ref)},
                                {"s_try", to_json(p.s_try)},
                                {"ref_size", size_name(p.ref_label)},
                                {"try_size", size_name(p.try_label)},
                                {"garment_id", p.garment_id},
                                {"body_id", p.body_id},
                                {"pose_id", p.pose_id},
                                {"jittered", p.jittered}};
  write_text(dir / "sizes.json", sizes.dump(2) + "\n");
}

nlohmann::json build_dataset(const DatasetConfig& c, const fs::path& root) {
  const auto plan = plan_dataset(c);
  nlohmann::json samples = nlohmann::json::array();
  std::map<std::string, int> counts;
  for (const char* s : kSplits) counts[s] = 0;
  for (const ManifestEntry& e : plan) {
    const fs::path rel = fs::path(e.split) / e.pair_id;
    write_pair(render_entry(c, e), root / rel);
    nlohmann::json files = nlohmann::json::array();
    for (const char* half : {"ref", "try"})
      for (const char* f : kHalfFiles) files.push_back((rel / (std::string(half) + "_" + f)).generic_string());
    files.push_back((rel / "sizes.json").generic_string());
    samples.push_back({{"pair_id", e.pair_id},
                       {"split", e.split},
                       {"dir", rel.generic_string()},
                       {"body_id", e.body_id},
                       {"pose_id", e.pose_id},
                       {"garment_id", e.garment_id},
                       {"ref_size", size_name(e.ref_label)},
                       {"try_size", size_name(e.try_label)},
                       {"files", files}});
    ++counts[e.split];
  }
  nlohmann::json manifest = {{"format", 1},
                             {"canvas", {kCanvas, kCanvas}},
                             {"mm_per_pixel", kMmPerPixel},
                             {"config", to_json(c)},
                             {"splits", counts},
                             {"samples", samples}};
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

nlohmann::json read_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  if (!fs::exists(path)) throw DataError("manifest not found: " + path.string());
  nlohmann::json m = read_json(path);
  if (!m.contains("samples") || !m["samples"].is_array() || !m.contains("canvas"))
    throw DataError("manifest " + path.string() + " lacks samples or canvas");
  for (const auto& s : m["samples"])
    if (!s.contains("pair_id") || !s.contains("split") || !s.contains("dir"))
      throw DataError("manifest entry without pair_id/split/dir in " + path.string());
  return m;
}

StoredPair read_pair(const fs::path& dir) {
  StoredPair p;
  const nlohmann::json sizes = read_json(dir / "sizes.json");
  p.pair_id = dir.filename().string();
  p.split = dir.parent_path().filename().string();
  try {
    p.s_ref = size_from_json(sizes.at("s_ref"));
    p.s_try = size_from_json(sizes.at("s_try"));
    p.garment_id = sizes.at("garment_id").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed sizes.json in " + dir.string() + ": " + e.what());
  }
  p.ref_image = io::rgb_to_tensor(io::read_png(dir / "ref_image.png"));
  p.ref_mask = io::image_to_mask(io::read_pgm(dir / "ref_mask.pgm"));
  p.ref_parts = io::image_to_parts(io::read_pgm(dir / "ref_parts.pgm"));
  p.ref_kps = geometry::keypoints_from_json(read_json(dir / "ref_kps.json"));
  p.try_image = io::rgb_to_tensor(io::read_png(dir / "try_image.png"));
  p.try_mask = io::image_to_mask(io::read_pgm(dir / "try_mask.pgm"));
  p.try_parts = io::image_to_parts(io::read_pgm(dir / "try_parts.pgm"));
  p.try_kps = geometry::keypoints_from_json(read_json(dir / "try_kps.json"));
  return p;
}

}  // namespace sizefit::synth
