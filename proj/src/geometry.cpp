#include "sizefit/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "sizefit/errors.hpp"

namespace sizefit::geometry {

namespace {

constexpr std::array<std::string_view, kJointCount> kJointNames = {
    "head", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hip", "r_hip"};

constexpr std::array<Joint, 4> kAboveShoulders = {Joint::head, Joint::neck, Joint::l_shoulder, Joint::r_shoulder};
constexpr std::array<Joint, kJointCount> kAllJoints = {Joint::head,    Joint::neck,    Joint::l_shoulder,
                                                       Joint::r_shoulder, Joint::l_elbow, Joint::r_elbow,
                                                       Joint::l_wrist, Joint::r_wrist, Joint::l_hip,
                                                       Joint::r_hip};

double cross(Point2 o, Point2 a, Point2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

// Similarity that moves the centroid to the origin and the mean distance
// from it to sqrt(2).
Eigen::Matrix3d normalizing_transform(std::span<const Point2> pts) {
  double cx = 0, cy = 0;
  for (auto p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double d = 0;
  for (auto p : pts) d += std::hypot(p.x - cx, p.y - cy);
  d /= static_cast<double>(pts.size());
  if (d < 1e-12) throw DataError("homography: all points coincide");
  const double s = std::numbers::sqrt2 / d;
  Eigen::Matrix3d t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

double sample_bilinear(const double* plane, long h, long w, double sx, double sy) {
  const double fx0 = std::floor(sx), fy0 = std::floor(sy);
  const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
  const double fx = sx - fx0, fy = sy - fy0;
  auto px = [&](long y, long x) { return (x >= 0 && x < w && y >= 0 && y < h) ? plane[y * w + x] : 0.0; };
  double v = 0.0;
  if (fx == 0.0 && fy == 0.0) return px(y0, x0);
  v += (1 - fx) * (1 - fy) * px(y0, x0);
  v += fx * (1 - fy) * px(y0, x0 + 1);
  v += (1 - fx) * fy * px(y0 + 1, x0);
  v += fx * fy * px(y0 + 1, x0 + 1);
  return v;
}

double sample_nearest(const double* plane, long h, long w, double sx, double sy) {
  const long x = std::lround(sx), y = std::lround(sy);
  return (x >= 0 && x < w && y >= 0 && y < h) ? plane[y * w + x] : 0.0;
}

}  // namespace

std::string_view joint_name(Joint j) { return kJointNames.at(static_cast<std::size_t>(j)); }

Joint joint_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kJointCount; ++i)
    if (kJointNames[i] == name) return static_cast<Joint>(i);
  throw DataError("unknown joint name '" + std::string(name) + "'");
}

Joint mirror_joint(Joint j) {
  switch (j) {
    case Joint::head:
    case Joint::neck:
      return j;
    default: {
      // Left/right joints alternate in the enum starting at l_shoulder.
      const int i = static_cast<int>(j);
      return static_cast<Joint>((i % 2 == 0) ? i + 1 : i - 1);
    }
  }
}

nlohmann::json to_json(const KeypointSet& k) {
  nlohmann::json joints = nlohmann::json::array();
  for (std::size_t i = 0; i < kJointCount; ++i) {
    const Keypoint& p = k.joints[i];
    joints.push_back({{"name", kJointNames[i]}, {"x", p.x}, {"y", p.y}, {"valid", p.valid}});
  }
  return {{"joints", joints}};
}

KeypointSet keypoints_from_json(const nlohmann::json& j) {
  KeypointSet k;
  try {
    for (const auto& e : j.at("joints")) {
      const Joint joint = joint_from_name(e.at("name").get<std::string>());
      Keypoint& p = k[joint];
      p.x = e.at("x").get<double>();
      p.y = e.at("y").get<double>();
      p.valid = e.at("valid").get<bool>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed keypoint JSON: ") + e.what());
  }
  return k;
}

std::span<const Joint> joints_in(JointSubset subset) {
  if (subset == JointSubset::above_shoulders) return kAboveShoulders;
  return kAllJoints;
}

double posture_distance(const KeypointSet& a, const KeypointSet& b, JointSubset subset) {
  double total = 0.0;
  int count = 0;
  for (Joint j : joints_in(subset)) {
    const Keypoint &p = a[j], &q = b[j];
    if (!p.valid || !q.valid) continue;
    const double dx = p.x - q.x, dy = p.y - q.y;
    total += dx * dx + dy * dy;
    ++count;
  }
  if (count == 0) throw DataError("posture_distance: no joint of the subset is valid in both sets");
  return total / count;
}

FrameMatch match_frames(std::span<const KeypointSet> seq_a, std::span<const KeypointSet> seq_b) {
  if (seq_a.empty() || seq_b.empty()) throw DataError("match_frames: empty sequence");
  FrameMatch best{0, 0, std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < seq_a.size(); ++i) {
    for (std::size_t j = 0; j < seq_b.size(); ++j) {
      const double d = posture_distance(seq_a[i], seq_b[j], JointSubset::above_shoulders);
      if (d < best.distance) best = {i, j, d};
    }
  }
  return best;
}

// ---- homography ----

Homography::Homography() : m_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}

Homography::Homography(const std::array<double, 9>& m) : m_(m) {
  if (std::abs(m_[8]) < 1e-15) throw DataError("homography with h33 = 0 cannot be normalized");
  if (m_[8] != 1.0) {
    const double s = m_[8];
    for (double& v : m_) v /= s;
  }
  if (std::abs(determinant()) <= 1e-9) throw DataError("homography is singular (|det| <= 1e-9)");
}

double Homography::determinant() const {
  const auto& a = m_;
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) + a[2] * (a[3] * a[7] - a[4] * a[6]);
}

Homography Homography::inverse() const {
  const auto& a = m_;
  const double det = determinant();
  std::array<double, 9> inv = {
      (a[4] * a[8] - a[5] * a[7]) / det, (a[2] * a[7] - a[1] * a[8]) / det, (a[1] * a[5] - a[2] * a[4]) / det,
      (a[5] * a[6] - a[3] * a[8]) / det, (a[0] * a[8] - a[2] * a[6]) / det, (a[2] * a[3] - a[0] * a[5]) / det,
      (a[3] * a[7] - a[4] * a[6]) / det, (a[1] * a[6] - a[0] * a[7]) / det, (a[0] * a[4] - a[1] * a[3]) / det};
  return Homography(inv);
}

Point2 Homography::apply(Point2 p) const {
  const auto& a = m_;
  const double w = a[6] * p.x + a[7] * p.y + a[8];
  return {(a[0] * p.x + a[1] * p.y + a[2]) / w, (a[3] * p.x + a[4] * p.y + a[5]) / w};
}

Homography estimate_homography(std::span<const Point2> src, std::span<const Point2> dst) {
  if (src.size() != dst.size()) throw DataError("homography: correspondence count mismatch");
  const std::size_t n = src.size();
  if (n < 4) throw DataError("homography: need at least 4 correspondences, got " + std::to_string(n));
  if (n == 4) {
    for (const auto pts : {src, dst}) {
      for (std::size_t i = 0; i < 4; ++i) {
        const Point2 a = pts[(i + 1) % 4], b = pts[(i + 2) % 4], c = pts[(i + 3) % 4];
        const double scale = std::max({std::hypot(b.x - a.x, b.y - a.y), std::hypot(c.x - a.x, c.y - a.y), 1e-12});
        if (std::abs(cross(a, b, c)) < 1e-9 * scale * scale)
          throw DataError("homography: three of the four points are collinear");
      }
    }
  }
  const Eigen::Matrix3d ts = normalizing_transform(src);
  const Eigen::Matrix3d td = normalizing_transform(dst);
  Eigen::MatrixXd a(2 * n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d p = ts * Eigen::Vector3d(src[i].x, src[i].y, 1.0);
    const Eigen::Vector3d q = td * Eigen::Vector3d(dst[i].x, dst[i].y, 1.0);
    const double x = p.x(), y = p.y(), u = q.x(), v = q.y();
    const auto r = static_cast<Eigen::Index>(2 * i);
    a.row(r) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(r + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  // Smallest right singular vector; for n = 4 the system is 8 x 9 so the
  // full V is needed.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  if (sv.size() >= 8 && sv(7) < 1e-10 * sv(0))
    throw DataError("homography: degenerate configuration (rank-deficient DLT system)");
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Eigen::Matrix3d full = td.inverse() * hn * ts;
  std::array<double, 9> m{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m[static_cast<std::size_t>(r * 3 + c)] = full(r, c);
  return Homography(m);
}

Homography estimate_homography(const KeypointSet& src, const KeypointSet& dst) {
  std::vector<Point2> s, d;
  for (std::size_t i = 0; i < kJointCount; ++i) {
    if (src.joints[i].valid && dst.joints[i].valid) {
      s.push_back({src.joints[i].x, src.joints[i].y});
      d.push_back({dst.joints[i].x, dst.joints[i].y});
    }
  }
  return estimate_homography(s, d);
}

KeypointSet transform(const KeypointSet& k, const Homography& h) {
  KeypointSet out = k;
  for (auto& p : out.joints) {
    const Point2 q = h.apply({p.x, p.y});
    p.x = q.x;
    p.y = q.y;
  }
  return out;
}

tensor::Tensor warp_image(const tensor::Tensor& img, const Homography& h, Interpolation interp) {
  if (img.rank() != 3) throw ShapeError("warp_image expects C x H x W, got " + tensor::to_string(img.shape()));
  const Homography inv = h.inverse();
  const long C = static_cast<long>(img.dim(0)), H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  tensor::Tensor out(img.shape());
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      const Point2 s = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      for (long c = 0; c < C; ++c) {
        const double* plane = img.data() + c * H * W;
        out[static_cast<std::size_t>((c * H + y) * W + x)] =
            interp == Interpolation::bilinear ? sample_bilinear(plane, H, W, s.x, s.y)
                                              : sample_nearest(plane, H, W, s.x, s.y);
      }
    }
  }
  return out;
}

// ---- thin-plate spline ----

double tps_kernel(double r2) { return r2 > 0.0 ? r2 * std::log(r2) : 0.0; }

Point2 TpsWarp::operator()(Point2 p) const {
  double x = affine_[0] + affine_[1] * p.x + affine_[2] * p.y;
  double y = affine_[3] + affine_[4] * p.x + affine_[5] * p.y;
  for (std::size_t i = 0; i < source_.size(); ++i) {
    const double dx = p.x - source_[i].x, dy = p.y - source_[i].y;
    const double u = tps_kernel(dx * dx + dy * dy);
    x += radial_[i].x * u;
    y += radial_[i].y * u;
  }
  return {x, y};
}

TpsWarp fit_tps(std::span<const Point2> src, std::span<const Point2> dst) {
  if (src.size() != dst.size()) throw DataError("fit_tps: control point count mismatch");
  const std::size_t n = src.size();
  if (n < 3) throw DataError("fit_tps: need at least 3 control points, got " + std::to_string(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (src[i] == src[j]) throw DataError("fit_tps: duplicate source control points");
  double span = 0.0;
  for (std::size_t i = 1; i < n; ++i) span = std::max(span, std::hypot(src[i].x - src[0].x, src[i].y - src[0].y));
  bool collinear = true;
  for (std::size_t i = 1; i < n && collinear; ++i)
    for (std::size_t j = i + 1; j < n && collinear; ++j)
      if (std::abs(cross(src[0], src[i], src[j])) > 1e-9 * span * span) collinear = false;
  if (collinear) throw DataError("fit_tps: control points are collinear");

  const auto N = static_cast<Eigen::Index>(n);
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(N + 3, N + 3);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(N + 3, 2);
  for (Eigen::Index i = 0; i < N; ++i) {
    const Point2 p = src[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < N; ++j) {
      const Point2 q = src[static_cast<std::size_t>(j)];
      const double dx = p.x - q.x, dy = p.y - q.y;
      l(i, j) = tps_kernel(dx * dx + dy * dy);
    }
    l(i, N) = l(N, i) = 1.0;
    l(i, N + 1) = l(N + 1, i) = p.x;
    l(i, N + 2) = l(N + 2, i) = p.y;
    rhs(i, 0) = dst[static_cast<std::size_t>(i)].x;
    rhs(i, 1) = dst[static_cast<std::size_t>(i)].y;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(l);
  if (!lu.isInvertible()) throw DataError("fit_tps: singular TPS system");
  const Eigen::MatrixXd sol = lu.solve(rhs);
  if (!sol.allFinite()) throw DataError("fit_tps: non-finite TPS solution");

  TpsWarp w;
  w.source_.assign(src.begin(), src.end());
  w.target_.assign(dst.begin(), dst.end());
  w.radial_.resize(n);
  for (Eigen::Index i = 0; i < N; ++i) w.radial_[static_cast<std::size_t>(i)] = {sol(i, 0), sol(i, 1)};
  w.affine_ = {sol(N, 0), sol(N + 1, 0), sol(N + 2, 0), sol(N, 1), sol(N + 1, 1), sol(N + 2, 1)};
  return w;
}

namespace {

struct BoundaryScan {
  Point2 centroid;
  std::vector<Point2> points;
  std::vector<bool> hit;
};

BoundaryScan scan_boundary(const Mask& mask, int n, double threshold) {
  if (n < 3) throw UsageError("boundary sampling needs at least 3 control points, got " + std::to_string(n));
  double cx = 0, cy = 0, count = 0;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask(y, x) > threshold) {
        cx += x;
        cy += y;
        count += 1;
      }
  if (count == 0) throw DataError("boundary sampling: mask is empty after binarization");
  BoundaryScan scan;
  scan.centroid = {cx / count, cy / count};
  const double reach = std::hypot(mask.width(), mask.height());
  constexpr double step = 0.25;
  for (int k = 0; k < n; ++k) {
    const double theta = 2.0 * std::numbers::pi * k / n;
    const double dx = std::cos(theta), dy = std::sin(theta);
    Point2 last = scan.centroid;
    bool found = false;
    for (double t = 0.0; t <= reach; t += step) {
      const double px = scan.centroid.x + t * dx, py = scan.centroid.y + t * dy;
      const long ix = std::lround(px), iy = std::lround(py);
      if (ix < 0 || iy < 0 || ix >= mask.width() || iy >= mask.height()) break;
      if (mask(static_cast<int>(iy), static_cast<int>(ix)) > threshold) {
        last = {px, py};
        found = found || t > 0.0;
      }
    }
    scan.points.push_back(last);
    scan.hit.push_back(found);
  }
  return scan;
}

}  // namespace

std::vector<Point2> boundary_samples(const Mask& mask, int n, double threshold) {
  return scan_boundary(mask, n, threshold).points;
}

TpsWarp fit_cloth_tps(const Mask& cloth_mask, const Mask& target_mask, int n_ctrl) {
  if (cloth_mask.height() != target_mask.height() || cloth_mask.width() != target_mask.width())
    throw ShapeError("tps_warp_cloth: mask extents differ");
  const BoundaryScan cloth = scan_boundary(cloth_mask, n_ctrl, kDefaultThreshold);
  const BoundaryScan target = scan_boundary(target_mask, n_ctrl, kDefaultThreshold);
  std::vector<Point2> src{target.centroid}, dst{cloth.centroid};
  auto near = [](Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y) < 0.5; };
  for (int k = 0; k < n_ctrl; ++k) {
    if (!cloth.hit[static_cast<std::size_t>(k)] || !target.hit[static_cast<std::size_t>(k)]) continue;
    const Point2 s = target.points[static_cast<std::size_t>(k)], d = cloth.points[static_cast<std::size_t>(k)];
    const bool dup = std::any_of(src.begin(), src.end(), [&](Point2 p) { return near(p, s); }) ||
                     std::any_of(dst.begin(), dst.end(), [&](Point2 p) { return near(p, d); });
    if (dup) continue;
    src.push_back(s);
    dst.push_back(d);
  }
  if (src.size() < 4) throw DataError("tps_warp_cloth: too few distinct boundary correspondences");
  return fit_tps(src, dst);
}

tensor::Tensor tps_resample(const tensor::Tensor& img, const TpsWarp& target_to_source) {
  if (img.rank() != 3) throw ShapeError("tps_resample expects C x H x W, got " + tensor::to_string(img.shape()));
  const long C = static_cast<long>(img.dim(0)), H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  tensor::Tensor out(img.shape());
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      const Point2 s = target_to_source({static_cast<double>(x), static_cast<double>(y)});
      for (long c = 0; c < C; ++c)
        out[static_cast<std::size_t>((c * H + y) * W + x)] = sample_bilinear(img.data() + c * H * W, H, W, s.x, s.y);
    }
  }
  return out;
}

tensor::Tensor tps_warp_cloth(const tensor::Tensor& cloth, const Mask& cloth_mask, const Mask& target_mask,
                              int n_ctrl) {
  if (cloth.rank() != 3 || cloth.dim(0) != 3 || cloth.dim(1) != static_cast<std::size_t>(cloth_mask.height()) ||
      cloth.dim(2) != static_cast<std::size_t>(cloth_mask.width()))
    throw ShapeError("tps_warp_cloth: cloth must be 3 x H x W matching the masks");
  return tps_resample(cloth, fit_cloth_tps(cloth_mask, target_mask, n_ctrl));
}

}  // namespace sizefit::geometry
