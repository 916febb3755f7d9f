#pragma once

// Keypoint geometry: posture matching between frame sequences, projective
// alignment, and thin-plate-spline warping of garment textures.

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "sizefit/maskops.hpp"
#include "sizefit/tensor.hpp"

namespace sizefit::geometry {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

enum class Joint : int {
  head = 0,
  neck,
  l_shoulder,
  r_shoulder,
  l_elbow,
  r_elbow,
  l_wrist,
  r_wrist,
  l_hip,
  r_hip,
};

inline constexpr std::size_t kJointCount = 10;

std::string_view joint_name(Joint j);
Joint joint_from_name(std::string_view name);

/// Left/right counterpart (head and neck map to themselves).
Joint mirror_joint(Joint j);

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  bool valid = false;
  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

/// Fixed 10-joint skeleton in pixel coordinates.
struct KeypointSet {
  std::array<Keypoint, kJointCount> joints{};

  Keypoint& operator[](Joint j) { return joints[static_cast<std::size_t>(j)]; }
  const Keypoint& operator[](Joint j) const { return joints[static_cast<std::size_t>(j)]; }

  friend bool operator==(const KeypointSet&, const KeypointSet&) = default;
};

// {"joints": [{"name": "head", "x": 1.0, "y": 2.0, "valid": true}, ...]}
nlohmann::json to_json(const KeypointSet& k);
KeypointSet keypoints_from_json(const nlohmann::json& j);

enum class JointSubset { above_shoulders, all };

/// Joints in a subset; above_shoulders is {head, neck, l_shoulder, r_shoulder}.
std::span<const Joint> joints_in(JointSubset subset);

/// Mean squared Euclidean distance over the joints of subset that are valid
/// in both sets. DataError when no such joint exists.
double posture_distance(const KeypointSet& a, const KeypointSet& b, JointSubset subset);

struct FrameMatch {
  std::size_t index_a = 0;
  std::size_t index_b = 0;
  double distance = 0.0;
};

/// Exhaustive argmin of posture_distance(above_shoulders) over all frame
/// pairs; ties go to the lexicographically smallest (index_a, index_b).
FrameMatch match_frames(std::span<const KeypointSet> seq_a, std::span<const KeypointSet> seq_b);

/// 3x3 projective transform, row-major, normalized so h33 = 1.
class Homography {
 public:
  Homography();  // identity
  explicit Homography(const std::array<double, 9>& m);

  const std::array<double, 9>& matrix() const { return m_; }
  double operator()(int r, int c) const { return m_[static_cast<std::size_t>(r * 3 + c)]; }
  double determinant() const;
  Homography inverse() const;
  Point2 apply(Point2 p) const;

 private:
  std::array<double, 9> m_;
};

/// Normalized DLT least-squares estimate mapping src -> dst over at least
/// four correspondences. DataError on too few points or a degenerate
/// configuration.
Homography estimate_homography(std::span<const Point2> src, std::span<const Point2> dst);

/// Uses every joint valid in both sets.
Homography estimate_homography(const KeypointSet& src, const KeypointSet& dst);

KeypointSet transform(const KeypointSet& k, const Homography& h);

enum class Interpolation { nearest, bilinear };

/// Output pixel p samples img at h^-1(p) (pixel centers at integer
/// coordinates); samples outside the image read as 0.
tensor::Tensor warp_image(const tensor::Tensor& img, const Homography& h, Interpolation interp);

/// Thin-plate spline f: R^2 -> R^2 with kernel U(r) = r^2 log r^2.
class TpsWarp {
 public:
  Point2 operator()(Point2 p) const;

  std::span<const Point2> source() const { return source_; }
  std::span<const Point2> target() const { return target_; }
  /// Radial weights, one (wx, wy) pair per control point.
  std::span<const Point2> radial() const { return radial_; }
  /// Affine part: x' = a[0] + a[1] x + a[2] y, y' = a[3] + a[4] x + a[5] y.
  const std::array<double, 6>& affine() const { return affine_; }

 private:
  friend TpsWarp fit_tps(std::span<const Point2>, std::span<const Point2>);
  std::vector<Point2> source_;
  std::vector<Point2> target_;
  std::vector<Point2> radial_;
  std::array<double, 6> affine_{};
};

/// Interpolating TPS with warp(src[i]) == dst[i]. Needs n >= 3 points that
/// are not all collinear and contain no duplicates (DataError otherwise).
TpsWarp fit_tps(std::span<const Point2> src, std::span<const Point2> dst);

double tps_kernel(double r2);

/// n points on the mask boundary: for each of n uniformly spaced angles the
/// farthest foreground pixel along the ray from the foreground centroid.
std::vector<Point2> boundary_samples(const Mask& mask, int n, double threshold = kDefaultThreshold);

/// Correspondence-based TPS for garment warping, mapping target-frame
/// coordinates to cloth-frame coordinates. Control points are matched
/// angular boundary samples of both masks plus their centroids.
TpsWarp fit_cloth_tps(const Mask& cloth_mask, const Mask& target_mask, int n_ctrl = 16);

/// Warps a garment texture so that cloth_mask's outline lands on
/// target_mask's outline. Returns a 3 x H x W tensor.
tensor::Tensor tps_warp_cloth(const tensor::Tensor& cloth, const Mask& cloth_mask, const Mask& target_mask,
                              int n_ctrl = 16);

/// Same resampling applied to any C x H x W tensor (used to carry the mask
/// along with the texture).
tensor::Tensor tps_resample(const tensor::Tensor& img, const TpsWarp& target_to_source);

}  // namespace sizefit::geometry
