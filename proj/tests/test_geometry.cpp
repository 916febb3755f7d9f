#include <cmath>

#include "doctest.h"

#include "sizefit/errors.hpp"
#include "sizefit/geometry.hpp"
#include "sizefit/rng.hpp"

#include "oracles.hpp"

using namespace sizefit;
using namespace sizefit::geometry;

using oracle::random_homography;
using oracle::random_skeleton;

namespace {

double dist(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

TEST_CASE("homography recovery reprojects consistent correspondences exactly") {
  Rng rng(100);
  double worst = 0;
  for (int i = 0; i < 500; ++i) {
    const Homography h = random_homography(rng);
    const std::size_t n = 4 + rng.below(12);
    std::vector<Point2> src(n), dst(n);
    for (std::size_t j = 0; j < n; ++j) {
      src[j] = {rng.uniform(0, 128), rng.uniform(0, 128)};
      dst[j] = h.apply(src[j]);
    }
    const Homography est = estimate_homography(src, dst);
    for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, dist(est.apply(src[j]), dst[j]));
    // Points not used in the fit follow the same map.
    const Point2 probe{rng.uniform(0, 128), rng.uniform(0, 128)};
    worst = std::max(worst, dist(est.apply(probe), h.apply(probe)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("homography inverse and degenerate inputs") {
  Rng rng(101);
  const Homography h = random_homography(rng);
  const Point2 p{33.0, 71.5};
  CHECK(dist(h.inverse().apply(h.apply(p)), p) < 1e-9);
  CHECK(Homography().determinant() == 1.0);

  const std::vector<Point2> three{{0, 0}, {1, 0}, {0, 1}};
  CHECK_THROWS_AS(estimate_homography(three, three), DataError);
  const std::vector<Point2> collinear{{0, 0}, {1, 1}, {2, 2}, {3, 3}};
  CHECK_THROWS_AS(estimate_homography(collinear, collinear), DataError);
}

TEST_CASE("keypoint homography uses joints valid in both sets") {
  Rng rng(102);
  const Homography h = random_homography(rng);
  KeypointSet a = random_skeleton(rng);
  KeypointSet b = transform(a, h);
  b[Joint::l_wrist].valid = false;
  b[Joint::l_wrist].x = 1e6;  // ignored because it is invalid
  const Homography est = estimate_homography(a, b);
  CHECK(dist(est.apply({a[Joint::neck].x, a[Joint::neck].y}), {b[Joint::neck].x, b[Joint::neck].y}) < 1e-6);
}

TEST_CASE("tps interpolates its control points") {
  Rng rng(200);
  double worst = 0;
  for (int i = 0; i < 300; ++i) {
    const std::size_t n = 3 + rng.below(30);
    std::vector<Point2> src, dst;
    while (src.size() < n) {
      const Point2 p{rng.uniform(0, 128), rng.uniform(0, 128)};
      bool clash = false;
      for (const auto& q : src) clash |= dist(p, q) < 0.5;
      if (clash) continue;
      src.push_back(p);
      dst.push_back({p.x + rng.uniform(-10, 10), p.y + rng.uniform(-10, 10)});
    }
    const TpsWarp w = fit_tps(src, dst);
    for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, dist(w(src[j]), dst[j]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("tps reproduces affine maps and rejects degenerate control sets") {
  const std::vector<Point2> src{{0, 0}, {10, 0}, {0, 10}, {10, 10}, {5, 3}};
  std::vector<Point2> dst;
  for (const auto& p : src) dst.push_back({2 * p.x + 0.5 * p.y + 1, -p.x + 3 * p.y - 2});
  const TpsWarp w = fit_tps(src, dst);
  const Point2 q{7.5, 1.25};
  CHECK(dist(w(q), {2 * q.x + 0.5 * q.y + 1, -q.x + 3 * q.y - 2}) < 1e-9);
  for (const auto& r : w.radial()) CHECK(std::hypot(r.x, r.y) < 1e-9);

  CHECK(tps_kernel(0.0) == 0.0);
  CHECK(tps_kernel(std::exp(1.0)) == doctest::Approx(std::exp(1.0)));

  const std::vector<Point2> line{{0, 0}, {1, 1}, {2, 2}};
  CHECK_THROWS_AS(fit_tps(line, line), DataError);
  const std::vector<Point2> dup{{0, 0}, {0, 0}, {1, 0}, {0, 1}};
  CHECK_THROWS_AS(fit_tps(dup, dup), DataError);
  CHECK_THROWS_AS(fit_tps(std::vector<Point2>{{0, 0}, {1, 0}}, std::vector<Point2>{{0, 0}, {1, 0}}), DataError);
}

TEST_CASE("match_frames equals exhaustive search") {
  Rng rng(300);
  for (int i = 0; i < 300; ++i) {
    std::vector<KeypointSet> a(1 + rng.below(12)), b(1 + rng.below(12));
    for (auto& k : a) k = random_skeleton(rng);
    for (auto& k : b) k = random_skeleton(rng);
    if (rng.uniform() < 0.3) b[rng.below(b.size())] = a[rng.below(a.size())];  // exact tie at zero
    if (rng.uniform() < 0.3) {
      // Quantize coordinates so ties between different pairs are likely.
      for (auto* seq : {&a, &b})
        for (auto& k : *seq)
          for (auto& j : k.joints) j.x = std::round(j.x / 64) * 64, j.y = std::round(j.y / 64) * 64;
    }
    const FrameMatch best = oracle::match_frames(a, b);
    const FrameMatch got = match_frames(a, b);
    REQUIRE(got.index_a == best.index_a);
    REQUIRE(got.index_b == best.index_b);
    CHECK(got.distance == doctest::Approx(best.distance).epsilon(1e-14));
  }
}

TEST_CASE("posture distance skips joints missing on either side") {
  KeypointSet a, b;
  a[Joint::head] = {0, 0, true};
  b[Joint::head] = {3, 4, true};
  a[Joint::neck] = {0, 0, true};
  b[Joint::neck] = {100, 0, false};
  CHECK(posture_distance(a, b, JointSubset::above_shoulders) == 25.0);
  CHECK_THROWS_AS(posture_distance(KeypointSet{}, KeypointSet{}, JointSubset::all), DataError);
  CHECK_THROWS(match_frames(std::span<const KeypointSet>{}, std::span<const KeypointSet>{}));
}

TEST_CASE("joint names and mirroring") {
  for (std::size_t i = 0; i < kJointCount; ++i) {
    const auto j = static_cast<Joint>(i);
    CHECK(joint_from_name(joint_name(j)) == j);
    CHECK(mirror_joint(mirror_joint(j)) == j);
  }
  CHECK(mirror_joint(Joint::l_elbow) == Joint::r_elbow);
  CHECK(mirror_joint(Joint::head) == Joint::head);
  CHECK_THROWS_AS(joint_from_name("tail"), DataError);

  Rng rng(5);
  const KeypointSet k = random_skeleton(rng, 0.1);
  CHECK(keypoints_from_json(to_json(k)) == k);
}

TEST_CASE("warp_image with a pure translation shifts pixels") {
  tensor::Tensor img({1, 4, 4});
  img.at(0, 1, 1) = 1.0;
  const Homography shift(std::array<double, 9>{1, 0, 2, 0, 1, 1, 0, 0, 1});
  for (auto interp : {Interpolation::nearest, Interpolation::bilinear}) {
    const auto out = warp_image(img, shift, interp);
    CHECK(out.at(0, 2, 3) == 1.0);
    CHECK(out.at(0, 1, 1) == 0.0);
  }
  CHECK(warp_image(img, Homography(), Interpolation::bilinear) == img);
}

TEST_CASE("cloth tps lands the garment outline on the target outline") {
  Mask cloth(64, 64), target(64, 64);
  for (int y = 16; y < 48; ++y)
    for (int x = 20; x < 44; ++x) cloth.at(y, x) = 1;
  for (int y = 12; y < 52; ++y)
    for (int x = 14; x < 50; ++x) target.at(y, x) = 1;
  tensor::Tensor texture({3, 64, 64}, 0.0);
  for (int y = 16; y < 48; ++y)
    for (int x = 20; x < 44; ++x)
      for (int c = 0; c < 3; ++c) texture.at(c, y, x) = 1.0;
  const auto warped = tps_warp_cloth(texture, cloth, target);
  CHECK(warped.shape() == tensor::Shape{3, 64, 64});
  std::size_t covered = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) covered += warped.at(0, y, x) > 0.5 && target(y, x) > 0.5;
  CHECK(covered >= static_cast<std::size_t>(0.85 * target.sum()));

  const auto samples = boundary_samples(target, 8);
  CHECK(samples.size() == 8);
  CHECK_THROWS_AS(boundary_samples(Mask(8, 8), 8), DataError);
}
