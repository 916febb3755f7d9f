#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance runner. They restate each definition pixel by pixel or pair by
// pair and deliberately avoid the library helpers they check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "sizefit/errors.hpp"
#include "sizefit/geometry.hpp"
#include "sizefit/metrics.hpp"
#include "sizefit/rng.hpp"
#include "sizefit/synthdata.hpp"

namespace sizefit::oracle {

inline Mask random_soft_mask(int h, int w, Rng& rng) {
  Mask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x) = rng.uniform();
  return m;
}

inline Mask random_binary_mask(int h, int w, Rng& rng, double p) {
  Mask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x) = rng.uniform() < p ? 1.0 : 0.0;
  return m;
}

inline PartLabelMap random_parts(int h, int w, Rng& rng) {
  PartLabelMap p(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p.at(y, x) = static_cast<PartLabel>(rng.below(kPartLabelCount));
  return p;
}

inline metrics::SemReport sem(const Mask& md, const PartLabelMap& pr, const Mask& mg, const PartLabelMap& pg) {
  auto torso_like = [](PartLabel l) { return l == PartLabel::torso || l == PartLabel::upper_leg; };
  double td = 0, sd = 0, tg = 0, sg = 0;
  for (int y = 0; y < md.height(); ++y)
    for (int x = 0; x < md.width(); ++x) {
      (torso_like(pr(y, x)) ? td : sd) += md(y, x);
      (torso_like(pg(y, x)) ? tg : sg) += mg(y, x);
    }
  const double n = static_cast<double>(md.height()) * md.width();
  metrics::SemReport r;
  r.t_minus = std::abs(tg - td) / n;
  r.s_minus = std::abs(sg - sd) / n;
  r.sem = r.t_minus + r.s_minus == 0 ? 0 : 2 * r.t_minus * r.s_minus / (r.t_minus + r.s_minus);
  return r;
}

/// Worst absolute deviation of metrics::sem from the oracle over n random
/// soft-mask instances.
inline double sem_sweep(int n, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0;
  for (int i = 0; i < n; ++i) {
    const int h = 1 + static_cast<int>(rng.below(20)), w = 1 + static_cast<int>(rng.below(20));
    const Mask md = random_soft_mask(h, w, rng), mg = random_soft_mask(h, w, rng);
    const PartLabelMap pr = random_parts(h, w, rng), pg = random_parts(h, w, rng);
    const auto got = metrics::sem(md, pr, mg, pg);
    const auto want = sem(md, pr, mg, pg);
    worst = std::max({worst, std::abs(got.t_minus - want.t_minus), std::abs(got.s_minus - want.s_minus),
                      std::abs(got.sem - want.sem)});
  }
  return worst;
}

struct HandExample {
  Mask pred, truth;
  PartLabelMap parts;
};

/// 4x4 canvas: torso areas 4 vs 6 and sleeve areas 2 vs 3, so t_minus is
/// 2/16, s_minus 1/16 and sem 1/12.
inline HandExample hand_example() {
  HandExample e{Mask(4, 4), Mask(4, 4), PartLabelMap(4, 4, PartLabel::upper_arm)};
  for (int y = 0; y < 4; ++y)
    for (int x = 1; x < 3; ++x) e.parts.at(y, x) = PartLabel::torso;
  for (int y = 0; y < 2; ++y)
    for (int x = 1; x < 3; ++x) e.pred.at(y, x) = 1;
  e.pred.at(0, 0) = e.pred.at(1, 0) = 1;
  for (int y = 0; y < 3; ++y)
    for (int x = 1; x < 3; ++x) e.truth.at(y, x) = 1;
  e.truth.at(0, 0) = e.truth.at(1, 0) = e.truth.at(2, 0) = 1;
  return e;
}

inline geometry::FrameMatch match_frames(std::span<const geometry::KeypointSet> a,
                                         std::span<const geometry::KeypointSet> b) {
  geometry::FrameMatch best{0, 0, std::numeric_limits<double>::infinity()};
  for (std::size_t ia = 0; ia < a.size(); ++ia)
    for (std::size_t ib = 0; ib < b.size(); ++ib) {
      double d = 0;
      int n = 0;
      for (auto j : geometry::joints_in(geometry::JointSubset::above_shoulders)) {
        if (!a[ia][j].valid || !b[ib][j].valid) continue;
        const double dx = a[ia][j].x - b[ib][j].x, dy = a[ia][j].y - b[ib][j].y;
        d += dx * dx + dy * dy;
        ++n;
      }
      if (n == 0) continue;
      d /= n;
      if (d < best.distance) best = {ia, ib, d};
    }
  return best;
}

inline geometry::KeypointSet random_skeleton(Rng& rng, double invalid_rate = 0.0) {
  geometry::KeypointSet k;
  for (auto& j : k.joints) j = {rng.uniform(0, 128), rng.uniform(0, 128), rng.uniform() >= invalid_rate};
  return k;
}

inline geometry::Homography random_homography(Rng& rng) {
  return geometry::Homography({1 + rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-20, 20),
                               rng.uniform(-0.2, 0.2), 1 + rng.uniform(-0.2, 0.2), rng.uniform(-20, 20),
                               rng.uniform(-5e-4, 5e-4), rng.uniform(-5e-4, 5e-4), 1.0});
}

inline std::size_t count(const Mask& m) {
  std::size_t n = 0;
  for (double v : m.values()) n += v > 0.5;
  return n;
}

inline bool superset(const Mask& big, const Mask& small) {
  for (int y = 0; y < big.height(); ++y)
    for (int x = 0; x < big.width(); ++x)
      if (small(y, x) > 0.5 && big(y, x) <= 0.5) return false;
  return true;
}

struct SweepResult {
  int checked = 0;
  int skipped = 0;  // figure off canvas, or sleeve already past the hand
  int width_failures = 0;
  int sleeve_failures = 0;
  int nesting_failures = 0;

  bool passed() const { return width_failures == 0 && sleeve_failures == 0 && nesting_failures == 0; }
};

/// For n renderable (body, pose, garment, size) draws: widening the body
/// must add garment pixels, lengthening the sleeve must add sleeve pixels,
/// and a componentwise-larger size must render a superset. Steps are at
/// least 1.5 px so every change is visible on the pixel grid.
inline SweepResult size_sweep(int n, std::uint64_t seed) {
  using namespace synth;
  Rng rng(seed);
  SweepResult r;
  while (r.checked < n) {
    const int garment = static_cast<int>(rng.below(12));
    const BodyConfig body = sample_body(rng.next(), static_cast<int>(rng.below(50)), static_cast<int>(rng.below(4)));
    const SizeVector base = garment_size(garment, kSizeLabels[rng.below(4)]);
    SizeVector wider = base, longer = base, bigger = base;
    wider.body_width += body.mm_per_pixel * rng.uniform(3.0, 12.0);
    longer.sleeve_length += body.mm_per_pixel * rng.uniform(1.5, 8.0);
    for (double* f : {&bigger.body_length_back, &bigger.sleeve_length, &bigger.shoulder_width, &bigger.body_width,
                      &bigger.neck_size})
      *f *= 1.0 + rng.uniform(0.0, 0.15);
    double arm = std::numeric_limits<double>::infinity();
    for (bool left : {true, false}) {
      const auto p = arm_path(body, left);
      double len = 0;
      for (int i = 0; i < 3; ++i) len += std::hypot(p[i + 1].x - p[i].x, p[i + 1].y - p[i].y);
      arm = std::min(arm, len);
    }
    if (longer.sleeve_length / body.mm_per_pixel >= arm) {
      ++r.skipped;
      continue;
    }
    try {
      const Rendering r0 = render_person(body, base, garment);
      const Rendering rw = render_person(body, wider, garment);
      const Rendering rs = render_person(body, longer, garment);
      const Rendering rb = render_person(body, bigger, garment);
      r.width_failures += !(count(rw.mask) > count(r0.mask));
      r.sleeve_failures += !(count(rs.sleeves) > count(r0.sleeves));
      r.nesting_failures += !superset(rb.mask, r0.mask) || !superset(rw.mask, r0.mask) || !superset(rs.mask, r0.mask);
      ++r.checked;
    } catch (const DataError&) {
      ++r.skipped;
    }
  }
  return r;
}

}  // namespace sizefit::oracle
