#include <cmath>

#include "doctest.h"

#include "sizefit/errors.hpp"
#include "sizefit/metrics.hpp"
#include "sizefit/rng.hpp"

#include "oracles.hpp"

using namespace sizefit;
using metrics::SemMode;

using oracle::random_parts;
using oracle::random_soft_mask;

TEST_CASE("sem matches the per-pixel oracle on random soft masks") { CHECK(oracle::sem_sweep(1000, 31) <= 1e-12); }

TEST_CASE("hand example on a 4x4 canvas") {
  const auto [md, mg, parts] = oracle::hand_example();
  for (auto mode : {SemMode::soft, SemMode::binary}) {
    const auto r = metrics::sem(md, parts, mg, parts, mode);
    CHECK(r.t_minus == 0.125);
    CHECK(r.s_minus == 0.0625);
    CHECK(r.sem == doctest::Approx(0.08333).epsilon(1e-4));
    CHECK(r.sem == 2 * 0.125 * 0.0625 / 0.1875);
    CHECK(r.torso_area_pred == 4);
    CHECK(r.sleeve_area_gt == 3);
  }
}

TEST_CASE("sem properties") {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const Mask a = random_soft_mask(8, 8, rng), b = random_soft_mask(8, 8, rng);
    const PartLabelMap pa = random_parts(8, 8, rng), pb = random_parts(8, 8, rng);
    const auto ab = metrics::sem(a, pa, b, pb);
    const auto ba = metrics::sem(b, pb, a, pa);
    CHECK(metrics::sem(a, pa, a, pa).sem == 0.0);
    CHECK(ab.sem == doctest::Approx(ba.sem).epsilon(1e-14));
    CHECK(ab.sem >= 0.0);
    CHECK(ab.sem <= std::max(ab.t_minus, ab.s_minus) + 1e-15);
    CHECK(ab.sem >= std::min(ab.t_minus, ab.s_minus) - 1e-15);
  }
  CHECK(metrics::harmonic_mean(0, 0) == 0);
  CHECK(metrics::harmonic_mean(0.3, 0) == 0);
}

TEST_CASE("binary mode thresholds before summing") {
  PartLabelMap parts(1, 2, PartLabel::torso);
  const Mask md(1, 2, std::vector<double>{0.4, 0.6});
  const Mask mg(1, 2, std::vector<double>{1.0, 1.0});
  CHECK(metrics::sem(md, parts, mg, parts, SemMode::soft).t_minus == doctest::Approx(0.5));
  CHECK(metrics::sem(md, parts, mg, parts, SemMode::binary).t_minus == doctest::Approx(0.5));
  const Mask md2(1, 2, std::vector<double>{0.45, 0.45});
  CHECK(metrics::sem(md2, parts, mg, parts, SemMode::soft).t_minus == doctest::Approx(0.55));
  CHECK(metrics::sem(md2, parts, mg, parts, SemMode::binary).t_minus == doctest::Approx(1.0));
}

TEST_CASE("split_torso_sleeves partitions the mask") {
  Rng rng(5);
  const Mask m = random_soft_mask(6, 6, rng);
  const PartLabelMap p = random_parts(6, 6, rng);
  const auto split = metrics::split_torso_sleeves(m, p);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) CHECK(split.torso(y, x) + split.sleeves(y, x) == doctest::Approx(m(y, x)));
}

TEST_CASE("sem rejects mismatched shapes") {
  CHECK_THROWS_AS(metrics::sem(Mask(2, 2), PartLabelMap(2, 2), Mask(2, 3), PartLabelMap(2, 3)), ShapeError);
}

TEST_CASE("iou") {
  const Mask a(1, 4, std::vector<double>{1, 1, 0, 0});
  const Mask b(1, 4, std::vector<double>{0, 1, 1, 0});
  CHECK(metrics::iou(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK(metrics::iou(a, a) == 1.0);
  CHECK(metrics::iou(Mask(2, 2), Mask(2, 2)) == 1.0);
}

TEST_CASE("summaries use the population deviation") {
  const auto s = metrics::summarize({1, 2, 3, 4});
  CHECK(s.mean == 2.5);
  CHECK(s.stddev == doctest::Approx(std::sqrt(1.25)));
  CHECK(s.count == 4);
  CHECK(metrics::summarize({}).count == 0);
}
