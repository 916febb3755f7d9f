#include "doctest.h"

#include "sizefit/errors.hpp"
#include "sizefit/maskops.hpp"
#include "sizefit/rng.hpp"

using namespace sizefit;

namespace {

Mask random_binary(int h, int w, Rng& rng, double p = 0.5) {
  Mask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x) = rng.uniform() < p ? 1.0 : 0.0;
  return m;
}

Mask random_soft(int h, int w, Rng& rng) {
  Mask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x) = rng.uniform();
  return m;
}

}  // namespace

TEST_CASE("residual round trip is exact on binary masks") {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const int h = 1 + static_cast<int>(rng.below(24)), w = 1 + static_cast<int>(rng.below(24));
    const Mask g = random_binary(h, w, rng, rng.uniform());
    const Mask r = random_binary(h, w, rng, rng.uniform());
    REQUIRE(apply_residual(r, residual_from(g, r)) == g);
  }
}

TEST_CASE("residual of soft masks stays within the signed range") {
  Rng rng(7);
  const Mask g = random_soft(9, 7, rng), r = random_soft(9, 7, rng);
  const ResidualMask rm = residual_from(g, r);
  for (double v : rm.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  const Mask back = apply_residual(r, rm);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(back.values()[i] == doctest::Approx(g.values()[i]).epsilon(1e-15));
}

TEST_CASE("apply_residual clamps") {
  Mask r(1, 3, std::vector<double>{0.2, 0.9, 0.0});
  ResidualMask rm(1, 3, std::vector<double>{-0.5, 0.5, 0.25});
  const Mask out = apply_residual(r, rm);
  CHECK(out(0, 0) == 0.0);
  CHECK(out(0, 1) == 1.0);
  CHECK(out(0, 2) == 0.25);
}

TEST_CASE("mask validation and shape checks") {
  CHECK_THROWS_AS(Mask(1, 2, std::vector<double>{0.5, 1.5}), DataError);
  CHECK_THROWS_AS(Mask(1, 2, std::vector<double>{0.5}), ShapeError);
  CHECK_THROWS_AS(ResidualMask(1, 1, std::vector<double>{-1.5}), DataError);
  CHECK_THROWS_AS(residual_from(Mask(2, 2), Mask(2, 3)), ShapeError);
  CHECK_THROWS_AS(binarize(Mask(2, 2), 0.0), UsageError);
  CHECK_THROWS_AS(binarize(Mask(2, 2), 1.0), UsageError);
}

TEST_CASE("binarize and area use a strict threshold") {
  Mask m(1, 4, std::vector<double>{0.5, 0.51, 0.49, 1.0});
  const Mask b = binarize(m);
  CHECK(b == Mask(1, 4, std::vector<double>{0.0, 1.0, 0.0, 1.0}));
  CHECK(area(m) == 2);
  CHECK(area(m, 0.495) == 3);
}

TEST_CASE("tensor conversions round trip") {
  Rng rng(3);
  const Mask m = random_soft(5, 6, rng);
  const auto t = m.to_tensor();
  CHECK(t.shape() == tensor::Shape{1, 5, 6});
  CHECK(Mask::from_tensor(t) == m);
  CHECK(Mask::from_tensor(t.reshaped({5, 6})) == m);
  CHECK_THROWS_AS(Mask::from_tensor(tensor::Tensor({2, 5, 6})), ShapeError);
}

TEST_CASE("composite blends person and cloth by the mask") {
  tensor::Tensor person({3, 1, 2}, 0.0), cloth({3, 1, 2}, 1.0);
  const Mask m(1, 2, std::vector<double>{0.25, 1.0});
  const auto out = composite_tryon(person, cloth, m);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(out.at(c, 0, 0) == 0.25);
    CHECK(out.at(c, 0, 1) == 1.0);
  }
}
