#include <cmath>

#include "doctest.h"

#include "sizefit/errors.hpp"
#include "sizefit/gradcheck.hpp"
#include "sizefit/rng.hpp"
#include "sizefit/tensor.hpp"

using namespace sizefit;
using namespace sizefit::tensor;

namespace {

Tensor random_tensor(Shape s, Rng& rng) {
  Tensor t(std::move(s));
  for (double& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Direct seven-loop cross-correlation.
Tensor naive_conv(const Tensor& x, const Tensor& k, int stride, int pad) {
  const long C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const long O = k.dim(0), KH = k.dim(2), KW = k.dim(3);
  const long OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  Tensor out({static_cast<std::size_t>(O), static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  for (long o = 0; o < O; ++o)
    for (long oy = 0; oy < OH; ++oy)
      for (long ox = 0; ox < OW; ++ox) {
        double s = 0;
        for (long c = 0; c < C; ++c)
          for (long ky = 0; ky < KH; ++ky)
            for (long kx = 0; kx < KW; ++kx) {
              const long iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              s += x.at(c, iy, ix) * k[((o * C + c) * KH + ky) * KW + kx];
            }
        out.at(o, oy, ox) = s;
      }
  return out;
}

// Scatter form of the transposed convolution: every input pixel stamps the
// kernel into the output.
Tensor naive_conv_transpose(const Tensor& x, const Tensor& k, int stride, int pad) {
  const long C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const long O = k.dim(1), KH = k.dim(2), KW = k.dim(3);
  const long OH = (H - 1) * stride - 2 * pad + KH, OW = (W - 1) * stride - 2 * pad + KW;
  Tensor out({static_cast<std::size_t>(O), static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  for (long c = 0; c < C; ++c)
    for (long y = 0; y < H; ++y)
      for (long x0 = 0; x0 < W; ++x0)
        for (long o = 0; o < O; ++o)
          for (long ky = 0; ky < KH; ++ky)
            for (long kx = 0; kx < KW; ++kx) {
              const long oy = y * stride - pad + ky, ox = x0 * stride - pad + kx;
              if (oy < 0 || oy >= OH || ox < 0 || ox >= OW) continue;
              out.at(o, oy, ox) += x.at(c, y, x0) * k[((c * O + o) * KH + ky) * KW + kx];
            }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("tensor construction rejects bad shapes") {
  CHECK_THROWS_AS(Tensor({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
  CHECK_THROWS_AS(Tensor({2}).item(), ShapeError);
  CHECK(Tensor::scalar(4.5).item() == 4.5);
  CHECK_THROWS_AS(Tensor({2, 3}).reshaped({4}), ShapeError);
}

TEST_CASE("elementwise broadcasting rules") {
  Tape t;
  const Var a = t.leaf(Tensor({2, 2, 2}, 1.0));
  const Var v = t.leaf(Tensor({2}, std::vector<double>{2.0, 3.0}));
  const Var s = t.leaf(Tensor::scalar(5.0));
  const Tensor prod = mul(a, v).value();
  CHECK(prod.at(0, 1, 1) == 2.0);
  CHECK(prod.at(1, 0, 0) == 3.0);
  CHECK(add(s, a).value().at(1, 1, 0) == 6.0);
  CHECK_THROWS_AS(add(a, t.leaf(Tensor({3}))), ShapeError);
  CHECK_THROWS_AS(add(a, t.leaf(Tensor({2, 2}))), ShapeError);

  Tape other;
  CHECK_THROWS(add(a, other.leaf(Tensor({2, 2, 2}))));
}

TEST_CASE("conv2d matches a direct loop on random geometries") {
  Rng rng(11);
  for (int i = 0; i < 40; ++i) {
    const std::size_t c = 1 + rng.below(3), o = 1 + rng.below(4), k = 1 + rng.below(4);
    const int stride = 1 + static_cast<int>(rng.below(2)), pad = static_cast<int>(rng.below(2));
    const std::size_t h = k + rng.below(6), w = k + rng.below(6);
    const Tensor x = random_tensor({c, h, w}, rng), kern = random_tensor({o, c, k, k}, rng);
    Tape t;
    const Tensor got = conv2d(t.leaf(x), t.leaf(kern), stride, pad).value();
    CHECK(max_abs_diff(got, naive_conv(x, kern, stride, pad)) < 1e-12);
  }
}

TEST_CASE("conv_transpose2d matches the scatter loop and is the adjoint of conv2d") {
  Rng rng(12);
  for (int i = 0; i < 40; ++i) {
    const std::size_t c = 1 + rng.below(3), o = 1 + rng.below(3), k = 2 + rng.below(3);
    const int stride = 1 + static_cast<int>(rng.below(2)), pad = static_cast<int>(rng.below(2));
    const std::size_t h = 2 + rng.below(4), w = 2 + rng.below(4);
    const Tensor x = random_tensor({c, h, w}, rng), kern = random_tensor({c, o, k, k}, rng);
    Tape t;
    const Tensor y = conv_transpose2d(t.leaf(x), t.leaf(kern), stride, pad).value();
    CHECK(max_abs_diff(y, naive_conv_transpose(x, kern, stride, pad)) < 1e-12);

    // <convT(x), z> == <x, conv(z)> with the kernel reinterpreted as Cin x Cout.
    const Tensor z = random_tensor(y.shape(), rng);
    Tensor kc({c, o, k, k});
    for (std::size_t j = 0; j < kern.size(); ++j) kc[j] = kern[j];
    const Tensor cz = naive_conv(z, kc, stride, pad);
    if (cz.shape() != x.shape()) continue;
    double lhs = 0, rhs = 0;
    for (std::size_t j = 0; j < y.size(); ++j) lhs += y[j] * z[j];
    for (std::size_t j = 0; j < x.size(); ++j) rhs += x[j] * cz[j];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("conv output extent and kernel errors") {
  CHECK(conv_output_extent(128, 3, 2, 1) == 64);
  CHECK(conv_output_extent(5, 3, 1, 0) == 3);
  CHECK_THROWS_AS(conv_output_extent(2, 5, 1, 0), ShapeError);
  Tape t;
  CHECK_THROWS_AS(conv2d(t.leaf(Tensor({2, 5, 5})), t.leaf(Tensor({1, 3, 3, 3})), 1, 0), ShapeError);
}

TEST_CASE("f32 GEMMs agree with f64 to single precision") {
  Rng rng(5);
  const Tensor x = random_tensor({3, 9, 9}, rng), k = random_tensor({4, 3, 3, 3}, rng);
  Tape t64;
  const Tensor ref = conv2d(t64.leaf(x), t64.leaf(k), 1, 1).value();
  set_compute_precision(Precision::f32);
  Tape t32;
  const Tensor low = conv2d(t32.leaf(x), t32.leaf(k), 1, 1).value();
  set_compute_precision(Precision::f64);
  CHECK(max_abs_diff(ref, low) < 1e-5);
  CHECK(max_abs_diff(ref, low) > 0.0);
}

TEST_CASE("backward accumulates through shared subexpressions") {
  Tape t;
  const Var x = t.leaf(Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}));
  const Var y = sum(add(mul(x, x), x));  // d/dx = 2x + 1
  t.backward(y);
  const Tensor g = t.grad(x);
  CHECK(g[0] == doctest::Approx(3.0));
  CHECK(g[1] == doctest::Approx(-3.0));
  CHECK(g[2] == doctest::Approx(2.0));
  CHECK_THROWS_AS(t.backward(x), UsageError);
}

TEST_CASE("non-finite values abort the op") {
  Tape t;
  const Var x = t.leaf(Tensor({2}, std::vector<double>{0.0, 1.0}));
  CHECK_THROWS_AS(log(x), NumericError);
}

TEST_CASE("finite-difference suite over every op, loss and network") {
  gradcheck::Options opt;
  opt.seed = 3;
  const auto report = gradcheck::run_suite(opt);
  CHECK(report.instances >= 100);
  for (const auto& c : report.cases) {
    INFO(c.name);
    CHECK(c.coords > 0);
    CHECK(c.max_rel_error < 1e-4);
  }
}

TEST_CASE("relative error has an absolute floor") {
  CHECK(gradcheck::relative_error(1.0, 1.0) == 0.0);
  CHECK(gradcheck::relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(gradcheck::relative_error(0.0, 1e-6) == doctest::Approx(1e-3));
}
