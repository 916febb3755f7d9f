#include <cmath>

#include "doctest.h"

#include "sizefit/errors.hpp"
#include "sizefit/losses.hpp"

using namespace sizefit;
using namespace sizefit::losses;
using tensor::Tape;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({1, 1, n}, std::move(v));
}

}  // namespace

TEST_CASE("positive weight is the clamped negative to positive ratio") {
  CHECK(positive_weight(vec({1, 0, 0, 0})) == 3.0);
  CHECK(positive_weight(vec({1, 1, 1, 0})) == 1.0);
  CHECK(positive_weight(vec({0, 0})) == kMaxPositiveWeight);
  std::vector<double> sparse(1000, 0.0);
  sparse[0] = 1.0;
  CHECK(positive_weight(vec(sparse)) == kMaxPositiveWeight);
}

TEST_CASE("bce hand values") {
  Tape t;
  const Var p = t.leaf(vec({0.8, 0.2}));
  CHECK(bce(p, vec({1, 0})).value().item() == doctest::Approx(-std::log(0.8)));
  // One positive, three negatives: the positive term is weighted by 3.
  const Var q = t.leaf(vec({0.5, 0.5, 0.5, 0.5}));
  CHECK(weighted_bce(q, vec({1, 0, 0, 0})).value().item() == doctest::Approx(6 * std::log(2.0) / 4));
  // Saturated predictions are clamped rather than producing infinities.
  const Var hard = t.leaf(vec({0.0, 1.0}));
  CHECK(bce(hard, vec({1, 0})).value().item() == doctest::Approx(-std::log(kBceEpsilon)).epsilon(1e-6));
  CHECK_THROWS_AS(bce(p, vec({1, 0, 0})), ShapeError);
}

TEST_CASE("dice hand values") {
  Tape t;
  const Var ones = t.leaf(vec({1, 1, 1, 1}));
  CHECK(mask_dice(ones, t.constant(vec({1, 1, 1, 1}))).value().item() == doctest::Approx(0.0));
  // 2*0 + 1 over 4 + 0 + 1.
  CHECK(mask_dice(ones, t.constant(vec({0, 0, 0, 0}))).value().item() == doctest::Approx(0.8));
}

TEST_CASE("residual dice treats growth and shrink separately") {
  Tape t;
  const Var target = t.constant(vec({1, -1, 0, 0}));
  CHECK(residual_dice(t.leaf(vec({1, -1, 0, 0})), target).value().item() == doctest::Approx(0.0));
  // Sign flipped: growth dice = 1 - 1/3, shrink dice = 1 - 1/3.
  CHECK(residual_dice(t.leaf(vec({-1, 1, 0, 0})), target).value().item() == doctest::Approx(2.0 / 3.0));
  // Zero prediction on a pure-growth target: growth 1 - 1/2, shrink 0.
  const Var growth_only = t.constant(vec({1, 0}));
  CHECK(residual_dice(t.leaf(vec({0, 0})), growth_only).value().item() == doctest::Approx(0.25));
}

TEST_CASE("residual mae and mse") {
  Tape t;
  const Var p = t.leaf(vec({0.5, -0.5}));
  const Var g = t.constant(vec({0.0, 0.5}));
  CHECK(residual_mae(p, g).value().item() == doctest::Approx(0.75));
  CHECK(residual_mse(p, g).value().item() == doctest::Approx(0.625));
}

TEST_CASE("adversarial terms") {
  Tape t;
  const Var zero = t.leaf(Tensor::scalar(0.0));
  CHECK(adversarial_generator(zero).value().item() == doctest::Approx(std::log(2.0)));
  CHECK(adversarial_discriminator(zero, zero).value().item() == doctest::Approx(2 * std::log(2.0)));
  const Var big = t.leaf(Tensor::scalar(40.0));
  CHECK(adversarial_generator(big).value().item() < 1e-15);
  CHECK(adversarial_discriminator(big, t.leaf(Tensor::scalar(-40.0))).value().item() < 1e-15);
}

TEST_CASE("total loss weighting") {
  const Tensor m_g = vec({1, 0, 1, 0}), rm_g = vec({0.5, 0, 0, -0.5});
  LossConfig cfg;
  cfg.use_adversarial = false;
  cfg.weights = {2.0, 3.0, 0.1};
  Tape t;
  const Var m_d = t.leaf(vec({0.7, 0.2, 0.6, 0.1}));
  const Var rm_d = t.leaf(vec({0.3, 0.1, 0.0, -0.2}));
  const LossTerms terms = total_loss(m_d, m_g, rm_d, rm_g, std::nullopt, cfg);
  CHECK(!terms.adversarial.valid());
  CHECK(terms.total.value().item() ==
        doctest::Approx(2 * terms.mask.value().item() + 3 * terms.residual.value().item()));

  cfg.use_adversarial = true;
  CHECK_THROWS_AS(total_loss(m_d, m_g, rm_d, rm_g, std::nullopt, cfg), UsageError);
  const Var logit = t.leaf(Tensor::scalar(0.3));
  const LossTerms adv = total_loss(m_d, m_g, rm_d, rm_g, logit, cfg);
  CHECK(adv.total.value().item() == doctest::Approx(2 * adv.mask.value().item() + 3 * adv.residual.value().item() +
                                                    0.1 * std::log1p(std::exp(-0.3))));

  // Straightforward extension: plain bce on the mask with no residual term.
  cfg = {};
  cfg.mask_loss = MaskLoss::bce;
  cfg.weights = {1.0, 0.0, 0.0};
  const LossTerms plain = total_loss(m_d, m_g, rm_d, rm_g, std::nullopt, cfg);
  CHECK(plain.total.value().item() == plain.mask.value().item());
}

TEST_CASE("targets owned by the same tape stay valid") {
  Tape t;
  const Var m_d = t.leaf(vec({0.7, 0.2}));
  const Var rm_d = t.leaf(vec({0.1, -0.1}));
  const Var m_g = t.constant(vec({1, 0}));
  const Var rm_g = t.constant(vec({0.2, 0}));
  LossConfig cfg;
  cfg.use_adversarial = false;
  for (int i = 0; i < 50; ++i) {
    const LossTerms terms = total_loss(m_d, m_g.value(), rm_d, rm_g.value(), std::nullopt, cfg);
    CHECK(std::isfinite(terms.total.value().item()));
  }
}

TEST_CASE("weight validation and names") {
  CHECK_THROWS_AS(validate(LossWeights{0, 0, 0}), UsageError);
  CHECK_THROWS_AS(validate(LossWeights{-1, 1, 0}), UsageError);
  CHECK_THROWS_AS(validate(LossWeights{NAN, 1, 0}), UsageError);
  for (auto m : {MaskLoss::wbce, MaskLoss::bce, MaskLoss::dice}) CHECK(mask_loss_from_string(to_string(m)) == m);
  for (auto r : {ResidualLoss::dice, ResidualLoss::mae, ResidualLoss::mse})
    CHECK(residual_loss_from_string(to_string(r)) == r);
  CHECK_THROWS_AS(mask_loss_from_string("focal"), UsageError);
}
