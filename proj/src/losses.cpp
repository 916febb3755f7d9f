#include "sizefit/losses.hpp"

#include <algorithm>
#include <cmath>

#include "sizefit/errors.hpp"

namespace sizefit::losses {

using namespace tensor;

std::string to_string(MaskLoss m) {
  switch (m) {
    case MaskLoss::wbce: return "wbce";
    case MaskLoss::bce: return "bce";
    case MaskLoss::dice: return "dice";
  }
  return "?";
}

std::string to_string(ResidualLoss r) {
  switch (r) {
    case ResidualLoss::dice: return "dice";
    case ResidualLoss::mae: return "mae";
    case ResidualLoss::mse: return "mse";
  }
  return "?";
}

MaskLoss mask_loss_from_string(const std::string& s) {
  for (MaskLoss m : {MaskLoss::wbce, MaskLoss::bce, MaskLoss::dice})
    if (to_string(m) == s) return m;
  throw UsageError("mask_loss must be one of wbce, bce, dice (got '" + s + "')");
}

ResidualLoss residual_loss_from_string(const std::string& s) {
  for (ResidualLoss r : {ResidualLoss::dice, ResidualLoss::mae, ResidualLoss::mse})
    if (to_string(r) == s) return r;
  throw UsageError("residual_loss must be one of dice, mae, mse (got '" + s + "')");
}

void validate(const LossWeights& w) {
  for (double v : {w.lambda_w, w.lambda_d, w.lambda_a})
    if (!std::isfinite(v) || v < 0.0) throw UsageError("loss weights must be finite and non-negative");
  if (w.lambda_w == 0.0 && w.lambda_d == 0.0 && w.lambda_a == 0.0)
    throw UsageError("at least one loss weight must be positive");
}

double positive_weight(const Tensor& target) {
  std::size_t pos = 0;
  for (double t : target.values()) pos += t > 0.5;
  const std::size_t neg = target.size() - pos;
  if (pos == 0) return kMaxPositiveWeight;
  return std::clamp(static_cast<double>(neg) / static_cast<double>(pos), 1.0, kMaxPositiveWeight);
}

namespace {

Var bce_with_weight(Var pred, const Tensor& target, double w) {
  if (pred.shape() != target.shape())
    throw ShapeError("bce: prediction " + tensor::to_string(pred.shape()) + " vs target " + tensor::to_string(target.shape()));
  Tape& tape = pred.tape();
  Tensor pos_w(target.shape()), neg_w(target.shape());
  for (std::size_t i = 0; i < target.size(); ++i) {
    pos_w[i] = w * target[i];
    neg_w[i] = 1.0 - target[i];
  }
  const Var p = clamp(pred, kBceEpsilon, 1.0 - kBceEpsilon);
  const Var log_p = log(p);
  const Var log_q = log(add_scalar(neg(p), 1.0));
  return neg(mean(add(mul(tape.constant(std::move(pos_w)), log_p), mul(tape.constant(std::move(neg_w)), log_q))));
}

Var soft_dice(Var a, Var b) {
  const Var inter = sum(mul(a, b));
  const Var num = add_scalar(scale(inter, 2.0), kDiceSmooth);
  const Var den = add_scalar(add(sum(a), sum(b)), kDiceSmooth);
  return add_scalar(neg(div(num, den)), 1.0);
}

void require_same(Var a, Var b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": " + tensor::to_string(a.shape()) + " vs " + tensor::to_string(b.shape()));
}

}  // namespace

Var weighted_bce(Var pred, const Tensor& target) { return bce_with_weight(pred, target, positive_weight(target)); }

Var bce(Var pred, const Tensor& target) { return bce_with_weight(pred, target, 1.0); }

Var mask_dice(Var pred, Var target) {
  require_same(pred, target, "mask_dice");
  return soft_dice(pred, target);
}

Var residual_dice(Var pred_res, Var target_res) {
  require_same(pred_res, target_res, "residual_dice");
  const Var growth = soft_dice(relu(pred_res), relu(target_res));
  const Var shrink = soft_dice(relu(neg(pred_res)), relu(neg(target_res)));
  return scale(add(growth, shrink), 0.5);
}

Var residual_mae(Var pred_res, Var target_res) {
  require_same(pred_res, target_res, "residual_mae");
  return mean(abs(sub(pred_res, target_res)));
}

Var residual_mse(Var pred_res, Var target_res) {
  require_same(pred_res, target_res, "residual_mse");
  return mean(square(sub(pred_res, target_res)));
}

Var adversarial_generator(Var logit_fake) { return softplus(neg(logit_fake)); }

Var adversarial_discriminator(Var logit_real, Var logit_fake) {
  return add(softplus(neg(logit_real)), softplus(logit_fake));
}

LossTerms total_loss(Var m_d, const Tensor& m_g_in, Var rm_d, const Tensor& rm_g_in, std::optional<Var> d_logit_fake,
                     const LossConfig& cfg) {
  validate(cfg.weights);
  Tape& tape = m_d.tape();
  // The targets may be values owned by this tape, which move when new
  // constants are recorded.
  const Tensor m_g = m_g_in, rm_g = rm_g_in;
  LossTerms t;
  switch (cfg.mask_loss) {
    case MaskLoss::wbce: t.mask = weighted_bce(m_d, m_g); break;
    case MaskLoss::bce: t.mask = bce(m_d, m_g); break;
    case MaskLoss::dice: t.mask = mask_dice(m_d, tape.constant(m_g)); break;
  }
  const Var target_res = tape.constant(rm_g);
  switch (cfg.residual_loss) {
    case ResidualLoss::dice: t.residual = residual_dice(rm_d, target_res); break;
    case ResidualLoss::mae: t.residual = residual_mae(rm_d, target_res); break;
    case ResidualLoss::mse: t.residual = residual_mse(rm_d, target_res); break;
  }
  const bool adversarial = cfg.use_adversarial && cfg.weights.lambda_a > 0.0;
  if (adversarial) {
    if (!d_logit_fake) throw UsageError("adversarial loss enabled but no discriminator logit given");
    t.adversarial = adversarial_generator(*d_logit_fake);
  }

  std::optional<Var> acc;
  auto push = [&acc](Var term, double w) {
    if (w == 0.0) return;
    const Var v = w == 1.0 ? term : scale(term, w);
    acc = acc ? add(*acc, v) : v;
  };
  push(t.mask, cfg.weights.lambda_w);
  push(t.residual, cfg.weights.lambda_d);
  if (adversarial) push(t.adversarial, cfg.weights.lambda_a);
  if (!acc) throw UsageError("every active loss term has zero weight");
  t.total = *acc;
  return t;
}

}  // namespace sizefit::losses
