#pragma once

// Training objectives for the mask deformation network. Every loss is
// composed from tape primitives, so gradients come from the autodiff
// engine rather than hand-written rules.

#include <optional>
#include <string>

#include "sizefit/tensor.hpp"

namespace sizefit::losses {

using tensor::Tensor;
using tensor::Var;

inline constexpr double kBceEpsilon = 1e-7;
inline constexpr double kDiceSmooth = 1.0;
inline constexpr double kMaxPositiveWeight = 100.0;

enum class MaskLoss { wbce, bce, dice };
enum class ResidualLoss { dice, mae, mse };

std::string to_string(MaskLoss m);
std::string to_string(ResidualLoss r);
MaskLoss mask_loss_from_string(const std::string& s);
ResidualLoss residual_loss_from_string(const std::string& s);

struct LossWeights {
  double lambda_w = 1.0;
  double lambda_d = 1.0;
  double lambda_a = 0.1;
};

/// UsageError on a negative or non-finite weight, or when all are zero.
void validate(const LossWeights& w);

/// clamp(#neg / #pos, 1, 100) where positives are target > 0.5.
double positive_weight(const Tensor& target);

/// mean of -[w t log p + (1 - t) log(1 - p)] with p clamped to
/// [1e-7, 1 - 1e-7] and w = positive_weight(target).
Var weighted_bce(Var pred, const Tensor& target);
/// Same with w = 1.
Var bce(Var pred, const Tensor& target);

/// 1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1) over masks.
Var mask_dice(Var pred, Var target);

/// Residuals split into growth relu(r) and shrink relu(-r); soft Dice per
/// channel, averaged over the two.
Var residual_dice(Var pred_res, Var target_res);
Var residual_mae(Var pred_res, Var target_res);
Var residual_mse(Var pred_res, Var target_res);

/// softplus(-logit_fake).
Var adversarial_generator(Var logit_fake);
/// softplus(-logit_real) + softplus(logit_fake).
Var adversarial_discriminator(Var logit_real, Var logit_fake);

struct LossConfig {
  LossWeights weights;
  MaskLoss mask_loss = MaskLoss::wbce;
  ResidualLoss residual_loss = ResidualLoss::dice;
  bool use_adversarial = true;
};

struct LossTerms {
  Var mask;
  Var residual;
  Var adversarial;  // invalid when not used
  Var total;
};

/// lambda_w * mask + lambda_d * residual + lambda_a * adversarial. Terms
/// with zero weight are left out of the sum entirely. d_logit_fake is
/// required when the adversarial term is active.
LossTerms total_loss(Var m_d, const Tensor& m_g, Var rm_d, const Tensor& rm_g, std::optional<Var> d_logit_fake,
                     const LossConfig& cfg);

}  // namespace sizefit::losses
