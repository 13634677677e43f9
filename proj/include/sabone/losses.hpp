#pragma once

#include <torch/torch.h>

namespace sabone {

inline constexpr double kSmooth = 1e-5;

/// 1 - (TP + eps) / (TP + alpha * FP + beta * FN + eps), summed over all
/// elements, with TP = sum p*g, FP = sum p*(1-g), FN = sum (1-p)*g.
torch::Tensor tversky_loss(const torch::Tensor& p, const torch::Tensor& g, double alpha = 0.7, double beta = 0.3,
                           double eps = kSmooth);

/// Linear soft Dice, 1 - (TP + eps) / ((sum p + sum g) / 2 + eps). Shares
/// the Tversky smoothing so tversky_loss(p, g, 0.5, 0.5) is the same value.
torch::Tensor soft_dice_loss(const torch::Tensor& p, const torch::Tensor& g, double eps = kSmooth);

/// Squared-denominator soft Dice per sample, averaged over the batch:
/// 1 - (2 sum p*g + eps) / (sum p^2 + sum g^2 + eps). p, g: (B, ...).
torch::Tensor squared_dice_loss(const torch::Tensor& p, const torch::Tensor& g, double eps = kSmooth);

struct LossParts {
    torch::Tensor total;
    torch::Tensor ce;
    torch::Tensor overlap;  ///< Tversky (3D) or Dice (2D) term
};

/// Binary cross-entropy on probabilities clamped to [1e-6, 1 - 1e-6] plus
/// Tversky(0.7, 0.3).
LossParts loss_3d(const torch::Tensor& p, const torch::Tensor& g, double alpha = 0.7, double beta = 0.3);

/// logits: (B, 2, H, W); target: (B, H, W) in {0,1}. Two-class
/// cross-entropy (pixel mean) plus squared soft Dice on the bone channel.
LossParts loss_2d(const torch::Tensor& logits, const torch::Tensor& target);

}  // namespace sabone
