#include "sabone/losses.hpp"

#include "sabone/error.hpp"

namespace sabone {

namespace {

void check_same(const torch::Tensor& p, const torch::Tensor& g) {
    if (p.sizes() != g.sizes()) throw shape_error("prediction and target shapes differ");
}

}  // namespace

torch::Tensor tversky_loss(const torch::Tensor& p, const torch::Tensor& g, double alpha, double beta, double eps) {
    check_same(p, g);
    auto tp = (p * g).sum();
    auto fp = (p * (1 - g)).sum();
    auto fn = ((1 - p) * g).sum();
    return 1 - (tp + eps) / (tp + alpha * fp + beta * fn + eps);
}

torch::Tensor soft_dice_loss(const torch::Tensor& p, const torch::Tensor& g, double eps) {
    check_same(p, g);
    auto tp = (p * g).sum();
    return 1 - (tp + eps) / ((p.sum() + g.sum()) / 2 + eps);
}

torch::Tensor squared_dice_loss(const torch::Tensor& p, const torch::Tensor& g, double eps) {
    check_same(p, g);
    if (p.dim() < 1) throw shape_error("squared Dice expects a batch dimension");
    auto pf = p.flatten(1), gf = g.flatten(1);
    auto num = 2 * (pf * gf).sum(1) + eps;
    auto den = pf.pow(2).sum(1) + gf.pow(2).sum(1) + eps;
    return (1 - num / den).mean();
}

LossParts loss_3d(const torch::Tensor& p, const torch::Tensor& g, double alpha, double beta) {
    check_same(p, g);
    auto pc = p.clamp(1e-6, 1 - 1e-6);
    LossParts out;
    out.ce = -(g * torch::log(pc) + (1 - g) * torch::log(1 - pc)).mean();
    out.overlap = tversky_loss(p, g, alpha, beta);
    out.total = out.ce + out.overlap;
    return out;
}

LossParts loss_2d(const torch::Tensor& logits, const torch::Tensor& target) {
    if (logits.dim() != 4 || logits.size(1) != 2) throw shape_error("2D loss expects (B, 2, H, W) logits");
    if (target.dim() != 3 || target.size(0) != logits.size(0) || target.size(1) != logits.size(2) ||
        target.size(2) != logits.size(3))
        throw shape_error("2D loss target must be (B, H, W) matching the logits");
    LossParts out;
    out.ce = torch::nn::functional::cross_entropy(logits, target.to(torch::kLong));
    auto bone = torch::softmax(logits, 1).select(1, 1);
    out.overlap = squared_dice_loss(bone, target.to(bone.dtype()));
    out.total = out.ce + out.overlap;
    return out;
}

}  // namespace sabone
