#pragma once

#include <torch/torch.h>

#include <array>
#include <vector>

#include "mres/pyramid.hpp"

namespace mres {

// Stack the class planes of a batch of masks into an int64 [B,H,W] tensor.
torch::Tensor mask_classes_tensor(const std::vector<LabelMask>& masks);

// Stack the annotated planes into a bool [B,H,W] tensor.
torch::Tensor mask_annotated_tensor(const std::vector<LabelMask>& masks);

// Per-class weights from the annotated-pixel class distribution of one batch:
// w_c = 1 - n_c / N, rescaled so the weights average to 1. A batch with zero
// annotated pixels is an error (the caller must not train on it).
std::array<double, kNumClasses> dynamic_class_weights(const torch::Tensor& classes,
                                                      const torch::Tensor& annotated);

inline constexpr std::array<double, kNumClasses> kUniformClassWeights = {1.0, 1.0, 1.0};

// Weighted cross entropy over annotated pixels: softmax over the class dim,
// predicted probability of the true class clipped below at 1e-7, each pixel's
// -log p weighted by its class weight, averaged over annotated pixels.
// Differentiable; dtype follows `logits` (use float64 for gradient checks).
torch::Tensor weighted_ce(const torch::Tensor& logits, const torch::Tensor& classes,
                          const torch::Tensor& annotated, const std::array<double, kNumClasses>& w);

// Weighted dice loss: per sample and class, dice = (2*sum(p*t) + eps) /
// (sum(p) + sum(t) + eps) over that sample's annotated pixels (eps = 1e-6);
// loss = mean over samples of sum_c w_c * (1 - dice_c) / C. Samples without
// annotated pixels contribute dice = 1 (zero loss).
torch::Tensor weighted_dice_loss(const torch::Tensor& logits, const torch::Tensor& classes,
                                 const torch::Tensor& annotated,
                                 const std::array<double, kNumClasses>& w);

// Head weighting for the three supervised outputs: total = 0.5 * high +
// 0.5 * low + 1.0 * fused, where each head term is its wce + wdl.
struct HeadWeights {
    double high = 0.5;
    double low = 0.5;
    double fused = 1.0;
};

torch::Tensor total_loss(const torch::Tensor& high_loss, const torch::Tensor& low_loss,
                         const torch::Tensor& fused_loss, const HeadWeights& hw = {});

}  // namespace mres
