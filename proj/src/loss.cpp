#include "mres/loss.hpp"

namespace mres {

namespace {

void check_mask_batch(const std::vector<LabelMask>& masks) {
    MRES_CHECK(!masks.empty(), "empty mask batch");
    for (const auto& m : masks) {
        MRES_CHECK(m.classes.size() == masks[0].classes.size(), "mask batch with mixed sizes");
        MRES_CHECK(m.annotated.size() == m.classes.size(), "mask with mismatched planes");
    }
}

}  // namespace

torch::Tensor mask_classes_tensor(const std::vector<LabelMask>& masks) {
    check_mask_batch(masks);
    const int64_t b = static_cast<int64_t>(masks.size());
    const int64_t h = masks[0].classes.rows, w = masks[0].classes.cols;
    torch::Tensor out = torch::empty({b, h, w}, torch::kInt64);
    for (int64_t i = 0; i < b; ++i) {
        const cv::Mat1b& cls = masks[static_cast<size_t>(i)].classes;
        torch::Tensor plane = out[i];
        auto acc = plane.accessor<int64_t, 2>();
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) acc[y][x] = cls(static_cast<int>(y), static_cast<int>(x));
    }
    return out;
}

torch::Tensor mask_annotated_tensor(const std::vector<LabelMask>& masks) {
    check_mask_batch(masks);
    const int64_t b = static_cast<int64_t>(masks.size());
    const int64_t h = masks[0].annotated.rows, w = masks[0].annotated.cols;
    torch::Tensor out = torch::empty({b, h, w}, torch::kBool);
    for (int64_t i = 0; i < b; ++i) {
        const cv::Mat1b& ann = masks[static_cast<size_t>(i)].annotated;
        torch::Tensor plane = out[i];
        auto acc = plane.accessor<bool, 2>();
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) acc[y][x] = ann(static_cast<int>(y), static_cast<int>(x)) != 0;
    }
    return out;
}

std::array<double, kNumClasses> dynamic_class_weights(const torch::Tensor& classes,
                                                      const torch::Tensor& annotated) {
    const torch::Tensor ann = annotated.to(torch::kBool);
    const int64_t total = ann.sum().item<int64_t>();
    if (total == 0) throw Error("dynamic class weights undefined: batch has no annotated pixels");
    std::array<double, kNumClasses> w{};
    double sum = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
        const int64_t n = ((classes == c) & ann).sum().item<int64_t>();
        w[static_cast<size_t>(c)] = 1.0 - static_cast<double>(n) / static_cast<double>(total);
        sum += w[static_cast<size_t>(c)];
    }
    // Rescale to mean 1 so loss magnitude is comparable to uniform weighting.
    MRES_CHECK(sum > 0.0, "degenerate class weights");
    for (auto& v : w) v *= kNumClasses / sum;
    return w;
}

namespace {

torch::Tensor weight_tensor(const std::array<double, kNumClasses>& w, const torch::Tensor& like) {
    torch::Tensor t = torch::empty({kNumClasses}, torch::TensorOptions().dtype(like.dtype()));
    for (int c = 0; c < kNumClasses; ++c) t[c] = w[static_cast<size_t>(c)];
    return t.to(like.device());
}

}  // namespace

torch::Tensor weighted_ce(const torch::Tensor& logits, const torch::Tensor& classes,
                          const torch::Tensor& annotated,
                          const std::array<double, kNumClasses>& w) {
    MRES_CHECK(logits.dim() == 4 && logits.size(1) == kNumClasses, "logits must be [B,C,H,W]");
    const torch::Tensor probs = torch::softmax(logits, 1);
    const torch::Tensor p_true =
        probs.gather(1, classes.unsqueeze(1)).squeeze(1).clamp_min(1e-7);  // [B,H,W]
    const torch::Tensor wt = weight_tensor(w, logits);
    const torch::Tensor px_w = wt.index_select(0, classes.reshape(-1)).reshape(classes.sizes());
    const torch::Tensor ann = annotated.to(logits.dtype());
    const torch::Tensor denom = ann.sum();
    if (denom.item<double>() == 0.0) throw Error("weighted ce over zero annotated pixels");
    return -(px_w * torch::log(p_true) * ann).sum() / denom;
}

torch::Tensor weighted_dice_loss(const torch::Tensor& logits, const torch::Tensor& classes,
                                 const torch::Tensor& annotated,
                                 const std::array<double, kNumClasses>& w) {
    MRES_CHECK(logits.dim() == 4 && logits.size(1) == kNumClasses, "logits must be [B,C,H,W]");
    const double eps = 1e-6;
    const torch::Tensor probs = torch::softmax(logits, 1);
    const torch::Tensor ann = annotated.to(logits.dtype()).unsqueeze(1);         // [B,1,H,W]
    const torch::Tensor one_hot =
        torch::one_hot(classes, kNumClasses).permute({0, 3, 1, 2}).to(logits.dtype());
    const torch::Tensor p = probs * ann, t = one_hot * ann;
    const torch::Tensor num = 2.0 * (p * t).sum({2, 3}) + eps;   // [B,C]
    const torch::Tensor den = p.sum({2, 3}) + t.sum({2, 3}) + eps;
    const torch::Tensor dice = num / den;
    const torch::Tensor wt = weight_tensor(w, logits).unsqueeze(0);  // [1,C]
    return ((1.0 - dice) * wt).sum(1).div(kNumClasses).mean();
}

torch::Tensor total_loss(const torch::Tensor& high_loss, const torch::Tensor& low_loss,
                         const torch::Tensor& fused_loss, const HeadWeights& hw) {
    return hw.high * high_loss + hw.low * low_loss + hw.fused * fused_loss;
}

}  // namespace mres
