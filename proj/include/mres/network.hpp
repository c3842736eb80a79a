#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "mres/patch.hpp"

namespace mres {

// Size-scalable dual-branch UNet configuration. Grids shrink by 2 per encoder
// stage and channels grow by 2; the merge injects low-branch features into the
// high branch at encoder stage `merge_at` (default: the last, depth-1).
struct NetworkConfig {
    int depth = 4;           // encoder stages per branch
    int base_channels = 16;  // channels at stage 0
    LevelPair levels{};      // (H, L) resolution pairing
    int merge_at = -1;       // -1 resolves to depth - 1
    bool fusion = true;      // learn a fused output from both heads
    bool decoder_tap = true; // low-branch merge source: decoder (default) or encoder feature
    int num_classes = kNumClasses;

    int resolved_merge_at() const { return merge_at < 0 ? depth - 1 : merge_at; }
    void validate() const;
    std::string serialize() const;
    static NetworkConfig parse(const std::string& line);
};

// Two 3x3 conv + GroupNorm + ReLU rounds. GroupNorm (not BatchNorm) keeps the
// forward pass linear in the batch dimension, so gradient accumulation over
// micro-batches reproduces full-batch training.
class StageBlockImpl : public torch::nn::Module {
public:
    StageBlockImpl(int in_ch, int out_ch);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Sequential block{nullptr};
};
TORCH_MODULE(StageBlock);

// One UNet branch: encoder, bottleneck, skip-connected decoder, 1x1 head.
class UNetBranchImpl : public torch::nn::Module {
public:
    UNetBranchImpl(const NetworkConfig& cfg);

    // Encoder features, one per stage (enc[i]: grid /2^i, base*2^i channels).
    std::vector<torch::Tensor> encode(const torch::Tensor& x);
    torch::Tensor bottleneck(const torch::Tensor& deepest);
    // Decode from the bottleneck against the (possibly merged) encoder
    // features; returns per-stage decoder features (dec[i]: grid /2^i).
    std::vector<torch::Tensor> decode(const torch::Tensor& bott,
                                      const std::vector<torch::Tensor>& encs);
    torch::Tensor head_logits(const torch::Tensor& dec0);

    torch::Tensor forward(const torch::Tensor& x);  // single-branch use

    int depth() const { return depth_; }

private:
    int depth_;
    std::vector<StageBlock> enc_;
    StageBlock bott_{nullptr};
    std::vector<torch::nn::ConvTranspose2d> up_;
    std::vector<StageBlock> dec_;
    torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(UNetBranch);

// Injects low-branch context into the high branch at one pixel-comparable
// stage: the low feature is depth-compressed by a chain of 1x1 conv + ReLU
// (ceil(log2(c_l/c_h)) + 1 rounds, halving until c_h), its central 1/r window
// — the part depicting the high patch's field — is resampled onto the high
// grid, the full map is average-pooled into a broadcast context vector (so no
// spatial location is discarded), and the concatenation [high | aligned |
// context] passes through two 1x1 conv + ReLU rounds back to c_h channels.
class MergeBlockImpl : public torch::nn::Module {
public:
    MergeBlockImpl(int c_low, int c_high, int ratio);
    torch::Tensor forward(const torch::Tensor& high_feat, const torch::Tensor& low_feat);

    // Identity wiring: compress chain zeroed out of the picture, mix convs
    // pass the high channels through. With zeroed low features the output
    // equals ReLU(high_feat) == high_feat (post-ReLU input), which reduces the
    // dual network to the single-branch baseline.
    void set_passthrough_init();

private:
    int c_low_, c_high_, ratio_;
    torch::nn::Sequential compress{nullptr};
    torch::nn::Conv2d mix1{nullptr}, mix2{nullptr};
};
TORCH_MODULE(MergeBlock);

// Fuses the two head logit maps: the central 1/r window of the low logits
// (same field as the high patch) is upsampled to the high grid, concatenated
// with the high logits, and mixed by 1x1 convs (2C -> 2C+2 -> C). The hidden
// layer is wide enough to carry each logit's positive and negative rails
// through the ReLU, so exact sum/high-only initializations exist.
class FusionHeadImpl : public torch::nn::Module {
public:
    FusionHeadImpl(int num_classes, int ratio);
    torch::Tensor forward(const torch::Tensor& high_logits, const torch::Tensor& low_logits);

    void set_sum_init();        // fused logits = high + aligned low, exactly
    void set_high_only_init();  // fused logits = high, exactly

private:
    int num_classes_, ratio_;
    torch::nn::Conv2d mix1{nullptr}, mix2{nullptr};
};
TORCH_MODULE(FusionHead);

// Registers the two branches under `high` / `low` so checkpoint names read
// branch.high.enc0..., branch.low.dec2..., shared with the single-branch net.
struct BranchPairImpl : torch::nn::Module {
    BranchPairImpl(UNetBranch h, UNetBranch l);
    UNetBranch high{nullptr}, low{nullptr};
};
TORCH_MODULE(BranchPair);

struct NetworkOutput {
    torch::Tensor high, low, fused;  // logits, [B, C, 512, 512]
};

class DualUNetImpl : public torch::nn::Module {
public:
    explicit DualUNetImpl(NetworkConfig cfg);

    // `zero_low` suppresses the low feature at the merge (reduction probe).
    NetworkOutput forward(const torch::Tensor& high_in, const torch::Tensor& low_in,
                          bool zero_low = false);

    const NetworkConfig& config() const { return cfg_; }
    MergeBlock merge_block() { return merge_; }
    FusionHead fusion_head() { return fusion_; }
    BranchPair branches() { return branch_; }

private:
    NetworkConfig cfg_;
    BranchPair branch_{nullptr};
    MergeBlock merge_{nullptr};
    FusionHead fusion_{nullptr};
};
TORCH_MODULE(DualUNet);

// Equal-topology single-branch baseline (high branch only, no merge/fusion).
class SingleUNetImpl : public torch::nn::Module {
public:
    explicit SingleUNetImpl(NetworkConfig cfg);
    torch::Tensor forward(const torch::Tensor& x);
    const NetworkConfig& config() const { return cfg_; }
    UNetBranch branch();

private:
    NetworkConfig cfg_;
    BranchPair branch_{nullptr};  // only `high` populated meaningfully
};
TORCH_MODULE(SingleUNet);

int64_t parameter_count(const torch::nn::Module& m);

// Throws Error naming the first parameter holding a non-finite value.
void check_finite_weights(const torch::nn::Module& m, const std::string& context = "");

// RGB uint8 -> float32 [3,H,W] in [0,1].
torch::Tensor image_to_tensor(const cv::Mat& rgb);
torch::Tensor images_to_batch(const std::vector<cv::Mat>& rgbs);  // [B,3,H,W]

// ---------------------------------------------------------------------------
// Checkpoints: deterministic little-endian binary archive of float32 tensors
// keyed by parameter name, with a one-line config echo.
// ---------------------------------------------------------------------------

void save_checkpoint(const torch::nn::Module& m, const std::string& config_line,
                     const fs::path& path);
std::string checkpoint_config_line(const fs::path& path);

// Exact restore: every archived tensor must match a parameter by name+shape
// and vice versa.
void load_checkpoint(torch::nn::Module& m, const fs::path& path);

// Warm start: copy where name and shape match, leave the rest initialized.
struct WarmStart {
    int matched = 0;
    int archived = 0;
    int params = 0;
};
WarmStart load_matching(torch::nn::Module& m, const fs::path& path);

}  // namespace mres
