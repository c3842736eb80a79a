#include "mres/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace mres {

namespace {

int norm_groups(int channels) {
    int g = std::min(8, channels);
    while (channels % g != 0) --g;
    return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void NetworkConfig::validate() const {
    if (depth < 2 || depth > 7) throw ConfigError("network depth must be in [2,7]");
    if (base_channels < 4 || base_channels % 2 != 0)
        throw ConfigError("base channels must be an even number >= 4");
    levels.validate();
    const int m = resolved_merge_at();
    if (m < 1 || m > depth - 1) throw ConfigError("merge stage must be in [1, depth-1]");
    if ((kPatchSize >> m) < levels.ratio())
        throw ConfigError("merge grid smaller than the level ratio");
    if (num_classes != kNumClasses) throw ConfigError("network is fixed to 3 classes");
}

std::string NetworkConfig::serialize() const {
    std::ostringstream os;
    os << "depth=" << depth << " base=" << base_channels << " high=" << levels.high
       << " low=" << levels.low << " merge_at=" << resolved_merge_at()
       << " fusion=" << (fusion ? 1 : 0) << " tap=" << (decoder_tap ? "decoder" : "encoder")
       << " classes=" << num_classes;
    return os.str();
}

NetworkConfig NetworkConfig::parse(const std::string& line) {
    NetworkConfig cfg;
    std::istringstream is(line);
    std::string kv;
    while (is >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("bad network config token: " + kv);
        const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "depth") cfg.depth = std::stoi(val);
        else if (key == "base") cfg.base_channels = std::stoi(val);
        else if (key == "high") cfg.levels.high = std::stoi(val);
        else if (key == "low") cfg.levels.low = std::stoi(val);
        else if (key == "merge_at") cfg.merge_at = std::stoi(val);
        else if (key == "fusion") cfg.fusion = std::stoi(val) != 0;
        else if (key == "tap") cfg.decoder_tap = (val == "decoder");
        else if (key == "classes") cfg.num_classes = std::stoi(val);
        else throw ConfigError("unknown network config key: " + key);
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Stage block
// ---------------------------------------------------------------------------

StageBlockImpl::StageBlockImpl(int in_ch, int out_ch) {
    block = torch::nn::Sequential(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)),
        torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(out_ch), out_ch)),
        torch::nn::ReLU(),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)),
        torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(out_ch), out_ch)),
        torch::nn::ReLU());
    register_module("block", block);
}

torch::Tensor StageBlockImpl::forward(const torch::Tensor& x) { return block->forward(x); }

// ---------------------------------------------------------------------------
// Branch
// ---------------------------------------------------------------------------

UNetBranchImpl::UNetBranchImpl(const NetworkConfig& cfg) : depth_(cfg.depth) {
    const int base = cfg.base_channels;
    for (int i = 0; i < depth_; ++i) {
        const int in_ch = i == 0 ? 3 : base << (i - 1);
        enc_.push_back(register_module("enc" + std::to_string(i), StageBlock(in_ch, base << i)));
    }
    bott_ = register_module("bott", StageBlock(base << (depth_ - 1), base << depth_));
    for (int j = 0; j < depth_; ++j) {
        up_.push_back(register_module(
            "up" + std::to_string(j),
            torch::nn::ConvTranspose2d(
                torch::nn::ConvTranspose2dOptions(base << (j + 1), base << j, 2).stride(2))));
        dec_.push_back(
            register_module("dec" + std::to_string(j), StageBlock(base << (j + 1), base << j)));
    }
    head_ = register_module(
        "head", torch::nn::Conv2d(torch::nn::Conv2dOptions(base, cfg.num_classes, 1)));
}

std::vector<torch::Tensor> UNetBranchImpl::encode(const torch::Tensor& x) {
    MRES_CHECK(x.dim() == 4 && x.size(1) == 3, "branch input must be [B,3,H,W]");
    MRES_CHECK(x.size(2) % (1 << depth_) == 0 && x.size(3) % (1 << depth_) == 0,
               "branch input size must be divisible by 2^depth");
    std::vector<torch::Tensor> feats;
    torch::Tensor cur = x;
    for (int i = 0; i < depth_; ++i) {
        if (i > 0) cur = torch::max_pool2d(cur, 2);
        cur = enc_[static_cast<size_t>(i)]->forward(cur);
        feats.push_back(cur);
    }
    return feats;
}

torch::Tensor UNetBranchImpl::bottleneck(const torch::Tensor& deepest) {
    return bott_->forward(torch::max_pool2d(deepest, 2));
}

std::vector<torch::Tensor> UNetBranchImpl::decode(const torch::Tensor& bott,
                                                  const std::vector<torch::Tensor>& encs) {
    MRES_CHECK(encs.size() == static_cast<size_t>(depth_), "decode needs one feature per stage");
    std::vector<torch::Tensor> decs(static_cast<size_t>(depth_));
    torch::Tensor cur = bott;
    for (int j = depth_ - 1; j >= 0; --j) {
        cur = up_[static_cast<size_t>(j)]->forward(cur);
        cur = dec_[static_cast<size_t>(j)]->forward(
            torch::cat({encs[static_cast<size_t>(j)], cur}, 1));
        decs[static_cast<size_t>(j)] = cur;
    }
    return decs;
}

torch::Tensor UNetBranchImpl::head_logits(const torch::Tensor& dec0) {
    return head_->forward(dec0);
}

torch::Tensor UNetBranchImpl::forward(const torch::Tensor& x) {
    const auto encs = encode(x);
    const auto decs = decode(bottleneck(encs.back()), encs);
    return head_logits(decs.front());
}

// ---------------------------------------------------------------------------
// Merge
// ---------------------------------------------------------------------------

MergeBlockImpl::MergeBlockImpl(int c_low, int c_high, int ratio)
    : c_low_(c_low), c_high_(c_high), ratio_(ratio) {
    MRES_CHECK(c_low >= c_high, "merge expects the low tap at least as deep as the high stage");
    compress = torch::nn::Sequential();
    int cur = c_low;
    while (cur > c_high) {
        const int next = std::max(c_high, cur / 2);
        compress->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(cur, next, 1)));
        compress->push_back(torch::nn::ReLU());
        cur = next;
    }
    compress->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c_high, c_high, 1)));
    compress->push_back(torch::nn::ReLU());
    const int rounds = static_cast<int>(compress->size()) / 2;
    const int expect =
        static_cast<int>(std::ceil(std::log2(static_cast<double>(c_low) / c_high))) + 1;
    MRES_CHECK(rounds == expect, "compression chain length mismatch");
    register_module("compress", compress);
    mix1 = register_module("mix1",
                           torch::nn::Conv2d(torch::nn::Conv2dOptions(3 * c_high, c_high, 1)));
    mix2 = register_module("mix2", torch::nn::Conv2d(torch::nn::Conv2dOptions(c_high, c_high, 1)));
}

torch::Tensor MergeBlockImpl::forward(const torch::Tensor& high_feat,
                                      const torch::Tensor& low_feat) {
    MRES_CHECK(low_feat.size(1) == c_low_ && high_feat.size(1) == c_high_,
               "merge channel mismatch");
    const int64_t gh = high_feat.size(2), gl = low_feat.size(2);
    MRES_CHECK(gl >= ratio_, "low grid smaller than the level ratio");
    const torch::Tensor comp = compress->forward(low_feat);
    const int64_t win = gl / ratio_, off = (gl - win) / 2;
    const torch::Tensor central = comp.slice(2, off, off + win).slice(3, off, off + win);
    namespace F = torch::nn::functional;
    const torch::Tensor aligned = F::interpolate(
        central, F::InterpolateFuncOptions()
                     .size(std::vector<int64_t>{gh, gh})
                     .mode(torch::kBilinear)
                     .align_corners(false));
    const torch::Tensor ctx = torch::adaptive_avg_pool2d(comp, {1, 1})
                                  .expand({comp.size(0), c_high_, gh, gh});
    torch::Tensor merged = torch::relu(mix1->forward(torch::cat({high_feat, aligned, ctx}, 1)));
    return torch::relu(mix2->forward(merged));
}

void MergeBlockImpl::set_passthrough_init() {
    torch::NoGradGuard guard;
    for (const auto& p : compress->parameters()) p.zero_();
    mix1->weight.zero_();
    mix1->bias.zero_();
    for (int i = 0; i < c_high_; ++i) mix1->weight[i][i][0][0] = 1.0;
    mix2->weight.zero_();
    mix2->bias.zero_();
    for (int i = 0; i < c_high_; ++i) mix2->weight[i][i][0][0] = 1.0;
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

FusionHeadImpl::FusionHeadImpl(int num_classes, int ratio)
    : num_classes_(num_classes), ratio_(ratio) {
    mix1 = register_module(
        "mix1", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * num_classes, 2 * num_classes + 2, 1)));
    mix2 = register_module(
        "mix2", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * num_classes + 2, num_classes, 1)));
    set_sum_init();
}

torch::Tensor FusionHeadImpl::forward(const torch::Tensor& high_logits,
                                      const torch::Tensor& low_logits) {
    const int64_t g = high_logits.size(2), gl = low_logits.size(2);
    const int64_t win = gl / ratio_, off = (gl - win) / 2;
    const torch::Tensor central = low_logits.slice(2, off, off + win).slice(3, off, off + win);
    namespace F = torch::nn::functional;
    const torch::Tensor aligned = F::interpolate(
        central, F::InterpolateFuncOptions()
                     .size(std::vector<int64_t>{g, g})
                     .mode(torch::kBilinear)
                     .align_corners(false));
    const torch::Tensor hidden = torch::relu(mix1->forward(torch::cat({high_logits, aligned}, 1)));
    return mix2->forward(hidden);
}

// Positive/negative rails: hidden channel i carries ReLU(+v_i), channel C+i
// carries ReLU(-v_i); the output conv reassembles v_i = rail+ - rail-.
void FusionHeadImpl::set_sum_init() {
    torch::NoGradGuard guard;
    const int c = num_classes_;
    mix1->weight.zero_();
    mix1->bias.zero_();
    mix2->weight.zero_();
    mix2->bias.zero_();
    for (int i = 0; i < c; ++i) {
        mix1->weight[i][i][0][0] = 1.0;
        mix1->weight[i][c + i][0][0] = 1.0;
        mix1->weight[c + i][i][0][0] = -1.0;
        mix1->weight[c + i][c + i][0][0] = -1.0;
        mix2->weight[i][i][0][0] = 1.0;
        mix2->weight[i][c + i][0][0] = -1.0;
    }
}

void FusionHeadImpl::set_high_only_init() {
    torch::NoGradGuard guard;
    const int c = num_classes_;
    mix1->weight.zero_();
    mix1->bias.zero_();
    mix2->weight.zero_();
    mix2->bias.zero_();
    for (int i = 0; i < c; ++i) {
        mix1->weight[i][i][0][0] = 1.0;
        mix1->weight[c + i][i][0][0] = -1.0;
        mix2->weight[i][i][0][0] = 1.0;
        mix2->weight[i][c + i][0][0] = -1.0;
    }
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

BranchPairImpl::BranchPairImpl(UNetBranch h, UNetBranch l) {
    high = register_module("high", h);
    if (!l.is_empty()) low = register_module("low", l);
}

DualUNetImpl::DualUNetImpl(NetworkConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    branch_ = register_module("branch", BranchPair(UNetBranch(cfg_), UNetBranch(cfg_)));
    const int m = cfg_.resolved_merge_at();
    const int c = cfg_.base_channels << m;
    merge_ = register_module("merge", MergeBlock(c, c, cfg_.levels.ratio()));
    fusion_ = register_module("fusion", FusionHead(cfg_.num_classes, cfg_.levels.ratio()));
}

NetworkOutput DualUNetImpl::forward(const torch::Tensor& high_in, const torch::Tensor& low_in,
                                    bool zero_low) {
    MRES_CHECK(high_in.sizes() == low_in.sizes(), "branch inputs must share shape");
    const int m = cfg_.resolved_merge_at();

    auto encs_low = branch_->low->encode(low_in);
    const auto decs_low = branch_->low->decode(branch_->low->bottleneck(encs_low.back()), encs_low);
    const torch::Tensor low_logits = branch_->low->head_logits(decs_low.front());

    torch::Tensor tap = cfg_.decoder_tap ? decs_low[static_cast<size_t>(m)]
                                         : encs_low[static_cast<size_t>(m)];
    if (zero_low) tap = torch::zeros_like(tap);

    auto encs_high = branch_->high->encode(high_in);
    encs_high[static_cast<size_t>(m)] =
        merge_->forward(encs_high[static_cast<size_t>(m)], tap);
    const auto decs_high =
        branch_->high->decode(branch_->high->bottleneck(encs_high.back()), encs_high);
    const torch::Tensor high_logits = branch_->high->head_logits(decs_high.front());

    NetworkOutput out;
    out.high = high_logits;
    out.low = low_logits;
    out.fused = cfg_.fusion ? fusion_->forward(high_logits, low_logits) : high_logits;
    const auto check = [](const char* name, const torch::Tensor& t) {
        if (!torch::isfinite(t).all().item<bool>())
            throw Error(std::string("non-finite logits from the ") + name + " head");
    };
    check("high", out.high);
    check("low", out.low);
    check("fused", out.fused);
    return out;
}

SingleUNetImpl::SingleUNetImpl(NetworkConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    branch_ = register_module("branch", BranchPair(UNetBranch(cfg_), UNetBranch(nullptr)));
}

torch::Tensor SingleUNetImpl::forward(const torch::Tensor& x) {
    return branch_->high->forward(x);
}

UNetBranch SingleUNetImpl::branch() { return branch_->high; }

int64_t parameter_count(const torch::nn::Module& m) {
    int64_t n = 0;
    for (const auto& p : m.parameters()) n += p.numel();
    return n;
}

void check_finite_weights(const torch::nn::Module& m, const std::string& context) {
    for (const auto& item : m.named_parameters())
        if (!torch::isfinite(item.value()).all().item<bool>())
            throw Error((context.empty() ? std::string() : context + ": ") +
                        "non-finite parameter " + item.key());
}

torch::Tensor image_to_tensor(const cv::Mat& rgb) {
    MRES_CHECK(rgb.type() == CV_8UC3 && rgb.isContinuous(), "image tensor wants continuous 8UC3");
    torch::Tensor t = torch::from_blob(const_cast<uint8_t*>(rgb.ptr<uint8_t>(0)),
                                       {rgb.rows, rgb.cols, 3}, torch::kUInt8);
    return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0);
}

torch::Tensor images_to_batch(const std::vector<cv::Mat>& rgbs) {
    MRES_CHECK(!rgbs.empty(), "empty image batch");
    std::vector<torch::Tensor> ts;
    for (const auto& m : rgbs) ts.push_back(image_to_tensor(m));
    return torch::stack(ts, 0);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[] = "MRESNET1\n";

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw Error("truncated checkpoint");
    return v;
}

std::map<std::string, torch::Tensor> read_archive(const fs::path& path, std::string* config_line) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open checkpoint: " + path.string());
    std::string magic(sizeof(kMagic) - 1, '\0');
    is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (magic != kMagic) throw Error("not a checkpoint file: " + path.string());
    std::string cfg;
    std::getline(is, cfg);
    if (config_line) *config_line = cfg;
    const auto count = read_pod<int64_t>(is);
    std::map<std::string, torch::Tensor> out;
    for (int64_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto ndim = read_pod<uint32_t>(is);
        std::vector<int64_t> dims;
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            dims.push_back(read_pod<int64_t>(is));
            numel *= dims.back();
        }
        torch::Tensor t = torch::empty(dims, torch::kFloat32);
        is.read(reinterpret_cast<char*>(t.data_ptr<float>()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        if (!is) throw Error("truncated checkpoint tensor: " + name);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace

void save_checkpoint(const torch::nn::Module& m, const std::string& config_line,
                     const fs::path& path) {
    MRES_CHECK(config_line.find('\n') == std::string::npos, "config line must be one line");
    std::map<std::string, torch::Tensor> entries;
    for (const auto& item : m.named_parameters())
        entries.emplace(item.key(), item.value().detach().to(torch::kFloat32).contiguous());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write checkpoint: " + tmp.string());
        os.write(kMagic, sizeof(kMagic) - 1);
        os << config_line << '\n';
        write_pod<int64_t>(os, static_cast<int64_t>(entries.size()));
        for (const auto& [name, t] : entries) {
            write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_pod<uint32_t>(os, static_cast<uint32_t>(t.dim()));
            for (int64_t d = 0; d < t.dim(); ++d) write_pod<int64_t>(os, t.size(d));
            os.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
                     static_cast<std::streamsize>(t.numel() * sizeof(float)));
        }
        if (!os) throw Error("failed writing checkpoint: " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string checkpoint_config_line(const fs::path& path) {
    std::string cfg;
    read_archive(path, &cfg);
    return cfg;
}

void load_checkpoint(torch::nn::Module& m, const fs::path& path) {
    const auto archive = read_archive(path, nullptr);
    auto params = m.named_parameters();
    if (archive.size() != params.size())
        throw Error("checkpoint parameter count mismatch: archive " +
                    std::to_string(archive.size()) + " vs model " + std::to_string(params.size()));
    torch::NoGradGuard guard;
    for (const auto& item : params) {
        const auto it = archive.find(item.key());
        if (it == archive.end()) throw Error("checkpoint missing parameter " + item.key());
        if (it->second.sizes() != item.value().sizes())
            throw Error("checkpoint shape mismatch for " + item.key());
        item.value().copy_(it->second.to(item.value().dtype()));
    }
}

WarmStart load_matching(torch::nn::Module& m, const fs::path& path) {
    const auto archive = read_archive(path, nullptr);
    WarmStart ws;
    ws.archived = static_cast<int>(archive.size());
    torch::NoGradGuard guard;
    for (const auto& item : m.named_parameters()) {
        ++ws.params;
        const auto it = archive.find(item.key());
        if (it != archive.end() && it->second.sizes() == item.value().sizes()) {
            item.value().copy_(it->second.to(item.value().dtype()));
            ++ws.matched;
        }
    }
    return ws;
}

}  // namespace mres
