#include "mres/augment.hpp"

#include <opencv2/imgproc.hpp>

#include <cmath>
#include <iostream>
#include <sstream>

namespace mres {

namespace {
constexpr uint64_t kTagStyle = 0x5354594cull;
constexpr uint64_t kTagPair = 0x50414952ull;
constexpr uint64_t kTagTargeted = 1;
constexpr uint64_t kTagHeavy = 2;
constexpr uint64_t kTagJitter = 3;
constexpr uint64_t kTagNoise = 4;
}  // namespace

std::string augment_op_name(AugmentOp op) {
    switch (op) {
        case AugmentOp::basic_geometric: return "basic";
        case AugmentOp::color_jitter: return "color_jitter";
        case AugmentOp::heavy_color: return "heavy_color";
        case AugmentOp::targeted_hsv: return "targeted_hsv";
        case AugmentOp::noise_blur: return "noise";
        case AugmentOp::style_infuse: return "style";
        case AugmentOp::xy_jitter: return "xy_jitter";
    }
    throw Error("unknown augment op");
}

AugmentOp parse_augment_op(const std::string& name) {
    for (AugmentOp op : {AugmentOp::basic_geometric, AugmentOp::color_jitter, AugmentOp::heavy_color,
                         AugmentOp::targeted_hsv, AugmentOp::noise_blur, AugmentOp::style_infuse,
                         AugmentOp::xy_jitter})
        if (augment_op_name(op) == name) return op;
    throw ConfigError("unknown augmentation name: " + name);
}

std::string AugmentPlan::serialize() const {
    std::string out;
    for (AugmentOp op : enabled) {
        if (!out.empty()) out += '+';
        out += augment_op_name(op);
    }
    return out.empty() ? "none" : out;
}

AugmentPlan AugmentPlan::parse(const std::string& ops) {
    AugmentPlan plan;
    if (ops == "none" || ops.empty()) return plan;
    std::istringstream in(ops);
    std::string tok;
    while (std::getline(in, tok, '+')) plan.enabled.insert(parse_augment_op(tok));
    return plan;
}

// ---------------------------------------------------------------------------
// Geometric
// ---------------------------------------------------------------------------

GeometricParams sample_geometric(Rng& rng, bool with_basic, bool with_xy_jitter) {
    // All draws happen unconditionally so the stream is stable across plans.
    GeometricParams p;
    const bool fh = rng.bernoulli(0.5), fv = rng.bernoulli(0.5);
    const int rot = rng.uniform_int(0, 3);
    const double scale = rng.uniform(0.9, 1.1);
    const int sx = rng.uniform_int(-32, 32), sy = rng.uniform_int(-32, 32);
    if (with_basic) {
        p.flip_h = fh;
        p.flip_v = fv;
        p.rot90 = rot;
        p.scale = scale;
    }
    if (with_xy_jitter) {
        p.shift_x = sx;
        p.shift_y = sy;
    }
    return p;
}

namespace {

// Resample step (scale about center + shift); exact permutation steps (flips,
// clockwise quarter turns) are applied separately so they stay bit-exact.
void warp_part(const cv::Mat& src, cv::Mat& dst, double scale, double tx, double ty, int interp,
               int border, const cv::Scalar& fill) {
    const double c = (src.cols - 1) * 0.5;
    cv::Mat M = (cv::Mat_<double>(2, 3) << scale, 0.0, (1.0 - scale) * c + tx, 0.0, scale,
                 (1.0 - scale) * c + ty);
    cv::warpAffine(src, dst, M, src.size(), interp, border, fill);
}

cv::Mat permute_part(const cv::Mat& src, const GeometricParams& p) {
    cv::Mat out = src;
    if (p.flip_h) cv::flip(out, out, 1);
    if (p.flip_v) cv::flip(out, out, 0);
    if (p.rot90 == 1) cv::rotate(out, out, cv::ROTATE_90_CLOCKWISE);
    else if (p.rot90 == 2) cv::rotate(out, out, cv::ROTATE_180);
    else if (p.rot90 == 3) cv::rotate(out, out, cv::ROTATE_90_COUNTERCLOCKWISE);
    return out.clone();
}

void transform_one(cv::Mat& image, LabelMask& mask, const GeometricParams& p, double tx, double ty) {
    if (p.scale != 1.0 || tx != 0.0 || ty != 0.0) {
        cv::Mat wi, wc, wa;
        warp_part(image, wi, p.scale, tx, ty, cv::INTER_LINEAR, cv::BORDER_REFLECT_101, {});
        warp_part(mask.classes, wc, p.scale, tx, ty, cv::INTER_NEAREST, cv::BORDER_REFLECT_101, {});
        // Content shifted in from outside the crop carries no supervision.
        warp_part(mask.annotated, wa, p.scale, tx, ty, cv::INTER_NEAREST, cv::BORDER_CONSTANT,
                  cv::Scalar(0));
        image = wi;
        mask.classes = wc;
        mask.annotated = wa;
    }
    image = permute_part(image, p);
    mask.classes = permute_part(mask.classes, p);
    mask.annotated = permute_part(mask.annotated, p);
}

}  // namespace

PatchPair apply_geometric(const PatchPair& pair, const GeometricParams& p) {
    PatchPair out;
    out.center = pair.center;
    out.levels = pair.levels;
    out.patch_class = pair.patch_class;
    out.high = pair.high.clone();
    out.low = pair.low.clone();
    out.high_mask = pair.high_mask.clone();
    out.low_mask = pair.low_mask.clone();
    if (p.identity()) return out;
    const double r = pair.levels.ratio();
    transform_one(out.high, out.high_mask, p, p.shift_x, p.shift_y);
    transform_one(out.low, out.low_mask, p, std::lround(p.shift_x / r), std::lround(p.shift_y / r));
    return out;
}

PatchPair geometric_augment(const PatchPair& pair, uint64_t seed) {
    Rng rng(seed);
    return apply_geometric(pair, sample_geometric(rng, true, true));
}

// ---------------------------------------------------------------------------
// Color
// ---------------------------------------------------------------------------

cv::Mat apply_color(const cv::Mat& rgb, const ColorParams& p) {
    MRES_CHECK(rgb.type() == CV_8UC3, "apply_color expects 8-bit RGB");
    if (p.identity()) return rgb.clone();
    cv::Mat f, hsv;
    rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
    cv::cvtColor(f, hsv, cv::COLOR_RGB2HSV);  // H in [0,360), S/V in [0,1]
    for (int y = 0; y < hsv.rows; ++y) {
        cv::Vec3f* row = hsv.ptr<cv::Vec3f>(y);
        for (int x = 0; x < hsv.cols; ++x) {
            row[x][0] = static_cast<float>(std::fmod(row[x][0] + p.hue_deg + 720.0, 360.0));
            row[x][1] = std::clamp(row[x][1] * static_cast<float>(p.sat_scale), 0.0f, 1.0f);
            row[x][2] = std::clamp(row[x][2] * static_cast<float>(p.val_scale), 0.0f, 1.0f);
        }
    }
    cv::Mat back, out;
    cv::cvtColor(hsv, back, cv::COLOR_HSV2RGB);
    back.convertTo(out, CV_8UC3, 255.0);
    return out;
}

cv::Mat heavy_color_augment(const cv::Mat& rgb, uint64_t seed) {
    Rng rng(seed);
    ColorParams p;
    p.hue_deg = rng.uniform(0.0, 360.0);
    p.sat_scale = rng.uniform(0.5, 1.5);
    p.val_scale = rng.uniform(0.5, 1.5);
    return apply_color(rgb, p);
}

cv::Mat color_jitter_augment(const cv::Mat& rgb, uint64_t seed) {
    Rng rng(seed);
    ColorParams p;
    p.hue_deg = rng.uniform(-10.0, 10.0);
    p.sat_scale = rng.uniform(0.9, 1.1);
    p.val_scale = rng.uniform(0.9, 1.1);
    return apply_color(rgb, p);
}

cv::Mat apply_targeted_hsv(const cv::Mat& rgb, int brown_ds, int brown_dv, int blue_ds, int blue_dv) {
    MRES_CHECK(rgb.type() == CV_8UC3, "apply_targeted_hsv expects 8-bit RGB");
    cv::Mat out = rgb.clone();
    if (brown_ds == 0 && brown_dv == 0 && blue_ds == 0 && blue_dv == 0) return out;
    cv::Mat hsv;
    cv::cvtColor(rgb, hsv, cv::COLOR_RGB2HSV);  // 8-bit: H in [0,180), S/V in [0,255]
    cv::Mat1b touched = cv::Mat1b::zeros(rgb.size());
    for (int y = 0; y < hsv.rows; ++y) {
        cv::Vec3b* row = hsv.ptr<cv::Vec3b>(y);
        uint8_t* tch = touched.ptr<uint8_t>(y);
        for (int x = 0; x < hsv.cols; ++x) {
            const int h = row[x][0], s = row[x][1];
            if (s <= 40) continue;
            int ds = 0, dv = 0;
            bool hit = false;
            if (h >= 5 && h <= 25) {  // brown: hue 10..50 degrees
                ds = brown_ds;
                dv = brown_dv;
                hit = true;
            } else if (h >= 90 && h <= 140) {  // blue: hue 180..280 degrees
                ds = blue_ds;
                dv = blue_dv;
                hit = true;
            }
            if (!hit || (ds == 0 && dv == 0)) continue;
            row[x][1] = cv::saturate_cast<uint8_t>(s + ds);
            row[x][2] = cv::saturate_cast<uint8_t>(row[x][2] + dv);
            tch[x] = 255;
        }
    }
    cv::Mat conv;
    cv::cvtColor(hsv, conv, cv::COLOR_HSV2RGB);
    // Only rewritten pixels take the converted value; everything else keeps
    // its original bytes (the HSV round-trip is lossy).
    conv.copyTo(out, touched);
    return out;
}

cv::Mat targeted_hsv_augment(const cv::Mat& rgb, const StainJitterTable& table, uint64_t seed) {
    Rng rng(seed);
    const int bds = rng.uniform_int(table.brown.sat_lo, table.brown.sat_hi);
    const int bdv = rng.uniform_int(table.brown.val_lo, table.brown.val_hi);
    const int uds = rng.uniform_int(table.blue.sat_lo, table.blue.sat_hi);
    const int udv = rng.uniform_int(table.blue.val_lo, table.blue.val_hi);
    return apply_targeted_hsv(rgb, bds, bdv, uds, udv);
}

// ---------------------------------------------------------------------------
// Noise / blur
// ---------------------------------------------------------------------------

cv::Mat apply_noise_blur(const cv::Mat& rgb, const NoiseBlurParams& p) {
    MRES_CHECK(rgb.type() == CV_8UC3, "apply_noise_blur expects 8-bit RGB");
    if (p.amount <= 0.0) return rgb.clone();
    cv::Mat out;
    switch (p.kind) {
        case NoiseKind::gaussian_noise: {
            cv::Mat noise(rgb.size(), CV_32FC3);
            cv::RNG nrng(p.noise_seed);
            nrng.fill(noise, cv::RNG::NORMAL, 0.0, p.amount);
            cv::Mat f;
            rgb.convertTo(f, CV_32FC3);
            f += noise;
            f.convertTo(out, CV_8UC3);
            break;
        }
        case NoiseKind::gaussian_blur:
            cv::GaussianBlur(rgb, out, cv::Size(0, 0), p.amount, p.amount, cv::BORDER_REFLECT_101);
            break;
        case NoiseKind::motion_blur: {
            const int len = std::max(3, static_cast<int>(std::lround(p.amount)));
            cv::Mat1f kernel = cv::Mat1f::zeros(len, len);
            const double rad = p.angle_deg * CV_PI / 180.0;
            const double half = (len - 1) * 0.5;
            cv::line(kernel,
                     cv::Point(static_cast<int>(std::lround(half - half * std::cos(rad))),
                               static_cast<int>(std::lround(half - half * std::sin(rad)))),
                     cv::Point(static_cast<int>(std::lround(half + half * std::cos(rad))),
                               static_cast<int>(std::lround(half + half * std::sin(rad)))),
                     cv::Scalar(1.0), 1);
            kernel /= std::max(1.0, cv::sum(kernel)[0]);
            cv::filter2D(rgb, out, -1, kernel, cv::Point(-1, -1), 0, cv::BORDER_REFLECT_101);
            break;
        }
    }
    return out;
}

cv::Mat noise_blur_augment(const cv::Mat& rgb, uint64_t seed) {
    Rng rng(seed);
    const int kind = rng.uniform_int(0, 2);
    const double sigma_noise = rng.uniform(2.0, 10.0);
    const double sigma_blur = rng.uniform(0.5, 2.0);
    const int len = rng.uniform_int(3, 9);
    const double angle = rng.uniform(0.0, 180.0);
    NoiseBlurParams p;
    p.noise_seed = rng.child(kTagNoise).seed();
    if (kind == 0) {
        p.kind = NoiseKind::gaussian_noise;
        p.amount = sigma_noise;
    } else if (kind == 1) {
        p.kind = NoiseKind::gaussian_blur;
        p.amount = sigma_blur;
    } else {
        p.kind = NoiseKind::motion_blur;
        p.amount = len;
        p.angle_deg = angle;
    }
    return apply_noise_blur(rgb, p);
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

double ssim(const cv::Mat& a, const cv::Mat& b) {
    if (a.size() != b.size() || a.channels() != b.channels())
        throw Error("ssim: dimension mismatch");
    MRES_CHECK(a.depth() == CV_8U && b.depth() == CV_8U, "ssim expects 8-bit images");
    constexpr double C1 = (0.01 * 255) * (0.01 * 255);
    constexpr double C2 = (0.03 * 255) * (0.03 * 255);
    const cv::Mat kernel = cv::getGaussianKernel(11, 1.5, CV_64F);
    auto blur = [&](const cv::Mat& m) {
        cv::Mat r;
        cv::sepFilter2D(m, r, CV_64F, kernel, kernel, cv::Point(-1, -1), 0, cv::BORDER_REFLECT_101);
        return r;
    };

    std::vector<cv::Mat> ca, cb;
    cv::split(a, ca);
    cv::split(b, cb);
    double total = 0.0;
    for (size_t c = 0; c < ca.size(); ++c) {
        cv::Mat x, y;
        ca[c].convertTo(x, CV_64F);
        cb[c].convertTo(y, CV_64F);
        const cv::Mat mu_x = blur(x), mu_y = blur(y);
        const cv::Mat var_x = blur(x.mul(x)) - mu_x.mul(mu_x);
        const cv::Mat var_y = blur(y.mul(y)) - mu_y.mul(mu_y);
        const cv::Mat cov = blur(x.mul(y)) - mu_x.mul(mu_y);
        const cv::Mat num = (2.0 * mu_x.mul(mu_y) + C1).mul(2.0 * cov + C2);
        const cv::Mat den = (mu_x.mul(mu_x) + mu_y.mul(mu_y) + C1).mul(var_x + var_y + C2);
        cv::Mat map;
        cv::divide(num, den, map);
        total += cv::mean(map)[0];
    }
    return total / static_cast<double>(ca.size());
}

// ---------------------------------------------------------------------------
// Style infusion
// ---------------------------------------------------------------------------

StyleEntry style_stats(const cv::Mat& rgb, const std::string& stain, const std::string& scanner) {
    MRES_CHECK(rgb.type() == CV_8UC3, "style_stats expects 8-bit RGB");
    cv::Mat lab;
    cv::cvtColor(rgb, lab, cv::COLOR_RGB2Lab);
    cv::Scalar mean, stddev;
    cv::meanStdDev(lab, mean, stddev);
    StyleEntry e;
    e.stain = stain;
    e.scanner = scanner;
    e.mean = {mean[0], mean[1], mean[2]};
    e.stddev = {stddev[0], stddev[1], stddev[2]};
    return e;
}

cv::Mat apply_style(const cv::Mat& rgb, const StyleEntry& target) {
    MRES_CHECK(rgb.type() == CV_8UC3, "apply_style expects 8-bit RGB");
    cv::Mat lab;
    cv::cvtColor(rgb, lab, cv::COLOR_RGB2Lab);
    cv::Scalar mean, stddev;
    cv::meanStdDev(lab, mean, stddev);
    cv::Mat f;
    lab.convertTo(f, CV_32FC3);
    for (int c = 0; c < 3; ++c) {
        double ratio = target.stddev[c] / std::max(stddev[c], 1e-6);
        ratio = std::clamp(ratio, 0.25, 4.0);
        const double shift = target.mean[c] - mean[c] * ratio;
        for (int y = 0; y < f.rows; ++y) {
            cv::Vec3f* row = f.ptr<cv::Vec3f>(y);
            for (int x = 0; x < f.cols; ++x)
                row[x][c] = static_cast<float>(std::clamp(row[x][c] * ratio + shift, 0.0, 255.0));
        }
    }
    cv::Mat lab8, out;
    f.convertTo(lab8, CV_8UC3);
    cv::cvtColor(lab8, out, cv::COLOR_Lab2RGB);
    return out;
}

void save_style_bank(const fs::path& path, const StyleBank& bank) {
    std::ostringstream out;
    out.precision(17);
    for (const auto& e : bank)
        out << e.stain << ' ' << e.scanner << ' ' << e.mean[0] << ' ' << e.mean[1] << ' ' << e.mean[2]
            << ' ' << e.stddev[0] << ' ' << e.stddev[1] << ' ' << e.stddev[2] << '\n';
    write_text_atomic(path, out.str());
}

StyleBank load_style_bank(const fs::path& path) {
    StyleBank bank;
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        StyleEntry e;
        if (!(ls >> e.stain >> e.scanner >> e.mean[0] >> e.mean[1] >> e.mean[2] >> e.stddev[0] >>
              e.stddev[1] >> e.stddev[2]))
            throw Error("bad style bank line: " + line);
        bank.push_back(e);
    }
    return bank;
}

int style_infuse(std::vector<PatchPair>& pairs, const StyleBank& bank, double probability,
                 uint64_t seed) {
    if (bank.empty()) {
        static bool warned = false;
        if (!warned) {
            std::cerr << "warning: style bank is empty; style infusion is a no-op\n";
            warned = true;
        }
        return 0;
    }
    Rng rng(seed);
    int styled = 0;
    for (auto& pair : pairs) {
        const bool hit = rng.bernoulli(probability);
        const int idx = rng.uniform_int(0, static_cast<int>(bank.size()) - 1);
        if (!hit) continue;
        cv::Mat high = apply_style(pair.high, bank[idx]);
        cv::Mat low = apply_style(pair.low, bank[idx]);
        if (ssim(pair.high, high) < 0.7 || ssim(pair.low, low) < 0.7) continue;  // rejected draw
        pair.high = high;
        pair.low = low;
        ++styled;
    }
    return styled;
}

// ---------------------------------------------------------------------------
// Plan application
// ---------------------------------------------------------------------------

void apply_augment_plan(std::vector<PatchPair>& pairs, const AugmentPlan& plan,
                        const StyleBank* bank, uint64_t seed) {
    if (plan.has(AugmentOp::style_infuse)) {
        static const StyleBank empty;
        style_infuse(pairs, bank ? *bank : empty, plan.style_probability,
                     derive_seed(seed, kTagStyle));
    }
    const StainJitterTable table;
    for (size_t i = 0; i < pairs.size(); ++i) {
        Rng prng(derive_seed(seed, kTagPair + i));
        if (plan.has(AugmentOp::basic_geometric) || plan.has(AugmentOp::xy_jitter)) {
            const GeometricParams p = sample_geometric(prng, plan.has(AugmentOp::basic_geometric),
                                                       plan.has(AugmentOp::xy_jitter));
            pairs[i] = apply_geometric(pairs[i], p);
        }
        // One draw per pair, applied to both branch images.
        if (plan.has(AugmentOp::targeted_hsv)) {
            const uint64_t s = prng.child(kTagTargeted).seed();
            pairs[i].high = targeted_hsv_augment(pairs[i].high, table, s);
            pairs[i].low = targeted_hsv_augment(pairs[i].low, table, s);
        }
        if (plan.has(AugmentOp::heavy_color)) {
            const uint64_t s = prng.child(kTagHeavy).seed();
            pairs[i].high = heavy_color_augment(pairs[i].high, s);
            pairs[i].low = heavy_color_augment(pairs[i].low, s);
        }
        if (plan.has(AugmentOp::color_jitter)) {
            const uint64_t s = prng.child(kTagJitter).seed();
            pairs[i].high = color_jitter_augment(pairs[i].high, s);
            pairs[i].low = color_jitter_augment(pairs[i].low, s);
        }
        if (plan.has(AugmentOp::noise_blur)) {
            const uint64_t s = prng.child(kTagNoise).seed();
            pairs[i].high = noise_blur_augment(pairs[i].high, s);
            pairs[i].low = noise_blur_augment(pairs[i].low, s);
        }
    }
}

}  // namespace mres
