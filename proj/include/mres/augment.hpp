#pragma once

#include <set>
#include <string>
#include <vector>

#include "mres/patch.hpp"

namespace mres {

enum class AugmentOp {
    basic_geometric,  // flips, 90-degree rotations, +-10% rescale
    color_jitter,     // mild hue/sat/val jitter
    heavy_color,      // full-circle hue rotation, sat/val x[0.5,1.5]
    targeted_hsv,     // stain-masked S/V offsets (brown/blue)
    noise_blur,       // gaussian noise / gaussian blur / motion blur
    style_infuse,     // color-statistics transfer from a style bank
    xy_jitter,        // +-32 px translation at level H (scaled for level L)
};

std::string augment_op_name(AugmentOp op);
AugmentOp parse_augment_op(const std::string& name);

// Which ops a training stage runs. Serializes as "+"-joined op names, e.g.
// "targeted_hsv+basic+heavy_color+noise".
struct AugmentPlan {
    std::set<AugmentOp> enabled;
    double style_probability = 0.3;

    bool has(AugmentOp op) const { return enabled.count(op) > 0; }
    std::string serialize() const;
    static AugmentPlan parse(const std::string& ops);
};

// ---------------------------------------------------------------------------
// Geometric
// ---------------------------------------------------------------------------

struct GeometricParams {
    bool flip_h = false;
    bool flip_v = false;
    int rot90 = 0;        // clockwise quarter turns, 0..3
    double scale = 1.0;   // about the patch center
    int shift_x = 0;      // pixels at level H; level L moves by shift/r
    int shift_y = 0;

    bool identity() const {
        return !flip_h && !flip_v && rot90 == 0 && scale == 1.0 && shift_x == 0 && shift_y == 0;
    }
};

GeometricParams sample_geometric(Rng& rng, bool with_basic, bool with_xy_jitter);

// One spatial transform applied to images AND masks of both branches (masks
// nearest-neighbor, annotated plane zero-filled where content shifts in).
// Flip/rotation-only draws are exact index permutations; identity is bit-exact.
PatchPair apply_geometric(const PatchPair& pair, const GeometricParams& p);
PatchPair geometric_augment(const PatchPair& pair, uint64_t seed);

// ---------------------------------------------------------------------------
// Color
// ---------------------------------------------------------------------------

struct ColorParams {
    double hue_deg = 0.0;  // rotation on the 360-degree hue circle
    double sat_scale = 1.0;
    double val_scale = 1.0;

    bool identity() const { return hue_deg == 0.0 && sat_scale == 1.0 && val_scale == 1.0; }
};

cv::Mat apply_color(const cv::Mat& rgb, const ColorParams& p);
cv::Mat heavy_color_augment(const cv::Mat& rgb, uint64_t seed);  // hue U(0,360), s/v U(0.5,1.5)
cv::Mat color_jitter_augment(const cv::Mat& rgb, uint64_t seed); // hue +-10 deg, s/v U(0.9,1.1)

// Stain-targeted S/V offsets (8-bit HSV domain). Stain masks: brown = hue in
// [10,50] deg, blue = hue in [180,280] deg, both requiring saturation > 40.
// Only masked pixels are rewritten; the mask complement stays bit-identical.
struct HsvJitterRange {
    int sat_lo, sat_hi;  // inclusive
    int val_lo, val_hi;
};
struct StainJitterTable {
    HsvJitterRange brown{-30, 81, -80, 81};
    HsvJitterRange blue{-40, 61, -60, 61};
};

cv::Mat apply_targeted_hsv(const cv::Mat& rgb, int brown_ds, int brown_dv, int blue_ds, int blue_dv);
cv::Mat targeted_hsv_augment(const cv::Mat& rgb, const StainJitterTable& table, uint64_t seed);

// ---------------------------------------------------------------------------
// Noise / blur
// ---------------------------------------------------------------------------

enum class NoiseKind { gaussian_noise, gaussian_blur, motion_blur };

struct NoiseBlurParams {
    NoiseKind kind = NoiseKind::gaussian_noise;
    double amount = 0.0;     // noise sigma / blur sigma / kernel length
    double angle_deg = 0.0;  // motion blur direction
    uint64_t noise_seed = 0; // gaussian noise realization
};

cv::Mat apply_noise_blur(const cv::Mat& rgb, const NoiseBlurParams& p);
cv::Mat noise_blur_augment(const cv::Mat& rgb, uint64_t seed);

// ---------------------------------------------------------------------------
// SSIM (gaussian-window structural similarity)
// ---------------------------------------------------------------------------

// Mean of the per-pixel SSIM map: 11x11 gaussian window sigma=1.5, C1 =
// (0.01*255)^2, C2 = (0.03*255)^2, reflected borders, channels averaged.
double ssim(const cv::Mat& a, const cv::Mat& b);

// ---------------------------------------------------------------------------
// Style infusion
// ---------------------------------------------------------------------------

// Reference color statistics of one (stain, scanner) group: per-channel mean
// and standard deviation in 8-bit CIELAB.
struct StyleEntry {
    std::string stain, scanner;
    cv::Vec3d mean, stddev;
};
using StyleBank = std::vector<StyleEntry>;

StyleEntry style_stats(const cv::Mat& rgb, const std::string& stain = "",
                       const std::string& scanner = "");
cv::Mat apply_style(const cv::Mat& rgb, const StyleEntry& target);

// File format: one line per entry
// `stain scanner mean_l mean_a mean_b std_l std_a std_b` (CIELAB).
void save_style_bank(const fs::path& path, const StyleBank& bank);
StyleBank load_style_bank(const fs::path& path);

// Each pair independently, with probability p, gets its color statistics
// remapped to a random bank entry; draws with ssim(original, styled) < 0.7 on
// either branch are rejected (original kept). Returns number styled. Empty
// bank warns once and leaves the batch unchanged.
int style_infuse(std::vector<PatchPair>& pairs, const StyleBank& bank, double probability,
                 uint64_t seed);

// ---------------------------------------------------------------------------
// Plan application (trainer entry point)
// ---------------------------------------------------------------------------

// Applies the enabled ops to a materialized batch. Op order: style_infuse,
// geometric (basic + xy-jitter in one transform), targeted_hsv, heavy_color,
// color_jitter, noise_blur. Color ops use one draw per pair applied to both
// branch images; masks are only touched by the geometric transform. Pure
// function of (batch, plan, bank, seed).
void apply_augment_plan(std::vector<PatchPair>& pairs, const AugmentPlan& plan,
                        const StyleBank* bank, uint64_t seed);

}  // namespace mres
