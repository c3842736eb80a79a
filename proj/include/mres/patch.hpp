#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mres/pyramid.hpp"

namespace mres {

inline constexpr int kPatchSize = 512;

struct LevelPair {
    int high = 1;
    int low = 3;

    int ratio() const { return 1 << (low - high); }
    void validate(int num_levels = -1) const {
        if (!(high >= 0 && high < low)) throw ConfigError("level pair requires 0 <= high < low");
        const int r = ratio();
        if (r != 2 && r != 4 && r != 8) throw ConfigError("level pair ratio must be 2, 4 or 8");
        if (num_levels >= 0 && low >= num_levels)
            throw ConfigError("level pair exceeds slide pyramid depth");
    }
};

// Two co-centered 512x512 views of one field: `high` at level H and `low` at
// level L, with per-level label crops. The central (512/r)^2 window of `low`
// depicts the same field as `high` (r = 2^(L-H)).
struct PatchPair {
    cv::Mat high, low;            // CV_8UC3 RGB
    LabelMask high_mask, low_mask;
    cv::Point center;             // level-0 coordinates
    LevelPair levels;
    int patch_class = 0;
};

// Candidate line in a pool: everything needed to re-extract the pair.
struct PatchDescriptor {
    std::string slide_id;
    cv::Point center;  // level 0
    int patch_class = 0;
};

// Crop `size` x `size` window of `image` centered at `center` (level coords),
// reflect-padded (border-101) past image bounds.
cv::Mat crop_reflect(const cv::Mat& image, cv::Point center, int size);

// Same geometry for masks; padded pixels come back annotated=false.
LabelMask crop_mask(const LabelMask& mask, cv::Point center, int size);

// Extract the pair at level-0 coordinate `center`. `mask_pyramid` supplies the
// per-level supervision (element k = labels at level k); pass empty vector for
// unlabeled extraction (masks left blank, annotated=false).
PatchPair extract_patch_pair(const PyramidalSlide& slide, cv::Point center, LevelPair levels,
                             const std::vector<LabelMask>& mask_pyramid = {});

// Patch-level class from the high-resolution mask crop: tumor if >= 5% of
// annotated pixels are tumor, else others if >= 5% are others, else normal.
// Patches with < 1% of pixels annotated are rejected (nullopt).
std::optional<int> label_patch(const LabelMask& high_mask);

// Grid candidates over a slide: level-0 centers on a `stride0` grid (snapped
// to multiples of 2^L so branch windows stay pixel-aligned), kept when the
// high-window tissue fraction reaches `min_tissue` and label_patch accepts.
struct SampleOptions {
    int stride0 = 512;
    double min_tissue = 0.15;
    int max_per_class = 0;  // 0 = unlimited
};
std::vector<PatchDescriptor> sample_candidates(const PyramidalSlide& slide,
                                               const std::vector<LabelMask>& mask_pyramid,
                                               LevelPair levels, const SampleOptions& opts);

// Pool descriptor file: one line per candidate `slide_id center_x center_y patch_class`.
void save_pool(const fs::path& path, const std::vector<PatchDescriptor>& pool);
std::vector<PatchDescriptor> load_pool(const fs::path& path);

}  // namespace mres
