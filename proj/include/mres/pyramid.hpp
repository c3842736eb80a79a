#pragma once

#include <opencv2/core.hpp>

#include <optional>
#include <string>
#include <vector>

#include "mres/common.hpp"

namespace mres {

// Pixel classes used throughout: 0 = background/normal, 1 = tumor, 2 = others.
inline constexpr int kNumClasses = 3;

// Class plane plus annotation plane at one pyramid level. Pixels with
// annotated == 0 carry no supervision: their class value is ignored by every
// loss and metric.
struct LabelMask {
    cv::Mat1b classes;    // values in {0,1,2}
    cv::Mat1b annotated;  // 0 or 255
    int level = 0;

    bool empty() const { return classes.empty(); }
    cv::Size size() const { return classes.size(); }

    static LabelMask blank(cv::Size size, int level = 0);
    LabelMask clone() const;
};

struct SlideTags {
    std::string stain = "HE";
    std::string scanner = "scanner0";
    std::string source = "synth";
};

// In-memory pyramidal slide. Level 0 is full resolution; level k+1 has
// ceil(n/2) pixels per axis and is the 2x2 box-mean downsample of level k.
// Images are CV_8UC3 in RGB channel order.
struct PyramidalSlide {
    std::string id;
    double base_mpp = 0.25;  // metadata only
    SlideTags tags;
    std::vector<cv::Mat> levels;
    std::optional<LabelMask> truth;       // dense reference mask at level 0
    std::optional<LabelMask> annotation;  // human annotation at level 0 (may be partial)

    int num_levels() const { return static_cast<int>(levels.size()); }
    const cv::Mat& level(int k) const;
    cv::Size level_size(int k) const;
};

// 2x downsample by box mean over the covered source pixels (1, 2 or 4 at the
// right/bottom edges of odd dimensions), rounded half up.
cv::Mat box_downsample2(const cv::Mat& src);

// Mean absolute difference per channel between `coarse` and
// box_downsample2(`finer`); the pyramid-consistency measure.
double pyramid_mad(const cv::Mat& coarse, const cv::Mat& finer);

std::vector<cv::Mat> build_pyramid_levels(const cv::Mat& base, int num_levels);
PyramidalSlide build_pyramid(const cv::Mat& base, int num_levels);

struct TissueMask {
    cv::Mat1b tissue;            // 255 = tissue
    int threshold = 0;           // gray threshold t; tissue = gray <= t
    double tissue_fraction = 0.0;
    bool degenerate = false;     // single-intensity histogram
};

// Otsu threshold on grayscale, exhaustive over all 256 candidate thresholds
// (maximize between-class variance; smallest maximizing t on ties). Tissue is
// the darker side: gray <= t.
TissueMask otsu_tissue_mask(const cv::Mat& rgb);

// One 2x step of label downsampling: each output pixel takes the majority
// class among its source window's annotated pixels, ties broken by priority
// tumor(1) > others(2) > background(0); output annotated iff at least half of
// the window's source pixels are annotated.
LabelMask downsample_mask2(const LabelMask& src);

// General power-of-two factor via repeated 2x steps (factor 1 returns a copy).
LabelMask downsample_mask(const LabelMask& src, int factor);

// Per-level masks matching the slide's pyramid dims; element k is the level-k
// mask derived from `level0`.
std::vector<LabelMask> build_mask_pyramid(const LabelMask& level0, int num_levels);

// Generator knobs for synthetic slides. Identical spec -> bit-identical slide.
struct SynthSpec {
    int width = 2048;
    int height = 2048;
    int num_levels = 4;
    int tumor_blobs = 1;
    int ring_structures = 1;
    int distractor_arcs = 4;   // open wall-colored arcs, class 0
    double texture_scale = 1.0;
    uint64_t seed = 0;

    static SynthSpec load(const fs::path& path);
    void save(const fs::path& path) const;
};

// Synthesizes a slide whose tumor blobs and ring interiors share one nuclear
// texture; rings are distinguishable from tumor only by the enclosing wall,
// and open wall arcs appear near tumors and in stroma so that wall fragments
// alone never identify a class. truth is set (annotated everywhere),
// annotation is left unset.
PyramidalSlide synth_slide(const SynthSpec& spec);

// Slide directory: `manifest` (key=value lines), level_<k>.png per level,
// mask_level0.png (class in red 0/128/255, annotated in green 0/255), and
// optional annotation_level0.png in the same encoding. Round-trip bit-exact.
void save_slide(const PyramidalSlide& slide, const fs::path& dir);
PyramidalSlide load_slide(const fs::path& dir);

// PNG helpers shared with prediction rasters; atomic (temp + rename).
void imwrite_atomic(const fs::path& path, const cv::Mat& image);
cv::Mat encode_mask_png(const LabelMask& mask);
LabelMask decode_mask_png(const cv::Mat& rgb, int level);

}  // namespace mres
