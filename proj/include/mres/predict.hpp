#pragma once

#include "mres/network.hpp"

namespace mres {

struct PredictOptions {
    int stride = 256;     // tile step at level H (multiple of 2^(L-H))
    int micro_batch = 2;  // tiles per forward pass
};

// Full-slide fused prediction at level H: per-class 8-bit probability rasters
// (v = round(255 * p)) and the argmax mask (ties to the smaller class index).
struct SlidePrediction {
    std::array<cv::Mat1b, kNumClasses> probs;
    cv::Mat1b argmax;
    int level = 1;
};

// Tiles the slide with co-centered pairs on a `stride` grid (centers aligned
// to multiples of 2^L at level 0), averages the fused softmax over overlaps,
// and quantizes at the end. Deterministic for a fixed checkpoint.
SlidePrediction predict_slide(DualUNet& net, const PyramidalSlide& slide,
                              const PredictOptions& opts = {});

// Same tiling for the single-branch baseline (high branch input only).
SlidePrediction predict_slide_single(SingleUNet& net, const PyramidalSlide& slide,
                                     LevelPair levels, const PredictOptions& opts = {});

}  // namespace mres
