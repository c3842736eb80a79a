#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "mres/metrics.hpp"
#include "mres/predict.hpp"

namespace mres {

// ---------------------------------------------------------------------------
// Prediction raster I/O. A prediction directory holds one 8-bit grayscale PNG
// per class probability map, the fused argmax mask, and a small meta file
// recording the pyramid level the rasters live at.
// ---------------------------------------------------------------------------

void save_prediction(const fs::path& dir, const SlidePrediction& pred);
SlidePrediction load_prediction(const fs::path& dir);

// Grayscale copy of the slide image with a red overlay whose opacity is the
// per-pixel class probability (darker red = higher confidence). Input and
// output are RGB; `prob_u8` must match the image size.
cv::Mat render_heatmap(const cv::Mat& rgb, const cv::Mat1b& prob_u8);

// ---------------------------------------------------------------------------
// Group-wise evaluation
// ---------------------------------------------------------------------------

struct BoxStats {
    int n = 0;
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

// Five-number summary; quartiles interpolate linearly at rank p*(n-1).
BoxStats box_stats(std::vector<double> values);

struct SlideEval {
    std::string id;
    SlideTags tags;
    std::array<double, kNumClasses> class_iou{};  // hard argmax IOU vs truth
    double mean_iou = 0;                          // classes 1 and 2
    MetricAccumulator acc;
};

// Compares a prediction against the slide's truth mask downsampled to the
// prediction's level. Throws if the slide has no truth.
SlideEval evaluate_slide(const PyramidalSlide& slide, const SlidePrediction& pred,
                         const std::vector<double>& thresholds = default_thresholds());

struct GroupReport {
    std::string name;  // "all", "stain=HE", ...
    MetricReport report;
    BoxStats box;  // over per-slide mean IOU
    std::vector<std::pair<std::string, double>> slide_iou;
};

// group_by in {none, stain, scanner, source}. "none" yields the single group
// "all"; otherwise slides are grouped by the chosen tag and each group's
// accumulator is the merge of its members'.
std::vector<GroupReport> group_evaluation(const std::vector<SlideEval>& slides,
                                          const std::string& group_by,
                                          double report_threshold = 0.45);

// ---------------------------------------------------------------------------
// Plots (RGB rasters drawn with OpenCV primitives)
// ---------------------------------------------------------------------------

cv::Mat plot_iou_vs_threshold(const MetricReport& r);
cv::Mat plot_precision_recall(const MetricReport& r);
cv::Mat plot_sensitivity_specificity(const MetricReport& r);
cv::Mat plot_roc(const MetricReport& r);

// Writes per-group outputs under `dir`: report_<group>.csv, boxplot.txt
// (one "group n min q1 median q3 max" line per group) and the four curve
// plots per group as PNG files.
void write_group_reports(const fs::path& dir, const std::vector<GroupReport>& groups);

}  // namespace mres
