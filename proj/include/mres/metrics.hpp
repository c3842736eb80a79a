#pragma once

#include <array>
#include <string>
#include <vector>

#include "mres/pyramid.hpp"

namespace mres {

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

// One-vs-rest binarization: predicted positive iff score >= threshold.
ConfusionCounts count_confusion(const std::vector<uint8_t>& truth_pos,
                                const std::vector<double>& scores, double threshold);

struct ClassMetrics {
    double iou = 0, precision = 0, recall = 0, sensitivity = 0, specificity = 0;
};

// Division-by-zero sentinels: iou with empty union = 1; recall/sensitivity
// with zero actual positives = 1; specificity with zero actual negatives = 1;
// precision with zero predicted positives = 1 if also zero actual positives,
// else 0. recall and sensitivity are the same expression (bit-identical).
ClassMetrics metrics_from_counts(const ConfusionCounts& c);

// Area under ROC via the rank (Mann-Whitney) statistic with 0.5 credit for
// ties; identical to trapezoidal integration over all distinct thresholds.
// Degenerate single-class input returns 0.5.
double auc_scores(const std::vector<uint8_t>& labels, const std::vector<double>& scores);

// Exact AUC for 8-bit quantized scores from per-bin positive/negative counts.
double auc_from_histograms(const std::array<int64_t, 256>& pos, const std::array<int64_t, 256>& neg);

// 0.05, 0.10, ..., 0.95.
std::vector<double> default_thresholds();

struct MetricReport {
    std::vector<double> thresholds;
    std::array<std::vector<ClassMetrics>, kNumClasses> per_class;  // [class][threshold index]
    std::array<double, kNumClasses> auc{};
    std::array<double, kNumClasses> crossing{};  // threshold where |precision-recall| is minimal
    double report_threshold = 0.45;
    double mean_iou_with_bg = 0.0;  // at report_threshold, classes {0,1,2}
    double mean_iou_no_bg = 0.0;    // at report_threshold, classes {1,2}
    std::string group = "all";

    std::string to_csv() const;
};

// Accumulates one-vs-rest confusion counts at every sweep threshold plus
// per-class score histograms, over any number of rasters. Scores are 8-bit
// probability rasters (v/255), the same quantization the prediction PNGs
// carry, so file-based and in-memory evaluation agree exactly. Only annotated
// pixels contribute. Accumulation is an order-independent sum.
class MetricAccumulator {
public:
    explicit MetricAccumulator(std::vector<double> thresholds = default_thresholds());

    void add(const LabelMask& truth, const std::array<cv::Mat1b, kNumClasses>& prob_u8);
    void merge(const MetricAccumulator& other);

    MetricReport report(double report_threshold = 0.45, const std::string& group = "all") const;

private:
    std::vector<double> thresholds_;
    std::array<std::vector<ConfusionCounts>, kNumClasses> counts_;
    std::vector<int> vcut_;
    std::array<std::array<int64_t, 256>, kNumClasses> pos_hist_{};
    std::array<std::array<int64_t, 256>, kNumClasses> neg_hist_{};
};

// Pixel-level intersection-over-union of `pred == cls` vs `truth == cls` over
// annotated pixels (argmax-style hard IOU used by slide-level comparisons).
double hard_iou(const cv::Mat1b& pred, const LabelMask& truth, int cls);

}  // namespace mres
