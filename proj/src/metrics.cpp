#include "mres/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mres {

ConfusionCounts count_confusion(const std::vector<uint8_t>& truth_pos,
                                const std::vector<double>& scores, double threshold) {
    MRES_CHECK(truth_pos.size() == scores.size(), "count_confusion: size mismatch");
    ConfusionCounts c;
    for (size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= threshold;
        const bool actual = truth_pos[i] != 0;
        if (pred && actual) ++c.tp;
        else if (pred) ++c.fp;
        else if (actual) ++c.fn;
        else ++c.tn;
    }
    return c;
}

ClassMetrics metrics_from_counts(const ConfusionCounts& c) {
    ClassMetrics m;
    m.iou = (c.tp + c.fp + c.fn) == 0 ? 1.0
                                      : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp + c.fn);
    if (c.tp + c.fp == 0)
        m.precision = (c.tp + c.fn == 0) ? 1.0 : 0.0;
    else
        m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    m.recall = (c.tp + c.fn) == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    m.sensitivity = m.recall;
    m.specificity =
        (c.tn + c.fp) == 0 ? 1.0 : static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    return m;
}

double auc_scores(const std::vector<uint8_t>& labels, const std::vector<double>& scores) {
    MRES_CHECK(labels.size() == scores.size(), "auc: size mismatch");
    int64_t pos = 0;
    for (uint8_t l : labels) pos += l != 0;
    const int64_t neg = static_cast<int64_t>(labels.size()) - pos;
    if (pos == 0 || neg == 0) return 0.5;

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // Rank sum with mid-ranks for ties.
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double mid_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]]) rank_sum_pos += mid_rank;
        i = j + 1;
    }
    const double u = rank_sum_pos - static_cast<double>(pos) * (pos + 1) / 2.0;
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double auc_from_histograms(const std::array<int64_t, 256>& pos, const std::array<int64_t, 256>& neg) {
    int64_t p_total = 0, n_total = 0;
    for (int v = 0; v < 256; ++v) {
        p_total += pos[v];
        n_total += neg[v];
    }
    if (p_total == 0 || n_total == 0) return 0.5;
    double wins = 0.0;
    int64_t neg_below = 0;
    for (int v = 0; v < 256; ++v) {
        wins += static_cast<double>(pos[v]) * (static_cast<double>(neg_below) + 0.5 * neg[v]);
        neg_below += neg[v];
    }
    return wins / (static_cast<double>(p_total) * static_cast<double>(n_total));
}

std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int i = 1; i <= 19; ++i) t.push_back(i * 0.05);
    return t;
}

MetricAccumulator::MetricAccumulator(std::vector<double> thresholds)
    : thresholds_(std::move(thresholds)) {
    MRES_CHECK(!thresholds_.empty() && thresholds_.size() <= 32, "MetricAccumulator needs 1..32 thresholds");
    for (int c = 0; c < kNumClasses; ++c) counts_[c].resize(thresholds_.size());
    // Smallest byte whose v/255 score clears each threshold; 256 = never.
    vcut_.resize(thresholds_.size(), 256);
    for (size_t ti = 0; ti < thresholds_.size(); ++ti)
        for (int v = 0; v < 256; ++v)
            if (v / 255.0 >= thresholds_[ti]) {
                vcut_[ti] = v;
                break;
            }
}

void MetricAccumulator::add(const LabelMask& truth, const std::array<cv::Mat1b, kNumClasses>& prob_u8) {
    for (int c = 0; c < kNumClasses; ++c)
        MRES_CHECK(prob_u8[c].size() == truth.classes.size(), "metric add: raster size mismatch");
    for (int y = 0; y < truth.classes.rows; ++y) {
        const uint8_t* cl = truth.classes.ptr<uint8_t>(y);
        const uint8_t* an = truth.annotated.ptr<uint8_t>(y);
        const uint8_t* pr[kNumClasses];
        for (int c = 0; c < kNumClasses; ++c) pr[c] = prob_u8[c].ptr<uint8_t>(y);
        for (int x = 0; x < truth.classes.cols; ++x) {
            if (!an[x]) continue;
            for (int c = 0; c < kNumClasses; ++c) {
                const bool actual = cl[x] == c;
                const int v = pr[c][x];
                (actual ? pos_hist_[c] : neg_hist_[c])[v] += 1;
                for (size_t ti = 0; ti < thresholds_.size(); ++ti) {
                    const bool pred = v >= vcut_[ti];
                    ConfusionCounts& cc = counts_[c][ti];
                    if (pred && actual) ++cc.tp;
                    else if (pred) ++cc.fp;
                    else if (actual) ++cc.fn;
                    else ++cc.tn;
                }
            }
        }
    }
}

void MetricAccumulator::merge(const MetricAccumulator& other) {
    MRES_CHECK(thresholds_ == other.thresholds_, "metric merge: threshold grids differ");
    for (int c = 0; c < kNumClasses; ++c) {
        for (size_t ti = 0; ti < thresholds_.size(); ++ti) counts_[c][ti] += other.counts_[c][ti];
        for (int v = 0; v < 256; ++v) {
            pos_hist_[c][v] += other.pos_hist_[c][v];
            neg_hist_[c][v] += other.neg_hist_[c][v];
        }
    }
}

MetricReport MetricAccumulator::report(double report_threshold, const std::string& group) const {
    MetricReport r;
    r.thresholds = thresholds_;
    r.report_threshold = report_threshold;
    r.group = group;
    size_t ref_idx = 0;
    double best_dist = 1e9;
    for (size_t ti = 0; ti < thresholds_.size(); ++ti) {
        const double d = std::abs(thresholds_[ti] - report_threshold);
        if (d < best_dist) {
            best_dist = d;
            ref_idx = ti;
        }
    }
    for (int c = 0; c < kNumClasses; ++c) {
        r.per_class[c].reserve(thresholds_.size());
        for (size_t ti = 0; ti < thresholds_.size(); ++ti)
            r.per_class[c].push_back(metrics_from_counts(counts_[c][ti]));
        r.auc[c] = auc_from_histograms(pos_hist_[c], neg_hist_[c]);
        // Precision/recall crossing: sweep threshold minimizing |p - r|, lower t on ties.
        double best = 1e9;
        size_t best_ti = 0;
        for (size_t ti = 0; ti < thresholds_.size(); ++ti) {
            const double d = std::abs(r.per_class[c][ti].precision - r.per_class[c][ti].recall);
            if (d < best - 1e-15) {
                best = d;
                best_ti = ti;
            }
        }
        r.crossing[c] = thresholds_[best_ti];
    }
    r.mean_iou_with_bg =
        (r.per_class[0][ref_idx].iou + r.per_class[1][ref_idx].iou + r.per_class[2][ref_idx].iou) / 3.0;
    r.mean_iou_no_bg = (r.per_class[1][ref_idx].iou + r.per_class[2][ref_idx].iou) / 2.0;
    return r;
}

std::string MetricReport::to_csv() const {
    std::ostringstream out;
    out.precision(6);
    out << std::fixed;
    out << "group,"  << group << '\n';
    out << "class,threshold,iou,precision,recall,sensitivity,specificity\n";
    for (int c = 0; c < kNumClasses; ++c)
        for (size_t ti = 0; ti < thresholds.size(); ++ti) {
            const ClassMetrics& m = per_class[c][ti];
            out << c << ',' << thresholds[ti] << ',' << m.iou << ',' << m.precision << ',' << m.recall
                << ',' << m.sensitivity << ',' << m.specificity << '\n';
        }
    for (int c = 0; c < kNumClasses; ++c) out << "auc," << c << ',' << auc[c] << '\n';
    for (int c = 0; c < kNumClasses; ++c) out << "crossing," << c << ',' << crossing[c] << '\n';
    out << "mean_iou_with_bg," << report_threshold << ',' << mean_iou_with_bg << '\n';
    out << "mean_iou_no_bg," << report_threshold << ',' << mean_iou_no_bg << '\n';
    return out.str();
}

double hard_iou(const cv::Mat1b& pred, const LabelMask& truth, int cls) {
    MRES_CHECK(pred.size() == truth.classes.size(), "hard_iou: size mismatch");
    int64_t inter = 0, uni = 0;
    for (int y = 0; y < pred.rows; ++y) {
        const uint8_t* p = pred.ptr<uint8_t>(y);
        const uint8_t* t = truth.classes.ptr<uint8_t>(y);
        const uint8_t* an = truth.annotated.ptr<uint8_t>(y);
        for (int x = 0; x < pred.cols; ++x) {
            if (!an[x]) continue;
            const bool a = p[x] == cls, b = t[x] == cls;
            inter += a && b;
            uni += a || b;
        }
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace mres
