#pragma once

// Independent reference implementations used only by tests. These are written
// as directly as possible (plain loops, double arithmetic, no shared helpers
// with the library) so a bug in the production code cannot hide in its oracle.

#include <opencv2/core.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// 2x box mean with round-half-up, computed in double.
inline cv::Mat box_downsample2_ref(const cv::Mat& src) {
    const int oh = (src.rows + 1) / 2, ow = (src.cols + 1) / 2, ch = src.channels();
    cv::Mat dst(oh, ow, src.type());
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            for (int c = 0; c < ch; ++c) {
                double sum = 0;
                int n = 0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int sy = 2 * y + dy, sx = 2 * x + dx;
                        if (sy < src.rows && sx < src.cols) {
                            sum += src.ptr<uint8_t>(sy)[sx * ch + c];
                            ++n;
                        }
                    }
                dst.ptr<uint8_t>(y)[x * ch + c] = static_cast<uint8_t>(std::floor(sum / n + 0.5));
            }
    return dst;
}

// Exhaustive Otsu: recompute class statistics from scratch for every split.
inline int otsu_ref(const std::array<int64_t, 256>& hist) {
    double best = -1.0;
    int best_t = 0;
    int64_t total = 0;
    for (int v = 0; v < 256; ++v) total += hist[v];
    std::vector<std::pair<int, double>> all;
    for (int t = 0; t < 255; ++t) {
        int64_t n0 = 0, n1 = 0;
        double s0 = 0, s1 = 0;
        for (int v = 0; v <= t; ++v) {
            n0 += hist[v];
            s0 += static_cast<double>(hist[v]) * v;
        }
        for (int v = t + 1; v < 256; ++v) {
            n1 += hist[v];
            s1 += static_cast<double>(hist[v]) * v;
        }
        if (n0 == 0 || n1 == 0) continue;
        const double w0 = static_cast<double>(n0) / total, w1 = static_cast<double>(n1) / total;
        const double mu0 = s0 / n0, mu1 = s1 / n1;
        const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        all.emplace_back(t, var);
        if (var > best) best = var;
    }
    // Smallest threshold within a relative hair of the maximum (flat regions
    // between populated bins are mathematically exactly flat).
    for (const auto& [t, var] : all)
        if (var >= best * (1.0 - 1e-12)) {
            best_t = t;
            break;
        }
    return best_t;
}

// Window-majority downsampling with tumor > others > background tie priority.
// Returns (class, annotated) for one window of a class/annotation plane.
inline std::pair<int, bool> window_majority_ref(const cv::Mat1b& classes, const cv::Mat1b& annotated,
                                                int y0, int x0, int factor) {
    int counts[3] = {0, 0, 0};
    int ann = 0, window = 0;
    for (int y = y0; y < std::min(y0 + factor, classes.rows); ++y)
        for (int x = x0; x < std::min(x0 + factor, classes.cols); ++x) {
            ++window;
            if (annotated(y, x)) {
                ++ann;
                ++counts[classes(y, x)];
            }
        }
    int best_cls = 0, best_count = -1;
    for (int cls : {1, 2, 0})  // priority order
        if (counts[cls] > best_count) {
            best_count = counts[cls];
            best_cls = cls;
        }
    if (counts[1] == 0 && counts[2] == 0 && counts[0] == 0) best_cls = 0;
    return {best_cls, 2 * ann >= window};
}

// Direct-summation SSIM with an explicitly constructed gaussian window and
// border-101 reflection, evaluated per pixel.
inline double ssim_ref(const cv::Mat& a, const cv::Mat& b) {
    const int half = 5;
    double w1d[11];
    double wsum = 0;
    for (int i = 0; i < 11; ++i) {
        w1d[i] = std::exp(-((i - half) * (i - half)) / (2.0 * 1.5 * 1.5));
        wsum += w1d[i];
    }
    for (int i = 0; i < 11; ++i) w1d[i] /= wsum;
    const double C1 = (0.01 * 255) * (0.01 * 255), C2 = (0.03 * 255) * (0.03 * 255);
    auto reflect = [](int i, int n) {
        if (n == 1) return 0;
        const int period = 2 * n - 2;
        i = std::abs(i) % period;
        return i < n ? i : period - i;
    };
    const int ch = a.channels();
    double total = 0;
    for (int c = 0; c < ch; ++c) {
        double chan_sum = 0;
        for (int y = 0; y < a.rows; ++y)
            for (int x = 0; x < a.cols; ++x) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int dy = -half; dy <= half; ++dy)
                    for (int dx = -half; dx <= half; ++dx) {
                        const double w = w1d[dy + half] * w1d[dx + half];
                        const int sy = reflect(y + dy, a.rows), sx = reflect(x + dx, a.cols);
                        const double va = a.ptr<uint8_t>(sy)[sx * ch + c];
                        const double vb = b.ptr<uint8_t>(sy)[sx * ch + c];
                        mx += w * va;
                        my += w * vb;
                        mxx += w * va * va;
                        myy += w * vb * vb;
                        mxy += w * va * vb;
                    }
                const double vx = mxx - mx * mx, vy = myy - my * my, cxy = mxy - mx * my;
                chan_sum += ((2 * mx * my + C1) * (2 * cxy + C2)) /
                            ((mx * mx + my * my + C1) * (vx + vy + C2));
            }
        total += chan_sum / (a.rows * a.cols);
    }
    return total / ch;
}

// Exhaustive Mann-Whitney AUC by pair counting with half credit for ties.
inline double auc_pairs_ref(const std::vector<uint8_t>& labels, const std::vector<double>& scores) {
    double wins = 0;
    int64_t pairs = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (!labels[i]) continue;
        for (size_t j = 0; j < labels.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return pairs == 0 ? 0.5 : wins / pairs;
}

}  // namespace oracle
