#include "mres/predict.hpp"

#include <cmath>
#include <functional>

namespace mres {

namespace {

// Tile centers at level H covering [0, dim): a regular `stride` grid plus a
// final center aligned upward so the last window reaches the raster edge.
// All centers stay multiples of 2^(L-H), keeping level-0 centers on the 2^L
// grid that pins both branch windows to exact pixel boundaries.
std::vector<int> tile_centers(int dim, int stride, int align) {
    std::vector<int> cs;
    const int half = kPatchSize / 2;
    for (int c = half; c - half + kPatchSize < dim; c += stride) cs.push_back(c);
    int last = dim - half;
    last = (last + align - 1) / align * align;
    if (cs.empty() || last > cs.back()) cs.push_back(last);
    return cs;
}

SlidePrediction accumulate_tiles(const PyramidalSlide& slide, LevelPair levels, int stride,
                                 int micro_batch,
                                 const std::function<torch::Tensor(const std::vector<PatchPair>&)>&
                                     fused_probs) {
    levels.validate(slide.num_levels());
    const cv::Mat& ref = slide.level(levels.high);
    const int h = ref.rows, w = ref.cols;
    const int align = 1 << (levels.low - levels.high);
    MRES_CHECK(stride % align == 0 && stride > 0, "tile stride must be a positive multiple of r");

    std::array<cv::Mat, kNumClasses> sum;
    for (auto& s : sum) s = cv::Mat::zeros(h, w, CV_32FC1);
    cv::Mat weight = cv::Mat::zeros(h, w, CV_32FC1);

    std::vector<cv::Point> centers;  // level H
    for (int cy : tile_centers(h, stride, align))
        for (int cx : tile_centers(w, stride, align)) centers.emplace_back(cx, cy);

    torch::NoGradGuard guard;
    for (size_t i0 = 0; i0 < centers.size(); i0 += static_cast<size_t>(micro_batch)) {
        std::vector<PatchPair> pairs;
        for (size_t i = i0; i < std::min(i0 + static_cast<size_t>(micro_batch), centers.size()); ++i)
            pairs.push_back(extract_patch_pair(
                slide, cv::Point(centers[i].x << levels.high, centers[i].y << levels.high), levels));
        const torch::Tensor probs = fused_probs(pairs);  // [n, C, 512, 512]
        for (size_t i = 0; i < pairs.size(); ++i) {
            const cv::Point c = centers[i0 + i];
            const int x0 = c.x - kPatchSize / 2, y0 = c.y - kPatchSize / 2;
            const cv::Rect raster = cv::Rect(0, 0, w, h) & cv::Rect(x0, y0, kPatchSize, kPatchSize);
            if (raster.empty()) continue;
            const cv::Rect local(raster.x - x0, raster.y - y0, raster.width, raster.height);
            const torch::Tensor t =
                probs[static_cast<int64_t>(i)].to(torch::kFloat32).contiguous();
            const auto acc = t.accessor<float, 3>();
            for (int c_i = 0; c_i < kNumClasses; ++c_i) {
                cv::Mat roi = sum[static_cast<size_t>(c_i)](raster);
                for (int y = 0; y < raster.height; ++y) {
                    float* row = roi.ptr<float>(y);
                    for (int x = 0; x < raster.width; ++x)
                        row[x] += acc[c_i][local.y + y][local.x + x];
                }
            }
            weight(raster) += 1.0f;
        }
    }

    SlidePrediction out;
    out.level = levels.high;
    out.argmax = cv::Mat1b(h, w, static_cast<uint8_t>(0));
    for (auto& p : out.probs) p = cv::Mat1b(h, w, static_cast<uint8_t>(0));
    for (int y = 0; y < h; ++y) {
        const float* wrow = weight.ptr<float>(y);
        for (int x = 0; x < w; ++x) {
            MRES_CHECK(wrow[x] > 0.0f, "tile grid left raster pixels uncovered");
            float best = -1.0f;
            int best_c = 0;
            for (int c_i = 0; c_i < kNumClasses; ++c_i) {
                const float p = sum[static_cast<size_t>(c_i)].ptr<float>(y)[x] / wrow[x];
                out.probs[static_cast<size_t>(c_i)](y, x) =
                    static_cast<uint8_t>(std::lround(255.0 * std::min(1.0f, std::max(0.0f, p))));
                if (p > best) {
                    best = p;
                    best_c = c_i;
                }
            }
            out.argmax(y, x) = static_cast<uint8_t>(best_c);
        }
    }
    return out;
}

}  // namespace

SlidePrediction predict_slide(DualUNet& net, const PyramidalSlide& slide,
                              const PredictOptions& opts) {
    net->eval();
    return accumulate_tiles(
        slide, net->config().levels, opts.stride, opts.micro_batch,
        [&](const std::vector<PatchPair>& pairs) {
            std::vector<cv::Mat> highs, lows;
            for (const auto& p : pairs) {
                highs.push_back(p.high);
                lows.push_back(p.low);
            }
            const NetworkOutput out = net->forward(images_to_batch(highs), images_to_batch(lows));
            return torch::softmax(out.fused, 1);
        });
}

SlidePrediction predict_slide_single(SingleUNet& net, const PyramidalSlide& slide,
                                     LevelPair levels, const PredictOptions& opts) {
    net->eval();
    return accumulate_tiles(slide, levels, opts.stride, opts.micro_batch,
                            [&](const std::vector<PatchPair>& pairs) {
                                std::vector<cv::Mat> highs;
                                for (const auto& p : pairs) highs.push_back(p.high);
                                return torch::softmax(net->forward(images_to_batch(highs)), 1);
                            });
}

}  // namespace mres
