#include "mres/patch.hpp"

#include <opencv2/imgproc.hpp>

#include <array>
#include <cmath>
#include <sstream>

namespace mres {

namespace {

// border-101 reflection of an arbitrary (possibly negative) index into [0, n).
int reflect101(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    i = std::abs(i) % period;
    return i < n ? i : period - i;
}

}  // namespace

cv::Mat crop_reflect(const cv::Mat& image, cv::Point center, int size) {
    MRES_CHECK(!image.empty(), "crop_reflect: empty image");
    const int x0 = center.x - size / 2, y0 = center.y - size / 2;
    std::vector<int> xmap(size), ymap(size);
    for (int i = 0; i < size; ++i) {
        xmap[i] = reflect101(x0 + i, image.cols);
        ymap[i] = reflect101(y0 + i, image.rows);
    }
    cv::Mat out(size, size, image.type());
    const int ch = image.channels();
    for (int y = 0; y < size; ++y) {
        const uint8_t* src = image.ptr<uint8_t>(ymap[y]);
        uint8_t* dst = out.ptr<uint8_t>(y);
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < ch; ++c) dst[x * ch + c] = src[xmap[x] * ch + c];
    }
    return out;
}

LabelMask crop_mask(const LabelMask& mask, cv::Point center, int size) {
    MRES_CHECK(!mask.empty(), "crop_mask: empty mask");
    const int x0 = center.x - size / 2, y0 = center.y - size / 2;
    LabelMask out = LabelMask::blank(cv::Size(size, size), mask.level);
    for (int y = 0; y < size; ++y) {
        const int sy = y0 + y;
        const int ry = reflect101(sy, mask.classes.rows);
        const uint8_t* scl = mask.classes.ptr<uint8_t>(ry);
        const uint8_t* san = mask.annotated.ptr<uint8_t>(ry);
        uint8_t* ocl = out.classes.ptr<uint8_t>(y);
        uint8_t* oan = out.annotated.ptr<uint8_t>(y);
        const bool in_y = sy >= 0 && sy < mask.classes.rows;
        for (int x = 0; x < size; ++x) {
            const int sx = x0 + x;
            const int rx = reflect101(sx, mask.classes.cols);
            ocl[x] = scl[rx];
            // Reflected padding carries no supervision.
            oan[x] = (in_y && sx >= 0 && sx < mask.classes.cols) ? san[rx] : 0;
        }
    }
    return out;
}

PatchPair extract_patch_pair(const PyramidalSlide& slide, cv::Point center, LevelPair levels,
                             const std::vector<LabelMask>& mask_pyramid) {
    levels.validate(slide.num_levels());
    PatchPair pair;
    pair.center = center;
    pair.levels = levels;
    const cv::Point c_high(center.x >> levels.high, center.y >> levels.high);
    const cv::Point c_low(center.x >> levels.low, center.y >> levels.low);
    pair.high = crop_reflect(slide.level(levels.high), c_high, kPatchSize);
    pair.low = crop_reflect(slide.level(levels.low), c_low, kPatchSize);
    if (!mask_pyramid.empty()) {
        MRES_CHECK(static_cast<int>(mask_pyramid.size()) > levels.low,
                   "mask pyramid shallower than level pair");
        pair.high_mask = crop_mask(mask_pyramid[levels.high], c_high, kPatchSize);
        pair.low_mask = crop_mask(mask_pyramid[levels.low], c_low, kPatchSize);
        pair.patch_class = label_patch(pair.high_mask).value_or(0);
    } else {
        pair.high_mask = LabelMask::blank(cv::Size(kPatchSize, kPatchSize), levels.high);
        pair.low_mask = LabelMask::blank(cv::Size(kPatchSize, kPatchSize), levels.low);
    }
    return pair;
}

std::optional<int> label_patch(const LabelMask& high_mask) {
    MRES_CHECK(!high_mask.empty(), "label_patch: empty mask");
    int64_t counts[kNumClasses] = {0, 0, 0};
    int64_t ann = 0;
    for (int y = 0; y < high_mask.classes.rows; ++y) {
        const uint8_t* cl = high_mask.classes.ptr<uint8_t>(y);
        const uint8_t* an = high_mask.annotated.ptr<uint8_t>(y);
        for (int x = 0; x < high_mask.classes.cols; ++x) {
            if (an[x]) {
                ++ann;
                ++counts[cl[x]];
            }
        }
    }
    const int64_t total = static_cast<int64_t>(high_mask.classes.total());
    if (ann * 100 < total) return std::nullopt;  // < 1% annotated
    if (counts[1] * 20 >= ann) return 1;         // >= 5% tumor
    if (counts[2] * 20 >= ann) return 2;         // >= 5% others
    return 0;
}

std::vector<PatchDescriptor> sample_candidates(const PyramidalSlide& slide,
                                               const std::vector<LabelMask>& mask_pyramid,
                                               LevelPair levels, const SampleOptions& opts) {
    levels.validate(slide.num_levels());
    MRES_CHECK(static_cast<int>(mask_pyramid.size()) > levels.low,
               "mask pyramid shallower than level pair");
    const int snap = 1 << levels.low;
    const int stride = std::max(snap, opts.stride0 / snap * snap);
    const cv::Mat& high_img = slide.level(levels.high);
    const TissueMask tissue = otsu_tissue_mask(high_img);

    std::vector<PatchDescriptor> pool;
    for (int y = stride / 2; y < slide.levels[0].rows; y += stride) {
        for (int x = stride / 2; x < slide.levels[0].cols; x += stride) {
            const cv::Point c(x / snap * snap, y / snap * snap);
            const cv::Point ch(c.x >> levels.high, c.y >> levels.high);
            cv::Rect window(ch.x - kPatchSize / 2, ch.y - kPatchSize / 2, kPatchSize, kPatchSize);
            window &= cv::Rect(0, 0, high_img.cols, high_img.rows);
            if (window.empty()) continue;
            const double frac =
                static_cast<double>(cv::countNonZero(tissue.tissue(window))) / (kPatchSize * kPatchSize);
            if (frac < opts.min_tissue) continue;
            const LabelMask crop = crop_mask(mask_pyramid[levels.high], ch, kPatchSize);
            const auto cls = label_patch(crop);
            if (!cls) continue;
            pool.push_back({slide.id, c, *cls});
        }
    }

    if (opts.max_per_class > 0) {
        std::vector<PatchDescriptor> capped;
        for (int cls = 0; cls < kNumClasses; ++cls) {
            std::vector<PatchDescriptor> of_class;
            for (const auto& d : pool)
                if (d.patch_class == cls) of_class.push_back(d);
            const int n = static_cast<int>(of_class.size());
            if (n <= opts.max_per_class) {
                capped.insert(capped.end(), of_class.begin(), of_class.end());
            } else {
                // Evenly spaced deterministic subsample over the scan order.
                for (int i = 0; i < opts.max_per_class; ++i)
                    capped.push_back(of_class[static_cast<size_t>(i) * n / opts.max_per_class]);
            }
        }
        return capped;
    }
    return pool;
}

void save_pool(const fs::path& path, const std::vector<PatchDescriptor>& pool) {
    std::ostringstream out;
    for (const auto& d : pool)
        out << d.slide_id << ' ' << d.center.x << ' ' << d.center.y << ' ' << d.patch_class << '\n';
    write_text_atomic(path, out.str());
}

std::vector<PatchDescriptor> load_pool(const fs::path& path) {
    std::vector<PatchDescriptor> pool;
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        PatchDescriptor d;
        if (!(ls >> d.slide_id >> d.center.x >> d.center.y >> d.patch_class))
            throw Error("bad pool line: " + line);
        pool.push_back(d);
    }
    return pool;
}

}  // namespace mres
