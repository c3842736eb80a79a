#include "mres/report.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

namespace mres {

namespace {

cv::Mat read_gray(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw Error("cannot read image " + path.string());
    return m;
}

std::string sanitize(const std::string& name) {
    std::string out = name;
    for (char& c : out)
        if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Prediction I/O
// ---------------------------------------------------------------------------

void save_prediction(const fs::path& dir, const SlidePrediction& pred) {
    fs::create_directories(dir);
    for (int c = 0; c < kNumClasses; ++c)
        imwrite_atomic(dir / ("prob_" + std::to_string(c) + ".png"),
                       pred.probs[static_cast<size_t>(c)]);
    imwrite_atomic(dir / "argmax.png", pred.argmax);
    write_text_atomic(dir / "meta.txt", "level=" + std::to_string(pred.level) + "\n");
}

SlidePrediction load_prediction(const fs::path& dir) {
    SlidePrediction pred;
    const std::string meta = read_text_file(dir / "meta.txt");
    const auto eq = meta.find("level=");
    MRES_CHECK(eq != std::string::npos, "prediction meta without level: " + dir.string());
    pred.level = std::stoi(meta.substr(eq + 6));
    for (int c = 0; c < kNumClasses; ++c)
        pred.probs[static_cast<size_t>(c)] = read_gray(dir / ("prob_" + std::to_string(c) + ".png"));
    pred.argmax = read_gray(dir / "argmax.png");
    for (int c = 0; c < kNumClasses; ++c)
        MRES_CHECK(pred.probs[static_cast<size_t>(c)].size() == pred.argmax.size(),
                   "prediction raster size mismatch in " + dir.string());
    return pred;
}

cv::Mat render_heatmap(const cv::Mat& rgb, const cv::Mat1b& prob_u8) {
    MRES_CHECK(rgb.type() == CV_8UC3 && rgb.size() == prob_u8.size(),
               "heatmap needs an RGB image and a matching probability raster");
    cv::Mat gray;
    cv::cvtColor(rgb, gray, cv::COLOR_RGB2GRAY);
    cv::Mat out(rgb.size(), CV_8UC3);
    for (int y = 0; y < rgb.rows; ++y) {
        const uint8_t* g = gray.ptr<uint8_t>(y);
        const uint8_t* p = prob_u8.ptr<uint8_t>(y);
        cv::Vec3b* o = out.ptr<cv::Vec3b>(y);
        for (int x = 0; x < rgb.cols; ++x) {
            const int a = p[x];  // overlay opacity in [0,255]
            const int base = g[x];
            o[x][0] = static_cast<uint8_t>((a * 255 + (255 - a) * base + 127) / 255);
            o[x][1] = static_cast<uint8_t>(((255 - a) * base + 127) / 255);
            o[x][2] = static_cast<uint8_t>(((255 - a) * base + 127) / 255);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

BoxStats box_stats(std::vector<double> values) {
    MRES_CHECK(!values.empty(), "box_stats on empty sample");
    std::sort(values.begin(), values.end());
    const auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(values.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        const double frac = pos - static_cast<double>(lo);
        if (lo + 1 >= values.size()) return values.back();
        return values[lo] + frac * (values[lo + 1] - values[lo]);
    };
    BoxStats b;
    b.n = static_cast<int>(values.size());
    b.min = values.front();
    b.q1 = quantile(0.25);
    b.median = quantile(0.5);
    b.q3 = quantile(0.75);
    b.max = values.back();
    return b;
}

SlideEval evaluate_slide(const PyramidalSlide& slide, const SlidePrediction& pred,
                         const std::vector<double>& thresholds) {
    MRES_CHECK(slide.truth.has_value(), "slide " + slide.id + " has no truth mask");
    SlideEval ev;
    ev.id = slide.id;
    ev.tags = slide.tags;
    ev.acc = MetricAccumulator(thresholds);
    const LabelMask truth =
        pred.level == 0 ? slide.truth->clone() : downsample_mask(*slide.truth, 1 << pred.level);
    MRES_CHECK(truth.classes.size() == pred.argmax.size(),
               "prediction level does not match the slide geometry");
    ev.acc.add(truth, pred.probs);
    double sum = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
        ev.class_iou[static_cast<size_t>(c)] = hard_iou(pred.argmax, truth, c);
        if (c > 0) sum += ev.class_iou[static_cast<size_t>(c)];
    }
    ev.mean_iou = sum / (kNumClasses - 1);
    return ev;
}

std::vector<GroupReport> group_evaluation(const std::vector<SlideEval>& slides,
                                          const std::string& group_by, double report_threshold) {
    if (group_by != "none" && group_by != "stain" && group_by != "scanner" && group_by != "source")
        throw ConfigError("group_by must be one of none|stain|scanner|source, got " + group_by);
    MRES_CHECK(!slides.empty(), "nothing to evaluate");

    const auto key = [&](const SlideTags& t) -> std::string {
        if (group_by == "stain") return "stain=" + t.stain;
        if (group_by == "scanner") return "scanner=" + t.scanner;
        if (group_by == "source") return "source=" + t.source;
        return "all";
    };

    std::map<std::string, std::vector<const SlideEval*>> by_group;
    for (const auto& s : slides) by_group[key(s.tags)].push_back(&s);

    std::vector<GroupReport> out;
    for (const auto& [name, members] : by_group) {
        GroupReport g;
        g.name = name;
        MetricAccumulator merged = members.front()->acc;
        std::vector<double> ious{members.front()->mean_iou};
        g.slide_iou.emplace_back(members.front()->id, members.front()->mean_iou);
        for (size_t i = 1; i < members.size(); ++i) {
            merged.merge(members[i]->acc);
            ious.push_back(members[i]->mean_iou);
            g.slide_iou.emplace_back(members[i]->id, members[i]->mean_iou);
        }
        g.report = merged.report(report_threshold, name);
        g.box = box_stats(ious);
        out.push_back(std::move(g));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

namespace {

struct Curve {
    std::string label;
    cv::Scalar color;  // RGB
    std::vector<cv::Point2d> pts;
};

const cv::Scalar kClassColors[kNumClasses] = {
    {60, 120, 216},  // normal: blue
    {200, 40, 40},   // tumor: red
    {30, 150, 60},   // others: green
};

cv::Mat draw_chart(const std::string& title, const std::string& x_label,
                   const std::string& y_label, const std::vector<Curve>& curves) {
    const int W = 640, H = 480, ml = 64, mr = 16, mt = 40, mb = 48;
    cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    const cv::Scalar axis(40, 40, 40), grid(220, 220, 220);
    const auto px = [&](double x) { return ml + static_cast<int>(std::lround(x * (W - ml - mr))); };
    const auto py = [&](double y) {
        return H - mb - static_cast<int>(std::lround(y * (H - mt - mb)));
    };
    for (int i = 0; i <= 4; ++i) {
        const double v = i / 4.0;
        cv::line(img, {px(v), py(0)}, {px(v), py(1)}, grid, 1);
        cv::line(img, {px(0), py(v)}, {px(1), py(v)}, grid, 1);
        std::ostringstream t;
        t << std::fixed << std::setprecision(2) << v;
        cv::putText(img, t.str(), {px(v) - 14, H - mb + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1);
        cv::putText(img, t.str(), {8, py(v) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1);
    }
    cv::rectangle(img, {px(0), py(1)}, {px(1), py(0)}, axis, 1);
    cv::putText(img, title, {ml, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.6, axis, 1);
    cv::putText(img, x_label, {W / 2 - 40, H - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1);
    cv::putText(img, y_label, {8, mt - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1);
    int ly = mt + 14;
    for (const auto& c : curves) {
        const auto clamp01 = [](double v) { return std::min(1.0, std::max(0.0, v)); };
        for (size_t i = 1; i < c.pts.size(); ++i)
            cv::line(img, {px(clamp01(c.pts[i - 1].x)), py(clamp01(c.pts[i - 1].y))},
                     {px(clamp01(c.pts[i].x)), py(clamp01(c.pts[i].y))}, c.color, 2);
        cv::line(img, {W - mr - 90, ly - 4}, {W - mr - 70, ly - 4}, c.color, 2);
        cv::putText(img, c.label, {W - mr - 64, ly}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1);
        ly += 18;
    }
    return img;
}

std::vector<Curve> per_class_curves(const MetricReport& r,
                                    cv::Point2d (*pt)(double t, const ClassMetrics& m)) {
    static const char* names[kNumClasses] = {"normal", "tumor", "others"};
    std::vector<Curve> curves;
    for (int c = 0; c < kNumClasses; ++c) {
        Curve cur;
        cur.label = names[c];
        cur.color = kClassColors[c];
        for (size_t i = 0; i < r.thresholds.size(); ++i)
            cur.pts.push_back(pt(r.thresholds[i], r.per_class[static_cast<size_t>(c)][i]));
        curves.push_back(std::move(cur));
    }
    return curves;
}

}  // namespace

cv::Mat plot_iou_vs_threshold(const MetricReport& r) {
    return draw_chart("IOU vs threshold", "threshold", "IOU",
                      per_class_curves(r, [](double t, const ClassMetrics& m) {
                          return cv::Point2d{t, m.iou};
                      }));
}

cv::Mat plot_precision_recall(const MetricReport& r) {
    return draw_chart("precision vs recall", "recall", "precision",
                      per_class_curves(r, [](double, const ClassMetrics& m) {
                          return cv::Point2d{m.recall, m.precision};
                      }));
}

cv::Mat plot_sensitivity_specificity(const MetricReport& r) {
    return draw_chart("sensitivity and specificity vs threshold", "threshold", "value", [&] {
        auto curves = per_class_curves(r, [](double t, const ClassMetrics& m) {
            return cv::Point2d{t, m.sensitivity};
        });
        auto spec = per_class_curves(r, [](double t, const ClassMetrics& m) {
            return cv::Point2d{t, m.specificity};
        });
        for (auto& c : spec) {
            c.label += " spec";
            c.color *= 0.5;
            curves.push_back(std::move(c));
        }
        return curves;
    }());
}

cv::Mat plot_roc(const MetricReport& r) {
    auto curves = per_class_curves(r, [](double, const ClassMetrics& m) {
        return cv::Point2d{1.0 - m.specificity, m.sensitivity};
    });
    // Sweep endpoints so the polyline spans the full FPR range.
    for (auto& c : curves) {
        c.pts.insert(c.pts.begin(), {1.0, 1.0});
        c.pts.push_back({0.0, 0.0});
    }
    return draw_chart("ROC", "false positive rate", "true positive rate", curves);
}

void write_group_reports(const fs::path& dir, const std::vector<GroupReport>& groups) {
    fs::create_directories(dir);
    std::ostringstream box;
    box << std::setprecision(10) << "group n min q1 median q3 max\n";
    for (const auto& g : groups) {
        const std::string stem = sanitize(g.name);
        write_text_atomic(dir / ("report_" + stem + ".csv"), g.report.to_csv());
        box << g.name << " " << g.box.n << " " << g.box.min << " " << g.box.q1 << " "
            << g.box.median << " " << g.box.q3 << " " << g.box.max << "\n";
        const auto save = [&](const std::string& suffix, const cv::Mat& rgb) {
            cv::Mat bgr;
            cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
            imwrite_atomic(dir / ("curves_" + stem + "_" + suffix + ".png"), bgr);
        };
        save("iou", plot_iou_vs_threshold(g.report));
        save("pr", plot_precision_recall(g.report));
        save("sens_spec", plot_sensitivity_specificity(g.report));
        save("roc", plot_roc(g.report));
    }
    write_text_atomic(dir / "boxplot.txt", box.str());
}

}  // namespace mres
