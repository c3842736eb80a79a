#include <unistd.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mres/report.hpp"

// torch's c10 logging defines CHECK-style macros unconditionally; include
// doctest last and reclaim the assertion macros for the test framework.
#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LE
#undef CHECK_LT
#undef CHECK_GE
#undef CHECK_GT
#include <doctest.h>

using namespace mres;

namespace {

fs::path temp_dir() {
    static int counter = 0;
    fs::path dir = fs::temp_directory_path() / ("mres_report_test_" + std::to_string(::getpid()) +
                                                "_" + std::to_string(counter++));
    fs::create_directories(dir);
    return dir;
}

// Hand-built slide: white ground, a dark tumor square and a dark others
// square, fully annotated truth.
PyramidalSlide toy_slide(const std::string& id) {
    cv::Mat base(256, 256, CV_8UC3, cv::Scalar(245, 240, 242));
    cv::rectangle(base, {32, 32, 64, 64}, cv::Scalar(140, 80, 150), cv::FILLED);
    cv::rectangle(base, {160, 160, 64, 64}, cv::Scalar(90, 70, 160), cv::FILLED);
    PyramidalSlide slide = build_pyramid(base, 3);
    slide.id = id;
    LabelMask truth = LabelMask::blank(base.size(), 0);
    truth.annotated.setTo(255);
    truth.classes(cv::Rect(32, 32, 64, 64)).setTo(1);
    truth.classes(cv::Rect(160, 160, 64, 64)).setTo(2);
    slide.truth = truth;
    return slide;
}

// The prediction that matches the truth exactly at the given level.
SlidePrediction perfect_prediction(const PyramidalSlide& slide, int level) {
    const LabelMask truth = downsample_mask(*slide.truth, 1 << level);
    SlidePrediction pred;
    pred.level = level;
    pred.argmax = truth.classes.clone();
    for (int c = 0; c < kNumClasses; ++c) {
        pred.probs[static_cast<size_t>(c)] = cv::Mat1b(truth.classes.size(), 0);
        pred.probs[static_cast<size_t>(c)].setTo(255, truth.classes == c);
    }
    return pred;
}

}  // namespace

TEST_CASE("box stats five-number summary") {
    const BoxStats one = box_stats({0.4});
    CHECK(one.n == 1);
    CHECK(one.min == 0.4);
    CHECK(one.q1 == 0.4);
    CHECK(one.median == 0.4);
    CHECK(one.q3 == 0.4);
    CHECK(one.max == 0.4);

    // Linear interpolation at rank p*(n-1).
    const BoxStats four = box_stats({4.0, 1.0, 3.0, 2.0});
    CHECK(four.min == 1.0);
    CHECK(four.q1 == doctest::Approx(1.75).epsilon(1e-12));
    CHECK(four.median == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(four.q3 == doctest::Approx(3.25).epsilon(1e-12));
    CHECK(four.max == 4.0);

    const BoxStats five = box_stats({5.0, 1.0, 2.0, 3.0, 4.0});
    CHECK(five.median == 3.0);
    CHECK(five.q1 == 2.0);
    CHECK(five.q3 == 4.0);

    CHECK_THROWS_AS(box_stats({}), Error);
}

TEST_CASE("prediction rasters round-trip through files") {
    Rng rng(33);
    SlidePrediction pred;
    pred.level = 1;
    pred.argmax = cv::Mat1b(20, 30);
    for (int c = 0; c < kNumClasses; ++c) pred.probs[static_cast<size_t>(c)] = cv::Mat1b(20, 30);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 30; ++x) {
            pred.argmax(y, x) = static_cast<uint8_t>(rng.uniform_int(0, 2));
            for (int c = 0; c < kNumClasses; ++c)
                pred.probs[static_cast<size_t>(c)](y, x) = static_cast<uint8_t>(rng.uniform_int(0, 255));
        }
    const fs::path dir = temp_dir();
    save_prediction(dir, pred);
    const SlidePrediction back = load_prediction(dir);
    CHECK(back.level == 1);
    CHECK(cv::countNonZero(back.argmax != pred.argmax) == 0);
    for (int c = 0; c < kNumClasses; ++c)
        CHECK(cv::countNonZero(back.probs[static_cast<size_t>(c)] !=
                               pred.probs[static_cast<size_t>(c)]) == 0);
}

TEST_CASE("heatmap blends gray base with red by probability") {
    cv::Mat rgb(2, 2, CV_8UC3, cv::Scalar(100, 150, 200));
    cv::Mat1b prob(2, 2, uint8_t(0));
    prob(0, 1) = 255;
    prob(1, 0) = 128;
    const cv::Mat heat = render_heatmap(rgb, prob);
    cv::Mat gray;
    cv::cvtColor(rgb, gray, cv::COLOR_RGB2GRAY);
    const uint8_t g = gray.at<uint8_t>(0, 0);
    // p=0: grayscale pixel.
    CHECK(heat.at<cv::Vec3b>(0, 0) == cv::Vec3b(g, g, g));
    // p=1: pure red.
    CHECK(heat.at<cv::Vec3b>(0, 1) == cv::Vec3b(255, 0, 0));
    // p=0.5: red channel above gray, others below.
    CHECK(heat.at<cv::Vec3b>(1, 0)[0] > g);
    CHECK(heat.at<cv::Vec3b>(1, 0)[1] < g);
    CHECK(heat.at<cv::Vec3b>(1, 0)[1] == heat.at<cv::Vec3b>(1, 0)[2]);
}

TEST_CASE("perfect predictions score IOU 1 at every threshold") {
    const PyramidalSlide slide = toy_slide("toy_a");
    const SlideEval ev = evaluate_slide(slide, perfect_prediction(slide, 1));
    CHECK(ev.mean_iou == 1.0);
    for (int c = 0; c < kNumClasses; ++c) CHECK(ev.class_iou[static_cast<size_t>(c)] == 1.0);
    const MetricReport report = ev.acc.report(0.45, "all");
    for (int c = 0; c < kNumClasses; ++c)
        for (size_t t = 0; t < report.thresholds.size(); ++t) {
            CHECK(report.per_class[static_cast<size_t>(c)][t].iou == 1.0);
            CHECK(report.per_class[static_cast<size_t>(c)][t].precision == 1.0);
            CHECK(report.per_class[static_cast<size_t>(c)][t].recall == 1.0);
        }
    CHECK(report.mean_iou_with_bg == 1.0);
    CHECK(report.mean_iou_no_bg == 1.0);
}

TEST_CASE("grouped evaluation merges accumulators and summarizes medians") {
    PyramidalSlide a = toy_slide("toy_a");
    PyramidalSlide b = toy_slide("toy_b");
    PyramidalSlide c = toy_slide("toy_c");
    a.tags.stain = "HE";
    b.tags.stain = "HE";
    c.tags.stain = "ER";

    SlidePrediction good_a = perfect_prediction(a, 1);
    SlidePrediction good_b = perfect_prediction(b, 1);
    // c predicts background everywhere: tumor/others IOU 0.
    SlidePrediction bad_c = perfect_prediction(c, 1);
    bad_c.argmax.setTo(0);
    bad_c.probs[0].setTo(255);
    bad_c.probs[1].setTo(0);
    bad_c.probs[2].setTo(0);

    const std::vector<SlideEval> evals = {evaluate_slide(a, good_a), evaluate_slide(b, good_b),
                                          evaluate_slide(c, bad_c)};
    CHECK(evals[2].mean_iou == 0.0);

    const auto all = group_evaluation(evals, "none");
    REQUIRE(all.size() == 1);
    CHECK(all[0].name == "all");
    CHECK(all[0].box.n == 3);
    CHECK(all[0].box.median == 1.0);  // sorted {0,1,1}
    CHECK(all[0].box.min == 0.0);
    CHECK(all[0].box.q1 == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(all[0].slide_iou.size() == 3);

    const auto by_stain = group_evaluation(evals, "stain");
    REQUIRE(by_stain.size() == 2);
    // Alphabetical by key: ER then HE.
    CHECK(by_stain[0].name == "stain=ER");
    CHECK(by_stain[0].box.n == 1);
    CHECK(by_stain[0].box.median == 0.0);
    CHECK(by_stain[1].name == "stain=HE");
    CHECK(by_stain[1].box.n == 2);
    CHECK(by_stain[1].box.median == 1.0);
    CHECK(by_stain[1].report.mean_iou_no_bg == 1.0);
    // The merged group equals member-wise perfection.
    for (size_t t = 0; t < by_stain[1].report.thresholds.size(); ++t)
        CHECK(by_stain[1].report.per_class[1][t].iou == 1.0);

    CHECK_THROWS_AS(group_evaluation(evals, "flavor"), ConfigError);
}

TEST_CASE("group report files land on disk") {
    const PyramidalSlide slide = toy_slide("toy_files");
    const std::vector<SlideEval> evals = {evaluate_slide(slide, perfect_prediction(slide, 1))};
    const auto groups = group_evaluation(evals, "stain");
    const fs::path dir = temp_dir();
    write_group_reports(dir, groups);
    CHECK(fs::exists(dir / "boxplot.txt"));
    CHECK(fs::exists(dir / "report_stain_HE.csv"));
    CHECK(fs::exists(dir / "curves_stain_HE_iou.png"));
    CHECK(fs::exists(dir / "curves_stain_HE_pr.png"));
    CHECK(fs::exists(dir / "curves_stain_HE_sens_spec.png"));
    CHECK(fs::exists(dir / "curves_stain_HE_roc.png"));
    const std::string box = read_text_file(dir / "boxplot.txt");
    CHECK(box.find("stain=HE 1 ") != std::string::npos);
    const std::string csv = read_text_file(dir / "report_stain_HE.csv");
    CHECK(csv.find("stain=HE") != std::string::npos);

    // The plots are real rasters.
    const cv::Mat img = cv::imread((dir / "curves_stain_HE_roc.png").string());
    REQUIRE(!img.empty());
    CHECK(img.cols == 640);
    CHECK(img.rows == 480);
}
