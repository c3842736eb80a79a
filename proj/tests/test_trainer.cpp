#include <unistd.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <fstream>

#include "mres/report.hpp"
#include "mres/trainer.hpp"

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
    fs::path dir = fs::temp_directory_path() / ("mres_trainer_test_" + std::to_string(::getpid()) +
                                                "_" + std::to_string(counter++));
    fs::create_directories(dir);
    return dir;
}

// Small but structurally complete corpus: two training slides and one
// validation slide, each with one tumor blob and one ring.
// Four slides mixing content kinds so sampled pools cover all three classes:
// tumor nest in a gland (train), gland only (train), plain stroma (train),
// and a tumor+gland validation slide.
fs::path make_corpus(uint64_t seed, int size = 1024) {
    const fs::path dir = temp_dir();
    std::ostringstream listing;
    for (int i = 0; i < 4; ++i) {
        SynthSpec spec;
        spec.width = size;
        spec.height = size;
        spec.num_levels = 4;
        spec.tumor_blobs = (i == 0 || i == 3) ? 1 : 0;
        spec.ring_structures = i == 2 ? 0 : 1;
        spec.distractor_arcs = 2;
        spec.seed = seed + static_cast<uint64_t>(i);
        const PyramidalSlide slide = synth_slide(spec);
        save_slide(slide, dir / slide.id);
        listing << slide.id << " " << (i == 3 ? "val" : "train") << "\n";
    }
    write_text_atomic(dir / "corpus.txt", listing.str());
    return dir;
}

StagePlan smoke_plan(const std::string& name) {
    StagePlan plan;
    plan.name = name;
    plan.encoder_scale = "small";
    plan.dataset = "annotated_only";
    plan.augments = AugmentPlan::parse("basic");
    plan.epochs = 1;
    plan.lr0 = 0.001;
    plan.batch_size = 4;
    plan.dynamic_weights = true;
    return plan;
}

TrainOptions smoke_options() {
    TrainOptions opts;
    opts.micro_batch = 2;
    opts.workers = 2;
    opts.seed = 77;
    opts.sampling.stride0 = 256;
    opts.sampling.min_tissue = 0.05;
    opts.sampling.max_per_class = 8;
    opts.val_pairs_cap = 4;
    return opts;
}

std::string read_bytes(const fs::path& p) { return read_text_file(p); }

int64_t annotated_count(const LabelMask& m) { return cv::countNonZero(m.annotated); }

}  // namespace

TEST_CASE("cyclic learning rate follows the closed form") {
    const LrSchedule s{0.01, 2};
    CHECK(s.lr(0, 0, 10) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(s.lr(0, 5, 10) == doctest::Approx(0.01 * (1 - 0.9 * 0.25)).epsilon(1e-12));
    CHECK(s.lr(1, 0, 10) == doctest::Approx(0.01 * (1 - 0.9 * 0.5)).epsilon(1e-12));
    CHECK(s.lr(1, 9, 10) == doctest::Approx(0.01 * (1 - 0.9 * 0.95)).epsilon(1e-12));
    CHECK(s.lr(2, 0, 10) == doctest::Approx(0.005).epsilon(1e-12));
    CHECK(s.lr(3, 5, 10) == doctest::Approx(0.005 * (1 - 0.9 * 0.75)).epsilon(1e-12));
    CHECK(s.lr(4, 0, 10) == doctest::Approx(0.0025).epsilon(1e-12));
    // Monotone decrease within each cycle.
    double prev = 1.0;
    for (int e = 0; e < 2; ++e)
        for (int b = 0; b < 10; ++b) {
            const double v = s.lr(e, b, 10);
            CHECK(v < prev);
            prev = v;
        }
}

TEST_CASE("plan files round-trip and validate") {
    std::vector<StagePlan> stages = {smoke_plan("alpha"), smoke_plan("beta")};
    stages[1].encoder_scale = "large";
    stages[1].dataset = "full_set";
    stages[1].augments = AugmentPlan::parse("basic+heavy_color+targeted_hsv+noise");
    stages[1].threshold = 0.65;
    stages[1].epochs = 7;
    stages[1].lr0 = 0.0007;
    stages[1].batch_size = 8;
    stages[1].dynamic_weights = false;
    stages[1].static_weights = {1.0, 1.5, 1.0};

    const fs::path path = temp_dir() / "roundtrip.plan";
    save_plan(path, stages);
    const auto back = load_plan(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "alpha");
    CHECK(back[1].encoder_scale == "large");
    CHECK(back[1].dataset == "full_set");
    CHECK(back[1].augments.serialize() == "basic+heavy_color+targeted_hsv+noise");
    CHECK(back[1].threshold == 0.65);
    CHECK(back[1].epochs == 7);
    CHECK(back[1].lr0 == 0.0007);
    CHECK(back[1].batch_size == 8);
    CHECK(back[1].dynamic_weights == false);
    CHECK(back[1].static_weights[1] == 1.5);
    CHECK(back[0].dynamic_weights == true);
}

TEST_CASE("plan parser rejects malformed input") {
    const fs::path dir = temp_dir();
    const auto write = [&](const std::string& name, const std::string& text) {
        write_text_atomic(dir / name, text);
        return dir / name;
    };
    CHECK_THROWS_AS(load_plan(write("a.plan", "stage x\nmodel small\nend\n")), ConfigError);
    CHECK_THROWS_AS(load_plan(write("b.plan", "stage x\nencoder_scale small\n")), ConfigError);
    CHECK_THROWS_AS(load_plan(write("c.plan", "encoder_scale small\n")), ConfigError);
    CHECK_THROWS_AS(load_plan(write("d.plan", "# only comments\n")), ConfigError);
    CHECK_THROWS_AS(load_plan(write("e.plan", "stage x\nweight_mode maybe\nend\n")), ConfigError);
    CHECK_THROWS_AS(load_plan(write("f.plan", "stage x\nthreshold 1.5\nend\n")), ConfigError);
    CHECK_THROWS_AS(load_plan(write("g.plan", "stage x\ndataset everything\nend\n")), ConfigError);
}

TEST_CASE("shipped six-stage plan carries the published schedule") {
    const auto stages = load_plan(fs::path(MRES_REPO_DIR) / "plans" / "table8.plan");
    REQUIRE(stages.size() == 6);
    const double thr[] = {0.9, 0.8, 0.7, 0.6, 0.5, 0.4};
    const double lr0[] = {0.01, 0.005, 0.001, 0.0007, 0.0005, 0.0001};
    const int epochs[] = {20, 5, 5, 5, 5, 10};
    const bool dynamic[] = {false, true, true, true, true, false};
    const char* augments[] = {"basic",
                              "basic+color_jitter+noise",
                              "basic+heavy_color+noise",
                              "basic+heavy_color+targeted_hsv+noise",
                              "basic+heavy_color+targeted_hsv+noise+style",
                              "basic+noise+style+xy_jitter"};
    for (int i = 0; i < 6; ++i) {
        CAPTURE(i);
        CHECK(stages[static_cast<size_t>(i)].threshold == thr[i]);
        CHECK(stages[static_cast<size_t>(i)].lr0 == lr0[i]);
        CHECK(stages[static_cast<size_t>(i)].epochs == epochs[i]);
        CHECK(stages[static_cast<size_t>(i)].dynamic_weights == dynamic[i]);
        CHECK(stages[static_cast<size_t>(i)].augments.serialize() == augments[i]);
        CHECK(stages[static_cast<size_t>(i)].batch_size == 16);
    }
    CHECK(stages[0].name == "base");
    CHECK(stages[0].encoder_scale == "small");
    CHECK(stages[0].dataset == "annotated_only");
    CHECK((stages[0].static_weights == std::array<double, 3>{1.0, 1.0, 1.0}));
    for (int i = 1; i < 6; ++i) {
        CHECK(stages[static_cast<size_t>(i)].encoder_scale == "large");
        CHECK(stages[static_cast<size_t>(i)].dataset == "full_set");
    }
    CHECK((stages[5].static_weights == std::array<double, 3>{1.0, 1.5, 1.0}));
}

TEST_CASE("model presets") {
    const NetworkConfig small = model_config("small");
    CHECK(small.depth == 3);
    CHECK(small.base_channels == 4);
    const NetworkConfig large = model_config("large");
    CHECK(large.depth == 4);
    CHECK(large.base_channels == 8);
    CHECK(parameter_count(*DualUNet(small)) < parameter_count(*DualUNet(large)));
    CHECK_THROWS_AS(model_config("giant"), ConfigError);
}

TEST_CASE("corpus loading honors splits and annotation precedence") {
    const fs::path dir = make_corpus(301, 512);
    Corpus corpus = load_corpus(dir);
    REQUIRE(corpus.slides.size() == 4);
    CHECK(corpus.train_indices().size() == 3);
    CHECK(corpus.val_indices() == std::vector<size_t>{3});

    // Without a separate annotation plane the human labels equal the truth.
    const CorpusSlide& cs = corpus.slides[0];
    REQUIRE(cs.slide.truth.has_value());
    CHECK(annotated_count(cs.human) == annotated_count(*cs.slide.truth));
    CHECK(annotated_count(cs.working) == annotated_count(cs.human));

    // A partial annotation plane takes precedence over the truth.
    PyramidalSlide slide = load_slide(dir / corpus.slides[0].slide.id);
    LabelMask partial = slide.truth->clone();
    partial.annotated.rowRange(partial.annotated.rows / 2, partial.annotated.rows).setTo(0);
    slide.annotation = partial;
    const fs::path dir2 = temp_dir();
    save_slide(slide, dir2 / slide.id);
    write_text_atomic(dir2 / "corpus.txt", slide.id + " train\n");
    Corpus corpus2 = load_corpus(dir2);
    CHECK(annotated_count(corpus2.slides[0].human) == cv::countNonZero(partial.annotated));
    CHECK(annotated_count(corpus2.slides[0].human) < annotated_count(*slide.truth));

    // Bad split labels are rejected.
    write_text_atomic(dir2 / "corpus.txt", slide.id + " test\n");
    CHECK_THROWS_AS(load_corpus(dir2), ConfigError);
}

TEST_CASE("style bank groups by stain and scanner") {
    const fs::path dir = make_corpus(420, 512);
    Corpus corpus = load_corpus(dir);
    corpus.slides[0].slide.tags.stain = "HE";
    corpus.slides[1].slide.tags.stain = "ER";
    corpus.slides[2].slide.tags.stain = "ER";
    const StyleBank bank = build_style_bank(corpus, 1);
    REQUIRE(bank.size() == 2);  // three train slides, two stains; val excluded
    for (const auto& e : bank) {
        CHECK(e.mean[0] > 0.0);
        CHECK(e.mean[0] < 255.0);
        CHECK(e.stddev[0] >= 0.0);
    }
}

TEST_CASE("one-epoch stage trains deterministically") {
    const fs::path dir = make_corpus(118);
    Corpus corpus = load_corpus(dir);
    const StagePlan plan = smoke_plan("smoke");
    const TrainOptions opts = smoke_options();

    const fs::path out1 = temp_dir();
    const StageResult r1 = train_stage(corpus, plan, opts, out1, nullptr, std::nullopt);
    CHECK(r1.name == "smoke");
    CHECK(r1.parameters > 0);
    CHECK(r1.pool_tumor >= plan.batch_size / 2);
    CHECK(r1.pool_normal >= plan.batch_size / 4);
    CHECK(r1.pool_others >= plan.batch_size / 4);
    REQUIRE(r1.epochs.size() == 1);
    CHECK(std::isfinite(r1.epochs[0].train_loss));
    CHECK(r1.epochs[0].train_loss > 0.0);
    CHECK(r1.epochs[0].val_loss > 0.0);
    CHECK(r1.epochs[0].val_accuracy >= 0.0);
    CHECK(r1.epochs[0].val_accuracy <= 1.0);
    CHECK(r1.epochs[0].lr_first == doctest::Approx(plan.lr0).epsilon(1e-12));
    CHECK(fs::exists(r1.checkpoint));
    CHECK(fs::exists(out1 / "log.txt"));

    // Same corpus, plan, and seed: byte-identical checkpoint.
    Corpus corpus2 = load_corpus(dir);
    const fs::path out2 = temp_dir();
    const StageResult r2 = train_stage(corpus2, plan, opts, out2, nullptr, std::nullopt);
    CHECK(read_bytes(r1.checkpoint) == read_bytes(r2.checkpoint));

    // Different seed: different weights.
    TrainOptions opts3 = opts;
    opts3.seed = 78;
    Corpus corpus3 = load_corpus(dir);
    const fs::path out3 = temp_dir();
    const StageResult r3 = train_stage(corpus3, plan, opts3, out3, nullptr, std::nullopt);
    CHECK(read_bytes(r1.checkpoint) != read_bytes(r3.checkpoint));

    // Warm start from the finished stage matches every parameter.
    DualUNet net(model_config(plan.encoder_scale));
    const WarmStart ws = load_matching(*net, r1.checkpoint);
    CHECK(ws.matched == ws.params);
    CHECK(ws.matched == ws.archived);

    // The trained model predicts and scores on the validation slide.
    const double iou = corpus_val_iou(corpus, net);
    CHECK(iou >= 0.0);
    CHECK(iou <= 1.0);
}

TEST_CASE("pseudo-labels never overwrite human annotations") {
    const fs::path dir = make_corpus(87, 512);
    Corpus corpus = load_corpus(dir);
    // Make the human annotation partial so pseudo-labels have room.
    for (const size_t i : corpus.train_indices()) {
        CorpusSlide& cs = corpus.slides[i];
        cs.human.annotated.rowRange(cs.human.annotated.rows / 4,
                                    cs.human.annotated.rows).setTo(0);
        // Plant a deliberately wrong human pixel; it must survive relabeling.
        cs.human.classes(3, 3) = 2;
        cs.human.annotated(3, 3) = 255;
        cs.working = cs.human.clone();
    }

    torch::manual_seed(5);
    DualUNet net(model_config("small"));
    net->eval();
    pseudo_label(corpus, net, 0.4);
    int64_t annotated_at_04 = 0;
    for (const size_t i : corpus.train_indices()) {
        const CorpusSlide& cs = corpus.slides[i];
        CHECK(cs.working.classes(3, 3) == 2);
        CHECK(cs.working.annotated(3, 3) != 0);
        // Every human-annotated pixel is preserved verbatim.
        for (int y = 0; y < cs.human.annotated.rows; y += 7)
            for (int x = 0; x < cs.human.annotated.cols; x += 7)
                if (cs.human.annotated(y, x)) {
                    CHECK(cs.working.annotated(y, x) != 0);
                    CHECK(cs.working.classes(y, x) == cs.human.classes(y, x));
                }
        annotated_at_04 += annotated_count(cs.working);
    }

    // A lower confidence threshold never shrinks the annotated set.
    Corpus corpus2 = load_corpus(dir);
    for (const size_t i : corpus2.train_indices()) {
        CorpusSlide& cs = corpus2.slides[i];
        cs.human.annotated.rowRange(cs.human.annotated.rows / 4,
                                    cs.human.annotated.rows).setTo(0);
        cs.working = cs.human.clone();
    }
    pseudo_label(corpus2, net, 0.34);
    int64_t annotated_at_034 = 0;
    for (const size_t i : corpus2.train_indices())
        annotated_at_034 += annotated_count(corpus2.slides[i].working);
    CHECK(annotated_at_034 >= annotated_at_04);

    // Validation slides keep their original working labels.
    for (const size_t i : corpus.val_indices())
        CHECK(annotated_count(corpus.slides[i].working) ==
              annotated_count(corpus.slides[i].human));
}

TEST_CASE("two-stage protocol wires labels, warm starts, and snapshots") {
    const fs::path dir = make_corpus(515);
    Corpus corpus = load_corpus(dir);
    std::vector<StagePlan> stages = {smoke_plan("base"), smoke_plan("master1")};
    stages[1].dataset = "full_set";
    stages[1].threshold = 0.5;
    const TrainOptions opts = smoke_options();

    const fs::path out = temp_dir();
    const ProtocolResult result = multi_step_train(corpus, stages, opts, out);
    REQUIRE(result.stages.size() == 2);
    CHECK(result.final_checkpoint == result.stages[1].checkpoint);
    CHECK(fs::exists(out / "stage_00_base" / "checkpoint.bin"));
    CHECK(fs::exists(out / "stage_01_master1" / "checkpoint.bin"));
    for (const size_t i : corpus.train_indices()) {
        const std::string id = corpus.slides[i].slide.id;
        CHECK(fs::exists(out / "stage_00_base" / "labels" / (id + ".png")));
        CHECK(fs::exists(out / "stage_01_master1" / "labels" / (id + ".png")));
    }
    // The label snapshots decode back to level-0 masks.
    const std::string id0 = corpus.slides[corpus.train_indices()[0]].slide.id;
    cv::Mat bgr = cv::imread((out / "stage_01_master1" / "labels" / (id0 + ".png")).string());
    REQUIRE(!bgr.empty());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    const LabelMask snap = decode_mask_png(rgb, 0);
    CHECK(snap.classes.size() == corpus.slides[corpus.train_indices()[0]].slide.levels[0].size());
}
