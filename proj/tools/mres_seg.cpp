#include <CLI11.hpp>
#include <opencv2/imgproc.hpp>

#include <iomanip>
#include <iostream>
#include <sstream>

#include "mres/report.hpp"
#include "mres/trainer.hpp"

using namespace mres;

namespace {

// Every command echoes its effective configuration into its output directory
// so a run can be reproduced from the artifacts alone.
void echo_run_config(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& kv) {
    fs::create_directories(dir);
    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    write_text_atomic(dir / "run_config.txt", os.str());
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

DualUNet net_from_checkpoint(const fs::path& ckpt) {
    const NetworkConfig cfg = NetworkConfig::parse(checkpoint_config_line(ckpt));
    DualUNet net(cfg);
    load_checkpoint(*net, ckpt);
    return net;
}

void write_rgb(const fs::path& path, const cv::Mat& rgb) {
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    imwrite_atomic(path, bgr);
}

int cmd_synth(const std::string& spec_file, const std::string& out, int count, uint64_t seed,
              double coverage) {
    SynthSpec spec;
    if (!spec_file.empty()) spec = SynthSpec::load(spec_file);
    const fs::path out_dir(out);
    fs::create_directories(out_dir);

    static const char* stains[] = {"HE", "ER", "PR"};
    static const char* scanners[] = {"scanner0", "scanner1"};
    static const char* sources[] = {"synth0", "synth1", "synth2", "synth3"};

    std::ostringstream manifest;
    for (int i = 0; i < count; ++i) {
        SynthSpec s = spec;
        s.seed = seed + static_cast<uint64_t>(i);
        // Cycle content kinds (full, ring-only, structure-free, full, ...) so
        // sampled pools cover all three classes even on small corpora.
        if (i % 4 == 1) s.tumor_blobs = 0;
        if (i % 4 == 2) { s.tumor_blobs = 0; s.ring_structures = 0; }
        PyramidalSlide slide = synth_slide(s);
        slide.tags.stain = stains[i % 3];
        slide.tags.scanner = scanners[i % 2];
        slide.tags.source = sources[i % 4];
        if (coverage < 1.0 && slide.truth) {
            // Partial human annotation: keep only the top `coverage` fraction
            // of rows annotated.
            LabelMask ann = slide.truth->clone();
            const int keep = static_cast<int>(std::lround(coverage * ann.annotated.rows));
            if (keep < ann.annotated.rows)
                ann.annotated.rowRange(keep, ann.annotated.rows).setTo(0);
            slide.annotation = std::move(ann);
        }
        save_slide(slide, out_dir / slide.id);
        manifest << slide.id << " " << (i % 5 == 4 ? "val" : "train") << "\n";
        std::cerr << "synth " << slide.id << " (" << slide.tags.stain << "/" << slide.tags.scanner
                  << "/" << slide.tags.source << ")\n";
    }
    write_text_atomic(out_dir / "corpus.txt", manifest.str());
    spec.save(out_dir / "synth_spec.txt");
    echo_run_config(out_dir, {{"command", "synth"},
                              {"spec", spec_file},
                              {"out", out},
                              {"count", std::to_string(count)},
                              {"seed", std::to_string(seed)},
                              {"annotation_coverage", fmt(coverage)}});
    return 0;
}

int cmd_train(const std::string& data, const std::string& plan_file, const std::string& out,
              const TrainOptions& opts, const std::string& device) {
    const std::vector<StagePlan> stages = load_plan(plan_file);
    Corpus corpus = load_corpus(data);
    const fs::path out_dir(out);
    echo_run_config(out_dir, {{"command", "train"},
                              {"data", data},
                              {"plan", plan_file},
                              {"out", out},
                              {"seed", std::to_string(opts.seed)},
                              {"level_high", std::to_string(opts.levels.high)},
                              {"level_low", std::to_string(opts.levels.low)},
                              {"batch_size", std::to_string(opts.batch_size)},
                              {"micro_batch", std::to_string(opts.micro_batch)},
                              {"workers", std::to_string(opts.workers)},
                              {"val_pairs_cap", std::to_string(opts.val_pairs_cap)},
                              {"epoch_scale", fmt(opts.epoch_scale)},
                              {"sample_stride", std::to_string(opts.sampling.stride0)},
                              {"max_per_class", std::to_string(opts.sampling.max_per_class)},
                              {"device", device}});

    const ProtocolResult result = multi_step_train(corpus, stages, opts, out_dir);

    std::ostringstream sum;
    sum << std::setprecision(10);
    for (const auto& sr : result.stages) {
        const double miou = sr.epochs.empty() ? 0.0 : sr.epochs.back().val_mean_iou;
        sum << "stage " << sr.name << " parameters " << sr.parameters << " pool "
            << sr.pool_tumor << "/" << sr.pool_normal << "/" << sr.pool_others << " epochs "
            << sr.epochs.size() << " val_miou " << miou << " checkpoint "
            << sr.checkpoint.string() << "\n";
    }
    sum << "final_checkpoint " << result.final_checkpoint.string() << "\n";
    write_text_atomic(out_dir / "summary.txt", sum.str());
    std::cout << sum.str();
    return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& slide_dir,
                const std::string& out, const PredictOptions& popts) {
    DualUNet net = net_from_checkpoint(checkpoint);
    const PyramidalSlide slide = load_slide(slide_dir);
    const SlidePrediction pred = predict_slide(net, slide, popts);
    const fs::path out_dir(out);
    save_prediction(out_dir, pred);
    for (int c = 0; c < kNumClasses; ++c)
        write_rgb(out_dir / ("heatmap_" + std::to_string(c) + ".png"),
                  render_heatmap(slide.level(pred.level), pred.probs[static_cast<size_t>(c)]));
    echo_run_config(out_dir, {{"command", "predict"},
                              {"checkpoint", checkpoint},
                              {"slide", slide_dir},
                              {"out", out},
                              {"stride", std::to_string(popts.stride)},
                              {"micro_batch", std::to_string(popts.micro_batch)}});
    std::cout << "predicted " << slide.id << " at level " << pred.level << " ("
              << pred.argmax.cols << "x" << pred.argmax.rows << ")\n";
    return 0;
}

int cmd_eval(const std::string& data, const std::string& pred_dir, const std::string& out,
             const std::string& group_by, double report_threshold) {
    const fs::path data_dir(data);
    std::istringstream listing(read_text_file(data_dir / "corpus.txt"));
    std::vector<SlideEval> evals;
    std::string id, split;
    while (listing >> id >> split) {
        const fs::path pdir = fs::path(pred_dir) / id;
        if (!fs::exists(pdir / "meta.txt")) continue;
        const PyramidalSlide slide = load_slide(data_dir / id);
        evals.push_back(evaluate_slide(slide, load_prediction(pdir)));
        std::cerr << "eval " << id << " mean_iou " << std::setprecision(6)
                  << evals.back().mean_iou << "\n";
    }
    if (evals.empty()) throw ConfigError("no predictions found under " + pred_dir);
    const auto groups = group_evaluation(evals, group_by, report_threshold);
    const fs::path out_dir(out);
    write_group_reports(out_dir, groups);
    echo_run_config(out_dir, {{"command", "eval"},
                              {"data", data},
                              {"pred", pred_dir},
                              {"out", out},
                              {"group_by", group_by},
                              {"report_threshold", fmt(report_threshold)}});
    for (const auto& g : groups)
        std::cout << g.name << " slides " << g.box.n << " median_iou " << std::setprecision(6)
                  << g.box.median << " mean_iou_no_bg " << g.report.mean_iou_no_bg << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-resolution multi-class tissue segmentation pipeline"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic pyramidal slide corpus");
    std::string sy_spec, sy_out;
    int sy_count = 1;
    uint64_t sy_seed = 0;
    double sy_cov = 1.0;
    synth->add_option("--spec", sy_spec, "synthesis spec file (defaults used if omitted)");
    synth->add_option("--out", sy_out, "output corpus directory")->required();
    synth->add_option("--count", sy_count, "number of slides")->required();
    synth->add_option("--seed", sy_seed, "base seed; slide i uses seed+i")->required();
    synth->add_option("--annotation-coverage", sy_cov,
                      "fraction of rows carrying human annotation (default 1 = full truth)");

    // train
    auto* train = app.add_subcommand("train", "run a multi-stage training plan");
    std::string tr_data, tr_plan, tr_out, tr_device = "cpu";
    TrainOptions topts;
    train->add_option("--data", tr_data, "corpus directory (corpus.txt + slide dirs)")->required();
    train->add_option("--plan", tr_plan, "stage plan file")->required();
    train->add_option("--out", tr_out, "run directory")->required();
    train->add_option("--seed", topts.seed, "training seed")->required();
    train->add_option("--level-high", topts.levels.high, "high-resolution pyramid level");
    train->add_option("--level-low", topts.levels.low, "low-resolution pyramid level");
    train->add_option("--batch-size", topts.batch_size,
                      "override the plan's logical batch size (0 = use plan)");
    train->add_option("--micro-batch", topts.micro_batch, "gradient accumulation slice");
    train->add_option("--workers", topts.workers, "prefetch threads");
    train->add_option("--val-cap", topts.val_pairs_cap, "validation pairs per epoch");
    train->add_option("--epoch-scale", topts.epoch_scale, "multiplier on plan epochs");
    train->add_option("--sample-stride", topts.sampling.stride0, "candidate stride at level 0");
    train->add_option("--max-per-class", topts.sampling.max_per_class,
                      "per-slide per-class candidate cap (0 = unlimited)");
    train->add_option("--device", tr_device, "device hint (cpu)");

    // predict
    auto* predict = app.add_subcommand("predict", "tile a slide and save fused predictions");
    std::string pr_ckpt, pr_slide, pr_out;
    PredictOptions popts;
    predict->add_option("--checkpoint", pr_ckpt, "model checkpoint")->required();
    predict->add_option("--slide", pr_slide, "slide directory")->required();
    predict->add_option("--out", pr_out, "prediction output directory")->required();
    predict->add_option("--stride", popts.stride, "tile stride at the high-res level");
    predict->add_option("--micro-batch", popts.micro_batch, "tiles per forward pass");

    // eval
    auto* eval = app.add_subcommand("eval", "threshold-sweep evaluation and group reports");
    std::string ev_data, ev_pred, ev_out, ev_group = "none";
    double ev_thresh = 0.45;
    eval->add_option("--data", ev_data, "corpus directory with truth masks")->required();
    eval->add_option("--pred", ev_pred, "directory of per-slide prediction dirs")->required();
    eval->add_option("--out", ev_out, "report output directory")->required();
    eval->add_option("--group-by", ev_group, "none|stain|scanner|source");
    eval->add_option("--report-threshold", ev_thresh, "threshold for the summary IOU rows");

    try {
        app.parse(argc, argv);
        if (*synth) return cmd_synth(sy_spec, sy_out, sy_count, sy_seed, sy_cov);
        if (*train) return cmd_train(tr_data, tr_plan, tr_out, topts, tr_device);
        if (*predict) return cmd_predict(pr_ckpt, pr_slide, pr_out, popts);
        if (*eval) return cmd_eval(ev_data, ev_pred, ev_out, ev_group, ev_thresh);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
