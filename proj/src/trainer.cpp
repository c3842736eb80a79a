#include "mres/trainer.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mres/metrics.hpp"

namespace mres {

namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

int prob_cutoff(double threshold) {
    return static_cast<int>(std::ceil(255.0 * threshold - 1e-9));
}

}  // namespace

// ---------------------------------------------------------------------------
// Learning rate
// ---------------------------------------------------------------------------

double LrSchedule::lr(int epoch, int batch_in_epoch, int batches_per_epoch) const {
    MRES_CHECK(cycle_epochs > 0 && batches_per_epoch > 0, "bad lr schedule inputs");
    const int cycle = epoch / cycle_epochs;
    const double peak = lr0 * std::pow(0.5, cycle);
    const double pos = (epoch % cycle_epochs + static_cast<double>(batch_in_epoch) / batches_per_epoch) /
                       cycle_epochs;
    return peak * (1.0 - 0.9 * pos);
}

// ---------------------------------------------------------------------------
// Plan files
// ---------------------------------------------------------------------------

std::vector<StagePlan> load_plan(const fs::path& path) {
    std::istringstream is(read_text_file(path));
    std::vector<StagePlan> stages;
    std::optional<StagePlan> cur;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        const auto fail = [&](const std::string& why) {
            throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " + why);
        };
        if (key == "stage") {
            if (cur) fail("stage inside stage (missing end)");
            cur.emplace();
            if (!(ls >> cur->name)) fail("stage needs a name");
            continue;
        }
        if (!cur) fail("directive outside a stage block: " + key);
        if (key == "end") {
            stages.push_back(*cur);
            cur.reset();
        } else if (key == "encoder_scale") {
            ls >> cur->encoder_scale;
        } else if (key == "dataset") {
            ls >> cur->dataset;
            if (cur->dataset != "annotated_only" && cur->dataset != "full_set")
                fail("dataset must be annotated_only or full_set");
        } else if (key == "augments") {
            std::string ops;
            ls >> ops;
            cur->augments = AugmentPlan::parse(ops);
        } else if (key == "threshold") {
            ls >> cur->threshold;
            if (!(cur->threshold > 0.0 && cur->threshold <= 1.0)) fail("threshold must be in (0,1]");
        } else if (key == "epochs") {
            ls >> cur->epochs;
        } else if (key == "lr0") {
            ls >> cur->lr0;
        } else if (key == "batch_size") {
            ls >> cur->batch_size;
        } else if (key == "weight_mode") {
            std::string mode;
            ls >> mode;
            if (mode == "dynamic") {
                cur->dynamic_weights = true;
            } else if (mode == "static") {
                cur->dynamic_weights = false;
            } else {
                fail("weight_mode must be dynamic or static");
            }
        } else if (key == "static_weights") {
            for (auto& w : cur->static_weights)
                if (!(ls >> w)) fail("static_weights needs 3 values");
        } else {
            fail("unknown plan key: " + key);
        }
    }
    if (cur) throw ConfigError(path.string() + ": unterminated stage block");
    if (stages.empty()) throw ConfigError(path.string() + ": plan has no stages");
    return stages;
}

void save_plan(const fs::path& path, const std::vector<StagePlan>& stages) {
    std::ostringstream os;
    os << std::setprecision(17);
    for (const auto& s : stages) {
        os << "stage " << s.name << "\n";
        os << "encoder_scale " << s.encoder_scale << "\n";
        os << "dataset " << s.dataset << "\n";
        os << "augments " << s.augments.serialize() << "\n";
        os << "threshold " << s.threshold << "\n";
        os << "epochs " << s.epochs << "\n";
        os << "lr0 " << s.lr0 << "\n";
        os << "batch_size " << s.batch_size << "\n";
        os << "weight_mode " << (s.dynamic_weights ? "dynamic" : "static") << "\n";
        if (!s.dynamic_weights)
            os << "static_weights " << s.static_weights[0] << " " << s.static_weights[1] << " "
               << s.static_weights[2] << "\n";
        os << "end\n";
    }
    write_text_atomic(path, os.str());
}

NetworkConfig model_config(const std::string& preset, LevelPair levels) {
    NetworkConfig cfg;
    cfg.levels = levels;
    if (preset == "small") {
        cfg.depth = 3;
        cfg.base_channels = 4;
    } else if (preset == "large") {
        cfg.depth = 4;
        cfg.base_channels = 8;
    } else {
        throw ConfigError("unknown model preset: " + preset);
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

CorpusSlide& Corpus::by_id(const std::string& id) {
    for (auto& s : slides)
        if (s.slide.id == id) return s;
    throw Error("unknown slide id: " + id);
}

std::vector<size_t> Corpus::train_indices() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < slides.size(); ++i)
        if (!slides[i].validation) out.push_back(i);
    return out;
}

std::vector<size_t> Corpus::val_indices() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < slides.size(); ++i)
        if (slides[i].validation) out.push_back(i);
    return out;
}

Corpus load_corpus(const fs::path& dir) {
    const fs::path listing = dir / "corpus.txt";
    std::istringstream is(read_text_file(listing));
    Corpus corpus;
    std::string id, split;
    while (is >> id >> split) {
        if (split != "train" && split != "val")
            throw ConfigError(listing.string() + ": split must be train or val for " + id);
        CorpusSlide cs;
        cs.slide = load_slide(dir / id);
        cs.validation = split == "val";
        if (cs.slide.annotation)
            cs.human = cs.slide.annotation->clone();
        else if (cs.slide.truth)
            cs.human = cs.slide.truth->clone();
        else
            cs.human = LabelMask::blank(cs.slide.levels[0].size(), 0);
        cs.working = cs.human.clone();
        corpus.slides.push_back(std::move(cs));
    }
    if (corpus.slides.empty()) throw ConfigError(listing.string() + ": empty corpus");
    return corpus;
}

// ---------------------------------------------------------------------------
// Stage training
// ---------------------------------------------------------------------------

namespace {

struct SlideData {
    const PyramidalSlide* slide = nullptr;
    std::vector<LabelMask> mask_pyramid;
};

using SlideMap = std::map<std::string, SlideData>;

// Labels for this stage: the human annotation alone, or the working set.
const LabelMask& stage_labels(const CorpusSlide& cs, const StagePlan& plan) {
    return plan.dataset == "annotated_only" ? cs.human : cs.working;
}

std::pair<std::vector<PatchDescriptor>, SlideMap> build_pools(Corpus& corpus,
                                                              const StagePlan& plan,
                                                              const NetworkConfig& cfg,
                                                              const SampleOptions& sampling) {
    std::vector<PatchDescriptor> pool;
    SlideMap map;
    const int num_levels = cfg.levels.low + 1;
    for (const size_t i : corpus.train_indices()) {
        CorpusSlide& cs = corpus.slides[i];
        SlideData data;
        data.slide = &cs.slide;
        data.mask_pyramid = build_mask_pyramid(stage_labels(cs, plan), num_levels);
        auto cands = sample_candidates(cs.slide, data.mask_pyramid, cfg.levels, sampling);
        pool.insert(pool.end(), cands.begin(), cands.end());
        map.emplace(cs.slide.id, std::move(data));
    }
    return {std::move(pool), std::move(map)};
}

std::vector<PatchDescriptor> build_val_pairs(Corpus& corpus, const NetworkConfig& cfg,
                                             const SampleOptions& sampling, int cap,
                                             SlideMap& map) {
    std::vector<PatchDescriptor> pool;
    const int num_levels = cfg.levels.low + 1;
    for (const size_t i : corpus.val_indices()) {
        CorpusSlide& cs = corpus.slides[i];
        SlideData data;
        data.slide = &cs.slide;
        data.mask_pyramid = build_mask_pyramid(cs.human, num_levels);
        auto cands = sample_candidates(cs.slide, data.mask_pyramid, cfg.levels, sampling);
        pool.insert(pool.end(), cands.begin(), cands.end());
        map.emplace(cs.slide.id, std::move(data));
    }
    if (cap > 0 && static_cast<int>(pool.size()) > cap) {
        std::vector<PatchDescriptor> kept;
        for (int i = 0; i < cap; ++i)
            kept.push_back(pool[static_cast<size_t>(i) * pool.size() / static_cast<size_t>(cap)]);
        pool = std::move(kept);
    }
    return pool;
}

PatchPair materialize_one(const SlideMap& map, const PatchDescriptor& d, LevelPair levels) {
    const auto it = map.find(d.slide_id);
    MRES_CHECK(it != map.end(), "descriptor references unknown slide " + d.slide_id);
    return extract_patch_pair(*it->second.slide, d.center, levels, it->second.mask_pyramid);
}

struct HeadTensors {
    torch::Tensor high_cls, high_ann, low_cls, low_ann;
    int64_t ann_high = 0, ann_low = 0;
};

HeadTensors mask_tensors(const std::vector<PatchPair>& pairs, size_t lo, size_t hi) {
    std::vector<LabelMask> high, low;
    for (size_t i = lo; i < hi; ++i) {
        high.push_back(pairs[i].high_mask);
        low.push_back(pairs[i].low_mask);
    }
    HeadTensors t;
    t.high_cls = mask_classes_tensor(high);
    t.high_ann = mask_annotated_tensor(high);
    t.low_cls = mask_classes_tensor(low);
    t.low_ann = mask_annotated_tensor(low);
    t.ann_high = t.high_ann.sum().item<int64_t>();
    t.ann_low = t.low_ann.sum().item<int64_t>();
    return t;
}

double set_lr(torch::optim::Adam& opt, double lr) {
    for (auto& group : opt.param_groups())
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    return lr;
}

}  // namespace

StageResult train_stage(Corpus& corpus, const StagePlan& plan, const TrainOptions& opts,
                        const fs::path& out_dir, const StyleBank* bank,
                        const std::optional<fs::path>& warm_start) {
    const uint64_t stage_seed = derive_seed(opts.seed, fnv1a(plan.name));
    torch::manual_seed(stage_seed);

    const NetworkConfig cfg = model_config(plan.encoder_scale, opts.levels);
    DualUNet net(cfg);
    if (warm_start) {
        const WarmStart ws = load_matching(*net, *warm_start);
        std::cerr << "[" << plan.name << "] warm start: " << ws.matched << "/" << ws.params
                  << " parameters from " << warm_start->string() << "\n";
    }

    auto [pool, slide_map] = build_pools(corpus, plan, cfg, opts.sampling);
    SlideMap val_map;
    const auto val_pool = build_val_pairs(corpus, cfg, opts.sampling, opts.val_pairs_cap, val_map);

    const int batch_size = opts.batch_size > 0 ? opts.batch_size : plan.batch_size;
    BalancedBatchStream stream(pool, batch_size, stage_seed);
    const int epochs = std::max(1, static_cast<int>(std::lround(plan.epochs * opts.epoch_scale)));
    const int bpe = stream.batches_per_epoch();
    const int64_t total_batches = static_cast<int64_t>(epochs) * bpe;

    StageResult result;
    result.name = plan.name;
    result.parameters = parameter_count(*net);
    {
        std::array<int, kNumClasses> by_class{};
        for (const auto& d : pool) by_class[static_cast<size_t>(d.patch_class)]++;
        result.pool_normal = by_class[0];
        result.pool_tumor = by_class[1];
        result.pool_others = by_class[2];
    }

    BatchPrefetcher::Materialize mat = [&](const Batch& meta) {
        MaterializedBatch out;
        out.meta = meta;
        for (const auto& d : meta.pairs) out.pairs.push_back(materialize_one(slide_map, d, cfg.levels));
        return out;
    };
    BatchPrefetcher prefetch(stream, total_batches, mat, opts.workers);

    torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(plan.lr0));
    const LrSchedule schedule{plan.lr0, 2};
    const int micro = std::max(1, opts.micro_batch);

    fs::create_directories(out_dir);
    const fs::path log_path = out_dir / "log.txt";

    for (int epoch = 0; epoch < epochs; ++epoch) {
        net->train();
        double epoch_loss = 0.0;
        double lr_first = 0.0, lr_last = 0.0;
        for (int b = 0; b < bpe; ++b) {
            MaterializedBatch batch = prefetch.next();
            apply_augment_plan(batch.pairs, plan.augments, bank,
                               derive_seed(stage_seed, 0x10000 + static_cast<uint64_t>(batch.meta.index)));

            // Class weights from the full batch's high-resolution labels.
            std::array<double, kNumClasses> w = plan.static_weights;
            if (plan.dynamic_weights) {
                std::vector<LabelMask> highs;
                for (const auto& p : batch.pairs) highs.push_back(p.high_mask);
                w = dynamic_class_weights(mask_classes_tensor(highs), mask_annotated_tensor(highs));
            }

            // Full-batch annotated-pixel totals for exact gradient
            // accumulation (micro-batch losses are rescaled so their sum
            // equals the full-batch loss).
            int64_t n_high = 0, n_low = 0;
            for (const auto& p : batch.pairs) {
                n_high += cv::countNonZero(p.high_mask.annotated);
                n_low += cv::countNonZero(p.low_mask.annotated);
            }
            MRES_CHECK(n_high > 0 && n_low > 0, "batch without annotated pixels");

            const double lr = set_lr(optimizer, schedule.lr(epoch, b, bpe));
            if (b == 0) lr_first = lr;
            lr_last = lr;
            optimizer.zero_grad();

            const size_t bs = batch.pairs.size();
            double batch_loss = 0.0;
            for (size_t lo = 0; lo < bs; lo += static_cast<size_t>(micro)) {
                const size_t hi = std::min(lo + static_cast<size_t>(micro), bs);
                std::vector<cv::Mat> him, lom;
                for (size_t i = lo; i < hi; ++i) {
                    him.push_back(batch.pairs[i].high);
                    lom.push_back(batch.pairs[i].low);
                }
                const HeadTensors mt = mask_tensors(batch.pairs, lo, hi);
                const NetworkOutput out = net->forward(images_to_batch(him), images_to_batch(lom));

                // Cross entropy: micro mean * (micro annotated / batch annotated)
                // pools to the full-batch mean. Dice: per-sample mean scaled by
                // the slice's share of the batch.
                const double f_high = static_cast<double>(mt.ann_high) / static_cast<double>(n_high);
                const double f_low = static_cast<double>(mt.ann_low) / static_cast<double>(n_low);
                const double f_n = static_cast<double>(hi - lo) / static_cast<double>(bs);

                const torch::Tensor loss_high =
                    weighted_ce(out.high, mt.high_cls, mt.high_ann, w) * f_high +
                    weighted_dice_loss(out.high, mt.high_cls, mt.high_ann, w) * f_n;
                const torch::Tensor loss_low =
                    weighted_ce(out.low, mt.low_cls, mt.low_ann, w) * f_low +
                    weighted_dice_loss(out.low, mt.low_cls, mt.low_ann, w) * f_n;
                const torch::Tensor loss_fused =
                    weighted_ce(out.fused, mt.high_cls, mt.high_ann, w) * f_high +
                    weighted_dice_loss(out.fused, mt.high_cls, mt.high_ann, w) * f_n;

                const torch::Tensor loss =
                    total_loss(loss_high, loss_low, loss_fused, opts.head_weights);
                loss.backward();
                batch_loss += loss.item<double>();
            }
            optimizer.step();
            epoch_loss += batch_loss;
        }
        check_finite_weights(*net, plan.name + " epoch " + std::to_string(epoch));

        // Validation snapshot on the capped pair set (fused head, uniform
        // weights so stages stay comparable).
        EpochLog el;
        el.epoch = epoch;
        el.train_loss = epoch_loss / bpe;
        el.lr_first = lr_first;
        el.lr_last = lr_last;
        if (!val_pool.empty()) {
            net->eval();
            torch::NoGradGuard guard;
            double vloss = 0.0;
            int64_t correct = 0, annotated = 0;
            std::array<ConfusionCounts, kNumClasses> conf{};
            int batches = 0;
            for (size_t lo = 0; lo < val_pool.size(); lo += static_cast<size_t>(micro)) {
                const size_t hi = std::min(lo + static_cast<size_t>(micro), val_pool.size());
                std::vector<PatchPair> pairs;
                for (size_t i = lo; i < hi; ++i)
                    pairs.push_back(materialize_one(val_map, val_pool[i], cfg.levels));
                std::vector<cv::Mat> him, lom;
                for (const auto& p : pairs) {
                    him.push_back(p.high);
                    lom.push_back(p.low);
                }
                const HeadTensors mt = mask_tensors(pairs, 0, pairs.size());
                const NetworkOutput out = net->forward(images_to_batch(him), images_to_batch(lom));
                vloss += (weighted_ce(out.fused, mt.high_cls, mt.high_ann, kUniformClassWeights) +
                          weighted_dice_loss(out.fused, mt.high_cls, mt.high_ann,
                                             kUniformClassWeights))
                             .item<double>();
                ++batches;
                const torch::Tensor pred = out.fused.argmax(1);
                const torch::Tensor ann = mt.high_ann;
                correct += ((pred == mt.high_cls) & ann).sum().item<int64_t>();
                annotated += ann.sum().item<int64_t>();
                for (int c = 0; c < kNumClasses; ++c) {
                    const torch::Tensor pc = (pred == c) & ann;
                    const torch::Tensor tc = (mt.high_cls == c) & ann;
                    conf[static_cast<size_t>(c)].tp += (pc & tc).sum().item<int64_t>();
                    conf[static_cast<size_t>(c)].fp += (pc & ~tc).sum().item<int64_t>();
                    conf[static_cast<size_t>(c)].fn += (~pc & tc).sum().item<int64_t>();
                }
            }
            el.val_loss = vloss / std::max(1, batches);
            el.val_accuracy =
                annotated == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(annotated);
            double iou_sum = 0.0;
            for (int c = 1; c < kNumClasses; ++c) {
                const auto& cc = conf[static_cast<size_t>(c)];
                const int64_t uni = cc.tp + cc.fp + cc.fn;
                iou_sum += uni == 0 ? 1.0 : static_cast<double>(cc.tp) / static_cast<double>(uni);
            }
            el.val_mean_iou = iou_sum / (kNumClasses - 1);
        }
        result.epochs.push_back(el);
        {
            std::ofstream log(log_path, std::ios::app);
            log << std::setprecision(10) << "epoch " << epoch << " train_loss " << el.train_loss
                << " val_loss " << el.val_loss << " val_acc " << el.val_accuracy << " val_miou "
                << el.val_mean_iou << " lr_first " << el.lr_first << " lr_last " << el.lr_last
                << "\n";
        }
        std::cerr << "[" << plan.name << "] " << "epoch " << epoch << "/" << epochs
                  << " train_loss " << el.train_loss << " val_miou " << el.val_mean_iou << "\n";
    }

    result.checkpoint = out_dir / "checkpoint.bin";
    save_checkpoint(*net, cfg.serialize(), result.checkpoint);
    return result;
}

// ---------------------------------------------------------------------------
// Pseudo-labeling
// ---------------------------------------------------------------------------

void pseudo_label(Corpus& corpus, DualUNet& net, double threshold) {
    const int cutoff = prob_cutoff(threshold);
    const int level = net->config().levels.high;
    for (const size_t i : corpus.train_indices()) {
        CorpusSlide& cs = corpus.slides[i];
        const SlidePrediction pred = predict_slide(net, cs.slide);
        LabelMask at_level = LabelMask::blank(pred.argmax.size(), level);
        for (int y = 0; y < pred.argmax.rows; ++y)
            for (int x = 0; x < pred.argmax.cols; ++x) {
                const int cls = pred.argmax(y, x);
                at_level.classes(y, x) = static_cast<uint8_t>(cls);
                at_level.annotated(y, x) =
                    pred.probs[static_cast<size_t>(cls)](y, x) >= cutoff ? 1 : 0;
            }
        // Scale up to level 0 and stamp the human annotation back on top.
        const cv::Size full = cs.slide.levels[0].size();
        LabelMask lvl0 = LabelMask::blank(full, 0);
        cv::resize(at_level.classes, lvl0.classes, full, 0, 0, cv::INTER_NEAREST);
        cv::resize(at_level.annotated, lvl0.annotated, full, 0, 0, cv::INTER_NEAREST);
        cs.human.classes.copyTo(lvl0.classes, cs.human.annotated);
        lvl0.annotated.setTo(1, cs.human.annotated);
        cs.working = lvl0;
    }
}

StyleBank build_style_bank(const Corpus& corpus, int level) {
    std::map<std::pair<std::string, std::string>, std::vector<StyleEntry>> groups;
    for (const auto& cs : corpus.slides) {
        if (cs.validation) continue;
        MRES_CHECK(level < cs.slide.num_levels(), "style bank level beyond pyramid");
        groups[{cs.slide.tags.stain, cs.slide.tags.scanner}].push_back(
            style_stats(cs.slide.level(level), cs.slide.tags.stain, cs.slide.tags.scanner));
    }
    StyleBank bank;
    for (const auto& [key, entries] : groups) {
        StyleEntry avg;
        avg.stain = key.first;
        avg.scanner = key.second;
        for (const auto& e : entries) {
            avg.mean += e.mean;
            avg.stddev += e.stddev;
        }
        avg.mean /= static_cast<double>(entries.size());
        avg.stddev /= static_cast<double>(entries.size());
        bank.push_back(avg);
    }
    return bank;
}

// ---------------------------------------------------------------------------
// Protocol
// ---------------------------------------------------------------------------

namespace {

DualUNet net_from_checkpoint(const fs::path& ckpt) {
    const NetworkConfig cfg = NetworkConfig::parse(checkpoint_config_line(ckpt));
    DualUNet net(cfg);
    load_checkpoint(*net, ckpt);
    return net;
}

void snapshot_labels(const Corpus& corpus, const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& cs : corpus.slides) {
        if (cs.validation) continue;
        cv::Mat png = encode_mask_png(cs.working);
        cv::Mat bgr;
        cv::cvtColor(png, bgr, cv::COLOR_RGB2BGR);
        imwrite_atomic(dir / (cs.slide.id + ".png"), bgr);
    }
}

}  // namespace

ProtocolResult multi_step_train(Corpus& corpus, const std::vector<StagePlan>& stages,
                                const TrainOptions& opts, const fs::path& out_dir) {
    MRES_CHECK(!stages.empty(), "empty protocol");
    fs::create_directories(out_dir);

    // One style bank for every stage that infuses style.
    const bool wants_style = std::any_of(stages.begin(), stages.end(), [](const StagePlan& s) {
        return s.augments.has(AugmentOp::style_infuse);
    });
    StyleBank bank;
    if (wants_style) {
        bank = build_style_bank(corpus, opts.levels.high);
        save_style_bank(out_dir / "style_bank.txt", bank);
    }

    ProtocolResult result;
    std::optional<fs::path> parent;
    for (size_t si = 0; si < stages.size(); ++si) {
        const StagePlan& plan = stages[si];
        std::ostringstream dirname;
        dirname << "stage_" << std::setw(2) << std::setfill('0') << si << "_" << plan.name;
        const fs::path stage_dir = out_dir / dirname.str();
        fs::create_directories(stage_dir);

        if (si > 0) {
            // Master stages re-label the training set with the parent model.
            MRES_CHECK(parent.has_value(), "master stage without parent checkpoint");
            DualUNet parent_net = net_from_checkpoint(*parent);
            pseudo_label(corpus, parent_net, plan.threshold);
        }
        snapshot_labels(corpus, stage_dir / "labels");

        StageResult sr = train_stage(corpus, plan, opts, stage_dir,
                                     plan.augments.has(AugmentOp::style_infuse) ? &bank : nullptr,
                                     parent);
        parent = sr.checkpoint;
        result.stages.push_back(std::move(sr));
    }
    result.final_checkpoint = *parent;
    return result;
}

double corpus_val_iou(Corpus& corpus, DualUNet& net) {
    const int level = net->config().levels.high;
    std::array<ConfusionCounts, kNumClasses> conf{};
    for (const size_t i : corpus.val_indices()) {
        CorpusSlide& cs = corpus.slides[i];
        MRES_CHECK(cs.slide.truth.has_value(), "validation slide without truth");
        const SlidePrediction pred = predict_slide(net, cs.slide);
        const LabelMask truth = downsample_mask(*cs.slide.truth, 1 << level);
        MRES_CHECK(truth.classes.size() == pred.argmax.size(), "prediction/truth size mismatch");
        for (int y = 0; y < pred.argmax.rows; ++y)
            for (int x = 0; x < pred.argmax.cols; ++x) {
                if (!truth.annotated(y, x)) continue;
                for (int c = 1; c < kNumClasses; ++c) {
                    const bool p = pred.argmax(y, x) == c, t = truth.classes(y, x) == c;
                    if (p && t) conf[static_cast<size_t>(c)].tp++;
                    else if (p) conf[static_cast<size_t>(c)].fp++;
                    else if (t) conf[static_cast<size_t>(c)].fn++;
                }
            }
    }
    double sum = 0.0;
    for (int c = 1; c < kNumClasses; ++c) {
        const auto& cc = conf[static_cast<size_t>(c)];
        const int64_t uni = cc.tp + cc.fp + cc.fn;
        sum += uni == 0 ? 1.0 : static_cast<double>(cc.tp) / static_cast<double>(uni);
    }
    return sum / (kNumClasses - 1);
}

}  // namespace mres
