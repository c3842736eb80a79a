#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mres/augment.hpp"
#include "mres/batch.hpp"
#include "mres/loss.hpp"
#include "mres/network.hpp"
#include "mres/predict.hpp"

namespace mres {

// Stepwise cyclic learning rate: cycles of `cycle_epochs`, the peak halves
// every cycle (lr0 * 0.5^k), and within a cycle the rate falls linearly to
// 10% of the peak: lr = peak * (1 - 0.9 * p) with p the position in [0,1).
struct LrSchedule {
    double lr0 = 0.01;
    int cycle_epochs = 2;

    double lr(int epoch, int batch_in_epoch, int batches_per_epoch) const;
};

// One row of the training protocol.
struct StagePlan {
    std::string name;                      // base, master1, ...
    std::string encoder_scale = "small";   // model preset: small | large
    std::string dataset = "full_set";      // annotated_only | full_set
    AugmentPlan augments;
    double threshold = 0.9;  // pseudo-label confidence cutoff
    int epochs = 5;
    double lr0 = 0.001;
    int batch_size = 16;
    bool dynamic_weights = true;
    std::array<double, kNumClasses> static_weights = {1.0, 1.0, 1.0};
};

std::vector<StagePlan> load_plan(const fs::path& path);
void save_plan(const fs::path& path, const std::vector<StagePlan>& stages);

// Desk-scale presets: `small` = depth 3, 4 base channels; `large` = depth 4,
// 8 base channels (both dual-branch at levels (1,3) unless overridden).
NetworkConfig model_config(const std::string& preset, LevelPair levels = {});

// In-memory corpus with working labels. `human` is the (possibly partial)
// operator annotation at level 0; `working` starts as `human` and absorbs
// pseudo-labels between stages, with human pixels always winning.
struct CorpusSlide {
    PyramidalSlide slide;
    LabelMask human;    // level 0
    LabelMask working;  // level 0
    bool validation = false;
};

struct Corpus {
    std::vector<CorpusSlide> slides;

    CorpusSlide& by_id(const std::string& id);
    std::vector<size_t> train_indices() const;
    std::vector<size_t> val_indices() const;
};

Corpus load_corpus(const fs::path& dir);  // slide subdirs + manifest.txt

struct TrainOptions {
    int batch_size = 0;    // overrides the plan's batch size when > 0
    int micro_batch = 4;   // gradient-accumulation slice
    int workers = 2;       // prefetch threads
    uint64_t seed = 1;
    LevelPair levels;
    SampleOptions sampling;
    HeadWeights head_weights;
    int val_pairs_cap = 32;  // validation pairs evaluated per epoch
    double epoch_scale = 1.0;  // scales plan epochs (>=1 epoch kept)
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double val_mean_iou = 0.0;
    double lr_first = 0.0, lr_last = 0.0;
};

struct StageResult {
    std::string name;
    fs::path checkpoint;
    std::vector<EpochLog> epochs;
    int64_t parameters = 0;
    int pool_tumor = 0, pool_normal = 0, pool_others = 0;
};

// Train one stage on the corpus' working labels. `warm_start` (optional
// parent checkpoint) copies every parameter whose name and shape match.
StageResult train_stage(Corpus& corpus, const StagePlan& plan, const TrainOptions& opts,
                        const fs::path& out_dir, const StyleBank* bank,
                        const std::optional<fs::path>& warm_start);

// Re-label every training slide from the checkpoint's fused prediction:
// argmax class where max prob >= threshold becomes an annotated pseudo-label
// pixel (scaled to level 0), everything else unannotated — then the human
// annotation is stamped back on top, so operator pixels are never overwritten.
void pseudo_label(Corpus& corpus, DualUNet& net, double threshold);

// Per-(stain, scanner) color statistics over the training slides at level H.
StyleBank build_style_bank(const Corpus& corpus, int level);

struct ProtocolResult {
    std::vector<StageResult> stages;
    fs::path final_checkpoint;
};

// The full self-training protocol: the base stage trains on human labels
// only; each master stage first re-labels with its threshold using the parent
// model, then trains (warm-started from the parent where shapes match).
// Every stage persists its checkpoint and a label snapshot.
ProtocolResult multi_step_train(Corpus& corpus, const std::vector<StagePlan>& stages,
                                const TrainOptions& opts, const fs::path& out_dir);

// Hard fused mean IOU (classes 1 and 2) of a checkpointed dual network over
// the corpus validation slides, against their exact truth at level H.
double corpus_val_iou(Corpus& corpus, DualUNet& net);

}  // namespace mres
