#pragma once

#include <array>
#include <condition_variable>
#include <functional>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "mres/patch.hpp"

namespace mres {

// One batch worth of descriptors in fixed slot order: batch_size/2 tumor,
// then batch_size/4 normal, then batch_size/4 others (2:1:1).
struct Batch {
    std::vector<PatchDescriptor> pairs;
    std::array<int, kNumClasses> class_counts{};
    int64_t index = 0;  // position in the stream
    int epoch = 0;
};

// Deterministic 2:1:1 batch stream over a descriptor pool. Each class is
// drawn through a per-epoch seeded permutation; an epoch ends when the tumor
// pool is exhausted and minority pools recycle cyclically (no reshuffle
// mid-epoch). The stream is a pure function of (pool, batch_size, seed).
class BalancedBatchStream {
public:
    BalancedBatchStream(std::vector<PatchDescriptor> pool, int batch_size, uint64_t seed);

    int batches_per_epoch() const { return batches_per_epoch_; }
    int batch_size() const { return batch_size_; }
    Batch next();
    void reset();

private:
    void shuffle_epoch(int epoch);

    std::array<std::vector<PatchDescriptor>, kNumClasses> by_class_;
    std::array<std::vector<int>, kNumClasses> perm_;
    int batch_size_;
    uint64_t seed_;
    int batches_per_epoch_;
    int epoch_ = 0;
    int batch_in_epoch_ = 0;
    int64_t produced_ = 0;
};

struct MaterializedBatch {
    Batch meta;
    std::vector<PatchPair> pairs;  // same slot order as meta.pairs
};

// Pulls `total` batches from a stream and materializes pixel data on worker
// threads. Workers fill slots keyed by batch index and never reorder, so the
// delivered sequence is identical for any worker count.
class BatchPrefetcher {
public:
    using Materialize = std::function<MaterializedBatch(const Batch&)>;

    BatchPrefetcher(BalancedBatchStream& stream, int64_t total, Materialize materialize,
                    int workers = 1, int depth = 3);
    ~BatchPrefetcher();

    // Blocks until the next in-order batch is ready. Throws if all consumed.
    MaterializedBatch next();

private:
    void worker_loop();

    std::vector<Batch> metas_;
    Materialize materialize_;
    int depth_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::map<int64_t, MaterializedBatch> ready_;
    int64_t next_job_ = 0;
    int64_t next_out_ = 0;
    bool stop_ = false;
    std::exception_ptr error_;
    std::vector<std::thread> threads_;
};

}  // namespace mres
