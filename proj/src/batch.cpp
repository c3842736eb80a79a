#include "mres/batch.hpp"

#include <algorithm>
#include <numeric>

namespace mres {

BalancedBatchStream::BalancedBatchStream(std::vector<PatchDescriptor> pool, int batch_size,
                                         uint64_t seed)
    : batch_size_(batch_size), seed_(seed) {
    if (batch_size < 4 || batch_size % 4 != 0)
        throw ConfigError("batch size must be a positive multiple of 4 for 2:1:1 balancing");
    for (auto& d : pool) {
        if (d.patch_class < 0 || d.patch_class >= kNumClasses)
            throw ConfigError("pool descriptor with invalid class");
        by_class_[d.patch_class].push_back(d);
    }
    const size_t need_t = batch_size / 2, need_minor = batch_size / 4;
    if (by_class_[1].size() < need_t || by_class_[0].size() < need_minor ||
        by_class_[2].size() < need_minor)
        throw ConfigError("insufficient pool: need >= " + std::to_string(need_t) + " tumor and >= " +
                          std::to_string(need_minor) + " normal/others descriptors, have " +
                          std::to_string(by_class_[1].size()) + "/" + std::to_string(by_class_[0].size()) +
                          "/" + std::to_string(by_class_[2].size()) + " (T/N/O)");
    batches_per_epoch_ = static_cast<int>(by_class_[1].size() / need_t);
    for (int c = 0; c < kNumClasses; ++c) perm_[c].resize(by_class_[c].size());
    shuffle_epoch(0);
}

void BalancedBatchStream::shuffle_epoch(int epoch) {
    for (int c = 0; c < kNumClasses; ++c) {
        std::iota(perm_[c].begin(), perm_[c].end(), 0);
        Rng rng(derive_seed(seed_, static_cast<uint64_t>(epoch) * kNumClasses + c));
        std::shuffle(perm_[c].begin(), perm_[c].end(), rng.engine());
    }
}

void BalancedBatchStream::reset() {
    epoch_ = 0;
    batch_in_epoch_ = 0;
    produced_ = 0;
    shuffle_epoch(0);
}

Batch BalancedBatchStream::next() {
    if (batch_in_epoch_ >= batches_per_epoch_) {
        ++epoch_;
        batch_in_epoch_ = 0;
        shuffle_epoch(epoch_);
    }
    Batch b;
    b.index = produced_++;
    b.epoch = epoch_;
    // Tumor consumes its permutation without recycling (defines the epoch);
    // minorities walk their permutation cyclically.
    const int nt = batch_size_ / 2, nm = batch_size_ / 4;
    for (int i = 0; i < nt; ++i)
        b.pairs.push_back(by_class_[1][perm_[1][batch_in_epoch_ * nt + i]]);
    for (int cls : {0, 2}) {
        const auto& pool = by_class_[cls];
        const auto& perm = perm_[cls];
        for (int i = 0; i < nm; ++i) {
            const size_t pos = (static_cast<size_t>(batch_in_epoch_) * nm + i) % pool.size();
            b.pairs.push_back(pool[perm[pos]]);
        }
    }
    for (const auto& d : b.pairs) ++b.class_counts[d.patch_class];
    ++batch_in_epoch_;
    return b;
}

BatchPrefetcher::BatchPrefetcher(BalancedBatchStream& stream, int64_t total,
                                 Materialize materialize, int workers, int depth)
    : materialize_(std::move(materialize)), depth_(std::max(1, depth)) {
    metas_.reserve(total);
    for (int64_t i = 0; i < total; ++i) metas_.push_back(stream.next());
    workers = std::max(1, workers);
    for (int w = 0; w < workers; ++w) threads_.emplace_back([this] { worker_loop(); });
}

BatchPrefetcher::~BatchPrefetcher() {
    {
        std::lock_guard<std::mutex> lock(mu_);
        stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
}

void BatchPrefetcher::worker_loop() {
    for (;;) {
        int64_t job;
        {
            std::unique_lock<std::mutex> lock(mu_);
            cv_.wait(lock, [this] {
                return stop_ || (next_job_ < static_cast<int64_t>(metas_.size()) &&
                                 next_job_ - next_out_ < depth_);
            });
            if (stop_ || next_job_ >= static_cast<int64_t>(metas_.size())) return;
            job = next_job_++;
        }
        MaterializedBatch out;
        try {
            out = materialize_(metas_[job]);
        } catch (...) {
            std::lock_guard<std::mutex> lock(mu_);
            if (!error_) error_ = std::current_exception();
            stop_ = true;
            cv_.notify_all();
            return;
        }
        {
            std::lock_guard<std::mutex> lock(mu_);
            ready_.emplace(job, std::move(out));
        }
        cv_.notify_all();
    }
}

MaterializedBatch BatchPrefetcher::next() {
    std::unique_lock<std::mutex> lock(mu_);
    MRES_CHECK(next_out_ < static_cast<int64_t>(metas_.size()), "prefetcher exhausted");
    cv_.wait(lock, [this] { return error_ || ready_.count(next_out_) > 0; });
    if (error_) std::rethrow_exception(error_);
    auto it = ready_.find(next_out_);
    MaterializedBatch out = std::move(it->second);
    ready_.erase(it);
    ++next_out_;
    cv_.notify_all();  // frees a depth slot
    return out;
}

}  // namespace mres
