#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gradtrace/model.hpp"

namespace gradtrace {

struct TrainConfig {
    size_t epochs = 6;
    size_t batch_size = 8;
    double lr_peak = 1e-5;
    double lr_final = 1e-7;
    size_t warmup_steps = 10;
    size_t checkpoint_stride = 25;
    uint64_t seed = 1;

    // Validated once the dataset size (and hence total steps) is known.
    void validate(size_t total_steps) const;
};

// Linear warmup from zero to the peak rate, then linear decay down to the
// final rate at the last step; clamped afterwards.
struct LrSchedule {
    double peak = 1e-5;
    double final_rate = 1e-7;
    size_t warmup = 10;
    size_t total = 0;

    double lr_at(size_t step) const;
};

// Ordered checkpoints of one run plus the realized learning-rate record.
// Step 0 and the final state are always present.
struct CheckpointSeries {
    std::string run_id;
    std::vector<std::pair<uint64_t, std::shared_ptr<const ModelState>>> checkpoints;
    std::vector<double> lr_record;
    LrSchedule schedule;

    const ModelState& final_state() const;
    const ModelState& state_at(uint64_t step) const;
    bool has_step(uint64_t step) const;
};

using StepLogger = std::function<void(size_t step, double loss, double lr)>;

// Deterministic minibatch SGD over the adapter parameters. Per-epoch order
// is a Fisher-Yates shuffle seeded by hash(seed, epoch); batch gradients are
// averaged in batch-slot order. Base weights never move.
CheckpointSeries train(const ModelState& state0, const std::vector<Example>& data,
                       const TrainConfig& cfg, const StepLogger& log = {});

// Continues a run from its last checkpoint to the configured total step
// count, reproducing the uninterrupted run bit-exactly.
CheckpointSeries resume(const CheckpointSeries& series, const std::vector<Example>& data,
                        const TrainConfig& cfg, const StepLogger& log = {});

// One batch-size-1 SGD step on z at rate eta; eta = 0 returns an identical
// (but step-advanced) state. Negative or non-finite rates are rejected.
ModelState single_sgd_step(const ModelState& state, const Example& z, double eta);

// Full-parameter warm-up pass over a corpus, used to give fine-tuning runs a
// non-random frozen base. Runs before a series is created; the fine-tuning
// invariant (frozen base) applies only after this returns.
ModelState pretrain_base(const ModelState& state0, const std::vector<Example>& data,
                         size_t steps, double lr, uint64_t seed);

} // namespace gradtrace
