#pragma once

#include <string>
#include <vector>

#include "gradtrace/influence.hpp"

namespace gradtrace {

// One first-order prediction checked against an actual retraining step:
// predicted = eta * <grad(z), grad(z0)>, measured = loss(z0) before minus
// after a single batch-size-1 step on z.
struct TaylorCheck {
    double predicted = 0.0;
    double measured = 0.0;
    double rel_error = 0.0; // |predicted - measured| / max(|measured|, 1e-12)
};

TaylorCheck taylor_check(const ModelState& state, const Example& z, const Example& z0, double eta);

struct RetrainCondition {
    std::string name;
    double realized_reduction = 0.0; // mean eval-loss drop after fine-tuning
    double s_in_final = 0.0;         // diagonal aggregate at the start state
    std::vector<size_t> top_probes;  // k_top probe indices by diagonal RelInf
};

struct RetrainReport {
    std::vector<RetrainCondition> conditions; // conditions[0] is self-training
    bool self_training_largest = false;
    bool ordering_match = false; // realized ordering equals the s_in ordering
    size_t finetune_steps = 0;
    double finetune_lr = 0.0;
};

struct RetrainOptions {
    size_t steps = 5;
    double lr = 2e-3;
};

// Ground-truth check by actually retraining: fine-tunes the series' final
// state on each probe set and on the evals themselves, measures realized
// eval-loss reductions, and reports whether their ordering matches the
// ordering predicted by the final-checkpoint in-task scores.
RetrainReport mini_retrain_check(const std::vector<std::pair<std::string, PairedSets>>& conditions,
                                 const CheckpointSeries& series, size_t k_top,
                                 const RetrainOptions& opts = {});

// Single-condition form: probes vs the self-training condition.
RetrainReport mini_retrain_check(const PairedSets& sets, const CheckpointSeries& series,
                                 size_t k_top, const RetrainOptions& opts = {});

} // namespace gradtrace
