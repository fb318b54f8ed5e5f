#pragma once

#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "gradtrace/model.hpp"
#include "gradtrace/trainer.hpp"

namespace gradtrace {

// Eval gradients with squared norm at or below this are refused rather than
// divided by: a degenerate denominator must never leak NaN/Inf into a trace.
inline constexpr double kEvalGradEps = 1e-30;

// Exact sequential-order inner product. Both vectors must come from the same
// run and step and have equal length.
double dot(const GradientVector& a, const GradientVector& b);

// Predicted one-step loss decrease on the eval example when training one
// batch-size-1 step on the probe: eta * <grad(probe), grad(eval)>. Positive
// values mean the eval loss is predicted to drop.
double step_influence(const GradientVector& g_probe, const GradientVector& g_eval, double eta);

// <g_probe, g_eval> / <g_eval, g_eval>: influence of the probe relative to
// training on the eval example itself. State-comparable; 1 for g_probe ==
// g_eval.
double rel_inf(const GradientVector& g_probe, const GradientVector& g_eval);

// Index-paired probe and evaluation sets: probe i was built from (or is
// related to) eval i. Cross-task aggregates additionally need n >= 2.
struct PairedSets {
    std::vector<Example> probes;
    std::vector<Example> evals;
    std::string note;

    size_t size() const { return probes.size(); }
    void validate(bool need_cross) const;
};

// Per-example gradient cache, content-addressed on the parameter hash of the
// state so a stale state can never serve a hit. Thread-safe.
class GradientCache {
public:
    std::shared_ptr<const GradientVector> get(const ModelState& state, uint64_t state_hash,
                                              const Example& z, GradScope scope,
                                              const std::string& run_id);
    size_t size() const;

private:
    using Key = std::tuple<uint64_t, std::string, int>;
    mutable std::mutex mu_;
    std::map<Key, std::shared_ptr<const GradientVector>> entries_;
};

double s_in(const PairedSets& sets, const ModelState& state, GradScope scope = GradScope::adapters,
            const std::string& run_id = "");
double s_cross(const PairedSets& sets, const ModelState& state,
               GradScope scope = GradScope::adapters, const std::string& run_id = "");

struct TraceRecord {
    uint64_t step = 0;
    size_t n = 0;
    std::vector<double> matrix; // n x n, row-major, [probe][eval]
    double s_in = 0.0;
    double s_cross = 0.0;

    double matrix_at(size_t probe, size_t eval) const { return matrix[probe * n + eval]; }
    double s_in_from_matrix() const;
    double s_cross_from_matrix() const;
};

struct TraceLabels {
    std::string in_task;
    std::string cross_task;
};

struct InfluenceTrace {
    std::string run_id;
    TraceLabels labels;
    size_t n = 0;
    std::vector<TraceRecord> records;
};

// Relative influence of every probe on every eval at every checkpoint of the
// series, with the diagonal and off-diagonal aggregates. Gradients are
// computed once per (checkpoint, example) and shared through the cache.
InfluenceTrace trace(const PairedSets& sets, const CheckpointSeries& series,
                     const TraceLabels& labels, GradientCache& cache,
                     GradScope scope = GradScope::adapters);

// Measured cumulative influence of repeatedly training on z: the summed
// per-step loss drops of z0 across a batch-size-1 replay. Telescopes to the
// endpoint loss difference.
double tracin_measured(const Example& z, const Example& z0, const ModelState& state0,
                       std::span<const double> etas);

// First-order estimate of the same replay: sum of eta_t * <grad(z), grad(z0)>
// along the identical trajectory.
double tracin_approx(const Example& z, const Example& z0, const ModelState& state0,
                     std::span<const double> etas);

} // namespace gradtrace
