#include "gradtrace/influence.hpp"

#include <cmath>

#include "gradtrace/parallel.hpp"

namespace gradtrace {

double dot(const GradientVector& a, const GradientVector& b) {
    if (a.values.size() != b.values.size())
        fail(Errc::dimension, "dot: gradient lengths disagree (" +
                                  std::to_string(a.values.size()) + " vs " +
                                  std::to_string(b.values.size()) + ")");
    if (a.run_id != b.run_id)
        fail(Errc::provenance, "dot: gradients come from different runs ('" + a.run_id +
                                   "' vs '" + b.run_id + "')");
    if (a.step != b.step)
        fail(Errc::provenance, "dot: gradients come from different steps (" +
                                   std::to_string(a.step) + " vs " + std::to_string(b.step) + ")");
    double acc = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) acc += a.values[i] * b.values[i];
    return acc;
}

double step_influence(const GradientVector& g_probe, const GradientVector& g_eval, double eta) {
    if (!(eta >= 0.0) || !std::isfinite(eta))
        fail(Errc::config, "step_influence: eta must be finite and non-negative");
    return eta * dot(g_probe, g_eval);
}

double rel_inf(const GradientVector& g_probe, const GradientVector& g_eval) {
    double denom = dot(g_eval, g_eval);
    if (!(denom > kEvalGradEps))
        fail(Errc::zero_eval_gradient,
             "rel_inf: eval gradient norm is degenerate (" + std::to_string(denom) + ")");
    return dot(g_probe, g_eval) / denom;
}

void PairedSets::validate(bool need_cross) const {
    if (probes.size() != evals.size())
        fail(Errc::size, "paired sets must have equal lengths");
    if (probes.empty()) fail(Errc::size, "paired sets must be non-empty");
    if (need_cross && probes.size() < 2)
        fail(Errc::size, "cross-task aggregates need at least two pairs");
}

std::shared_ptr<const GradientVector> GradientCache::get(const ModelState& state,
                                                         uint64_t state_hash, const Example& z,
                                                         GradScope scope,
                                                         const std::string& run_id) {
    Key key{state_hash, z.id, static_cast<int>(scope)};
    {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = entries_.find(key);
        if (it != entries_.end()) return it->second;
    }
    auto grad = std::make_shared<GradientVector>(example_gradient(state, z, scope, run_id));
    std::lock_guard<std::mutex> lock(mu_);
    auto [it, inserted] = entries_.emplace(key, std::move(grad));
    return it->second;
}

size_t GradientCache::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return entries_.size();
}

namespace {

struct SetGradients {
    std::vector<std::shared_ptr<const GradientVector>> probes;
    std::vector<std::shared_ptr<const GradientVector>> evals;
};

SetGradients set_gradients(const PairedSets& sets, const ModelState& state, GradientCache& cache,
                           GradScope scope, const std::string& run_id) {
    uint64_t h = state.content_hash();
    size_t n = sets.size();
    SetGradients out;
    out.probes.resize(n);
    out.evals.resize(n);
    parallel_for(2 * n, [&](size_t i) {
        if (i < n)
            out.probes[i] = cache.get(state, h, sets.probes[i], scope, run_id);
        else
            out.evals[i - n] = cache.get(state, h, sets.evals[i - n], scope, run_id);
    });
    return out;
}

double rel_inf_indexed(const GradientVector& gp, const GradientVector& ge, size_t eval_index) {
    try {
        return rel_inf(gp, ge);
    } catch (const Error& e) {
        if (e.code() == Errc::zero_eval_gradient)
            fail(Errc::zero_eval_gradient,
                 "eval index " + std::to_string(eval_index) + ": " + e.what());
        throw;
    }
}

double s_in_from(const SetGradients& g) {
    double acc = 0.0;
    size_t n = g.probes.size();
    for (size_t i = 0; i < n; ++i) acc += rel_inf_indexed(*g.probes[i], *g.evals[i], i);
    return acc / static_cast<double>(n);
}

double s_cross_from(const SetGradients& g) {
    size_t n = g.probes.size();
    if (n < 2) fail(Errc::size, "s_cross needs at least two pairs");
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            acc += rel_inf_indexed(*g.probes[i], *g.evals[j], j);
        }
    return acc / static_cast<double>(n * (n - 1));
}

} // namespace

double s_in(const PairedSets& sets, const ModelState& state, GradScope scope,
            const std::string& run_id) {
    sets.validate(false);
    GradientCache cache;
    return s_in_from(set_gradients(sets, state, cache, scope, run_id));
}

double s_cross(const PairedSets& sets, const ModelState& state, GradScope scope,
               const std::string& run_id) {
    sets.validate(true);
    GradientCache cache;
    return s_cross_from(set_gradients(sets, state, cache, scope, run_id));
}

double TraceRecord::s_in_from_matrix() const {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += matrix[i * n + i];
    return acc / static_cast<double>(n);
}

double TraceRecord::s_cross_from_matrix() const {
    if (n < 2) fail(Errc::size, "s_cross needs at least two pairs");
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            acc += matrix[i * n + j];
        }
    return acc / static_cast<double>(n * (n - 1));
}

InfluenceTrace trace(const PairedSets& sets, const CheckpointSeries& series,
                     const TraceLabels& labels, GradientCache& cache, GradScope scope) {
    sets.validate(true);
    if (series.checkpoints.empty()) fail(Errc::state, "trace: empty checkpoint series");

    InfluenceTrace out;
    out.run_id = series.run_id;
    out.labels = labels;
    out.n = sets.size();

    for (const auto& [step, state] : series.checkpoints) {
        SetGradients g;
        try {
            g = set_gradients(sets, *state, cache, scope, series.run_id);
        } catch (const Error& e) {
            fail(e.code(), "checkpoint step " + std::to_string(step) + ": " + e.what());
        }
        TraceRecord rec;
        rec.step = step;
        rec.n = out.n;
        rec.matrix.resize(out.n * out.n, 0.0);
        try {
            for (size_t i = 0; i < out.n; ++i)
                for (size_t j = 0; j < out.n; ++j)
                    rec.matrix[i * out.n + j] = rel_inf_indexed(*g.probes[i], *g.evals[j], j);
        } catch (const Error& e) {
            fail(e.code(), "checkpoint step " + std::to_string(step) + ": " + e.what());
        }
        rec.s_in = rec.s_in_from_matrix();
        rec.s_cross = rec.s_cross_from_matrix();
        out.records.push_back(std::move(rec));
    }
    return out;
}

namespace {

void check_replay_args(std::span<const double> etas) {
    for (double e : etas)
        if (!(e >= 0.0) || !std::isfinite(e))
            fail(Errc::config, "replay schedule entries must be finite and non-negative");
}

} // namespace

double tracin_measured(const Example& z, const Example& z0, const ModelState& state0,
                       std::span<const double> etas) {
    check_replay_args(etas);
    ModelState state = state0;
    double total = 0.0;
    double before = completion_loss(state, z0);
    for (double eta : etas) {
        ModelState next = single_sgd_step(state, z, eta);
        double after = completion_loss(next, z0);
        total += before - after;
        before = after;
        state = std::move(next);
    }
    return total;
}

double tracin_approx(const Example& z, const Example& z0, const ModelState& state0,
                     std::span<const double> etas) {
    check_replay_args(etas);
    ModelState state = state0;
    double total = 0.0;
    for (double eta : etas) {
        GradientVector gz = example_gradient(state, z, GradScope::adapters, "replay");
        GradientVector gz0 = example_gradient(state, z0, GradScope::adapters, "replay");
        total += step_influence(gz, gz0, eta);
        state = single_sgd_step(state, z, eta);
    }
    return total;
}

} // namespace gradtrace
