#include "gradtrace/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradtrace/parallel.hpp"

namespace gradtrace {

TaylorCheck taylor_check(const ModelState& state, const Example& z, const Example& z0,
                         double eta) {
    if (!(eta > 0.0) || !std::isfinite(eta))
        fail(Errc::config, "taylor_check: eta must be positive");
    GradientVector gz = example_gradient(state, z, GradScope::adapters, "taylor");
    GradientVector gz0 = example_gradient(state, z0, GradScope::adapters, "taylor");
    TaylorCheck out;
    out.predicted = step_influence(gz, gz0, eta);
    double before = completion_loss(state, z0);
    ModelState stepped = single_sgd_step(state, z, eta);
    double after = completion_loss(stepped, z0);
    out.measured = before - after;
    out.rel_error = std::fabs(out.predicted - out.measured) /
                    std::max(std::fabs(out.measured), 1e-12);
    return out;
}

namespace {

ModelState finetune(const ModelState& start, const std::vector<Example>& data, size_t steps,
                    double lr) {
    ModelState state = start;
    std::vector<ParamSlot> layout = adapter_layout(state.cfg);
    for (size_t t = 0; t < steps; ++t) {
        // full-batch mean gradient, reduced in example order
        std::vector<GradientVector> grads(data.size());
        parallel_for(data.size(), [&](size_t i) {
            grads[i] = example_gradient(state, data[i], GradScope::adapters, "retrain");
        });
        std::vector<double> mean(adapter_param_count(state.cfg), 0.0);
        for (const GradientVector& g : grads)
            for (size_t j = 0; j < g.values.size(); ++j) mean[j] += g.values[j];
        double inv = 1.0 / static_cast<double>(data.size());
        for (double& v : mean) v *= inv;
        for (const ParamSlot& slot : layout) {
            Tensor& tensor = state.adapter.at(slot.name);
            for (size_t i = 0; i < slot.count; ++i) tensor.data[i] -= lr * mean[slot.offset + i];
        }
        state.step += 1;
    }
    return state;
}

double mean_eval_loss(const ModelState& state, const std::vector<Example>& evals) {
    std::vector<double> losses(evals.size());
    parallel_for(evals.size(), [&](size_t i) { losses[i] = completion_loss(state, evals[i]); });
    double acc = 0.0;
    for (double l : losses) acc += l;
    return acc / static_cast<double>(evals.size());
}

std::vector<size_t> top_k_by_diag(const PairedSets& sets, const ModelState& state, size_t k) {
    GradientCache cache;
    uint64_t h = state.content_hash();
    size_t n = sets.size();
    std::vector<double> diag(n);
    for (size_t i = 0; i < n; ++i) {
        auto gp = cache.get(state, h, sets.probes[i], GradScope::adapters, "retrain");
        auto ge = cache.get(state, h, sets.evals[i], GradScope::adapters, "retrain");
        diag[i] = rel_inf(*gp, *ge);
    }
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](size_t a, size_t b) { return diag[a] > diag[b]; });
    idx.resize(std::min(k, n));
    return idx;
}

} // namespace

RetrainReport mini_retrain_check(const std::vector<std::pair<std::string, PairedSets>>& conditions,
                                 const CheckpointSeries& series, size_t k_top,
                                 const RetrainOptions& opts) {
    if (conditions.empty()) fail(Errc::size, "mini_retrain_check: no conditions given");
    const ModelState& start = series.final_state();
    const std::vector<Example>& evals = conditions.front().second.evals;
    for (const auto& [name, sets] : conditions) {
        sets.validate(false);
        if (sets.evals.size() != evals.size())
            fail(Errc::size, "mini_retrain_check: conditions must share one eval set");
    }

    RetrainReport report;
    report.finetune_steps = opts.steps;
    report.finetune_lr = opts.lr;

    double base_loss = mean_eval_loss(start, evals);

    // conditions[0]: fine-tune on the evals themselves
    {
        RetrainCondition self;
        self.name = "self(evals)";
        ModelState tuned = finetune(start, evals, opts.steps, opts.lr);
        self.realized_reduction = base_loss - mean_eval_loss(tuned, evals);
        PairedSets self_sets;
        self_sets.probes = evals;
        self_sets.evals = evals;
        self.s_in_final = s_in(self_sets, start);
        self.top_probes = top_k_by_diag(self_sets, start, k_top);
        report.conditions.push_back(std::move(self));
    }

    for (const auto& [name, sets] : conditions) {
        RetrainCondition cond;
        cond.name = name;
        ModelState tuned = finetune(start, sets.probes, opts.steps, opts.lr);
        cond.realized_reduction = base_loss - mean_eval_loss(tuned, evals);
        cond.s_in_final = s_in(sets, start);
        cond.top_probes = top_k_by_diag(sets, start, k_top);
        report.conditions.push_back(std::move(cond));
    }

    report.self_training_largest = true;
    for (size_t i = 1; i < report.conditions.size(); ++i)
        if (report.conditions[i].realized_reduction >
            report.conditions[0].realized_reduction)
            report.self_training_largest = false;

    std::vector<size_t> by_realized(report.conditions.size());
    std::iota(by_realized.begin(), by_realized.end(), 0);
    std::vector<size_t> by_predicted = by_realized;
    std::stable_sort(by_realized.begin(), by_realized.end(), [&](size_t a, size_t b) {
        return report.conditions[a].realized_reduction > report.conditions[b].realized_reduction;
    });
    std::stable_sort(by_predicted.begin(), by_predicted.end(), [&](size_t a, size_t b) {
        return report.conditions[a].s_in_final > report.conditions[b].s_in_final;
    });
    report.ordering_match = by_realized == by_predicted;
    return report;
}

RetrainReport mini_retrain_check(const PairedSets& sets, const CheckpointSeries& series,
                                 size_t k_top, const RetrainOptions& opts) {
    return mini_retrain_check({{sets.note.empty() ? "probes" : sets.note, sets}}, series, k_top,
                              opts);
}

} // namespace gradtrace
