#include "gradtrace/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradtrace/parallel.hpp"
#include "gradtrace/rng.hpp"

namespace gradtrace {

void TrainConfig::validate(size_t total_steps) const {
    if (batch_size == 0) fail(Errc::config, "batch_size must be >= 1");
    if (checkpoint_stride == 0) fail(Errc::config, "checkpoint_stride must be >= 1");
    if (!(lr_peak > lr_final) || !(lr_final > 0.0))
        fail(Errc::config, "need lr_peak > lr_final > 0");
    if (total_steps > 0 && warmup_steps >= total_steps)
        fail(Errc::config, "warmup_steps must be smaller than the total step count");
}

double LrSchedule::lr_at(size_t step) const {
    if (warmup > 0 && step < warmup)
        return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total) return final_rate;
    double span = static_cast<double>(total - warmup);
    double t = static_cast<double>(step - warmup);
    return peak + (final_rate - peak) * (t / span);
}

const ModelState& CheckpointSeries::final_state() const {
    if (checkpoints.empty()) fail(Errc::state, "empty checkpoint series");
    return *checkpoints.back().second;
}

const ModelState& CheckpointSeries::state_at(uint64_t step) const {
    for (const auto& [s, st] : checkpoints)
        if (s == step) return *st;
    fail(Errc::state, "no checkpoint at step " + std::to_string(step));
}

bool CheckpointSeries::has_step(uint64_t step) const {
    for (const auto& [s, st] : checkpoints)
        if (s == step) return true;
    return false;
}

namespace {

std::vector<size_t> epoch_order(size_t n, uint64_t seed, size_t epoch) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, static_cast<uint64_t>(epoch)));
    fisher_yates(order, rng);
    return order;
}

struct BatchResult {
    double loss = 0.0;
    GradientVector grad;
};

// Mean loss and mean adapter gradient over a batch; per-example work runs in
// parallel, the reduction is sequential in batch-slot order.
BatchResult batch_gradient(const ModelState& state, const std::vector<Example>& data,
                           const std::vector<size_t>& batch, const std::string& run_id) {
    std::vector<std::pair<double, GradientVector>> slots(batch.size());
    parallel_for(batch.size(), [&](size_t i) {
        slots[i] = loss_and_gradient(state, data[batch[i]], GradScope::adapters, run_id);
    });
    BatchResult out;
    out.grad.run_id = run_id;
    out.grad.step = state.step;
    out.grad.example_id = "(batch)";
    out.grad.values.assign(adapter_param_count(state.cfg), 0.0);
    for (const auto& [loss, grad] : slots) {
        out.loss += loss;
        for (size_t j = 0; j < grad.values.size(); ++j) out.grad.values[j] += grad.values[j];
    }
    double inv = 1.0 / static_cast<double>(batch.size());
    out.loss *= inv;
    for (double& v : out.grad.values) v *= inv;
    return out;
}

void apply_adapter_update(ModelState& state, const std::vector<ParamSlot>& layout,
                          const std::vector<double>& direction, double eta) {
    for (const ParamSlot& slot : layout) {
        Tensor& t = state.adapter.at(slot.name);
        for (size_t i = 0; i < slot.count; ++i) t.data[i] -= eta * direction[slot.offset + i];
    }
}

std::string derive_run_id(const ModelState& state0, const TrainConfig& cfg, size_t data_count) {
    uint64_t h = state0.content_hash();
    h = fnv1a64_u64(cfg.seed, h);
    h = fnv1a64_u64(cfg.epochs, h);
    h = fnv1a64_u64(cfg.batch_size, h);
    h = fnv1a64_u64(cfg.warmup_steps, h);
    h = fnv1a64_u64(cfg.checkpoint_stride, h);
    h = fnv1a64(&cfg.lr_peak, sizeof(double), h);
    h = fnv1a64(&cfg.lr_final, sizeof(double), h);
    h = fnv1a64_u64(data_count, h);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

CheckpointSeries run_training(CheckpointSeries series, ModelState state,
                              const std::vector<Example>& data, const TrainConfig& cfg,
                              const StepLogger& log) {
    size_t n = data.size();
    if (n == 0) fail(Errc::size, "training data is empty");
    size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    size_t total = cfg.epochs * steps_per_epoch;
    cfg.validate(total);
    series.schedule = LrSchedule{cfg.lr_peak, cfg.lr_final, cfg.warmup_steps, total};
    series.lr_record.resize(total, 0.0);

    if (state.step > total)
        fail(Errc::state, "resume step " + std::to_string(state.step) +
                              " lies beyond the configured total of " + std::to_string(total));

    std::vector<ParamSlot> layout = adapter_layout(state.cfg);
    std::vector<size_t> order;
    size_t order_epoch = static_cast<size_t>(-1);

    for (size_t t = state.step; t < total; ++t) {
        size_t epoch = t / steps_per_epoch;
        size_t pos = t % steps_per_epoch;
        if (epoch != order_epoch) {
            order = epoch_order(n, cfg.seed, epoch);
            order_epoch = epoch;
        }
        size_t lo = pos * cfg.batch_size;
        size_t hi = std::min(lo + cfg.batch_size, n);
        std::vector<size_t> batch(order.begin() + static_cast<long>(lo),
                                  order.begin() + static_cast<long>(hi));

        double eta = series.schedule.lr_at(t);
        BatchResult res;
        try {
            res = batch_gradient(state, data, batch, series.run_id);
        } catch (const Error& e) {
            if (e.code() == Errc::numeric)
                fail(Errc::diverged_run, "non-finite loss at step " + std::to_string(t));
            throw;
        }
        if (!std::isfinite(res.loss))
            fail(Errc::diverged_run, "non-finite loss at step " + std::to_string(t));

        apply_adapter_update(state, layout, res.grad.values, eta);
        state.step = t + 1;
        series.lr_record[t] = eta;
        if (log) log(t, res.loss, eta);

        if (state.step % cfg.checkpoint_stride == 0 && state.step != total)
            series.checkpoints.emplace_back(state.step, std::make_shared<ModelState>(state));
    }

    if (series.checkpoints.empty() || series.checkpoints.back().first != total)
        series.checkpoints.emplace_back(total, std::make_shared<ModelState>(state));
    return series;
}

} // namespace

CheckpointSeries train(const ModelState& state0, const std::vector<Example>& data,
                       const TrainConfig& cfg, const StepLogger& log) {
    if (state0.step != 0) fail(Errc::state, "train expects a step-0 state; use resume");
    CheckpointSeries series;
    series.run_id = derive_run_id(state0, cfg, data.size());
    series.checkpoints.emplace_back(0, std::make_shared<ModelState>(state0));
    return run_training(std::move(series), state0, data, cfg, log);
}

CheckpointSeries resume(const CheckpointSeries& series, const std::vector<Example>& data,
                        const TrainConfig& cfg, const StepLogger& log) {
    if (series.checkpoints.empty()) fail(Errc::state, "cannot resume an empty series");
    ModelState state = *series.checkpoints.back().second;
    return run_training(series, std::move(state), data, cfg, log);
}

ModelState single_sgd_step(const ModelState& state, const Example& z, double eta) {
    if (!(eta >= 0.0) || !std::isfinite(eta))
        fail(Errc::config, "learning rate must be finite and non-negative");
    GradientVector g = example_gradient(state, z);
    for (double v : g.values)
        if (!std::isfinite(v)) fail(Errc::numeric, "non-finite gradient in single_sgd_step");
    ModelState out = state;
    apply_adapter_update(out, adapter_layout(state.cfg), g.values, eta);
    out.step = state.step + 1;
    return out;
}

ModelState pretrain_base(const ModelState& state0, const std::vector<Example>& data,
                         size_t steps, double lr, uint64_t seed) {
    if (data.empty()) fail(Errc::size, "pretraining data is empty");
    if (!(lr > 0.0) || !std::isfinite(lr)) fail(Errc::config, "pretraining rate must be positive");
    ModelState state = state0;
    size_t n = data.size();
    std::vector<size_t> order;
    size_t order_epoch = static_cast<size_t>(-1);
    for (size_t t = 0; t < steps; ++t) {
        size_t epoch = t / n;
        if (epoch != order_epoch) {
            order = epoch_order(n, derive_seed(seed, "pretrain"), epoch);
            order_epoch = epoch;
        }
        const Example& z = data[order[t % n]];
        std::vector<int> ids = sequence_ids(z, state.cfg);
        std::vector<double> mask = completion_mask(z, state.cfg);
        std::map<std::string, Tensor> grads = parameter_gradients(state, ids, mask);
        for (auto& [name, tensor] : state.base) {
            const Tensor& g = grads.at(name);
            for (size_t i = 0; i < tensor.numel(); ++i) tensor.data[i] -= lr * g.data[i];
        }
    }
    state.step = 0;
    return state;
}

} // namespace gradtrace
