#pragma once

// Shared fixtures and independent oracles for the test suites. The
// finite-difference helpers here only ever call forward evaluation, so they
// stay independent of the backward implementation they check.

#include <functional>
#include <string>
#include <vector>

#include "gradtrace/influence.hpp"
#include "gradtrace/model.hpp"
#include "gradtrace/rng.hpp"
#include "gradtrace/study.hpp"
#include "gradtrace/trainer.hpp"

namespace gtt {

using namespace gradtrace;

inline ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.embed_dim = 32;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.context_len = 256;
    cfg.adapter_rank = 4;
    cfg.adapter_alpha = 8.0;
    return cfg;
}

inline ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.embed_dim = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.context_len = 256;
    cfg.adapter_rank = 2;
    cfg.adapter_alpha = 4.0;
    return cfg;
}

inline Tensor rand_tensor(Rng& rng, std::vector<size_t> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

// init_state plus small random adapter B factors, so adapter gradients are
// generic (at B = 0 the A gradients vanish identically).
inline ModelState randomized_adapter_state(const ModelConfig& cfg, uint64_t seed) {
    ModelState st = init_state(cfg, seed);
    Rng rng(derive_seed(seed, "adapterB"));
    for (auto& [name, t] : st.adapter)
        if (name.ends_with(".B"))
            for (double& v : t.data) v = 0.02 * rng.normal();
    return st;
}

inline std::vector<Example> small_dataset(const ModelConfig& cfg, size_t per_family,
                                          uint64_t seed) {
    return gen_base_dataset(builtin_families(), per_family, seed, cfg);
}

// Central finite difference of the completion loss along one adapter
// coordinate.
inline double fd_adapter_grad(const ModelState& state, const Example& z, const std::string& name,
                              size_t index, double h) {
    ModelState plus = state;
    plus.adapter.at(name).data[index] += h;
    ModelState minus = state;
    minus.adapter.at(name).data[index] -= h;
    return (completion_loss(plus, z) - completion_loss(minus, z)) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
    double denom = std::max({std::fabs(a), std::fabs(b), floor});
    return std::fabs(a - b) / denom;
}

// Deterministic quick fine-tuning run shared by the influence/oracle tests.
inline CheckpointSeries quick_series(const ModelConfig& cfg, const std::vector<Example>& data,
                                     size_t epochs, size_t stride, uint64_t seed,
                                     double lr_peak = 1e-3) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 8;
    tc.lr_peak = lr_peak;
    tc.lr_final = lr_peak * 1e-2;
    tc.warmup_steps = 2;
    tc.checkpoint_stride = stride;
    tc.seed = seed;
    ModelState st = randomized_adapter_state(cfg, derive_seed(seed, "weights"));
    return train(st, data, tc);
}

} // namespace gtt
