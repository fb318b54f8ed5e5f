#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradtrace/example.hpp"
#include "gradtrace/tensor.hpp"
#include "gradtrace/tokenizer.hpp"

namespace gradtrace {

// Shape of the byte-level causal decoder: pre-norm transformer blocks with
// learned positional embeddings and a GELU MLP at 4x expansion. Low-rank
// adapters sit on the MLP up and down projections; everything else is frozen
// during fine-tuning.
struct ModelConfig {
    size_t vocab_size = kVocabSize;
    size_t embed_dim = 64;
    size_t layers = 2;
    size_t heads = 2;
    size_t context_len = 256;
    size_t adapter_rank = 8;
    double adapter_alpha = 64.0;

    size_t mlp_dim() const { return 4 * embed_dim; }
    size_t head_dim() const { return embed_dim / heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Full parameter assignment at one training step. Base tensors are frozen
// for the entire run; only the adapter map is trainable.
struct ModelState {
    ModelConfig cfg;
    uint64_t step = 0;
    std::map<std::string, Tensor> base;
    std::map<std::string, Tensor> adapter;

    // FNV-1a over every parameter tensor (names, shapes, payload). Step is
    // excluded: states with identical parameters hash identically.
    uint64_t content_hash() const;
};

// Expected parameter names and shapes for a config, in canonical (sorted
// name) order. Used by initialization, checkpoint loading and flattening.
struct ParamSpec {
    std::string name;
    std::vector<size_t> shape;
    bool trainable; // adapter tensors
};
std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg);

// Flat layout of the trainable tensors: name, offset into the flattened
// gradient/update vector, element count.
struct ParamSlot {
    std::string name;
    size_t offset = 0;
    size_t count = 0;
};
std::vector<ParamSlot> adapter_layout(const ModelConfig& cfg);
size_t adapter_param_count(const ModelConfig& cfg);
std::vector<ParamSlot> full_layout(const ModelConfig& cfg);

// Gaussian base weights (std 0.02), unit layer-norm gains, zero biases.
// Adapter A factors are Gaussian, B factors start at zero so every adapted
// layer initially equals its base layer.
ModelState init_state(const ModelConfig& cfg, uint64_t weight_seed);

enum class GradScope { adapters, all };

// Flattened per-example loss gradient over the trainable parameters (or all
// parameters when widened for ablation), in canonical parameter order.
struct GradientVector {
    std::string run_id;
    uint64_t step = 0;
    std::string example_id;
    std::vector<double> values;
};

Example make_example(std::string id, std::string task, std::string_view query_text,
                     std::string_view response_text, const ModelConfig& cfg);
std::string query_text(const Example& z);
std::string response_text(const Example& z);

// [BOS] query [SEP] response [EOS]; throws a length error when the assembled
// sequence exceeds the context window.
std::vector<int> sequence_ids(const Example& z, const ModelConfig& cfg);

// Per-position loss weights aligned with sequence_ids: 1.0 exactly at the
// positions whose next-token targets are response tokens or the end token.
std::vector<double> completion_mask(const Example& z, const ModelConfig& cfg);

// Next-token logits for a raw id sequence, one row per position.
Tensor logits(const ModelState& state, std::span<const int> ids);

// Masked next-token loss: sum over positions with mask weight of the
// per-position softmax cross-entropy. mask has one entry per position; the
// final position must carry weight zero (it has no target).
double sequence_loss(const ModelState& state, std::span<const int> ids,
                     std::span<const double> mask);

// Sum of per-token negative log-likelihoods over the response and end token.
double completion_loss(const ModelState& state, const Example& z);

// Loss gradient for an arbitrary masked sequence. Exposed so callers can
// take per-token gradients by masking a single position.
std::pair<double, GradientVector> sequence_loss_and_gradient(
    const ModelState& state, std::span<const int> ids, std::span<const double> mask,
    GradScope scope, std::string_view run_id, std::string_view example_id);

std::pair<double, GradientVector> loss_and_gradient(const ModelState& state, const Example& z,
                                                    GradScope scope = GradScope::adapters,
                                                    std::string_view run_id = "");

GradientVector example_gradient(const ModelState& state, const Example& z,
                                GradScope scope = GradScope::adapters,
                                std::string_view run_id = "");

// Gradient of a masked sequence loss for every parameter tensor, reachable
// or not (unreachable tensors get exact zeros).
std::map<std::string, Tensor> parameter_gradients(const ModelState& state,
                                                  std::span<const int> ids,
                                                  std::span<const double> mask);

} // namespace gradtrace
