#include "gradtrace/model.hpp"

#include <algorithm>
#include <numeric>

#include "gradtrace/rng.hpp"
#include "gradtrace/tape.hpp"

namespace gradtrace {

void ModelConfig::validate() const {
    if (vocab_size < kVocabSize)
        fail(Errc::config, "vocab_size must cover bytes plus specials (>= 260)");
    if (embed_dim == 0 || heads == 0 || layers == 0 || context_len == 0)
        fail(Errc::config, "embed_dim, heads, layers, context_len must be positive");
    if (embed_dim % heads != 0) fail(Errc::config, "embed_dim must be divisible by heads");
    if (adapter_rank < 1) fail(Errc::config, "adapter_rank must be >= 1");
    if (adapter_rank > std::min(embed_dim, mlp_dim()))
        fail(Errc::config, "adapter_rank exceeds adapted layer dimensions");
    if (adapter_alpha <= 0.0) fail(Errc::config, "adapter_alpha must be positive");
}

std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
    size_t d = cfg.embed_dim, f = cfg.mlp_dim(), v = cfg.vocab_size, c = cfg.context_len;
    size_t r = cfg.adapter_rank;
    std::vector<ParamSpec> specs;
    specs.push_back({"base.tok_emb", {v, d}, false});
    specs.push_back({"base.pos_emb", {c, d}, false});
    for (size_t l = 0; l < cfg.layers; ++l) {
        std::string p = "base.l" + std::to_string(l) + ".";
        specs.push_back({p + "ln1.g", {d}, false});
        specs.push_back({p + "ln1.b", {d}, false});
        specs.push_back({p + "attn.wq", {d, d}, false});
        specs.push_back({p + "attn.bq", {d}, false});
        specs.push_back({p + "attn.wk", {d, d}, false});
        specs.push_back({p + "attn.bk", {d}, false});
        specs.push_back({p + "attn.wv", {d, d}, false});
        specs.push_back({p + "attn.bv", {d}, false});
        specs.push_back({p + "attn.wo", {d, d}, false});
        specs.push_back({p + "attn.bo", {d}, false});
        specs.push_back({p + "ln2.g", {d}, false});
        specs.push_back({p + "ln2.b", {d}, false});
        specs.push_back({p + "mlp.w_up", {d, f}, false});
        specs.push_back({p + "mlp.b_up", {f}, false});
        specs.push_back({p + "mlp.w_down", {f, d}, false});
        specs.push_back({p + "mlp.b_down", {d}, false});
        std::string a = "adapter.l" + std::to_string(l) + ".";
        specs.push_back({a + "up.A", {d, r}, true});
        specs.push_back({a + "up.B", {r, f}, true});
        specs.push_back({a + "down.A", {f, r}, true});
        specs.push_back({a + "down.B", {r, d}, true});
    }
    specs.push_back({"base.ln_f.g", {d}, false});
    specs.push_back({"base.ln_f.b", {d}, false});
    specs.push_back({"base.head", {d, v}, false});
    std::sort(specs.begin(), specs.end(),
              [](const ParamSpec& x, const ParamSpec& y) { return x.name < y.name; });
    return specs;
}

static std::vector<ParamSlot> layout_for(const ModelConfig& cfg, bool trainable_only) {
    std::vector<ParamSlot> slots;
    size_t off = 0;
    for (const ParamSpec& s : parameter_specs(cfg)) {
        if (trainable_only && !s.trainable) continue;
        size_t count = shape_numel(s.shape);
        slots.push_back({s.name, off, count});
        off += count;
    }
    return slots;
}

std::vector<ParamSlot> adapter_layout(const ModelConfig& cfg) { return layout_for(cfg, true); }
std::vector<ParamSlot> full_layout(const ModelConfig& cfg) { return layout_for(cfg, false); }

size_t adapter_param_count(const ModelConfig& cfg) {
    size_t n = 0;
    for (const ParamSlot& s : adapter_layout(cfg)) n += s.count;
    return n;
}

uint64_t ModelState::content_hash() const {
    uint64_t h = kFnvOffset;
    auto mix = [&h](const std::map<std::string, Tensor>& params) {
        for (const auto& [name, t] : params) {
            h = fnv1a64(name, h);
            for (size_t d : t.shape) h = fnv1a64_u64(d, h);
            h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
        }
    };
    mix(base);
    mix(adapter);
    return h;
}

ModelState init_state(const ModelConfig& cfg, uint64_t weight_seed) {
    cfg.validate();
    ModelState st;
    st.cfg = cfg;
    st.step = 0;
    Rng rng(weight_seed);
    // Draw in sorted-name order so initialization is reproducible regardless
    // of how the maps are later traversed.
    for (const ParamSpec& spec : parameter_specs(cfg)) {
        Tensor t(spec.shape);
        bool is_gain = spec.name.ends_with(".g");
        bool is_zero_init = spec.name.ends_with(".B"); // adapter B factors
        if (is_gain) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        } else if (is_zero_init || spec.shape.size() == 1) {
            // zeros: adapted layers equal base layers at step 0; biases start flat
        } else {
            for (double& v : t.data) v = 0.02 * rng.normal();
        }
        if (spec.trainable)
            st.adapter.emplace(spec.name, std::move(t));
        else
            st.base.emplace(spec.name, std::move(t));
    }
    return st;
}

Example make_example(std::string id, std::string task, std::string_view qtext,
                     std::string_view rtext, const ModelConfig& cfg) {
    Example z;
    z.id = std::move(id);
    z.task = std::move(task);
    z.query = encode(qtext, TextRole::query);
    z.response = encode(rtext, TextRole::response);
    sequence_ids(z, cfg); // length check
    return z;
}

std::string query_text(const Example& z) { return decode(z.query); }
std::string response_text(const Example& z) { return decode(z.response); }

std::vector<int> sequence_ids(const Example& z, const ModelConfig& cfg) {
    if (z.query.empty()) fail(Errc::length, "example " + z.id + ": empty query");
    if (z.response.empty()) fail(Errc::length, "example " + z.id + ": empty response");
    size_t total = z.query.size() + z.response.size() + 3;
    if (total > cfg.context_len)
        fail(Errc::length, "example " + z.id + ": sequence length " + std::to_string(total) +
                               " exceeds context " + std::to_string(cfg.context_len));
    std::vector<int> ids;
    ids.reserve(total);
    ids.push_back(kTokBos);
    for (int t : z.query) {
        if (t < 0 || static_cast<size_t>(t) >= cfg.vocab_size)
            fail(Errc::dimension, "example " + z.id + ": token id out of vocabulary");
        ids.push_back(t);
    }
    ids.push_back(kTokSep);
    for (int t : z.response) {
        if (t < 0 || static_cast<size_t>(t) >= cfg.vocab_size)
            fail(Errc::dimension, "example " + z.id + ": token id out of vocabulary");
        ids.push_back(t);
    }
    ids.push_back(kTokEos);
    return ids;
}

std::vector<double> completion_mask(const Example& z, const ModelConfig& cfg) {
    std::vector<int> ids = sequence_ids(z, cfg);
    std::vector<double> mask(ids.size(), 0.0);
    // Position t predicts ids[t+1]. Response tokens start right after the
    // separator at index query+1, so positions query+1 .. query+1+|response|
    // carry the response and end-token targets.
    size_t sep = 1 + z.query.size();
    for (size_t t = sep; t <= sep + z.response.size(); ++t) mask[t] = 1.0;
    return mask;
}

namespace {

struct ForwardGraph {
    Tape tape;
    std::map<std::string, int> params; // name -> leaf id
    int logits = -1;
};

int param(ForwardGraph& g, const ModelState& st, const std::string& name) {
    auto it = g.params.find(name);
    if (it != g.params.end()) return it->second;
    const Tensor* t = nullptr;
    if (auto b = st.base.find(name); b != st.base.end()) t = &b->second;
    else if (auto a = st.adapter.find(name); a != st.adapter.end()) t = &a->second;
    else fail(Errc::state, "missing parameter tensor " + name);
    int id = g.tape.leaf(*t);
    g.params.emplace(name, id);
    return id;
}

ForwardGraph build_forward(const ModelState& st, std::span<const int> ids) {
    const ModelConfig& cfg = st.cfg;
    cfg.validate();
    if (ids.empty()) fail(Errc::length, "empty id sequence");
    if (ids.size() > cfg.context_len) fail(Errc::length, "sequence exceeds context window");
    ForwardGraph g;
    Tape& tp = g.tape;

    std::vector<int> token_ids(ids.begin(), ids.end());
    std::vector<int> pos_ids(ids.size());
    std::iota(pos_ids.begin(), pos_ids.end(), 0);

    int x = tp.add(tp.embed(param(g, st, "base.tok_emb"), token_ids),
                   tp.embed(param(g, st, "base.pos_emb"), pos_ids));

    double adapter_scale = cfg.adapter_alpha / static_cast<double>(cfg.adapter_rank);
    size_t hd = cfg.head_dim();

    for (size_t l = 0; l < cfg.layers; ++l) {
        std::string bp = "base.l" + std::to_string(l) + ".";
        std::string ap = "adapter.l" + std::to_string(l) + ".";

        int n1 = tp.layer_norm(x, param(g, st, bp + "ln1.g"), param(g, st, bp + "ln1.b"), 1e-5);
        int q = tp.add_row(tp.matmul(n1, param(g, st, bp + "attn.wq")), param(g, st, bp + "attn.bq"));
        int k = tp.add_row(tp.matmul(n1, param(g, st, bp + "attn.wk")), param(g, st, bp + "attn.bk"));
        int v = tp.add_row(tp.matmul(n1, param(g, st, bp + "attn.wv")), param(g, st, bp + "attn.bv"));
        std::vector<int> heads;
        heads.reserve(cfg.heads);
        for (size_t h = 0; h < cfg.heads; ++h) {
            int qh = tp.slice_cols(q, h * hd, (h + 1) * hd);
            int kh = tp.slice_cols(k, h * hd, (h + 1) * hd);
            int vh = tp.slice_cols(v, h * hd, (h + 1) * hd);
            heads.push_back(tp.causal_attention(qh, kh, vh));
        }
        int att = cfg.heads == 1 ? heads[0] : tp.concat_cols(heads);
        int attn_out = tp.add_row(tp.matmul(att, param(g, st, bp + "attn.wo")),
                                  param(g, st, bp + "attn.bo"));
        x = tp.add(x, attn_out);

        int n2 = tp.layer_norm(x, param(g, st, bp + "ln2.g"), param(g, st, bp + "ln2.b"), 1e-5);
        int up = tp.add_row(tp.matmul(n2, param(g, st, bp + "mlp.w_up")), param(g, st, bp + "mlp.b_up"));
        int up_adapt = tp.scale(
            tp.matmul(tp.matmul(n2, param(g, st, ap + "up.A")), param(g, st, ap + "up.B")),
            adapter_scale);
        int h1 = tp.gelu(tp.add(up, up_adapt));
        int down = tp.add_row(tp.matmul(h1, param(g, st, bp + "mlp.w_down")),
                              param(g, st, bp + "mlp.b_down"));
        int down_adapt = tp.scale(
            tp.matmul(tp.matmul(h1, param(g, st, ap + "down.A")), param(g, st, ap + "down.B")),
            adapter_scale);
        x = tp.add(x, tp.add(down, down_adapt));
    }

    int f = tp.layer_norm(x, param(g, st, "base.ln_f.g"), param(g, st, "base.ln_f.b"), 1e-5);
    g.logits = tp.matmul(f, param(g, st, "base.head"));
    return g;
}

// (tape, scalar loss node) for a masked next-token objective
std::pair<ForwardGraph, int> build_loss(const ModelState& st, std::span<const int> ids,
                                        std::span<const double> mask) {
    if (mask.size() != ids.size())
        fail(Errc::dimension, "mask length must equal sequence length");
    if (!mask.empty() && mask.back() != 0.0)
        fail(Errc::dimension, "final position has no target; its mask weight must be zero");
    ForwardGraph g = build_forward(st, ids);
    // Target at position t is ids[t+1]; the trailing row gets a dummy target
    // and exact-zero weight, so it never contributes to the loss or gradient.
    std::vector<int> targets(ids.size());
    for (size_t t = 0; t + 1 < ids.size(); ++t) targets[t] = ids[t + 1];
    targets[ids.size() - 1] = kTokPad;
    int nll = g.tape.softmax_xent(g.logits, std::move(targets));
    int weights = g.tape.leaf(Tensor({mask.size()}, std::vector<double>(mask.begin(), mask.end())));
    int loss = g.tape.reduce_sum(g.tape.mul(nll, weights));
    return {std::move(g), loss};
}

} // namespace

Tensor logits(const ModelState& state, std::span<const int> ids) {
    ForwardGraph g = build_forward(state, ids);
    return g.tape.value(g.logits);
}

double sequence_loss(const ModelState& state, std::span<const int> ids,
                     std::span<const double> mask) {
    auto [g, loss] = build_loss(state, ids, mask);
    return g.tape.value(loss).data[0];
}

double completion_loss(const ModelState& state, const Example& z) {
    std::vector<int> ids = sequence_ids(z, state.cfg);
    std::vector<double> mask = completion_mask(z, state.cfg);
    return sequence_loss(state, ids, mask);
}

std::pair<double, GradientVector> sequence_loss_and_gradient(
    const ModelState& state, std::span<const int> ids, std::span<const double> mask,
    GradScope scope, std::string_view run_id, std::string_view example_id) {
    auto [g, loss] = build_loss(state, ids, mask);
    double loss_value = g.tape.value(loss).data[0];
    std::vector<Tensor> grads = g.tape.backward(loss);

    std::vector<ParamSlot> slots =
        scope == GradScope::adapters ? adapter_layout(state.cfg) : full_layout(state.cfg);
    GradientVector out;
    out.run_id = std::string(run_id);
    out.step = state.step;
    out.example_id = std::string(example_id);
    size_t total = slots.empty() ? 0 : slots.back().offset + slots.back().count;
    out.values.assign(total, 0.0);
    for (const ParamSlot& slot : slots) {
        auto it = g.params.find(slot.name);
        if (it == g.params.end()) continue; // parameter never entered the graph
        const Tensor& grad = grads[static_cast<size_t>(it->second)];
        std::copy(grad.data.begin(), grad.data.end(), out.values.begin() + slot.offset);
    }
    return {loss_value, std::move(out)};
}

std::pair<double, GradientVector> loss_and_gradient(const ModelState& state, const Example& z,
                                                    GradScope scope, std::string_view run_id) {
    std::vector<int> ids = sequence_ids(z, state.cfg);
    std::vector<double> mask = completion_mask(z, state.cfg);
    return sequence_loss_and_gradient(state, ids, mask, scope, run_id, z.id);
}

GradientVector example_gradient(const ModelState& state, const Example& z, GradScope scope,
                                std::string_view run_id) {
    return loss_and_gradient(state, z, scope, run_id).second;
}

std::map<std::string, Tensor> parameter_gradients(const ModelState& state,
                                                  std::span<const int> ids,
                                                  std::span<const double> mask) {
    auto [g, loss] = build_loss(state, ids, mask);
    std::vector<Tensor> grads = g.tape.backward(loss);
    std::map<std::string, Tensor> out;
    for (const ParamSpec& spec : parameter_specs(state.cfg)) {
        auto it = g.params.find(spec.name);
        if (it != g.params.end())
            out.emplace(spec.name, grads[static_cast<size_t>(it->second)]);
        else
            out.emplace(spec.name, Tensor(spec.shape));
    }
    return out;
}

} // namespace gradtrace
