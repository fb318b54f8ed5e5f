#pragma once

#include <cstdint>
#include <vector>

#include "gradtrace/tensor.hpp"

namespace gradtrace {

enum class OpKind : uint8_t {
    leaf,
    matmul,
    add,
    mul,
    add_row,          // [m,n] + [n] broadcast over rows
    embed,            // row gather from a table by token id
    gelu,
    layer_norm,       // per-row over the last dim, learned gain/bias
    causal_attention, // fused masked softmax(QK^T)V for one head
    softmax_xent,     // per-position softmax cross-entropy against target ids
    slice_cols,
    concat_cols,
    scale,
    reduce_sum,       // sum of all entries -> scalar
};

struct TapeNode {
    OpKind kind = OpKind::leaf;
    std::vector<int> inputs;
    Tensor value;
    std::vector<int> ids;      // embed: gathered row ids; softmax_xent: targets
    std::vector<double> cache; // layer_norm: (mean, inv_std) per row;
                               // causal_attention: softmax probs;
                               // softmax_xent: softmax probs
    double scalar = 0.0;       // scale: factor; layer_norm: eps
    size_t c0 = 0, c1 = 0;     // slice_cols: column range [c0, c1)
};

// Reverse-mode tape. Nodes are appended in creation order, which is also a
// topological order; backward walks it once in reverse. Every completed op
// verifies its result is finite. A tape is single-use: backward() consumes it.
class Tape {
public:
    int leaf(Tensor t);
    int matmul(int a, int b);
    int add(int a, int b);
    int mul(int a, int b);
    int add_row(int a, int row);
    int embed(int table, std::vector<int> row_ids);
    int gelu(int a);
    int layer_norm(int x, int gain, int bias, double eps);
    int causal_attention(int q, int k, int v);
    int softmax_xent(int logits, std::vector<int> targets);
    int slice_cols(int a, size_t c0, size_t c1);
    int concat_cols(const std::vector<int>& parts);
    int scale(int a, double factor);
    int reduce_sum(int a);

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // Gradient of the scalar node `loss` with respect to every node on the
    // tape, aligned by node id. Nodes the loss does not reach get exact zeros.
    std::vector<Tensor> backward(int loss);

private:
    int push(TapeNode n);
    const TapeNode& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

    std::vector<TapeNode> nodes_;
    bool consumed_ = false;
};

} // namespace gradtrace
