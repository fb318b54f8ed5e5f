#include "gradtrace/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gradtrace {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data)
        if (!std::isfinite(v)) fail(Errc::numeric, std::string(op) + " produced or received a non-finite value");
}

void check_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) fail(Errc::dimension, std::string(op) + " expects a rank-2 tensor");
}

// C[m,n] += A[m,k] * B[k,n], sequential i-k-j loops for determinism and
// reasonable cache behaviour.
void matmul_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where B is [n,k]
void matmul_bt_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k,n] += A^T * B where A is [m,k], B is [m,n]
void matmul_at_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

double gelu_derivative(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

} // namespace

int Tape::push(TapeNode n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Tensor t) {
    check_finite(t, "leaf");
    TapeNode n;
    n.kind = OpKind::leaf;
    n.value = std::move(t);
    return push(std::move(n));
}

int Tape::matmul(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    check_matrix(ta, "matmul");
    check_matrix(tb, "matmul");
    if (ta.cols() != tb.rows())
        fail(Errc::dimension, "matmul: inner dimensions disagree (" + std::to_string(ta.cols()) +
                                  " vs " + std::to_string(tb.rows()) + ")");
    TapeNode n;
    n.kind = OpKind::matmul;
    n.inputs = {a, b};
    n.value = Tensor({ta.rows(), tb.cols()});
    matmul_acc(ta.data.data(), tb.data.data(), n.value.data.data(), ta.rows(), ta.cols(), tb.cols());
    check_finite(n.value, "matmul");
    return push(std::move(n));
}

int Tape::add(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) fail(Errc::dimension, "add: shape mismatch");
    TapeNode n;
    n.kind = OpKind::add;
    n.inputs = {a, b};
    n.value = Tensor(ta.shape);
    for (size_t i = 0; i < ta.numel(); ++i) n.value.data[i] = ta.data[i] + tb.data[i];
    check_finite(n.value, "add");
    return push(std::move(n));
}

int Tape::mul(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) fail(Errc::dimension, "mul: shape mismatch");
    TapeNode n;
    n.kind = OpKind::mul;
    n.inputs = {a, b};
    n.value = Tensor(ta.shape);
    for (size_t i = 0; i < ta.numel(); ++i) n.value.data[i] = ta.data[i] * tb.data[i];
    check_finite(n.value, "mul");
    return push(std::move(n));
}

int Tape::add_row(int a, int row) {
    const Tensor& ta = value(a);
    const Tensor& tr = value(row);
    check_matrix(ta, "add_row");
    if (tr.rank() != 1 || tr.shape[0] != ta.cols())
        fail(Errc::dimension, "add_row: row vector length must equal matrix columns");
    TapeNode n;
    n.kind = OpKind::add_row;
    n.inputs = {a, row};
    n.value = Tensor(ta.shape);
    for (size_t i = 0; i < ta.rows(); ++i)
        for (size_t j = 0; j < ta.cols(); ++j)
            n.value.data[i * ta.cols() + j] = ta.data[i * ta.cols() + j] + tr.data[j];
    check_finite(n.value, "add_row");
    return push(std::move(n));
}

int Tape::embed(int table, std::vector<int> row_ids) {
    const Tensor& tt = value(table);
    check_matrix(tt, "embed");
    if (row_ids.empty()) fail(Errc::dimension, "embed: empty id list");
    for (int id : row_ids)
        if (id < 0 || static_cast<size_t>(id) >= tt.rows())
            fail(Errc::dimension, "embed: row id " + std::to_string(id) + " out of range");
    TapeNode n;
    n.kind = OpKind::embed;
    n.inputs = {table};
    n.value = Tensor({row_ids.size(), tt.cols()});
    for (size_t t = 0; t < row_ids.size(); ++t) {
        const double* src = tt.data.data() + static_cast<size_t>(row_ids[t]) * tt.cols();
        std::copy(src, src + tt.cols(), n.value.data.data() + t * tt.cols());
    }
    n.ids = std::move(row_ids);
    check_finite(n.value, "embed");
    return push(std::move(n));
}

int Tape::gelu(int a) {
    const Tensor& ta = value(a);
    TapeNode n;
    n.kind = OpKind::gelu;
    n.inputs = {a};
    n.value = Tensor(ta.shape);
    for (size_t i = 0; i < ta.numel(); ++i) n.value.data[i] = gelu_value(ta.data[i]);
    check_finite(n.value, "gelu");
    return push(std::move(n));
}

int Tape::layer_norm(int x, int gain, int bias, double eps) {
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    const Tensor& tb = value(bias);
    check_matrix(tx, "layer_norm");
    size_t m = tx.rows(), d = tx.cols();
    if (tg.rank() != 1 || tg.shape[0] != d || tb.rank() != 1 || tb.shape[0] != d)
        fail(Errc::dimension, "layer_norm: gain/bias length must equal feature dim");
    if (eps <= 0.0) fail(Errc::numeric, "layer_norm: eps must be positive");
    TapeNode n;
    n.kind = OpKind::layer_norm;
    n.inputs = {x, gain, bias};
    n.scalar = eps;
    n.value = Tensor(tx.shape);
    n.cache.resize(2 * m);
    for (size_t i = 0; i < m; ++i) {
        const double* row = tx.data.data() + i * d;
        double mean = 0.0;
        for (size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        n.cache[2 * i] = mean;
        n.cache[2 * i + 1] = inv;
        double* out = n.value.data.data() + i * d;
        for (size_t j = 0; j < d; ++j)
            out[j] = tg.data[j] * ((row[j] - mean) * inv) + tb.data[j];
    }
    check_finite(n.value, "layer_norm");
    return push(std::move(n));
}

int Tape::causal_attention(int q, int k, int v) {
    const Tensor& tq = value(q);
    const Tensor& tk = value(k);
    const Tensor& tv = value(v);
    check_matrix(tq, "causal_attention");
    if (!tq.same_shape(tk) || !tq.same_shape(tv))
        fail(Errc::dimension, "causal_attention: q, k, v must share one shape");
    size_t t = tq.rows(), d = tq.cols();
    double sc = 1.0 / std::sqrt(static_cast<double>(d));
    TapeNode n;
    n.kind = OpKind::causal_attention;
    n.inputs = {q, k, v};
    n.value = Tensor({t, d});
    n.cache.assign(t * t, 0.0); // row-stochastic lower-triangular probs
    for (size_t i = 0; i < t; ++i) {
        const double* qi = tq.data.data() + i * d;
        double* probs = n.cache.data() + i * t;
        double mx = -1e300;
        for (size_t j = 0; j <= i; ++j) {
            const double* kj = tk.data.data() + j * d;
            double s = 0.0;
            for (size_t c = 0; c < d; ++c) s += qi[c] * kj[c];
            s *= sc;
            probs[j] = s;
            mx = std::max(mx, s);
        }
        double z = 0.0;
        for (size_t j = 0; j <= i; ++j) {
            probs[j] = std::exp(probs[j] - mx);
            z += probs[j];
        }
        double* out = n.value.data.data() + i * d;
        for (size_t j = 0; j <= i; ++j) {
            double p = probs[j] / z;
            probs[j] = p;
            const double* vj = tv.data.data() + j * d;
            for (size_t c = 0; c < d; ++c) out[c] += p * vj[c];
        }
    }
    check_finite(n.value, "causal_attention");
    return push(std::move(n));
}

int Tape::softmax_xent(int logits, std::vector<int> targets) {
    const Tensor& tl = value(logits);
    check_matrix(tl, "softmax_xent");
    size_t t = tl.rows(), vsz = tl.cols();
    if (targets.size() != t)
        fail(Errc::dimension, "softmax_xent: one target id per logit row required");
    for (int id : targets)
        if (id < 0 || static_cast<size_t>(id) >= vsz)
            fail(Errc::dimension, "softmax_xent: target id out of vocabulary");
    TapeNode n;
    n.kind = OpKind::softmax_xent;
    n.inputs = {logits};
    n.value = Tensor({t});
    n.cache.resize(t * vsz);
    for (size_t i = 0; i < t; ++i) {
        const double* row = tl.data.data() + i * vsz;
        double mx = row[0];
        for (size_t j = 1; j < vsz; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        double* probs = n.cache.data() + i * vsz;
        for (size_t j = 0; j < vsz; ++j) {
            probs[j] = std::exp(row[j] - mx);
            z += probs[j];
        }
        for (size_t j = 0; j < vsz; ++j) probs[j] /= z;
        double lse = mx + std::log(z);
        n.value.data[i] = lse - row[static_cast<size_t>(targets[i])];
    }
    n.ids = std::move(targets);
    check_finite(n.value, "softmax_xent");
    return push(std::move(n));
}

int Tape::slice_cols(int a, size_t c0, size_t c1) {
    const Tensor& ta = value(a);
    check_matrix(ta, "slice_cols");
    if (c0 >= c1 || c1 > ta.cols()) fail(Errc::dimension, "slice_cols: bad column range");
    TapeNode n;
    n.kind = OpKind::slice_cols;
    n.inputs = {a};
    n.c0 = c0;
    n.c1 = c1;
    n.value = Tensor({ta.rows(), c1 - c0});
    for (size_t i = 0; i < ta.rows(); ++i)
        for (size_t j = c0; j < c1; ++j)
            n.value.data[i * (c1 - c0) + (j - c0)] = ta.data[i * ta.cols() + j];
    return push(std::move(n));
}

int Tape::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) fail(Errc::dimension, "concat_cols: no inputs");
    size_t rows = value(parts[0]).rows();
    size_t total = 0;
    for (int p : parts) {
        const Tensor& tp = value(p);
        check_matrix(tp, "concat_cols");
        if (tp.rows() != rows) fail(Errc::dimension, "concat_cols: row counts disagree");
        total += tp.cols();
    }
    TapeNode n;
    n.kind = OpKind::concat_cols;
    n.inputs = parts;
    n.value = Tensor({rows, total});
    size_t off = 0;
    for (int p : parts) {
        const Tensor& tp = value(p);
        for (size_t i = 0; i < rows; ++i)
            for (size_t j = 0; j < tp.cols(); ++j)
                n.value.data[i * total + off + j] = tp.data[i * tp.cols() + j];
        off += tp.cols();
    }
    return push(std::move(n));
}

int Tape::scale(int a, double factor) {
    if (!std::isfinite(factor)) fail(Errc::numeric, "scale: non-finite factor");
    const Tensor& ta = value(a);
    TapeNode n;
    n.kind = OpKind::scale;
    n.inputs = {a};
    n.scalar = factor;
    n.value = Tensor(ta.shape);
    for (size_t i = 0; i < ta.numel(); ++i) n.value.data[i] = factor * ta.data[i];
    check_finite(n.value, "scale");
    return push(std::move(n));
}

int Tape::reduce_sum(int a) {
    const Tensor& ta = value(a);
    double s = 0.0;
    for (double x : ta.data) s += x;
    TapeNode n;
    n.kind = OpKind::reduce_sum;
    n.inputs = {a};
    n.value = Tensor::scalar(s);
    check_finite(n.value, "reduce_sum");
    return push(std::move(n));
}

std::vector<Tensor> Tape::backward(int loss) {
    if (consumed_) fail(Errc::state, "backward called on a consumed tape");
    if (loss < 0 || static_cast<size_t>(loss) >= nodes_.size())
        fail(Errc::state, "backward: unknown loss node");
    if (value(loss).numel() != 1) fail(Errc::dimension, "backward: loss must be a scalar");
    consumed_ = true;

    std::vector<Tensor> grads(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i) grads[i] = Tensor(nodes_[i].value.shape);
    grads[static_cast<size_t>(loss)].data[0] = 1.0;

    for (int idx = static_cast<int>(nodes_.size()) - 1; idx >= 0; --idx) {
        const TapeNode& n = nodes_[static_cast<size_t>(idx)];
        const Tensor& g = grads[static_cast<size_t>(idx)];
        switch (n.kind) {
            case OpKind::leaf:
                break;
            case OpKind::matmul: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                Tensor& da = grads[static_cast<size_t>(n.inputs[0])];
                Tensor& db = grads[static_cast<size_t>(n.inputs[1])];
                // dA += dC B^T ; dB += A^T dC
                matmul_bt_acc(g.data.data(), b.data.data(), da.data.data(), a.rows(), b.cols(), a.cols());
                matmul_at_acc(a.data.data(), g.data.data(), db.data.data(), a.rows(), a.cols(), b.cols());
                break;
            }
            case OpKind::add: {
                Tensor& da = grads[static_cast<size_t>(n.inputs[0])];
                Tensor& db = grads[static_cast<size_t>(n.inputs[1])];
                for (size_t i = 0; i < g.numel(); ++i) {
                    da.data[i] += g.data[i];
                    db.data[i] += g.data[i];
                }
                break;
            }
            case OpKind::mul: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                Tensor& da = grads[static_cast<size_t>(n.inputs[0])];
                Tensor& db = grads[static_cast<size_t>(n.inputs[1])];
                for (size_t i = 0; i < g.numel(); ++i) {
                    da.data[i] += g.data[i] * b.data[i];
                    db.data[i] += g.data[i] * a.data[i];
                }
                break;
            }
            case OpKind::add_row: {
                Tensor& da = grads[static_cast<size_t>(n.inputs[0])];
                Tensor& dr = grads[static_cast<size_t>(n.inputs[1])];
                size_t rows = n.value.rows(), cols = n.value.cols();
                for (size_t i = 0; i < rows; ++i)
                    for (size_t j = 0; j < cols; ++j) {
                        da.data[i * cols + j] += g.data[i * cols + j];
                        dr.data[j] += g.data[i * cols + j];
                    }
                break;
            }
            case OpKind::embed: {
                Tensor& dt = grads[static_cast<size_t>(n.inputs[0])];
                size_t cols = n.value.cols();
                for (size_t t = 0; t < n.ids.size(); ++t) {
                    double* dst = dt.data.data() + static_cast<size_t>(n.ids[t]) * cols;
                    const double* src = g.data.data() + t * cols;
                    for (size_t j = 0; j < cols; ++j) dst[j] += src[j];
                }
                break;
            }
            case OpKind::gelu: {
                const Tensor& a = value(n.inputs[0]);
                Tensor& da = grads[static_cast<size_t>(n.inputs[0])];
                for (size_t i = 0; i < g.numel(); ++i)
                    da.data[i] += g.data[i] * gelu_derivative(a.data[i]);
                break;
            }
            case OpKind::layer_norm: {
                const Tensor& x = value(n.inputs[0]);
                const Tensor& gn = value(n.inputs[1]);
                Tensor& dx = grads[static_cast<size_t>(n.inputs[0])];
                Tensor& dg = grads[static_cast<size_t>(n.inputs[1])];
                Tensor& db = grads[static_cast<size_t>(n.inputs[2])];
                size_t m = x.rows(), d = x.cols();
                for (size_t i = 0; i < m; ++i) {
                    double mean = n.cache[2 * i];
                    double inv = n.cache[2 * i + 1];
                    const double* xr = x.data.data() + i * d;
                    const double* gr = g.data.data() + i * d;
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (size_t j = 0; j < d; ++j) {
                        double xh = (xr[j] - mean) * inv;
                        double dxh = gr[j] * gn.data[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                        dg.data[j] += gr[j] * xh;
                        db.data[j] += gr[j];
                    }
                    mean_dxh /= static_cast<double>(d);
                    mean_dxh_xh /= static_cast<double>(d);
                    double* dxr = dx.data.data() + i * d;
                    for (size_t j = 0; j < d; ++j) {
                        double xh = (xr[j] - mean) * inv;
                        double dxh = gr[j] * gn.data[j];
                        dxr[j] += (dxh - mean_dxh - xh * mean_dxh_xh) * inv;
                    }
                }
                break;
            }
            case OpKind::causal_attention: {
                const Tensor& q = value(n.inputs[0]);
                const Tensor& k = value(n.inputs[1]);
                const Tensor& v = value(n.inputs[2]);
                Tensor& dq = grads[static_cast<size_t>(n.inputs[0])];
                Tensor& dk = grads[static_cast<size_t>(n.inputs[1])];
                Tensor& dv = grads[static_cast<size_t>(n.inputs[2])];
                size_t t = q.rows(), d = q.cols();
                double sc = 1.0 / std::sqrt(static_cast<double>(d));
                std::vector<double> dp(t, 0.0); // per query row
                for (size_t i = 0; i < t; ++i) {
                    const double* probs = n.cache.data() + i * t;
                    const double* go = g.data.data() + i * d;
                    double row_dot = 0.0;
                    for (size_t j = 0; j <= i; ++j) {
                        const double* vj = v.data.data() + j * d;
                        double acc = 0.0;
                        for (size_t c = 0; c < d; ++c) acc += go[c] * vj[c];
                        dp[j] = acc;
                        row_dot += acc * probs[j];
                        double* dvj = dv.data.data() + j * d;
                        for (size_t c = 0; c < d; ++c) dvj[c] += probs[j] * go[c];
                    }
                    double* dqi = dq.data.data() + i * d;
                    const double* qi = q.data.data() + i * d;
                    for (size_t j = 0; j <= i; ++j) {
                        double ds = probs[j] * (dp[j] - row_dot) * sc;
                        if (ds == 0.0) continue;
                        const double* kj = k.data.data() + j * d;
                        double* dkj = dk.data.data() + j * d;
                        for (size_t c = 0; c < d; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
                break;
            }
            case OpKind::softmax_xent: {
                Tensor& dl = grads[static_cast<size_t>(n.inputs[0])];
                size_t t = n.ids.size();
                size_t vsz = dl.cols();
                for (size_t i = 0; i < t; ++i) {
                    double gi = g.data[i];
                    if (gi == 0.0) continue;
                    const double* probs = n.cache.data() + i * vsz;
                    double* row = dl.data.data() + i * vsz;
                    for (size_t j = 0; j < vsz; ++j) row[j] += gi * probs[j];
                    row[static_cast<size_t>(n.ids[i])] -= gi;
                }
                break;
            }
            case OpKind::slice_cols: {
                Tensor& da = grads[static_cast<size_t>(n.inputs[0])];
                size_t w = n.c1 - n.c0;
                for (size_t i = 0; i < n.value.rows(); ++i)
                    for (size_t j = 0; j < w; ++j)
                        da.data[i * da.cols() + n.c0 + j] += g.data[i * w + j];
                break;
            }
            case OpKind::concat_cols: {
                size_t off = 0;
                size_t total = n.value.cols();
                for (int p : n.inputs) {
                    Tensor& dp_ = grads[static_cast<size_t>(p)];
                    size_t w = dp_.cols();
                    for (size_t i = 0; i < n.value.rows(); ++i)
                        for (size_t j = 0; j < w; ++j)
                            dp_.data[i * w + j] += g.data[i * total + off + j];
                    off += w;
                }
                break;
            }
            case OpKind::scale: {
                Tensor& da = grads[static_cast<size_t>(n.inputs[0])];
                for (size_t i = 0; i < g.numel(); ++i) da.data[i] += n.scalar * g.data[i];
                break;
            }
            case OpKind::reduce_sum: {
                Tensor& da = grads[static_cast<size_t>(n.inputs[0])];
                double gv = g.data[0];
                for (size_t i = 0; i < da.numel(); ++i) da.data[i] += gv;
                break;
            }
        }
    }
    return grads;
}

} // namespace gradtrace
