#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "gradtrace/rng.hpp"
#include "gradtrace/tape.hpp"

using namespace gradtrace;

namespace {

Tensor rand_tensor(Rng& rng, std::vector<size_t> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

// Builds a tape program from leaf tensors and returns the scalar value; used
// as the forward-only oracle for central finite differences.
using Program = std::function<double(Tape&, const std::vector<int>&)>;

double eval_program(const Program& prog, const std::vector<Tensor>& leaves) {
    Tape tape;
    std::vector<int> ids;
    ids.reserve(leaves.size());
    for (const Tensor& t : leaves) ids.push_back(tape.leaf(t));
    return prog(tape, ids);
}

// Central-difference gradient check of every coordinate of every leaf.
void check_gradients(const Program& prog, std::vector<Tensor> leaves, double h = 1e-4,
                     double tol = 1e-6) {
    Tape tape;
    std::vector<int> ids;
    for (const Tensor& t : leaves) ids.push_back(tape.leaf(t));
    double base = prog(tape, ids);
    CHECK(std::isfinite(base));
    int loss_node = static_cast<int>(tape.node_count()) - 1;
    std::vector<Tensor> grads = tape.backward(loss_node);

    for (size_t l = 0; l < leaves.size(); ++l) {
        const Tensor& analytic = grads[static_cast<size_t>(ids[l])];
        for (size_t i = 0; i < leaves[l].numel(); ++i) {
            std::vector<Tensor> plus = leaves, minus = leaves;
            plus[l].data[i] += h;
            minus[l].data[i] -= h;
            double fd = (eval_program(prog, plus) - eval_program(prog, minus)) / (2.0 * h);
            double a = analytic.data[i];
            double denom = std::max({std::fabs(a), std::fabs(fd), 1e-8});
            INFO("leaf ", l, " coord ", i, " analytic ", a, " fd ", fd);
            CHECK(std::fabs(a - fd) / denom <= tol);
        }
    }
}

} // namespace

TEST_CASE("matmul identity passthrough") {
    Tape tape;
    int a = tape.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    int eye = tape.leaf(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    int c = tape.matmul(a, eye);
    CHECK(tape.value(c).data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("gelu fixes zero") {
    Tape tape;
    int a = tape.leaf(Tensor({1}, {0.0}));
    int g = tape.gelu(a);
    CHECK(tape.value(g).data[0] == 0.0);
}

TEST_CASE("softmax cross-entropy of uniform two-way logits is ln 2") {
    Tape tape;
    int logits = tape.leaf(Tensor::matrix(1, 2, {0.0, 0.0}));
    int nll = tape.softmax_xent(logits, {0});
    CHECK(tape.value(nll).data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("shape mismatch raises a dimension error") {
    Tape tape;
    int a = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    int b = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    CHECK_THROWS_AS(tape.matmul(a, b), Error);
    try {
        tape.matmul(a, b);
    } catch (const Error& e) {
        CHECK(e.code() == Errc::dimension);
    }
}

TEST_CASE("non-finite input raises a numeric error") {
    Tape tape;
    Tensor bad({2}, {1.0, std::numeric_limits<double>::infinity()});
    try {
        tape.leaf(bad);
        FAIL("expected a numeric error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::numeric);
    }
}

TEST_CASE("backward of sum of squares") {
    Tape tape;
    int p = tape.leaf(Tensor({3}, {1, 2, 3}));
    int loss = tape.reduce_sum(tape.mul(p, p));
    std::vector<Tensor> grads = tape.backward(loss);
    CHECK(grads[static_cast<size_t>(p)].data == std::vector<double>{2, 4, 6});
}

TEST_CASE("unreachable leaves get exact zero gradients") {
    Tape tape;
    int p = tape.leaf(Tensor({3}, {1, 2, 3}));
    int q = tape.leaf(Tensor({2}, {5, 7}));
    int loss = tape.reduce_sum(tape.mul(p, p));
    std::vector<Tensor> grads = tape.backward(loss);
    CHECK(grads[static_cast<size_t>(q)].data == std::vector<double>{0.0, 0.0});
}

TEST_CASE("a consumed tape refuses a second backward") {
    Tape tape;
    int p = tape.leaf(Tensor({2}, {1, 2}));
    int loss = tape.reduce_sum(p);
    tape.backward(loss);
    try {
        tape.backward(loss);
        FAIL("expected a state error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::state);
    }
}

TEST_CASE("finite differences validate every op backward rule") {
    Rng rng(42);

    SUBCASE("matmul") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int c = t.matmul(in[0], in[1]);
                return t.value(t.reduce_sum(t.mul(c, in[2]))).data[0];
            },
            {rand_tensor(rng, {3, 4}), rand_tensor(rng, {4, 2}), rand_tensor(rng, {3, 2})});
    }
    SUBCASE("add and mul") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int c = t.mul(t.add(in[0], in[1]), in[2]);
                return t.value(t.reduce_sum(t.mul(c, in[3]))).data[0];
            },
            {rand_tensor(rng, {2, 3}), rand_tensor(rng, {2, 3}), rand_tensor(rng, {2, 3}),
             rand_tensor(rng, {2, 3})});
    }
    SUBCASE("add_row") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int c = t.add_row(in[0], in[1]);
                return t.value(t.reduce_sum(t.mul(c, in[2]))).data[0];
            },
            {rand_tensor(rng, {3, 4}), rand_tensor(rng, {4}), rand_tensor(rng, {3, 4})});
    }
    SUBCASE("embed") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int c = t.embed(in[0], {2, 0, 2, 1});
                return t.value(t.reduce_sum(t.mul(c, in[1]))).data[0];
            },
            {rand_tensor(rng, {3, 5}), rand_tensor(rng, {4, 5})});
    }
    SUBCASE("gelu") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int c = t.gelu(in[0]);
                return t.value(t.reduce_sum(t.mul(c, in[1]))).data[0];
            },
            {rand_tensor(rng, {3, 3}), rand_tensor(rng, {3, 3})});
    }
    SUBCASE("layer_norm") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int c = t.layer_norm(in[0], in[1], in[2], 1e-5);
                return t.value(t.reduce_sum(t.mul(c, in[3]))).data[0];
            },
            {rand_tensor(rng, {3, 6}), rand_tensor(rng, {6}), rand_tensor(rng, {6}),
             rand_tensor(rng, {3, 6})});
    }
    SUBCASE("causal_attention") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int c = t.causal_attention(in[0], in[1], in[2]);
                return t.value(t.reduce_sum(t.mul(c, in[3]))).data[0];
            },
            {rand_tensor(rng, {4, 3}), rand_tensor(rng, {4, 3}), rand_tensor(rng, {4, 3}),
             rand_tensor(rng, {4, 3})});
    }
    SUBCASE("softmax_xent") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int nll = t.softmax_xent(in[0], {1, 0, 3});
                return t.value(t.reduce_sum(t.mul(nll, in[1]))).data[0];
            },
            {rand_tensor(rng, {3, 4}), rand_tensor(rng, {3})});
    }
    SUBCASE("slice and concat") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int left = t.slice_cols(in[0], 0, 2);
                int right = t.slice_cols(in[0], 2, 5);
                int joined = t.concat_cols({right, left}); // swapped halves
                return t.value(t.reduce_sum(t.mul(joined, in[1]))).data[0];
            },
            {rand_tensor(rng, {3, 5}), rand_tensor(rng, {3, 5})});
    }
    SUBCASE("scale") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                int c = t.scale(in[0], -2.5);
                return t.value(t.reduce_sum(t.mul(c, in[1]))).data[0];
            },
            {rand_tensor(rng, {2, 4}), rand_tensor(rng, {2, 4})});
    }
    SUBCASE("reduce_sum") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                return t.value(t.reduce_sum(in[0])).data[0];
            },
            {rand_tensor(rng, {4, 4})});
    }
}

TEST_CASE("gradients are linear in the loss") {
    Rng rng(7);
    Tensor x = rand_tensor(rng, {3, 3});
    Tensor w = rand_tensor(rng, {3, 3});
    const double a = 1.7, b = -0.4;

    auto grads_of = [&](double ca, double cb) {
        Tape t;
        int xi = t.leaf(x);
        int wi = t.leaf(w);
        int l1 = t.reduce_sum(t.mul(t.matmul(xi, wi), xi));
        int l2 = t.reduce_sum(t.gelu(xi));
        int loss = t.add(t.scale(l1, ca), t.scale(l2, cb));
        std::vector<Tensor> g = t.backward(loss);
        return g[static_cast<size_t>(xi)];
    };

    Tensor combined = grads_of(a, b);
    Tensor g1 = grads_of(1.0, 0.0);
    Tensor g2 = grads_of(0.0, 1.0);
    for (size_t i = 0; i < combined.numel(); ++i) {
        double expect = a * g1.data[i] + b * g2.data[i];
        CHECK(combined.data[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("identical inputs give bit-identical values and gradients") {
    Rng rng(9);
    Tensor x = rand_tensor(rng, {4, 4});
    Tensor g = rand_tensor(rng, {4});
    Tensor b = rand_tensor(rng, {4});

    auto run = [&] {
        Tape t;
        int xi = t.leaf(x);
        int gi = t.leaf(g);
        int bi = t.leaf(b);
        int ln = t.layer_norm(xi, gi, bi, 1e-5);
        int att = t.causal_attention(ln, xi, ln);
        int loss = t.reduce_sum(t.gelu(att));
        double v = t.value(loss).data[0];
        std::vector<Tensor> grads = t.backward(loss);
        return std::pair<double, Tensor>(v, grads[static_cast<size_t>(xi)]);
    };

    auto [v1, g1] = run();
    auto [v2, g2] = run();
    CHECK(v1 == v2);
    CHECK(g1.data == g2.data);
}
