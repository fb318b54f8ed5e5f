#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

#include "gradtrace/errors.hpp"

namespace gradtrace {

inline size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) {
        if (d == 0) fail(Errc::dimension, "tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

// Dense row-major f64 tensor. Treated as immutable once an op has produced
// it; cheap enough at this scale that value semantics win everywhere.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<size_t> s)
        : shape(std::move(s)), data(shape_numel(shape), 0.0) {}

    Tensor(std::vector<size_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (shape_numel(shape) != data.size())
            fail(Errc::dimension, "tensor data length does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor matrix(size_t r, size_t c, std::initializer_list<double> vals) {
        return Tensor({r, c}, std::vector<double>(vals));
    }

    size_t numel() const { return data.size(); }
    size_t rank() const { return shape.size(); }

    size_t rows() const {
        if (shape.size() != 2) fail(Errc::dimension, "rows() on non-matrix tensor");
        return shape[0];
    }

    size_t cols() const {
        if (shape.size() != 2) fail(Errc::dimension, "cols() on non-matrix tensor");
        return shape[1];
    }

    double& at(size_t r, size_t c) { return data[r * shape[1] + c]; }
    double at(size_t r, size_t c) const { return data[r * shape[1] + c]; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

} // namespace gradtrace
