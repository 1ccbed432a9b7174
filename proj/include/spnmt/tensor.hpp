#pragma once

#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "spnmt/common.hpp"

namespace spnmt {

// Dense row-major n-dimensional array. Gradients live in graph nodes and
// Parameter objects, not here.
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), Real(0)) {}
    Tensor(std::vector<int> s, std::vector<Real> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<std::size_t>(numel_of(shape)) != v.size())
            throw InputError("tensor data size " + std::to_string(v.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static long numel_of(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            if (d <= 0) throw InputError("tensor dimensions must be positive, got " + shape_str(s));
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << "]";
        return os.str();
    }

    long numel() const { return static_cast<long>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    // Size of the last axis and the product of all leading axes; most ops
    // treat a tensor as [rows, cols] over its last axis.
    int cols() const { return shape.empty() ? 1 : shape.back(); }
    long rows() const { return shape.empty() ? 1 : numel() / cols(); }

    Real& at2(long r, long c) { return v[static_cast<std::size_t>(r * cols() + c)]; }
    Real at2(long r, long c) const { return v[static_cast<std::size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (Real x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// Trainable tensor with a persistent gradient accumulator.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor t) : name(std::move(n)), value(std::move(t)), grad(value.shape) {}

    void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), Real(0)); }
};

}  // namespace spnmt
