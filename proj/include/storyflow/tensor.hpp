#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "storyflow/rng.hpp"

namespace storyflow {

// Dense row-major double tensor. Shapes are small (rank <= 4 in practice),
// values are expected to stay finite; NaN/Inf is treated as an error state by
// the checks in check_finite().
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        assert(static_cast<int64_t>(data.size()) == numel_of(shape));
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor from(std::vector<int> s, std::vector<double> d) { return Tensor(std::move(s), std::move(d)); }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = stddev * rng.normal();
        return t;
    }

    static Tensor rand_uniform(std::vector<int> s, Rng& rng, double lo, double hi) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = rng.uniform(lo, hi);
        return t;
    }

    double& at(int i) { return data[static_cast<size_t>(i)]; }
    double at(int i) const { return data[static_cast<size_t>(i)]; }
    double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double& at(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double at(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : data)
            if (!std::isfinite(x)) return false;
        return true;
    }

    void check_finite(const char* what) const {
        if (!all_finite()) throw std::runtime_error(std::string("non-finite values in ") + what);
    }

    Tensor reshaped(std::vector<int> s) const {
        assert(numel_of(s) == numel());
        return Tensor(std::move(s), data);
    }
};

inline double dot(const Tensor& a, const Tensor& b) {
    assert(a.numel() == b.numel());
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const Tensor& a, const Tensor& b) {
    double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    Tensor r = a;
    for (int64_t i = 0; i < r.numel(); ++i) r.data[i] += b.data[i];
    return r;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    Tensor r = a;
    for (int64_t i = 0; i < r.numel(); ++i) r.data[i] -= b.data[i];
    return r;
}

inline Tensor operator*(double s, const Tensor& a) {
    Tensor r = a;
    for (double& x : r.data) x *= s;
    return r;
}

inline Tensor& operator+=(Tensor& a, const Tensor& b) {
    assert(a.same_shape(b));
    for (int64_t i = 0; i < a.numel(); ++i) a.data[i] += b.data[i];
    return a;
}

// a += s*b without a temporary.
inline void axpy(Tensor& a, double s, const Tensor& b) {
    assert(a.numel() == b.numel());
    for (int64_t i = 0; i < a.numel(); ++i) a.data[i] += s * b.data[i];
}

// C = A(m x k) * B(k x n), plain row-major matmul.
inline void matmul_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace storyflow
