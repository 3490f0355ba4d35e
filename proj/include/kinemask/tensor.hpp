#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <vector>

#include "kinemask/common.hpp"

namespace kinemask {

/// Dense row-major tensor. Shapes are dynamic; kernels index the flat
/// buffer directly.
template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(size_t(numel_of(shape)), T(0)) {}

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    int64_t numel() const { return int64_t(data.size()); }
    int64_t dim(size_t i) const { return shape[i]; }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    T& operator[](int64_t i) { return data[size_t(i)]; }
    const T& operator[](int64_t i) const { return data[size_t(i)]; }
};

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev = 1.0) {
    for (auto& v : t.data) v = T(rng.normal() * stddev);
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (auto v : t.data)
        if (!std::isfinite(double(v))) return false;
    return true;
}

template <typename T>
double mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    double s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += std::abs(double(a[i]) - double(b[i]));
    return a.numel() ? s / double(a.numel()) : 0.0;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace kinemask
