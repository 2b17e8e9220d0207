#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "ladderseg/common.hpp"
#include "ladderseg/rng.hpp"

namespace ladderseg {

// Dense row-major tensor. The NN stack uses NHWC layout throughout.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), T(0)) {}
    Tensor(Shape s, T fill) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool empty() const { return data.empty(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    int64_t dim(size_t i) const { return shape.at(i); }

    void zero() { std::fill(data.begin(), data.end(), T(0)); }

    void fill_normal(Rng& rng, double mean, double stddev) {
        for (auto& v : data) v = static_cast<T>(rng.normal(mean, stddev));
    }

    void fill_uniform(Rng& rng, double lo, double hi) {
        for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
    }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorU8 = Tensor<uint8_t>;

}  // namespace ladderseg
