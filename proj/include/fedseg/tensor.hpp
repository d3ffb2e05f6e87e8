#pragma once

// Dense row-major tensor. Deliberately minimal: shape + flat storage +
// bounds-checked views. All numerics live in the tape ops, not here.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace fedseg {

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s, T fill = T(0))
        : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

    static Tensor from(std::vector<int> s, std::vector<T> d) {
        if (shape_numel(s) != static_cast<int64_t>(d.size()))
            throw DimensionError("tensor data size " + std::to_string(d.size()) +
                                 " does not match shape " + shape_str(s));
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(d);
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool empty() const { return data.empty(); }

    int dim(int i) const {
        if (i < 0 || i >= rank())
            throw DimensionError("dim index " + std::to_string(i) + " out of rank " +
                                 std::to_string(rank()));
        return shape[static_cast<size_t>(i)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // Row-major accessors for the common low ranks.
    T& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    const T& at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    T& at(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    const T& at(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
inline bool all_finite(const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

#ifdef FEDSEG_FINITE_CHECKS
template <typename T>
inline void check_finite(const Tensor<T>& t, const char* where) {
    if (!all_finite(t))
        throw NumericError(std::string("non-finite value produced by ") + where);
}
#else
template <typename T>
inline void check_finite(const Tensor<T>&, const char*) {}
#endif

} // namespace fedseg
