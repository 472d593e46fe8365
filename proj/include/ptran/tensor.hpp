#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "ptran/common.hpp"
#include "ptran/rng.hpp"

namespace ptran {

// Dense row-major tensor. Real is float or double; the training path uses
// float, all oracle and gradient tests use double.
template <class Real>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<Real> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(size_t(numel_of(shape)), Real(0));
    }
    Tensor(std::vector<int64_t> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (int64_t(data.size()) != numel_of(shape))
            throw DimensionError("tensor data length does not match shape");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e < 0) throw DimensionError("negative extent");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int64_t> s, Real v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor identity(int64_t n) {
        Tensor t({n, n});
        for (int64_t i = 0; i < n; ++i) t(i, i) = Real(1);
        return t;
    }

    static Tensor randn(std::vector<int64_t> s, Rng& rng, Real stddev) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = Real(rng.normal()) * stddev;
        return t;
    }

    int64_t numel() const { return int64_t(data.size()); }
    int rank() const { return int(shape.size()); }

    int64_t dim(int i) const { return shape[size_t(i)]; }

    Real& operator()(int64_t i) { return data[size_t(i)]; }
    Real operator()(int64_t i) const { return data[size_t(i)]; }
    Real& operator()(int64_t i, int64_t j) { return data[size_t(i * shape[1] + j)]; }
    Real operator()(int64_t i, int64_t j) const { return data[size_t(i * shape[1] + j)]; }
    Real& operator()(int64_t i, int64_t j, int64_t k) {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }
    Real operator()(int64_t i, int64_t j, int64_t k) const {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }
    Real& operator()(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    Real operator()(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (Real x : data)
            if (!std::isfinite(double(x))) return false;
        return true;
    }

    void check_finite(const char* where) const {
        if (!all_finite()) throw Error(std::string("non-finite value in ") + where);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }

    template <class Other>
    Tensor<Other> cast() const {
        Tensor<Other> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) t.data[i] = Other(data[i]);
        return t;
    }
};

}  // namespace ptran
