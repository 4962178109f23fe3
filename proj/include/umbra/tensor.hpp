// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_TENSOR_HPP
#define UMBRA_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <vector>

#include "umbra/common.hpp"

namespace umbra {

/// Dense row-major double tensor. Networks use NCHW layout; images and masks
/// have their own domain types and convert through this when entering the
/// compute graph.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0); }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from(std::vector<int> shape, std::vector<double> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        check(static_cast<long long>(values.size()) == count(t.shape_),
              "Tensor::from: value count does not match shape");
        t.data_ = std::move(values);
        return t;
    }

    static Tensor rand(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = rng.uniform(lo, hi);
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = rng.normal();
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    long long numel() const { return static_cast<long long>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](long long i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](long long i) const { return data_[static_cast<std::size_t>(i)]; }

    /// 4D accessor, NCHW.
    double& at4(int n, int c, int h, int w) {
        const int C = shape_[1], H = shape_[2], W = shape_[3];
        return data_[static_cast<std::size_t>(((static_cast<long long>(n) * C + c) * H + h) * W + w)];
    }
    double at4(int n, int c, int h, int w) const {
        const int C = shape_[1], H = shape_[2], W = shape_[3];
        return data_[static_cast<std::size_t>(((static_cast<long long>(n) * C + c) * H + h) * W + w)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
    double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }

    double abs_max() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::fabs(v));
        return m;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool bit_equal(const Tensor& o) const {
        if (shape_ != o.shape_) return false;
        for (std::size_t i = 0; i < data_.size(); ++i)
            if (data_[i] != o.data_[i]) return false;
        return true;
    }

    Tensor reshaped(std::vector<int> shape) const {
        check(count(shape) == numel(), "reshape: element count mismatch");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape_.size(); ++i)
            os << shape_[i] << (i + 1 < shape_.size() ? "," : "");
        os << "]";
        return os.str();
    }

    static long long count(const std::vector<int>& shape) {
        long long n = 1;
        for (int d : shape) {
            check(d >= 0, "Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace umbra

#endif  // UMBRA_TENSOR_HPP
