// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_NN_HPP
#define UMBRA_NN_HPP

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "umbra/nn_ops.hpp"

namespace umbra::nn {

using ad::Var;

/// Ordered parameter registry. Insertion order is the serialization and
/// optimizer-state order, so module construction order must be stable.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init) {
        check(!index_.count(name), "ParamStore: duplicate parameter " + name);
        Var v = ad::param(std::move(init));
        index_[name] = items_.size();
        items_.emplace_back(name, v);
        return v;
    }

    const Var& at(const std::string& name) const {
        auto it = index_.find(name);
        check(it != index_.end(), "ParamStore: unknown parameter " + name);
        return items_[it->second].second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::pair<std::string, Var>>& items() const { return items_; }

    std::vector<Var> vars() const {
        std::vector<Var> out;
        out.reserve(items_.size());
        for (const auto& kv : items_) out.push_back(kv.second);
        return out;
    }

    long long total_numel() const {
        long long n = 0;
        for (const auto& kv : items_) n += kv.second->value.numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, Var>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline Tensor uniform_init(Rng& rng, const std::vector<int>& shape, int fan_in) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    return Tensor::rand(shape, rng, -bound, bound);
}

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride_, int pad_,
           Rng& rng)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".w", uniform_init(rng, {cout, cin, k, k}, cin * k * k));
        b = ps.add(name + ".b", Tensor::zeros({cout}));
    }

    Var operator()(const Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

struct ConvT2d {
    Var w, b;
    int stride = 1, pad = 0;

    ConvT2d() = default;
    ConvT2d(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride_, int pad_,
            Rng& rng)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".w", uniform_init(rng, {cin, cout, k, k}, cin * k * k));
        b = ps.add(name + ".b", Tensor::zeros({cout}));
    }

    Var operator()(const Var& x) const { return ad::conv_transpose2d(x, w, b, stride, pad); }
};

struct InstanceNorm2d {
    Var gamma, beta;

    InstanceNorm2d() = default;
    InstanceNorm2d(ParamStore& ps, const std::string& name, int c) {
        gamma = ps.add(name + ".g", Tensor::ones({c}));
        beta = ps.add(name + ".b", Tensor::zeros({c}));
    }

    Var operator()(const Var& x) const { return ad::instance_norm(x, gamma, beta); }
};

struct Linear {
    Var w, b;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
        w = ps.add(name + ".w", uniform_init(rng, {out, in}, in));
        b = ps.add(name + ".b", Tensor::zeros({out}));
    }

    Var operator()(const Var& x) const { return ad::linear(x, w, b); }
};

}  // namespace umbra::nn

#endif  // UMBRA_NN_HPP
