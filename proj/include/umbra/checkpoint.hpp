// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_CHECKPOINT_HPP
#define UMBRA_CHECKPOINT_HPP

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "umbra/common.hpp"
#include "umbra/nn.hpp"
#include "umbra/optim.hpp"
#include "umbra/tensor.hpp"

namespace umbra {

/// On-disk snapshot of a training run. Tensors are stored by name so a
/// checkpoint can hold several networks side by side under distinct
/// prefixes. Doubles are written in native byte order; checkpoints are not
/// meant to cross architectures.
struct Checkpoint {
    std::map<std::string, std::string> config;
    std::vector<std::pair<std::string, Tensor>> tensors;

    bool has_optimizer = false;
    long long optimizer_step = 0;
    std::vector<Tensor> optimizer_m;
    std::vector<Tensor> optimizer_v;

    bool has_rng = false;
    std::array<std::uint64_t, 4> rng_state{};

    const Tensor& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw Error("checkpoint: no tensor named '" + name + "'");
    }

    bool has_tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }
};

namespace ckptdetail {

constexpr std::uint32_t kMagic = 0x554d434bu;  // "UMCK" big-endian spelled out
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline void put_i64(std::ostream& os, std::int64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void put_tensor(std::ostream& os, const Tensor& t) {
    put_u32(os, static_cast<std::uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) put_i64(os, t.dim(i));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * static_cast<long long>(sizeof(double))));
}

inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    check(is.good(), "checkpoint: truncated file");
    return v;
}

inline std::int64_t get_i64(std::istream& is) {
    std::int64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    check(is.good(), "checkpoint: truncated file");
    return v;
}

inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    check(is.good(), "checkpoint: truncated file");
    return v;
}

inline std::string get_string(std::istream& is) {
    const std::uint32_t n = get_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    check(is.good() || n == 0, "checkpoint: truncated file");
    return s;
}

inline Tensor get_tensor(std::istream& is) {
    const std::uint32_t ndim = get_u32(is);
    check(ndim <= 8, "checkpoint: implausible tensor rank");
    std::vector<int> shape;
    long long n = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const std::int64_t d = get_i64(is);
        check(d > 0 && d < (1LL << 31), "checkpoint: bad tensor dimension");
        shape.push_back(static_cast<int>(d));
        n *= d;
    }
    check(n < (1LL << 32), "checkpoint: implausible tensor size");
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(n * static_cast<long long>(sizeof(double))));
    check(is.good(), "checkpoint: truncated tensor payload");
    return t;
}

}  // namespace ckptdetail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    using namespace ckptdetail;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    check(os.good(), "checkpoint: cannot write " + path);
    put_u32(os, kMagic);
    put_u32(os, kVersion);

    put_u32(os, static_cast<std::uint32_t>(ck.config.size()));
    for (const auto& [k, v] : ck.config) {
        put_string(os, k);
        put_string(os, v);
    }

    put_u32(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        put_string(os, name);
        put_tensor(os, t);
    }

    put_u32(os, ck.has_optimizer ? 1u : 0u);
    if (ck.has_optimizer) {
        check(ck.optimizer_m.size() == ck.optimizer_v.size(),
              "checkpoint: optimizer slot lists disagree");
        put_i64(os, ck.optimizer_step);
        put_u32(os, static_cast<std::uint32_t>(ck.optimizer_m.size()));
        for (std::size_t i = 0; i < ck.optimizer_m.size(); ++i) {
            put_tensor(os, ck.optimizer_m[i]);
            put_tensor(os, ck.optimizer_v[i]);
        }
    }

    put_u32(os, ck.has_rng ? 1u : 0u);
    if (ck.has_rng)
        for (const std::uint64_t w : ck.rng_state) put_u64(os, w);

    os.flush();
    check(os.good(), "checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    using namespace ckptdetail;
    std::ifstream is(path, std::ios::binary);
    check(is.good(), "checkpoint: cannot open " + path);
    check(get_u32(is) == kMagic, "checkpoint: bad magic in " + path);
    const std::uint32_t version = get_u32(is);
    check(version == kVersion,
          "checkpoint: unsupported version " + std::to_string(version) + " in " + path);

    Checkpoint ck;
    const std::uint32_t ncfg = get_u32(is);
    for (std::uint32_t i = 0; i < ncfg; ++i) {
        std::string k = get_string(is);
        ck.config[k] = get_string(is);
    }

    const std::uint32_t nt = get_u32(is);
    for (std::uint32_t i = 0; i < nt; ++i) {
        std::string name = get_string(is);
        ck.tensors.emplace_back(std::move(name), get_tensor(is));
    }

    if (get_u32(is) != 0) {
        ck.has_optimizer = true;
        ck.optimizer_step = get_i64(is);
        const std::uint32_t slots = get_u32(is);
        for (std::uint32_t i = 0; i < slots; ++i) {
            ck.optimizer_m.push_back(get_tensor(is));
            ck.optimizer_v.push_back(get_tensor(is));
        }
    }

    if (get_u32(is) != 0) {
        ck.has_rng = true;
        for (auto& w : ck.rng_state) w = get_u64(is);
    }
    return ck;
}

/// Copies every parameter of a store into the checkpoint under a prefix.
inline void collect_params(Checkpoint& ck, const nn::ParamStore& ps, const std::string& prefix) {
    for (const auto& [name, var] : ps.items())
        ck.tensors.emplace_back(prefix + name, var->value);
}

/// Writes checkpointed values back into a store. Every parameter must be
/// present under the prefix with a matching shape; extra checkpoint entries
/// under other prefixes are fine.
inline void assign_params(const Checkpoint& ck, nn::ParamStore& ps, const std::string& prefix) {
    for (const auto& [name, var] : ps.items()) {
        const std::string full = prefix + name;
        check(ck.has_tensor(full), "checkpoint: missing tensor '" + full + "'");
        const Tensor& t = ck.tensor(full);
        check(t.shape() == var->value.shape(),
              "checkpoint: shape mismatch for '" + full + "' (have " + t.shape_str() +
                  ", want " + var->value.shape_str() + ")");
        var->value = t;
    }
}

/// Captures optimizer moments and step count for exact resume.
inline void collect_optimizer(Checkpoint& ck, optim::Adam& opt) {
    ck.has_optimizer = true;
    ck.optimizer_step = opt.step_count();
    ck.optimizer_m.clear();
    ck.optimizer_v.clear();
    for (std::size_t i = 0; i < opt.slot_count(); ++i) {
        ck.optimizer_m.push_back(opt.slot_m(i));
        ck.optimizer_v.push_back(opt.slot_v(i));
    }
}

inline void assign_optimizer(const Checkpoint& ck, optim::Adam& opt) {
    check(ck.has_optimizer, "checkpoint: no optimizer state stored");
    check(ck.optimizer_m.size() == opt.slot_count(),
          "checkpoint: optimizer slot count mismatch");
    opt.set_step_count(ck.optimizer_step);
    for (std::size_t i = 0; i < opt.slot_count(); ++i) {
        check(ck.optimizer_m[i].shape() == opt.slot_m(i).shape(),
              "checkpoint: optimizer slot shape mismatch");
        opt.slot_m(i) = ck.optimizer_m[i];
        opt.slot_v(i) = ck.optimizer_v[i];
    }
}

/// FNV-1a 64-bit digest of a file, recorded in run manifests so a rerun can
/// be compared for bit identity without keeping both checkpoints around.
inline std::uint64_t file_fnv1a(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), "fnv1a: cannot open " + path);
    std::uint64_t h = 14695981039346656037ull;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (n < static_cast<std::streamsize>(sizeof(buf))) break;
    }
    return h;
}

}  // namespace umbra

#endif  // UMBRA_CHECKPOINT_HPP
