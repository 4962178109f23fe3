// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_DIFFUSION_HPP
#define UMBRA_DIFFUSION_HPP

#include <array>
#include <string>
#include <vector>

#include "umbra/nn.hpp"

namespace umbra {

// ── variance schedules ──────────────────────────────────────────────

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta[t-1], t in [1,T]
    std::vector<double> alpha_bar;  // running product of (1 - beta)

    double beta_at(int t) const {
        check(t >= 1 && t <= T, "NoiseSchedule: step out of range");
        return beta[static_cast<std::size_t>(t - 1)];
    }
    double alpha_bar_at(int t) const {
        check(t >= 1 && t <= T, "NoiseSchedule: step out of range");
        return alpha_bar[static_cast<std::size_t>(t - 1)];
    }
};

/// Linear variance schedule from beta_start to beta_end over T steps.
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    check(T >= 1, "make_schedule: T must be at least 1");
    check(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double b =
            T == 1 ? beta_start
                   : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / (T - 1);
        s.beta[static_cast<std::size_t>(t - 1)] = b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<std::size_t>(t - 1)] = prod;
    }
    return s;
}

/// Named presets: "train-1000" and "test-50".
inline NoiseSchedule schedule_preset(const std::string& name) {
    if (name == "train-1000") return make_schedule(1000, 1e-4, 0.02);
    if (name == "test-50") return make_schedule(50, 1e-4, 0.5);
    throw Error("schedule_preset: unknown preset '" + name + "' (train-1000, test-50)");
}

// ── configuration ───────────────────────────────────────────────────

enum class ConditionMode { LsOnly, LsPlusMask, LsPlusCt };
enum class DenoiseRange { Local, Global };

inline ConditionMode parse_condition_mode(const std::string& s) {
    if (s == "ls-only") return ConditionMode::LsOnly;
    if (s == "ls-plus-mask") return ConditionMode::LsPlusMask;
    if (s == "ls-plus-ct") return ConditionMode::LsPlusCt;
    throw Error("parse_condition_mode: unknown mode '" + s + "'");
}

inline DenoiseRange parse_denoise_range(const std::string& s) {
    if (s == "local") return DenoiseRange::Local;
    if (s == "global") return DenoiseRange::Global;
    throw Error("parse_denoise_range: unknown range '" + s + "'");
}

inline const char* condition_mode_name(ConditionMode m) {
    switch (m) {
        case ConditionMode::LsOnly: return "ls-only";
        case ConditionMode::LsPlusMask: return "ls-plus-mask";
        default: return "ls-plus-ct";
    }
}

inline const char* denoise_range_name(DenoiseRange r) {
    return r == DenoiseRange::Local ? "local" : "global";
}

/// Channels fed to the noise net: the 3-channel denoising target stream, the
/// 3-channel lighting condition, and for one mode the mask as well.
inline int condition_channels(ConditionMode m) { return m == ConditionMode::LsPlusMask ? 7 : 6; }

struct LLCConfig {
    ConditionMode condition_mode = ConditionMode::LsPlusCt;
    DenoiseRange denoise_range = DenoiseRange::Local;
    NoiseSchedule schedule_train = make_schedule(1000, 1e-4, 0.02);
    NoiseSchedule schedule_test = make_schedule(50, 1e-4, 0.5);
};

// ── forward process and conditioning ────────────────────────────────

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per-sample step indices.
inline Tensor forward_diffuse_batch(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                                    const NoiseSchedule& s) {
    check(x0.same_shape(eps), "forward_diffuse: x0 and eps shapes differ");
    check(static_cast<int>(t.size()) == x0.dim(0), "forward_diffuse: one t per sample");
    Tensor out(x0.shape());
    const long long per = x0.numel() / x0.dim(0);
    for (int n = 0; n < x0.dim(0); ++n) {
        const double ab = s.alpha_bar_at(t[static_cast<std::size_t>(n)]);
        const double ca = std::sqrt(ab), cb = std::sqrt(1.0 - ab);
        const double* x0p = x0.data() + n * per;
        const double* ep = eps.data() + n * per;
        double* op = out.data() + n * per;
        for (long long i = 0; i < per; ++i) op[i] = ca * x0p[i] + cb * ep[i];
    }
    return out;
}

inline Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    return forward_diffuse_batch(x0, std::vector<int>(static_cast<std::size_t>(x0.dim(0)), t), eps, s);
}

/// C_t = M * x_t + (1 - M) * x0, elementwise, mask broadcast over channels.
inline Tensor build_condition(const Tensor& x_t, const Tensor& x0, const Tensor& mask) {
    check(x_t.same_shape(x0), "build_condition: x_t and x0 shapes differ");
    check(mask.ndim() == 4 && mask.dim(1) == 1 && mask.dim(0) == x_t.dim(0) &&
              mask.dim(2) == x_t.dim(2) && mask.dim(3) == x_t.dim(3),
          "build_condition: mask must be [N,1,H,W]");
    Tensor out(x_t.shape());
    const int N = x_t.dim(0), C = x_t.dim(1);
    const long long HW = static_cast<long long>(x_t.dim(2)) * x_t.dim(3);
    for (int n = 0; n < N; ++n) {
        const double* mp = mask.data() + n * HW;
        for (int c = 0; c < C; ++c) {
            const long long off = (static_cast<long long>(n) * C + c) * HW;
            for (long long i = 0; i < HW; ++i)
                out[off + i] = mp[i] * x_t[off + i] + (1.0 - mp[i]) * x0[off + i];
        }
    }
    return out;
}

// ── noise prediction network ────────────────────────────────────────

/// Sinusoidal embedding of integer steps; sin block then cos block.
inline Tensor sinusoidal_time_embedding(const std::vector<int>& t, int dim) {
    check(dim >= 2 && dim % 2 == 0, "time embedding dim must be even and >= 2");
    const int half = dim / 2;
    Tensor out({static_cast<int>(t.size()), dim});
    for (std::size_t n = 0; n < t.size(); ++n)
        for (int i = 0; i < half; ++i) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(i) / std::max(1, half - 1));
            const double arg = static_cast<double>(t[n]) * freq;
            out[static_cast<long long>(n) * dim + i] = std::sin(arg);
            out[static_cast<long long>(n) * dim + half + i] = std::cos(arg);
        }
    return out;
}

struct NoiseUNetConfig {
    int in_channels = 6;
    std::array<int, 3> widths = {16, 24, 32};
    int time_dim = 32;
};

/// Compact UNet over three resolutions. Each stage is conv + instance norm +
/// a learned per-channel time bias + SiLU; stride-2 convs move down,
/// transposed convs move up, skips concatenate across matching scales.
class NoiseUNet {
public:
    NoiseUNet(const NoiseUNetConfig& cfg, Rng& rng) : cfg_(cfg) {
        check(cfg.time_dim >= 2 && cfg.time_dim % 2 == 0, "NoiseUNet: bad time_dim");
        for (int w : cfg.widths) check(w >= 4, "NoiseUNet: widths must be at least 4");
        const auto [w0, w1, w2] = cfg.widths;
        time1_ = nn::Linear(params_, "time.l1", cfg.time_dim, cfg.time_dim, rng);
        time2_ = nn::Linear(params_, "time.l2", cfg.time_dim, cfg.time_dim, rng);

        in_conv_ = nn::Conv2d(params_, "in", cfg.in_channels, w0, 3, 1, 1, rng);
        blk0_ = Stage(params_, "s0", w0, cfg.time_dim, rng);
        down0_ = nn::Conv2d(params_, "down0", w0, w1, 4, 2, 1, rng);
        blk1_ = Stage(params_, "s1", w1, cfg.time_dim, rng);
        down1_ = nn::Conv2d(params_, "down1", w1, w2, 4, 2, 1, rng);
        mid_ = Stage(params_, "mid", w2, cfg.time_dim, rng);
        up1_ = nn::ConvT2d(params_, "up1", w2, w1, 4, 2, 1, rng);
        fuse1_ = nn::Conv2d(params_, "fuse1", 2 * w1, w1, 3, 1, 1, rng);
        fblk1_ = Stage(params_, "f1", w1, cfg.time_dim, rng, /*own_conv=*/false);
        up0_ = nn::ConvT2d(params_, "up0", w1, w0, 4, 2, 1, rng);
        fuse0_ = nn::Conv2d(params_, "fuse0", 2 * w0, w0, 3, 1, 1, rng);
        fblk0_ = Stage(params_, "f0", w0, cfg.time_dim, rng, /*own_conv=*/false);
        out_conv_ = nn::Conv2d(params_, "out", w0, 3, 3, 1, 1, rng);
    }

    /// x [N,in_channels,H,W] with H and W divisible by 4; one step per sample.
    ad::Var forward(const ad::Var& x, const std::vector<int>& tsteps) const {
        const Tensor& xv = x->value;
        check(xv.ndim() == 4 && xv.dim(1) == cfg_.in_channels,
              "NoiseUNet: input channel count mismatch");
        check(xv.dim(2) % 4 == 0 && xv.dim(3) % 4 == 0,
              "NoiseUNet: spatial size must be divisible by 4");
        check(static_cast<int>(tsteps.size()) == xv.dim(0), "NoiseUNet: one step per sample");

        ad::Var emb = ad::constant(sinusoidal_time_embedding(tsteps, cfg_.time_dim));
        ad::Var h = time2_(ad::silu(time1_(emb)));

        ad::Var s0 = blk0_.apply(in_conv_(x), h);
        ad::Var s1 = blk1_.apply(down0_(s0), h);
        ad::Var m = mid_.apply(down1_(s1), h);
        ad::Var u1 = fblk1_.apply(fuse1_(ad::concat_ch(up1_(m), s1)), h);
        ad::Var u0 = fblk0_.apply(fuse0_(ad::concat_ch(up0_(u1), s0)), h);
        return out_conv_(u0);
    }

    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const NoiseUNetConfig& config() const { return cfg_; }

private:
    struct Stage {
        nn::Conv2d conv;
        nn::InstanceNorm2d norm;
        nn::Linear tproj;
        bool has_conv = true;

        Stage() = default;
        Stage(nn::ParamStore& ps, const std::string& name, int ch, int time_dim, Rng& rng,
              bool own_conv = true)
            : has_conv(own_conv) {
            if (own_conv) conv = nn::Conv2d(ps, name + ".conv", ch, ch, 3, 1, 1, rng);
            norm = nn::InstanceNorm2d(ps, name + ".n", ch);
            tproj = nn::Linear(ps, name + ".t", time_dim, ch, rng);
        }

        ad::Var apply(ad::Var x, const ad::Var& time_h) const {
            if (has_conv) x = conv(x);
            x = norm(x);
            x = ad::add_bias_nc(x, tproj(time_h));
            return ad::silu(x);
        }
    };

    NoiseUNetConfig cfg_;
    nn::ParamStore params_;
    nn::Linear time1_, time2_;
    nn::Conv2d in_conv_, down0_, down1_, fuse1_, fuse0_, out_conv_;
    nn::ConvT2d up1_, up0_;
    Stage blk0_, blk1_, mid_, fblk1_, fblk0_;
};

// ── training objective ──────────────────────────────────────────────

/// Assembles the network input for one denoising step. x_t is the current
/// noisy target, x0 the clean reference used by the blend modes.
inline Tensor noise_net_input(ConditionMode mode, const Tensor& x_t, const Tensor& x0,
                              const Tensor& l_s, const Tensor& mask) {
    auto cat = [](std::initializer_list<const Tensor*> parts) {
        int C = 0;
        const Tensor& first = **parts.begin();
        for (const Tensor* p : parts) C += p->dim(1);
        Tensor out({first.dim(0), C, first.dim(2), first.dim(3)});
        const long long HW = static_cast<long long>(first.dim(2)) * first.dim(3);
        for (int n = 0; n < first.dim(0); ++n) {
            long long coff = 0;
            for (const Tensor* p : parts) {
                const long long cnt = static_cast<long long>(p->dim(1)) * HW;
                std::copy(p->data() + n * cnt, p->data() + (n + 1) * cnt,
                          out.data() + (static_cast<long long>(n) * C) * HW + coff * HW);
                coff += p->dim(1);
            }
        }
        return out;
    };
    switch (mode) {
        case ConditionMode::LsOnly: return cat({&x_t, &l_s});
        case ConditionMode::LsPlusMask: return cat({&x_t, &l_s, &mask});
        case ConditionMode::LsPlusCt: {
            const Tensor c_t = build_condition(x_t, x0, mask);
            return cat({&c_t, &l_s});
        }
    }
    throw Error("noise_net_input: unreachable");
}

struct MaskedMseResult {
    ad::Var loss;
    bool empty_mask = false;
};

/// Elementwise MSE restricted to mask-interior pixels. An empty mask yields
/// a constant zero loss and raises the flag instead of dividing by zero.
inline MaskedMseResult masked_mse(const ad::Var& pred, const Tensor& target, const Tensor& mask) {
    check(pred->value.same_shape(target), "masked_mse: prediction and target shapes differ");
    double area = 0.0;
    for (long long i = 0; i < mask.numel(); ++i) area += mask[i];
    if (area == 0.0) return {ad::constant(Tensor::scalar(0.0)), true};
    const double denom = area * static_cast<double>(pred->value.dim(1));
    ad::Var d = ad::sub(pred, ad::constant(target));
    ad::Var masked = ad::mul_mask(ad::square(d), ad::constant(mask));
    return {ad::mul_scalar(ad::sum_all(masked), 1.0 / denom), false};
}

/// One training step's objective: noise the clean lighting, predict the
/// noise, penalize inside the mask (or everywhere for the global range).
inline MaskedMseResult denoise_loss(const NoiseUNet& net, const LLCConfig& cfg, const Tensor& l_sf,
                                    const Tensor& l_s, const Tensor& mask,
                                    const std::vector<int>& tsteps, const Tensor& eps) {
    const Tensor x_t = forward_diffuse_batch(l_sf, tsteps, eps, cfg.schedule_train);
    const Tensor input = noise_net_input(cfg.condition_mode, x_t, l_sf, l_s, mask);
    ad::Var pred = net.forward(ad::constant(input), tsteps);
    if (cfg.denoise_range == DenoiseRange::Global)
        return {ad::mean_all(ad::square(ad::sub(pred, ad::constant(eps)))), false};
    return masked_mse(pred, eps, mask);
}

// ── sampling ────────────────────────────────────────────────────────

/// Ancestral reverse diffusion over the test schedule with the condition
/// rebuilt from the current iterate each step (x0 := L_s at test time).
/// Local range: the result is composited onto L_s outside the mask and the
/// untouched pixels match L_s bit for bit. Global range: the raw denoised
/// image is returned. Both are clamped to [0,1].
inline Tensor sample_llc(const NoiseUNet& net, const LLCConfig& cfg, const Tensor& l_s,
                         const Tensor& mask, Rng& rng, std::vector<Tensor>* trace = nullptr) {
    check(l_s.ndim() == 4 && l_s.dim(1) == 3, "sample_llc: l_s must be [N,3,H,W]");
    const NoiseSchedule& s = cfg.schedule_test;
    ad::NoGradGuard guard;

    double area = 0.0;
    for (long long i = 0; i < mask.numel(); ++i) area += mask[i];
    if (area == 0.0 && cfg.denoise_range == DenoiseRange::Local) {
        if (trace) trace->push_back(l_s);
        return l_s;
    }

    Tensor x = Tensor::randn(l_s.shape(), rng);
    if (trace) trace->push_back(x);
    const int N = l_s.dim(0);
    for (int t = s.T; t >= 1; --t) {
        const Tensor input = noise_net_input(cfg.condition_mode, x, l_s, l_s, mask);
        const std::vector<int> ts(static_cast<std::size_t>(N), t);
        const Tensor eps_pred = net.forward(ad::constant(input), ts)->value;

        const double beta = s.beta_at(t);
        const double ab = s.alpha_bar_at(t);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
        const double noise_coef = beta / std::sqrt(1.0 - ab);
        Tensor next(x.shape());
        for (long long i = 0; i < x.numel(); ++i)
            next[i] = inv_sqrt_alpha * (x[i] - noise_coef * eps_pred[i]);
        if (t > 1) {
            const double sigma = std::sqrt(beta);
            for (long long i = 0; i < next.numel(); ++i) next[i] += sigma * rng.normal();
        }
        if (!next.all_finite()) {
            double norm = 0.0;
            for (long long i = 0; i < next.numel(); ++i)
                if (std::isfinite(next[i])) norm += next[i] * next[i];
            throw Error("sample_llc: non-finite iterate at step " + std::to_string(t) +
                        " (finite-part norm " + std::to_string(std::sqrt(norm)) + ")");
        }
        x = std::move(next);
        if (trace) trace->push_back(x);
    }

    Tensor out(x.shape());
    if (cfg.denoise_range == DenoiseRange::Local) {
        const int C = l_s.dim(1);
        const long long HW = static_cast<long long>(l_s.dim(2)) * l_s.dim(3);
        for (int n = 0; n < N; ++n) {
            const double* mp = mask.data() + n * HW;
            for (int c = 0; c < C; ++c) {
                const long long off = (static_cast<long long>(n) * C + c) * HW;
                for (long long i = 0; i < HW; ++i) {
                    // Exact passthrough where the mask is 0: the blend would
                    // already reduce to l_s there, clamping is a no-op on
                    // in-range lighting.
                    out[off + i] = mp[i] == 0.0
                                       ? l_s[off + i]
                                       : std::min(1.0, std::max(0.0, mp[i] * x[off + i] +
                                                                         (1.0 - mp[i]) * l_s[off + i]));
                }
            }
        }
    } else {
        for (long long i = 0; i < x.numel(); ++i) out[i] = std::min(1.0, std::max(0.0, x[i]));
    }
    if (trace) trace->push_back(out);
    return out;
}

}  // namespace umbra

#endif  // UMBRA_DIFFUSION_HPP
