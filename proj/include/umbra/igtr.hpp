// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_IGTR_HPP
#define UMBRA_IGTR_HPP

#include <string>

#include "umbra/nn.hpp"

namespace umbra {

// Texture restoration guided by lighting features: reflectance queries attend
// over lighting keys region by region, a learned offset field then lets a
// second pass look into neighboring regions.

enum class IGTRVariant { Full, LocalOnly, NonlocalOnly, SelfAttention, ConcatInput, ConcatFeature };

inline IGTRVariant parse_igtr_variant(const std::string& s) {
    if (s == "full") return IGTRVariant::Full;
    if (s == "igtr-l") return IGTRVariant::LocalOnly;
    if (s == "igtr-g") return IGTRVariant::NonlocalOnly;
    if (s == "sa") return IGTRVariant::SelfAttention;
    if (s == "cat-i") return IGTRVariant::ConcatInput;
    if (s == "cat-f") return IGTRVariant::ConcatFeature;
    throw Error("parse_igtr_variant: unknown variant '" + s +
                "' (full, igtr-l, igtr-g, sa, cat-i, cat-f)");
}

inline const char* igtr_variant_name(IGTRVariant v) {
    switch (v) {
        case IGTRVariant::Full: return "full";
        case IGTRVariant::LocalOnly: return "igtr-l";
        case IGTRVariant::NonlocalOnly: return "igtr-g";
        case IGTRVariant::SelfAttention: return "sa";
        case IGTRVariant::ConcatInput: return "cat-i";
        default: return "cat-f";
    }
}

/// Preferred region edge per encoder scale (1 = finest, 5 = deepest).
inline int default_region_size(int scale_index) {
    check(scale_index >= 1 && scale_index <= 5, "default_region_size: scale index out of range");
    return scale_index == 5 ? 4 : 8;
}

/// Largest edge <= preferred that tiles the given extent evenly.
inline int resolve_region_size(int preferred, int H, int W) {
    check(preferred >= 1 && H >= 1 && W >= 1, "resolve_region_size: bad arguments");
    for (int k = std::min({preferred, H, W}); k >= 2; --k)
        if (H % k == 0 && W % k == 0) return k;
    return 1;
}

/// Single-head region attention. Queries come from one stream, keys and
/// values from the other; 1x1 projections halve the channel count, an output
/// projection restores it so the caller can add a residual.
class CoAttention {
public:
    CoAttention() = default;
    CoAttention(nn::ParamStore& ps, const std::string& name, int channels, Rng& rng)
        : channels_(channels), half_(channels / 2) {
        check(channels >= 2 && channels % 2 == 0, "CoAttention: channel count must be even");
        wq_ = nn::Conv2d(ps, name + ".q", channels, half_, 1, 1, 0, rng);
        wk_ = nn::Conv2d(ps, name + ".k", channels, half_, 1, 1, 0, rng);
        wv_ = nn::Conv2d(ps, name + ".v", channels, half_, 1, 1, 0, rng);
        wo_ = nn::Conv2d(ps, name + ".o", half_, channels, 1, 1, 0, rng);
    }

    ad::Var operator()(const ad::Var& query_src, const ad::Var& kv_src, int region) const {
        const Tensor& x = query_src->value;
        check(x.ndim() == 4 && x.dim(1) == channels_, "CoAttention: query channel mismatch");
        check(kv_src->value.same_shape(x), "CoAttention: query and key/value shapes differ");
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        ad::Var q = ad::im2regions(wq_(query_src), region);
        ad::Var k = ad::im2regions(wk_(kv_src), region);
        ad::Var v = ad::im2regions(wv_(kv_src), region);
        ad::Var att = ad::softmax_lastdim(
            ad::mul_scalar(ad::bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(half_)));
        return wo_(ad::regions2im(ad::bmm(att, v), N, half_, H, W, region));
    }

    int channels() const { return channels_; }

private:
    int channels_ = 0, half_ = 0;
    nn::Conv2d wq_, wk_, wv_, wo_;
};

/// Two-layer head emitting a bounded 2-channel offset field in pixels.
class ShiftHead {
public:
    ShiftHead() = default;
    ShiftHead(nn::ParamStore& ps, const std::string& name, int channels, Rng& rng) {
        const int mid = std::max(2, channels / 2);
        c1_ = nn::Conv2d(ps, name + ".c1", channels, mid, 3, 1, 1, rng);
        c2_ = nn::Conv2d(ps, name + ".c2", mid, 2, 3, 1, 1, rng);
    }

    ad::Var operator()(const ad::Var& x, double radius) const {
        return ad::mul_scalar(ad::tanh_v(c2_(ad::leaky_relu(c1_(x)))), radius);
    }

private:
    nn::Conv2d c1_, c2_;
};

/// One fusion block at a single scale. The full wiring enhances reflectance
/// features with region attention over lighting, resamples the lighting by
/// the learned offsets, and attends once more over the shifted field. The
/// other variants rewire or bypass those stages for ablation runs.
class IGTRBlock {
public:
    IGTRBlock() = default;
    IGTRBlock(nn::ParamStore& ps, const std::string& name, int channels, int preferred_region,
              IGTRVariant variant, Rng& rng)
        : channels_(channels), preferred_(preferred_region), variant_(variant) {
        check(preferred_region >= 1, "IGTRBlock: region size must be positive");
        switch (variant) {
            case IGTRVariant::Full:
                local_ = CoAttention(ps, name + ".loc", channels, rng);
                nonlocal_ = CoAttention(ps, name + ".nl", channels, rng);
                shift_ = ShiftHead(ps, name + ".shift", channels, rng);
                break;
            case IGTRVariant::LocalOnly:
                local_ = CoAttention(ps, name + ".loc", channels, rng);
                break;
            case IGTRVariant::NonlocalOnly:
                nonlocal_ = CoAttention(ps, name + ".nl", channels, rng);
                shift_ = ShiftHead(ps, name + ".shift", channels, rng);
                break;
            case IGTRVariant::SelfAttention:
                local_ = CoAttention(ps, name + ".loc", channels, rng);
                nonlocal_ = CoAttention(ps, name + ".nl", channels, rng);
                shift_ = ShiftHead(ps, name + ".shift", channels, rng);
                break;
            case IGTRVariant::ConcatInput:
                cat1_ = nn::Conv2d(ps, name + ".cat1", 2 * channels, channels, 1, 1, 0, rng);
                break;
            case IGTRVariant::ConcatFeature:
                cat1_ = nn::Conv2d(ps, name + ".cat1", 2 * channels, channels, 1, 1, 0, rng);
                cat2_ = nn::Conv2d(ps, name + ".cat2", 2 * channels, channels, 1, 1, 0, rng);
                shift_ = ShiftHead(ps, name + ".shift", channels, rng);
                break;
        }
    }

    ad::Var operator()(const ad::Var& f_r, const ad::Var& f_l) const {
        const Tensor& x = f_r->value;
        check(x.ndim() == 4 && x.dim(1) == channels_, "IGTRBlock: reflectance channel mismatch");
        check(f_l->value.same_shape(x), "IGTRBlock: stream shapes differ");
        const int K = resolve_region_size(preferred_, x.dim(2), x.dim(3));
        const double radius = static_cast<double>(K) / 2.0;

        switch (variant_) {
            case IGTRVariant::Full: {
                ad::Var f_le = ad::add(local_(f_r, f_l, K), f_r);
                ad::Var shifted = ad::bilinear_sample(f_l, shift_(f_le, radius));
                return ad::add(nonlocal_(f_le, shifted, K), f_le);
            }
            case IGTRVariant::LocalOnly:
                return ad::add(local_(f_r, f_l, K), f_r);
            case IGTRVariant::NonlocalOnly: {
                ad::Var shifted = ad::bilinear_sample(f_l, shift_(f_r, radius));
                return ad::add(nonlocal_(f_r, shifted, K), f_r);
            }
            case IGTRVariant::SelfAttention: {
                // Lighting features are ignored: keys and values follow the
                // query stream through both stages.
                ad::Var f_le = ad::add(local_(f_r, f_r, K), f_r);
                ad::Var shifted = ad::bilinear_sample(f_le, shift_(f_le, radius));
                return ad::add(nonlocal_(f_le, shifted, K), f_le);
            }
            case IGTRVariant::ConcatInput:
                return cat1_(ad::concat_ch(f_r, f_l));
            case IGTRVariant::ConcatFeature: {
                ad::Var f_le = ad::add(cat1_(ad::concat_ch(f_r, f_l)), f_r);
                ad::Var shifted = ad::bilinear_sample(f_l, shift_(f_le, radius));
                return ad::add(cat2_(ad::concat_ch(f_le, shifted)), f_le);
            }
        }
        throw Error("IGTRBlock: unreachable variant");
    }

    IGTRVariant variant() const { return variant_; }
    int channels() const { return channels_; }
    int preferred_region() const { return preferred_; }

private:
    int channels_ = 0, preferred_ = 8;
    IGTRVariant variant_ = IGTRVariant::Full;
    CoAttention local_, nonlocal_;
    ShiftHead shift_;
    nn::Conv2d cat1_, cat2_;
};

}  // namespace umbra

#endif  // UMBRA_IGTR_HPP
