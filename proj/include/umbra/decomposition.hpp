// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_DECOMPOSITION_HPP
#define UMBRA_DECOMPOSITION_HPP

#include <array>
#include <vector>

#include "umbra/nn.hpp"

namespace umbra {

/// Weight on the reflectance regularizer inside the total loss.
inline constexpr double kReflectanceWeight = 0.1;
/// Slope inside the edge-aware exponential.
inline constexpr double kEdgeAwareSlope = -20.0;
/// Margin of the soft ordering penalty between reflectance and illumination.
inline constexpr double kOrderingMargin = 1e-3;

struct DecompConfig {
    int base_channels = 16;
    bool skip_connections = true;
    // When nonzero, the expected input edge; checked at construction. Any
    // input accepted at forward time must be divisible by 2^5 regardless.
    int input_size = 0;
};

/// Per-scale encoder output edge lengths for a square input.
inline std::array<int, 5> encoder_feature_sizes(int input) {
    std::array<int, 5> out{};
    for (int i = 0; i < 5; ++i) {
        input /= 2;
        out[static_cast<std::size_t>(i)] = input;
    }
    return out;
}

/// Shared five-layer stride-2 encoder with a reflectance decoder and an
/// illumination decoder. Input is the image with the shadow mask attached as
/// a fourth channel; the shadow-free twin attaches an all-zero channel
/// instead. Both outputs pass through a sigmoid head into [0,1].
class DecompositionNet {
public:
    struct Output {
        ad::Var reflectance;
        ad::Var illumination;
    };

    DecompositionNet(const DecompConfig& cfg, Rng& rng) : cfg_(cfg) {
        check(cfg.base_channels >= 8, "DecompositionNet: base_channels must be at least 8");
        if (cfg.input_size != 0)
            check(cfg.input_size % 32 == 0 && cfg.input_size > 0,
                  "DecompositionNet: input size must be a positive multiple of 32");
        const std::array<int, 5> ch = channels();
        int in_ch = 4;
        for (int i = 0; i < 5; ++i) {
            const std::string name = "enc" + std::to_string(i);
            enc_[static_cast<std::size_t>(i)] = nn::Conv2d(params_, name, in_ch, ch[static_cast<std::size_t>(i)], 4, 2, 1, rng);
            enc_norm_[static_cast<std::size_t>(i)] = nn::InstanceNorm2d(params_, name + ".n", ch[static_cast<std::size_t>(i)]);
            in_ch = ch[static_cast<std::size_t>(i)];
        }
        build_decoder(refl_, "refl", rng);
        build_decoder(illum_, "illum", rng);
    }

    /// image [N,3,H,W], mask [N,1,H,W] with H == W divisible by 32.
    Output forward(const ad::Var& image, const ad::Var& mask) const {
        const Tensor& iv = image->value;
        check(iv.ndim() == 4 && iv.dim(1) == 3, "DecompositionNet: image must be [N,3,H,W]");
        check(mask->value.ndim() == 4 && mask->value.dim(1) == 1 &&
                  mask->value.dim(0) == iv.dim(0) && mask->value.dim(2) == iv.dim(2) &&
                  mask->value.dim(3) == iv.dim(3),
              "DecompositionNet: mask must be [N,1,H,W] matching the image");
        check(iv.dim(2) % 32 == 0 && iv.dim(3) % 32 == 0,
              "DecompositionNet: spatial size must be divisible by 32");
        if (cfg_.input_size != 0)
            check(iv.dim(2) == cfg_.input_size && iv.dim(3) == cfg_.input_size,
                  "DecompositionNet: input size differs from the configured size");

        ad::Var x = ad::concat_ch(image, mask);
        std::vector<ad::Var> feats;
        feats.reserve(5);
        for (int i = 0; i < 5; ++i) {
            x = ad::leaky_relu(enc_norm_[static_cast<std::size_t>(i)](enc_[static_cast<std::size_t>(i)](x)), 0.2);
            feats.push_back(x);
        }
        return {run_decoder(refl_, feats), run_decoder(illum_, feats)};
    }

    /// Shadow-free path: the mask channel is all zeros.
    Output forward_shadow_free(const ad::Var& image) const {
        const Tensor& iv = image->value;
        return forward(image, ad::constant(Tensor::zeros({iv.dim(0), 1, iv.dim(2), iv.dim(3)})));
    }

    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const DecompConfig& config() const { return cfg_; }

private:
    struct Decoder {
        std::array<nn::ConvT2d, 5> up;
        std::array<nn::InstanceNorm2d, 4> norm;
    };

    std::array<int, 5> channels() const {
        const int b = cfg_.base_channels;
        return {b, 2 * b, 4 * b, 8 * b, 8 * b};
    }

    void build_decoder(Decoder& d, const std::string& prefix, Rng& rng) {
        const std::array<int, 5> ch = channels();
        // Walking back up: layer j consumes the scale-(j+1) feature plus the
        // encoder skip (except the deepest layer, which has no skip partner).
        for (int j = 4; j >= 0; --j) {
            const int out_ch = j == 0 ? 3 : ch[static_cast<std::size_t>(j - 1)];
            int in_ch = ch[static_cast<std::size_t>(j)];
            if (j < 4 && cfg_.skip_connections) in_ch *= 2;
            const std::string name = prefix + ".up" + std::to_string(j);
            d.up[static_cast<std::size_t>(j)] = nn::ConvT2d(params_, name, in_ch, out_ch, 4, 2, 1, rng);
            if (j > 0) d.norm[static_cast<std::size_t>(j - 1)] = nn::InstanceNorm2d(params_, name + ".n", out_ch);
        }
    }

    ad::Var run_decoder(const Decoder& d, const std::vector<ad::Var>& feats) const {
        ad::Var x = feats[4];
        for (int j = 4; j >= 1; --j) {
            x = ad::relu(d.norm[static_cast<std::size_t>(j - 1)](d.up[static_cast<std::size_t>(j)](x)));
            if (cfg_.skip_connections) x = ad::concat_ch(x, feats[static_cast<std::size_t>(j - 1)]);
        }
        return ad::sigmoid_v(d.up[0](x));
    }

    DecompConfig cfg_;
    nn::ParamStore params_;
    std::array<nn::Conv2d, 5> enc_;
    std::array<nn::InstanceNorm2d, 5> enc_norm_;
    Decoder refl_, illum_;
};

// ── self-supervised losses ──────────────────────────────────────────
// All reductions are means over every element, so batch composition and
// sample order cannot change a fixed batch's value.

/// Reconstruction fidelity of both branches: each reflectance-illumination
/// product must revert to its input image.
inline ad::Var loss_fidelity(const ad::Var& r_s, const ad::Var& l_s, const ad::Var& i_s,
                             const ad::Var& r_sf, const ad::Var& l_sf, const ad::Var& i_sf) {
    return ad::add(ad::l1_mean(ad::mul(r_s, l_s), i_s), ad::l1_mean(ad::mul(r_sf, l_sf), i_sf));
}

/// Reflectance consistency across the pair plus both cross-reconstructions:
/// swapping illuminations must still produce the other image.
inline ad::Var loss_illumination(const ad::Var& r_s, const ad::Var& r_sf, const ad::Var& l_s,
                                 const ad::Var& l_sf, const ad::Var& i_s, const ad::Var& i_sf) {
    ad::Var consistency = ad::l1_mean(r_s, r_sf);
    ad::Var cross = ad::add(ad::l1_mean(ad::mul(r_s, l_sf), i_sf), ad::l1_mean(ad::mul(r_sf, l_s), i_s));
    return ad::add(consistency, cross);
}

namespace decompdetail {

inline ad::Var edge_aware_term(const ad::Var& l_sf, const ad::Var& r) {
    ad::Var ex = ad::mean_all(ad::mul(ad::abs_v(ad::fwd_diff_x(l_sf)),
                                      ad::exp_v(ad::mul_scalar(ad::abs_v(ad::fwd_diff_x(r)), kEdgeAwareSlope))));
    ad::Var ey = ad::mean_all(ad::mul(ad::abs_v(ad::fwd_diff_y(l_sf)),
                                      ad::exp_v(ad::mul_scalar(ad::abs_v(ad::fwd_diff_y(r)), kEdgeAwareSlope))));
    return ad::add(ex, ey);
}

inline ad::Var ordering_hinge(const ad::Var& r, const ad::Var& l_sf) {
    return ad::mean_all(ad::relu(ad::add_scalar(ad::sub(r, l_sf), kOrderingMargin)));
}

}  // namespace decompdetail

/// Edge-aware illumination smoothness: penalizes illumination gradients
/// except across reflectance edges, where exp of the negatively scaled
/// reflectance gradient gates the penalty off. The shadow branch's own
/// illumination is deliberately not smoothed. A soft hinge keeps each
/// reflectance below the shadow-free illumination.
inline ad::Var loss_reflectance(const ad::Var& r_s, const ad::Var& r_sf, const ad::Var& l_sf) {
    using namespace decompdetail;
    ad::Var smooth = ad::add(edge_aware_term(l_sf, r_s), edge_aware_term(l_sf, r_sf));
    ad::Var order = ad::add(ordering_hinge(r_s, l_sf), ordering_hinge(r_sf, l_sf));
    return ad::add(smooth, order);
}

struct DecompLossParts {
    ad::Var total, fidelity, illumination, reflectance;
};

inline DecompLossParts loss_decomposition_total(const ad::Var& r_s, const ad::Var& l_s,
                                                const ad::Var& i_s, const ad::Var& r_sf,
                                                const ad::Var& l_sf, const ad::Var& i_sf) {
    DecompLossParts parts;
    parts.fidelity = loss_fidelity(r_s, l_s, i_s, r_sf, l_sf, i_sf);
    parts.illumination = loss_illumination(r_s, r_sf, l_s, l_sf, i_s, i_sf);
    parts.reflectance = loss_reflectance(r_s, r_sf, l_sf);
    parts.total = ad::add(ad::add(parts.fidelity, parts.illumination),
                          ad::mul_scalar(parts.reflectance, kReflectanceWeight));
    return parts;
}

}  // namespace umbra

#endif  // UMBRA_DECOMPOSITION_HPP
