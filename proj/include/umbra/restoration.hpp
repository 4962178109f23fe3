// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_RESTORATION_HPP
#define UMBRA_RESTORATION_HPP

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "umbra/igtr.hpp"

namespace umbra {

// Final correction stage: reflectance and corrected-lighting features are
// fused scale by scale and decoded back to an image, with skip connections
// carrying features of the raw shadow image.

inline constexpr double kPerceptualWeight = 0.1;

enum class FusionMode { Igtr, CatI, CatF, Multiply };

inline FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "igtr") return FusionMode::Igtr;
    if (s == "cat-i") return FusionMode::CatI;
    if (s == "cat-f") return FusionMode::CatF;
    if (s == "multiply") return FusionMode::Multiply;
    throw Error("parse_fusion_mode: unknown fusion '" + s + "'");
}

inline const char* fusion_mode_name(FusionMode f) {
    switch (f) {
        case FusionMode::Igtr: return "igtr";
        case FusionMode::CatI: return "cat-i";
        case FusionMode::CatF: return "cat-f";
        default: return "multiply";
    }
}

struct BilateralNetConfig {
    int base_channels = 16;
    int input_size = 0;  // 0 accepts any size divisible by 32
    FusionMode fusion = FusionMode::Igtr;
    IGTRVariant igtr_variant = IGTRVariant::Full;  // active when fusion == Igtr
    std::array<int, 5> region_sizes = {8, 8, 8, 8, 4};
};

/// Maps an ablation-table column name onto a network configuration. The
/// attention names select the matching block wiring, the concat names swap
/// the fusion for plain projections, and "multiply" is the parameter-free
/// product baseline.
inline BilateralNetConfig variant_config(const std::string& name, int base_channels = 16) {
    BilateralNetConfig cfg;
    cfg.base_channels = base_channels;
    if (name == "multiply") {
        cfg.fusion = FusionMode::Multiply;
        return cfg;
    }
    if (name == "cat-i") {
        cfg.fusion = FusionMode::CatI;
        return cfg;
    }
    if (name == "cat-f") {
        cfg.fusion = FusionMode::CatF;
        return cfg;
    }
    cfg.fusion = FusionMode::Igtr;
    cfg.igtr_variant = parse_igtr_variant(name);
    check(cfg.igtr_variant == IGTRVariant::Full || cfg.igtr_variant == IGTRVariant::LocalOnly ||
              cfg.igtr_variant == IGTRVariant::NonlocalOnly ||
              cfg.igtr_variant == IGTRVariant::SelfAttention,
          "variant_config: concat variants are fusion modes here");
    return cfg;
}

// ── perceptual feature extractors ───────────────────────────────────

/// Frozen feature pyramid interface for the perceptual loss term.
class PerceptualExtractor {
public:
    virtual ~PerceptualExtractor() = default;
    virtual std::vector<ad::Var> features(const ad::Var& img) const = 0;
};

/// Stub returning no activations; reduces the loss to its pixel term.
class ZeroPerceptual final : public PerceptualExtractor {
public:
    std::vector<ad::Var> features(const ad::Var&) const override { return {}; }
};

/// Three frozen seeded conv stages with taps after each nonlinearity.
/// Random projections preserve enough geometry for a feature-space penalty
/// without a pretrained classifier; gradients reach the image, never the
/// frozen weights.
class RandomPyramidPerceptual final : public PerceptualExtractor {
public:
    explicit RandomPyramidPerceptual(unsigned long long seed = 977) {
        Rng rng(seed);
        const int widths[4] = {3, 8, 16, 32};
        for (int i = 0; i < 3; ++i) {
            const int fan = widths[i] * 9;
            w_[i] = nn::uniform_init(rng, {widths[i + 1], widths[i], 3, 3}, fan);
            b_[i] = Tensor::zeros({widths[i + 1]});
        }
    }

    std::vector<ad::Var> features(const ad::Var& img) const override {
        check(img->value.ndim() == 4 && img->value.dim(1) == 3,
              "RandomPyramidPerceptual: expected [N,3,H,W]");
        std::vector<ad::Var> taps;
        ad::Var x = img;
        for (int i = 0; i < 3; ++i) {
            x = ad::relu(ad::conv2d(x, ad::constant(w_[i]), ad::constant(b_[i]), 2, 1));
            taps.push_back(x);
        }
        return taps;
    }

private:
    Tensor w_[3], b_[3];
};

// ── the network ─────────────────────────────────────────────────────

class BilateralNet {
public:
    BilateralNet() = default;
    explicit BilateralNet(const BilateralNetConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.fusion == FusionMode::Multiply) return;  // zero-parameter baseline
        check(cfg.base_channels >= 8, "BilateralNet: base_channels must be at least 8");
        check(cfg.input_size == 0 || (cfg.input_size > 0 && cfg.input_size % 32 == 0),
              "BilateralNet: input_size must be a positive multiple of 32");
        const int b = cfg.base_channels;
        const int c = std::max(4, b / 2);
        ch_ = {b, 2 * b, 4 * b, 8 * b, 8 * b};
        // The image stream only feeds the four skip levels, so it stops one
        // scale short of the bottleneck.
        img_ch_ = {c, 2 * c, 4 * c, 8 * c, 0};

        auto build_encoder = [&](auto& conv, auto& norm, const std::string& prefix, int in_ch,
                                 const std::array<int, 5>& widths, int count) {
            int cin = in_ch;
            for (int i = 0; i < count; ++i) {
                const std::string name = prefix + std::to_string(i);
                conv[static_cast<std::size_t>(i)] =
                    nn::Conv2d(params_, name, cin, widths[static_cast<std::size_t>(i)], 4, 2, 1, rng);
                norm[static_cast<std::size_t>(i)] =
                    nn::InstanceNorm2d(params_, name + ".n", widths[static_cast<std::size_t>(i)]);
                cin = widths[static_cast<std::size_t>(i)];
            }
        };
        build_encoder(enc_r_, enc_r_n_, "encR", 3, ch_, 5);
        build_encoder(enc_l_, enc_l_n_, "encL", 3, ch_, 5);
        build_encoder(enc_i_, enc_i_n_, "encI", 4, img_ch_, 4);

        const IGTRVariant fv = cfg.fusion == FusionMode::Igtr ? cfg.igtr_variant
                               : cfg.fusion == FusionMode::CatI ? IGTRVariant::ConcatInput
                                                                : IGTRVariant::ConcatFeature;
        for (int i = 0; i < 5; ++i)
            fuse_[static_cast<std::size_t>(i)] =
                IGTRBlock(params_, "fuse" + std::to_string(i), ch_[static_cast<std::size_t>(i)],
                          cfg.region_sizes[static_cast<std::size_t>(i)], fv, rng);

        // Decoder mirrors the encoders; each up step is followed by a concat
        // of the fused features and the shadow-image features at that scale.
        int cin = ch_[4];
        for (int j = 4; j >= 0; --j) {
            const std::string name = "dec.up" + std::to_string(j);
            const int cout = j == 0 ? 3 : ch_[static_cast<std::size_t>(j - 1)];
            dec_[static_cast<std::size_t>(j)] = nn::ConvT2d(params_, name, cin, cout, 4, 2, 1, rng);
            if (j > 0) {
                dec_n_[static_cast<std::size_t>(j)] = nn::InstanceNorm2d(params_, name + ".n", cout);
                cin = cout + ch_[static_cast<std::size_t>(j - 1)] + img_ch_[static_cast<std::size_t>(j - 1)];
            }
        }
    }

    /// r_s, l_hat, i_s are [N,3,H,W]; mask is [N,1,H,W]; H and W must be
    /// divisible by 32. Returns the restored image in [0,1].
    ad::Var forward(const ad::Var& r_s, const ad::Var& l_hat, const ad::Var& i_s,
                    const ad::Var& mask) const {
        const Tensor& rv = r_s->value;
        check(rv.ndim() == 4 && rv.dim(1) == 3, "BilateralNet: r_s must be [N,3,H,W]");
        check(l_hat->value.same_shape(rv) && i_s->value.same_shape(rv),
              "BilateralNet: stream shapes differ");
        check(mask->value.ndim() == 4 && mask->value.dim(1) == 1 &&
                  mask->value.dim(0) == rv.dim(0) && mask->value.dim(2) == rv.dim(2) &&
                  mask->value.dim(3) == rv.dim(3),
              "BilateralNet: mask must be [N,1,H,W]");
        if (cfg_.fusion == FusionMode::Multiply)
            return ad::clamp_v(ad::mul(r_s, l_hat), 0.0, 1.0);
        check(rv.dim(2) % 32 == 0 && rv.dim(3) % 32 == 0,
              "BilateralNet: spatial size must be divisible by 32");
        check(cfg_.input_size == 0 ||
                  (rv.dim(2) == cfg_.input_size && rv.dim(3) == cfg_.input_size),
              "BilateralNet: input does not match the configured size");

        auto run_encoder = [](const auto& conv, const auto& norm, ad::Var x, int count) {
            std::array<ad::Var, 5> feats;
            for (int i = 0; i < count; ++i) {
                x = ad::leaky_relu(norm[static_cast<std::size_t>(i)](
                    conv[static_cast<std::size_t>(i)](x)));
                feats[static_cast<std::size_t>(i)] = x;
            }
            return feats;
        };
        const auto fr = run_encoder(enc_r_, enc_r_n_, r_s, 5);
        const auto fl = run_encoder(enc_l_, enc_l_n_, l_hat, 5);
        const auto fi = run_encoder(enc_i_, enc_i_n_, ad::concat_ch(i_s, mask), 4);

        std::array<ad::Var, 5> fused;
        for (int i = 0; i < 5; ++i)
            fused[static_cast<std::size_t>(i)] = fuse_[static_cast<std::size_t>(i)](
                fr[static_cast<std::size_t>(i)], fl[static_cast<std::size_t>(i)]);

        ad::Var x = fused[4];
        for (int j = 4; j >= 1; --j) {
            x = ad::relu(dec_n_[static_cast<std::size_t>(j)](dec_[static_cast<std::size_t>(j)](x)));
            x = ad::concat_ch({x, fused[static_cast<std::size_t>(j - 1)],
                               fi[static_cast<std::size_t>(j - 1)]});
        }
        return ad::sigmoid_v(dec_[0](x));
    }

    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const BilateralNetConfig& config() const { return cfg_; }

private:
    BilateralNetConfig cfg_;
    nn::ParamStore params_;
    std::array<int, 5> ch_{}, img_ch_{};
    std::array<nn::Conv2d, 5> enc_r_, enc_l_, enc_i_;
    std::array<nn::InstanceNorm2d, 5> enc_r_n_, enc_l_n_, enc_i_n_;
    std::array<IGTRBlock, 5> fuse_;
    std::array<nn::ConvT2d, 5> dec_;
    std::array<nn::InstanceNorm2d, 5> dec_n_;
};

/// Eval-mode inference; no graph survives the call.
inline Tensor restore(const BilateralNet& net, const Tensor& r_s, const Tensor& l_hat,
                      const Tensor& i_s, const Tensor& mask) {
    ad::NoGradGuard guard;
    return net.forward(ad::constant(r_s), ad::constant(l_hat), ad::constant(i_s),
                       ad::constant(mask))
        ->value;
}

// ── objective ───────────────────────────────────────────────────────

struct RestoreLossParts {
    ad::Var total, pixel, perceptual;
};

/// Pixel L1 plus 0.1 times the summed feature-space L1 over the extractor's
/// activation taps.
inline RestoreLossParts loss_restoration(const ad::Var& pred, const Tensor& target,
                                         const PerceptualExtractor& extractor) {
    check(pred->value.same_shape(target), "loss_restoration: shape mismatch");
    ad::Var tgt = ad::constant(target);
    ad::Var pixel = ad::l1_mean(pred, tgt);
    ad::Var per = ad::constant(Tensor::scalar(0.0));
    const auto fp = extractor.features(pred);
    const auto ft = extractor.features(tgt);
    check(fp.size() == ft.size(), "loss_restoration: extractor tap count mismatch");
    for (std::size_t l = 0; l < fp.size(); ++l) per = ad::add(per, ad::l1_mean(fp[l], ft[l]));
    ad::Var total = ad::add(pixel, ad::mul_scalar(per, kPerceptualWeight));
    return {total, pixel, per};
}

}  // namespace umbra

#endif  // UMBRA_RESTORATION_HPP
