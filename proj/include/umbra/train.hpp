// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_TRAIN_HPP
#define UMBRA_TRAIN_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "umbra/autodiff.hpp"
#include "umbra/checkpoint.hpp"
#include "umbra/common.hpp"
#include "umbra/config.hpp"
#include "umbra/decomposition.hpp"
#include "umbra/diffusion.hpp"
#include "umbra/image.hpp"
#include "umbra/metrics.hpp"
#include "umbra/optim.hpp"
#include "umbra/restoration.hpp"
#include "umbra/synth.hpp"
#include "umbra/tensor.hpp"

namespace umbra {

// ── seed streams ────────────────────────────────────────────────────
//
// Every random decision derives from the master seed through a fixed
// stream id, and per-step randomness derives again from the step index.
// A resumed run therefore replays the exact draws of an uninterrupted
// one without serializing generator state.

namespace seeds {
constexpr std::uint64_t kWeights = 0;
constexpr std::uint64_t kShuffle = 1;
constexpr std::uint64_t kNoise = 2;
constexpr std::uint64_t kTimestep = 3;
constexpr std::uint64_t kSampler = 4;  // per-sample offset added on top
constexpr std::uint64_t kAugment = 5;
}  // namespace seeds

// ── dataset handling ────────────────────────────────────────────────

/// One sample as NCHW tensors with N == 1, already at training size.
struct TensorSample {
    Tensor shadow;       // [1,3,H,W]
    Tensor shadow_free;  // [1,3,H,W]
    Tensor mask;         // [1,1,H,W]
    std::string id;
};

inline ShadowSample resize_sample(const ShadowSample& s, int size) {
    if (s.shadow.width == size && s.shadow.height == size) return s;
    ShadowSample r;
    r.id = s.id;
    r.shadow = resize_bilinear(s.shadow, size, size);
    r.shadow_free = resize_bilinear(s.shadow_free, size, size);
    r.mask = resize_bilinear(s.mask, size, size);
    threshold_mask(r.mask);
    return r;
}

inline TensorSample to_tensor_sample(const ShadowSample& s, int size) {
    const ShadowSample r = resize_sample(s, size);
    return {image_to_tensor(r.shadow), image_to_tensor(r.shadow_free), image_to_tensor(r.mask),
            r.id};
}

inline std::vector<ShadowSample> load_train_set(const std::string& root) {
    std::vector<ShadowSample> out;
    for (const auto& stem : list_dataset(root)) out.push_back(load_sample(root, stem));
    check(!out.empty(), "load_train_set: no complete samples under " + root);
    return out;
}

/// Deterministic epoch shuffler. The index stream is the concatenation of
/// one Fisher-Yates permutation per epoch, each seeded from (seed, epoch),
/// so the batch for a given step is a pure function of the step index.
class Batcher {
public:
    Batcher(std::uint64_t seed, int n, int batch) : seed_(seed), n_(n), batch_(batch) {
        check(n > 0, "Batcher: empty dataset");
        check(batch > 0, "Batcher: bad batch size");
    }

    std::vector<int> batch_at(long long step) const {
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(batch_));
        for (int j = 0; j < batch_; ++j) {
            const long long pos = step * batch_ + j;
            const long long epoch = pos / n_;
            const int offset = static_cast<int>(pos % n_);
            if (epoch != cached_epoch_) {
                cached_perm_ = permutation(epoch);
                cached_epoch_ = epoch;
            }
            out.push_back(cached_perm_[static_cast<std::size_t>(offset)]);
        }
        return out;
    }

private:
    std::vector<int> permutation(long long epoch) const {
        std::vector<int> p(static_cast<std::size_t>(n_));
        for (int i = 0; i < n_; ++i) p[static_cast<std::size_t>(i)] = i;
        Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(epoch)));
        for (int i = n_ - 1; i > 0; --i) {
            const auto j = static_cast<std::size_t>(
                rng.uniform_index(static_cast<std::uint64_t>(i) + 1));
            std::swap(p[static_cast<std::size_t>(i)], p[j]);
        }
        return p;
    }

    std::uint64_t seed_;
    int n_;
    int batch_;
    mutable long long cached_epoch_ = -1;
    mutable std::vector<int> cached_perm_;
};

/// Materializes one training batch. With augmentation off the tensors come
/// from a fixed cache; with it on, each draw crops and flips afresh from
/// the raw samples using per-step seeded randomness.
class BatchSource {
public:
    BatchSource(const std::vector<ShadowSample>& raw, const TrainConfig& cfg)
        : raw_(raw), cfg_(cfg), batcher_(derive_seed(cfg.seed, seeds::kShuffle),
                                         static_cast<int>(raw.size()), cfg.batch_size) {
        if (!cfg_.augment)
            for (const auto& s : raw_) fixed_.push_back(to_tensor_sample(s, cfg_.image_size));
    }

    int size() const { return static_cast<int>(raw_.size()); }
    bool augmented() const { return cfg_.augment; }
    const std::vector<TensorSample>& fixed() const {
        check(!cfg_.augment, "BatchSource: no fixed cache when augmenting");
        return fixed_;
    }

    std::vector<int> indices_at(long long step) const { return batcher_.batch_at(step); }

    std::vector<TensorSample> samples_at(long long step) const {
        const auto idx = indices_at(step);
        std::vector<TensorSample> out;
        out.reserve(idx.size());
        if (!cfg_.augment) {
            for (int i : idx) out.push_back(fixed_[static_cast<std::size_t>(i)]);
            return out;
        }
        Rng arng(derive_seed(derive_seed(cfg_.seed, seeds::kAugment),
                             static_cast<std::uint64_t>(step)));
        AugmentParams ap;
        ap.out_size = cfg_.image_size;
        for (int i : idx) {
            const ShadowSample a = augment(raw_[static_cast<std::size_t>(i)], arng, ap);
            out.push_back(to_tensor_sample(a, cfg_.image_size));
        }
        return out;
    }

private:
    const std::vector<ShadowSample>& raw_;
    TrainConfig cfg_;
    Batcher batcher_;
    std::vector<TensorSample> fixed_;
};

inline Tensor stack_field(const std::vector<TensorSample>& batch, Tensor TensorSample::*field) {
    std::vector<Tensor> parts;
    parts.reserve(batch.size());
    for (const auto& s : batch) parts.push_back(s.*field);
    return stack_batch(parts);
}

// ── network configuration from the flat config ──────────────────────

inline DecompConfig decomp_config_from(const TrainConfig& cfg) {
    DecompConfig d;
    d.base_channels = cfg.base_channels;
    return d;
}

inline LLCConfig llc_config_from(const TrainConfig& cfg) {
    LLCConfig l;
    l.condition_mode = parse_condition_mode(cfg.condition_mode);
    l.denoise_range = parse_denoise_range(cfg.denoise_range);
    return l;
}

inline NoiseUNetConfig noise_config_from(const TrainConfig& cfg) {
    NoiseUNetConfig n;
    n.in_channels = condition_channels(parse_condition_mode(cfg.condition_mode));
    n.widths = {cfg.base_channels, cfg.base_channels * 3 / 2, cfg.base_channels * 2};
    n.time_dim = 2 * cfg.base_channels;
    return n;
}

inline BilateralNetConfig bilateral_config_from(const TrainConfig& cfg) {
    return variant_config(cfg.variant, cfg.base_channels);
}

// ── run artifacts ───────────────────────────────────────────────────

struct StageResult {
    std::vector<double> losses;
    std::string checkpoint_path;
};

inline void write_losses(const std::string& path, const std::vector<double>& losses,
                         long long first_step) {
    std::ofstream f(path);
    check(f.good(), "write_losses: cannot open " + path);
    f << "step\tloss\n";
    f.precision(17);
    for (std::size_t i = 0; i < losses.size(); ++i)
        f << (first_step + static_cast<long long>(i)) << "\t" << losses[i] << "\n";
}

/// Plain-text record of what a stage ran with and what it produced, with
/// content hashes so two runs can be compared for bit identity from the
/// manifests alone.
inline void write_manifest(const std::string& path, const std::string& stage,
                           const TrainConfig& cfg,
                           const std::vector<std::pair<std::string, std::string>>& artifacts,
                           const std::vector<double>& losses) {
    std::ofstream f(path);
    check(f.good(), "write_manifest: cannot open " + path);
    f << "stage = " << stage << "\n";
    for (const auto& [k, v] : cfg.to_map()) f << k << " = " << v << "\n";
    f << "steps_recorded = " << losses.size() << "\n";
    if (!losses.empty()) {
        f.precision(17);
        f << "loss_first = " << losses.front() << "\n";
        f << "loss_last = " << losses.back() << "\n";
    }
    for (const auto& [name, file] : artifacts) {
        std::ostringstream hex;
        hex << std::hex << std::setw(16) << std::setfill('0') << file_fnv1a(file);
        f << "artifact " << name << " = " << file << " fnv1a " << hex.str() << "\n";
    }
}

inline void abort_non_finite(const std::string& stage, long long step, const Checkpoint& ck,
                             const std::string& out_dir) {
    const std::string path =
        (std::filesystem::path(out_dir) / (stage + "-lastgood.ckpt")).string();
    save_checkpoint(path, ck);
    throw Error(stage + ": non-finite loss at step " + std::to_string(step) +
                ", last good parameters saved to " + path);
}

// ── stage one: shadow-aware decomposition ───────────────────────────

/// Trains the paired decomposition networks jointly. The "s" network sees
/// the shadow image plus mask, its twin sees the shadow-free image with a
/// zero mask; both are saved into one checkpoint under distinct prefixes.
inline StageResult train_decomposition(const TrainConfig& cfg,
                                       const std::vector<ShadowSample>& data,
                                       const std::string& out_dir,
                                       const std::string& resume = "",
                                       long long stop_after = 0) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    BatchSource source(data, cfg);

    Rng wrng(derive_seed(cfg.seed, seeds::kWeights));
    const DecompConfig dcfg = decomp_config_from(cfg);
    DecompositionNet net_s(dcfg, wrng);
    DecompositionNet net_sf(dcfg, wrng);

    std::vector<ad::Var> params = net_s.params().vars();
    for (const auto& v : net_sf.params().vars()) params.push_back(v);
    optim::Adam opt(params, cfg.adam_beta1, cfg.adam_beta2);

    if (!resume.empty()) {
        const Checkpoint ck = load_checkpoint(resume);
        assign_params(ck, net_s.params(), "s/");
        assign_params(ck, net_sf.params(), "sf/");
        assign_optimizer(ck, opt);
    }

    auto snapshot = [&]() {
        Checkpoint ck;
        ck.config = cfg.to_map();
        ck.config["stage"] = "decomp";
        ck.config["steps_done"] = std::to_string(opt.step_count());
        collect_params(ck, net_s.params(), "s/");
        collect_params(ck, net_sf.params(), "sf/");
        collect_optimizer(ck, opt);
        return ck;
    };

    StageResult result;
    const long long start = opt.step_count();
    // stop_after caps the step count without touching the learning-rate
    // schedule, which always spans the configured full length.
    const long long stop = stop_after > 0 ? std::min<long long>(cfg.iters_decomp, stop_after)
                                          : cfg.iters_decomp;
    for (long long step = start; step < stop; ++step) {
        const auto batch = source.samples_at(step);
        ad::Var image = ad::constant(stack_field(batch, &TensorSample::shadow));
        ad::Var freev = ad::constant(stack_field(batch, &TensorSample::shadow_free));
        ad::Var maskv = ad::constant(stack_field(batch, &TensorSample::mask));

        const auto out_s = net_s.forward(image, maskv);
        const auto out_sf = net_sf.forward_shadow_free(freev);
        const auto parts = loss_decomposition_total(out_s.reflectance, out_s.illumination, image,
                                                    out_sf.reflectance, out_sf.illumination,
                                                    freev);
        const double lv = parts.total->value[0];
        if (!std::isfinite(lv)) abort_non_finite("train-decomp", step, snapshot(), out_dir);
        result.losses.push_back(lv);

        ad::backward(parts.total);
        opt.step(optim::lr_at(step, cfg.iters_decomp, cfg.learning_rate, cfg.warmup_frac));
        ad::zero_grad(params);
    }

    result.checkpoint_path = (std::filesystem::path(out_dir) / "decomp.ckpt").string();
    save_checkpoint(result.checkpoint_path, snapshot());
    const std::string losses_path =
        (std::filesystem::path(out_dir) / "decomp_losses.tsv").string();
    write_losses(losses_path, result.losses, start);
    write_manifest((std::filesystem::path(out_dir) / "decomp_manifest.txt").string(), "decomp",
                   cfg,
                   {{"checkpoint", result.checkpoint_path}, {"losses", losses_path}},
                   result.losses);
    return result;
}

// ── frozen-network helpers ──────────────────────────────────────────

inline int checkpoint_int(const Checkpoint& ck, const std::string& key) {
    auto it = ck.config.find(key);
    check(it != ck.config.end(), "checkpoint: config echo lacks key '" + key + "'");
    return static_cast<int>(configdetail::parse_int(key, it->second));
}

inline std::string checkpoint_str(const Checkpoint& ck, const std::string& key) {
    auto it = ck.config.find(key);
    check(it != ck.config.end(), "checkpoint: config echo lacks key '" + key + "'");
    return it->second;
}

/// Rebuilds the decomposition pair from a stage-one checkpoint. The
/// architecture comes from the checkpoint's own config echo, so a caller's
/// flags cannot silently mismatch the stored weights.
struct DecompPair {
    DecompositionNet s;
    DecompositionNet sf;
};

inline DecompPair load_decomposition(const std::string& ckpt_path) {
    const Checkpoint ck = load_checkpoint(ckpt_path);
    DecompConfig dcfg;
    dcfg.base_channels = checkpoint_int(ck, "base_channels");
    Rng dummy(0);
    DecompPair pair{DecompositionNet(dcfg, dummy), DecompositionNet(dcfg, dummy)};
    assign_params(ck, pair.s.params(), "s/");
    assign_params(ck, pair.sf.params(), "sf/");
    return pair;
}

struct NoiseModel {
    NoiseUNet net;
    LLCConfig llc;
};

inline NoiseModel load_noise_model(const std::string& ckpt_path) {
    const Checkpoint ck = load_checkpoint(ckpt_path);
    TrainConfig echo;
    echo.base_channels = checkpoint_int(ck, "base_channels");
    echo.condition_mode = checkpoint_str(ck, "condition_mode");
    echo.denoise_range = checkpoint_str(ck, "denoise_range");
    Rng dummy(0);
    NoiseModel m{NoiseUNet(noise_config_from(echo), dummy), llc_config_from(echo)};
    assign_params(ck, m.net.params(), "noise/");
    return m;
}

inline BilateralNet load_bilateral(const std::string& ckpt_path) {
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const BilateralNetConfig bcfg = variant_config(checkpoint_str(ck, "variant"),
                                                   checkpoint_int(ck, "base_channels"));
    Rng dummy(0);
    BilateralNet net(bcfg, dummy);
    assign_params(ck, net.params(), "bilateral/");
    return net;
}

/// Shadow and shadow-free illumination for one sample, gradient-free.
struct IlluminationPair {
    Tensor r_s;   // reflectance of the shadow image
    Tensor l_s;   // illumination of the shadow image
    Tensor l_sf;  // illumination of the shadow-free image
};

inline IlluminationPair decompose_sample(const DecompPair& pair, const TensorSample& ts) {
    ad::NoGradGuard guard;
    const auto out_s = pair.s.forward(ad::constant(ts.shadow), ad::constant(ts.mask));
    const auto out_sf = pair.sf.forward_shadow_free(ad::constant(ts.shadow_free));
    return {out_s.reflectance->value, out_s.illumination->value, out_sf.illumination->value};
}

// ── stage two: local lighting correction ────────────────────────────

inline StageResult train_diffusion(const TrainConfig& cfg, const std::vector<ShadowSample>& data,
                                   const std::string& out_dir, const std::string& decomp_ckpt,
                                   const std::string& resume = "", long long stop_after = 0) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    BatchSource source(data, cfg);
    const DecompPair pair = load_decomposition(decomp_ckpt);
    const LLCConfig llc = llc_config_from(cfg);

    Rng wrng(derive_seed(cfg.seed, seeds::kWeights));
    NoiseUNet net(noise_config_from(cfg), wrng);
    std::vector<ad::Var> params = net.params().vars();
    optim::Adam opt(params, cfg.adam_beta1, cfg.adam_beta2);

    if (!resume.empty()) {
        const Checkpoint ck = load_checkpoint(resume);
        assign_params(ck, net.params(), "noise/");
        assign_optimizer(ck, opt);
    }

    // Fixed data lets the frozen stage-one outputs be computed once.
    std::vector<IlluminationPair> cache;
    if (!source.augmented())
        for (const auto& ts : source.fixed()) cache.push_back(decompose_sample(pair, ts));

    auto snapshot = [&]() {
        Checkpoint ck;
        ck.config = cfg.to_map();
        ck.config["stage"] = "diffusion";
        ck.config["steps_done"] = std::to_string(opt.step_count());
        collect_params(ck, net.params(), "noise/");
        collect_optimizer(ck, opt);
        return ck;
    };

    const std::uint64_t noise_seed = derive_seed(cfg.seed, seeds::kNoise);
    const std::uint64_t t_seed = derive_seed(cfg.seed, seeds::kTimestep);
    const int t_max = llc.schedule_train.T;

    StageResult result;
    const long long start = opt.step_count();
    const long long stop = stop_after > 0 ? std::min<long long>(cfg.iters_diffusion, stop_after)
                                          : cfg.iters_diffusion;
    for (long long step = start; step < stop; ++step) {
        const auto idx = source.indices_at(step);
        const auto batch = source.samples_at(step);

        std::vector<Tensor> ls, lsf;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const IlluminationPair ip = source.augmented()
                                            ? decompose_sample(pair, batch[b])
                                            : cache[static_cast<std::size_t>(idx[b])];
            ls.push_back(ip.l_s);
            lsf.push_back(ip.l_sf);
        }
        const Tensor l_s = stack_batch(ls);
        const Tensor l_sf = stack_batch(lsf);
        const Tensor mask = stack_field(batch, &TensorSample::mask);

        Rng trng(derive_seed(t_seed, static_cast<std::uint64_t>(step)));
        std::vector<int> tsteps;
        for (std::size_t b = 0; b < batch.size(); ++b)
            tsteps.push_back(1 + static_cast<int>(
                                     trng.uniform_index(static_cast<std::uint64_t>(t_max))));
        Rng nrng(derive_seed(noise_seed, static_cast<std::uint64_t>(step)));
        const Tensor eps = Tensor::randn(l_sf.shape(), nrng);

        const MaskedMseResult res = denoise_loss(net, llc, l_sf, l_s, mask, tsteps, eps);
        const double lv = res.loss->value[0];
        if (!std::isfinite(lv)) abort_non_finite("train-diffusion", step, snapshot(), out_dir);
        result.losses.push_back(lv);

        ad::backward(res.loss);
        opt.step(optim::lr_at(step, cfg.iters_diffusion, cfg.learning_rate, cfg.warmup_frac));
        ad::zero_grad(params);
    }

    result.checkpoint_path = (std::filesystem::path(out_dir) / "diffusion.ckpt").string();
    save_checkpoint(result.checkpoint_path, snapshot());
    const std::string losses_path =
        (std::filesystem::path(out_dir) / "diffusion_losses.tsv").string();
    write_losses(losses_path, result.losses, start);
    write_manifest((std::filesystem::path(out_dir) / "diffusion_manifest.txt").string(),
                   "diffusion", cfg,
                   {{"checkpoint", result.checkpoint_path}, {"losses", losses_path}},
                   result.losses);
    return result;
}

// ── stage three: bilateral restoration ──────────────────────────────

inline StageResult train_restore(const TrainConfig& cfg, const std::vector<ShadowSample>& data,
                                 const std::string& out_dir, const std::string& decomp_ckpt,
                                 const std::string& diffusion_ckpt,
                                 const std::string& resume = "", long long stop_after = 0) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    BatchSource source(data, cfg);
    const DecompPair pair = load_decomposition(decomp_ckpt);
    NoiseModel noise = load_noise_model(diffusion_ckpt);

    Rng wrng(derive_seed(cfg.seed, seeds::kWeights));
    BilateralNet net(bilateral_config_from(cfg), wrng);
    RandomPyramidPerceptual percep;
    std::vector<ad::Var> params = net.params().vars();
    optim::Adam opt(params, cfg.adam_beta1, cfg.adam_beta2);

    if (!resume.empty()) {
        const Checkpoint ck = load_checkpoint(resume);
        assign_params(ck, net.params(), "bilateral/");
        assign_optimizer(ck, opt);
    }

    // The corrected illumination for a fixed sample never changes, so it
    // is sampled once per sample with its own derived seed.
    struct Upstream {
        Tensor r_s, l_hat;
    };
    auto run_upstream = [&](const TensorSample& ts, std::uint64_t sampler_seed) {
        const IlluminationPair ip = decompose_sample(pair, ts);
        Rng srng(sampler_seed);
        const Tensor l_hat = sample_llc(noise.net, noise.llc, ip.l_s, ts.mask, srng);
        return Upstream{ip.r_s, l_hat};
    };
    std::vector<Upstream> cache;
    if (!source.augmented()) {
        const auto& fixed = source.fixed();
        for (std::size_t i = 0; i < fixed.size(); ++i)
            cache.push_back(run_upstream(
                fixed[i], derive_seed(cfg.seed, seeds::kSampler + static_cast<std::uint64_t>(i))));
    }

    auto snapshot = [&]() {
        Checkpoint ck;
        ck.config = cfg.to_map();
        ck.config["stage"] = "restore";
        ck.config["steps_done"] = std::to_string(opt.step_count());
        collect_params(ck, net.params(), "bilateral/");
        collect_optimizer(ck, opt);
        return ck;
    };

    StageResult result;
    const long long start = opt.step_count();
    const bool trainable = !params.empty();
    const long long stop = stop_after > 0 ? std::min<long long>(cfg.iters_restore, stop_after)
                                          : cfg.iters_restore;
    for (long long step = start; step < stop; ++step) {
        const auto idx = source.indices_at(step);
        const auto batch = source.samples_at(step);

        std::vector<Tensor> rs, lh;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Upstream up =
                source.augmented()
                    ? run_upstream(batch[b],
                                   derive_seed(derive_seed(cfg.seed, seeds::kSampler),
                                               (static_cast<std::uint64_t>(step) << 8) +
                                                   static_cast<std::uint64_t>(b)))
                    : cache[static_cast<std::size_t>(idx[b])];
            rs.push_back(up.r_s);
            lh.push_back(up.l_hat);
        }

        ad::Var pred = net.forward(ad::constant(stack_batch(rs)), ad::constant(stack_batch(lh)),
                                   ad::constant(stack_field(batch, &TensorSample::shadow)),
                                   ad::constant(stack_field(batch, &TensorSample::mask)));
        const auto parts =
            loss_restoration(pred, stack_field(batch, &TensorSample::shadow_free), percep);
        const double lv = parts.total->value[0];
        if (!std::isfinite(lv)) abort_non_finite("train-restore", step, snapshot(), out_dir);
        result.losses.push_back(lv);

        if (trainable) {
            ad::backward(parts.total);
            opt.step(optim::lr_at(step, cfg.iters_restore, cfg.learning_rate, cfg.warmup_frac));
            ad::zero_grad(params);
        }
    }

    result.checkpoint_path = (std::filesystem::path(out_dir) / "restore.ckpt").string();
    save_checkpoint(result.checkpoint_path, snapshot());
    const std::string losses_path =
        (std::filesystem::path(out_dir) / "restore_losses.tsv").string();
    write_losses(losses_path, result.losses, start);
    write_manifest((std::filesystem::path(out_dir) / "restore_manifest.txt").string(), "restore",
                   cfg,
                   {{"checkpoint", result.checkpoint_path}, {"losses", losses_path}},
                   result.losses);
    return result;
}

// ── inference ───────────────────────────────────────────────────────

struct InferResult {
    Image output;   // restored shadow-free image
    Image r_s;      // intermediates, populated regardless; callers choose
    Image l_s;      // whether to write them out
    Image l_hat;
};

/// Full pipeline on one image: decompose, correct illumination, restore.
/// The run directory must hold decomp.ckpt, diffusion.ckpt, restore.ckpt.
inline InferResult run_infer(const std::string& run_dir, const Image& shadow_in,
                             const Image& mask_in, int image_size, std::uint64_t seed) {
    check(shadow_in.channels == 3, "infer: input must be RGB");
    check(mask_in.channels == 1, "infer: mask must be single channel");
    check(shadow_in.width == mask_in.width && shadow_in.height == mask_in.height,
          "infer: image and mask sizes differ");
    namespace fs = std::filesystem;
    const DecompPair pair = load_decomposition((fs::path(run_dir) / "decomp.ckpt").string());
    NoiseModel noise = load_noise_model((fs::path(run_dir) / "diffusion.ckpt").string());
    const BilateralNet bnet = load_bilateral((fs::path(run_dir) / "restore.ckpt").string());

    Image shadow = resize_bilinear(shadow_in, image_size, image_size);
    Image mask = resize_bilinear(mask_in, image_size, image_size);
    threshold_mask(mask);
    const Tensor img = image_to_tensor(shadow);
    const Tensor msk = image_to_tensor(mask);

    Tensor r_s, l_s;
    {
        ad::NoGradGuard guard;
        const auto out = pair.s.forward(ad::constant(img), ad::constant(msk));
        r_s = out.reflectance->value;
        l_s = out.illumination->value;
    }
    Rng srng(derive_seed(seed, seeds::kSampler));
    const Tensor l_hat = sample_llc(noise.net, noise.llc, l_s, msk, srng);
    const Tensor restored = restore(bnet, r_s, l_hat, img, msk);

    InferResult res;
    res.output = tensor_to_image(restored);
    res.r_s = tensor_to_image(r_s);
    res.l_s = tensor_to_image(l_s);
    res.l_hat = tensor_to_image(l_hat);
    return res;
}

// ── evaluation over directories ─────────────────────────────────────

struct EvalOutcome {
    std::vector<std::pair<std::string, RegionReport>> rows;
    std::vector<std::string> unmatched;  // human-readable, one per problem stem
};

namespace traindetail {

inline std::set<std::string> png_stems(const std::string& dir) {
    namespace fs = std::filesystem;
    check(fs::is_directory(dir), "eval: not a directory: " + dir);
    std::set<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") out.insert(e.path().stem().string());
    return out;
}

}  // namespace traindetail

/// Scores every stem present in all three directories; stems missing from
/// any directory are reported and skipped. Means are per-image averages.
inline EvalOutcome run_eval(const std::string& pred_dir, const std::string& gt_dir,
                            const std::string& mask_dir) {
    namespace fs = std::filesystem;
    const auto preds = traindetail::png_stems(pred_dir);
    const auto gts = traindetail::png_stems(gt_dir);
    const auto masks = traindetail::png_stems(mask_dir);

    std::set<std::string> all;
    all.insert(preds.begin(), preds.end());
    all.insert(gts.begin(), gts.end());
    all.insert(masks.begin(), masks.end());

    EvalOutcome out;
    for (const auto& stem : all) {
        std::vector<std::string> missing;
        if (!preds.count(stem)) missing.push_back(pred_dir);
        if (!gts.count(stem)) missing.push_back(gt_dir);
        if (!masks.count(stem)) missing.push_back(mask_dir);
        if (!missing.empty()) {
            std::string msg = stem + " missing from";
            for (const auto& d : missing) msg += " " + d;
            out.unmatched.push_back(msg);
            continue;
        }
        const Image pred = load_png((fs::path(pred_dir) / (stem + ".png")).string());
        const Image gt = load_png((fs::path(gt_dir) / (stem + ".png")).string());
        const Image mask = load_png((fs::path(mask_dir) / (stem + ".png")).string(), 1);
        out.rows.emplace_back(stem, evaluate_pair(pred, gt, mask));
    }
    return out;
}

// ── data generation ─────────────────────────────────────────────────

/// Writes a fresh synthetic dataset of `count` samples at `size` pixels.
inline std::vector<std::string> generate_dataset(const std::string& root, int count, int size,
                                                 std::uint64_t seed) {
    check(count > 0, "gen-data: count must be positive");
    Rng rng(seed);
    ShadowParams sp;
    std::vector<std::string> stems;
    for (int i = 0; i < count; ++i) {
        std::ostringstream id;
        id << "s" << std::setw(4) << std::setfill('0') << i;
        const Image base = synth_base(size, size, rng);
        const ShadowSample s = synth_shadow(base, rng, sp, id.str());
        save_sample(root, s);
        stems.push_back(id.str());
    }
    return stems;
}

}  // namespace umbra

#endif  // UMBRA_TRAIN_HPP
