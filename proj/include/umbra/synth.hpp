// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_SYNTH_HPP
#define UMBRA_SYNTH_HPP

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "umbra/image.hpp"

namespace umbra {

/// One training triplet. Outside the mask shadow equals shadow_free exactly;
/// inside, shadow is a multiplicatively darkened copy.
struct ShadowSample {
    Image shadow;
    Image shadow_free;
    Image mask;  // single channel, values exactly 0 or 1
    std::string id;
};

enum class ShadowShape { Auto, Ellipse, Polygon, ExplicitEllipse };

struct ShadowParams {
    ShadowShape shape = ShadowShape::Auto;
    double attenuation = 0.5;  // multiplicative factor inside the shadow, (0,1)
    double softness = 0.0;     // interior ramp width in pixels; 0 = hard edge
    int max_retries = 8;
    // Used only with ExplicitEllipse (mainly to exercise the degenerate-shape
    // error path deterministically).
    double ell_cx = 0, ell_cy = 0, ell_rx = 0, ell_ry = 0, ell_rot = 0;
};

namespace synthdetail {

inline Image ellipse_mask(int w, int h, double cx, double cy, double rx, double ry, double rot) {
    Image m(w, h, 1);
    if (rx <= 0.0 || ry <= 0.0) return m;
    const double cr = std::cos(rot), sr = std::sin(rot);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double u = (dx * cr + dy * sr) / rx;
            const double v = (-dx * sr + dy * cr) / ry;
            m.at(y, x, 0) = (u * u + v * v <= 1.0) ? 1.0 : 0.0;
        }
    return m;
}

inline Image polygon_mask(int w, int h, const std::vector<double>& vx, const std::vector<double>& vy) {
    Image m(w, h, 1);
    const std::size_t n = vx.size();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            // Even-odd crossing rule against the horizontal ray.
            bool inside = false;
            for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
                const bool crosses = (vy[i] > y) != (vy[j] > y);
                if (crosses) {
                    const double xint = vx[j] + (vx[i] - vx[j]) * (y - vy[j]) / (vy[i] - vy[j]);
                    if (x < xint) inside = !inside;
                }
            }
            m.at(y, x, 0) = inside ? 1.0 : 0.0;
        }
    return m;
}

/// Two-pass chamfer distance (3-4 metric scaled to ~pixels) from each
/// interior pixel to the nearest exterior pixel. Exterior pixels get 0.
inline std::vector<double> interior_distance(const Image& mask) {
    const int w = mask.width, h = mask.height;
    const double big = 1e18;
    std::vector<double> d(static_cast<std::size_t>(w) * h);
    for (int i = 0; i < w * h; ++i) d[static_cast<std::size_t>(i)] = mask.pixels[static_cast<std::size_t>(i)] > 0.5 ? big : 0.0;
    auto at = [&](int y, int x) -> double& { return d[static_cast<std::size_t>(y) * w + x]; };
    const double c1 = 1.0, c2 = 1.3333333333333333;  // 4/3 approximates sqrt(2) in the 3-4 metric
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = at(y, x);
            if (x > 0) v = std::min(v, at(y, x - 1) + c1);
            if (y > 0) v = std::min(v, at(y - 1, x) + c1);
            if (x > 0 && y > 0) v = std::min(v, at(y - 1, x - 1) + c2);
            if (x + 1 < w && y > 0) v = std::min(v, at(y - 1, x + 1) + c2);
            at(y, x) = v;
        }
    for (int y = h - 1; y >= 0; --y)
        for (int x = w - 1; x >= 0; --x) {
            double v = at(y, x);
            if (x + 1 < w) v = std::min(v, at(y, x + 1) + c1);
            if (y + 1 < h) v = std::min(v, at(y + 1, x) + c1);
            if (x + 1 < w && y + 1 < h) v = std::min(v, at(y + 1, x + 1) + c2);
            if (x > 0 && y + 1 < h) v = std::min(v, at(y + 1, x - 1) + c2);
            at(y, x) = v;
        }
    return d;
}

inline double mask_area_fraction(const Image& mask) {
    double s = 0.0;
    for (double v : mask.pixels) s += v;
    return s / static_cast<double>(mask.pixels.size());
}

}  // namespace synthdetail

/// Smooth random base texture: a value-noise pyramid per channel with shared
/// luminance structure, kept away from 0 and 1 so multiplicative shadows
/// stay informative.
inline Image synth_base(int w, int h, Rng& rng) {
    check(w > 0 && h > 0, "synth_base: bad size");
    Image out(w, h, 3);
    const int octaves[] = {2, 4, 8, 16};
    const double amps[] = {1.0, 0.55, 0.3, 0.18};
    std::vector<Image> lum_layers;
    for (int o = 0; o < 4; ++o) {
        Image g(octaves[o], octaves[o], 3);
        for (auto& v : g.pixels) v = rng.uniform(-1.0, 1.0);
        lum_layers.push_back(resize_bilinear(g, w, h));
    }
    const double base_r = rng.uniform(0.3, 0.7);
    const double base_g = rng.uniform(0.3, 0.7);
    const double base_b = rng.uniform(0.3, 0.7);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double bases[3] = {base_r, base_g, base_b};
            for (int c = 0; c < 3; ++c) {
                double v = bases[c];
                for (int o = 0; o < 4; ++o) v += 0.22 * amps[o] * lum_layers[static_cast<std::size_t>(o)].at(y, x, c);
                out.at(y, x, c) = 0.05 + 0.9 / (1.0 + std::exp(-3.0 * (v - 0.5)));
            }
        }
    return out;
}

/// Casts a synthetic shadow onto a base image. The shadow is the base scaled
/// by `attenuation` inside the mask, ramping back to 1 over `softness` pixels
/// on the interior side of the boundary, so pixels outside the mask are
/// untouched exactly.
inline ShadowSample synth_shadow(const Image& base, Rng& rng, const ShadowParams& params,
                                 const std::string& id = "sample") {
    check(base.channels == 3, "synth_shadow: base must be RGB");
    check(params.attenuation > 0.0 && params.attenuation < 1.0,
          "synth_shadow: attenuation must lie strictly inside (0,1)");
    const int w = base.width, h = base.height;
    const double mind = static_cast<double>(std::min(w, h));

    Image mask;
    bool ok = false;
    for (int attempt = 0; attempt < params.max_retries && !ok; ++attempt) {
        ShadowShape shape = params.shape;
        if (shape == ShadowShape::Auto)
            shape = rng.uniform() < 0.5 ? ShadowShape::Ellipse : ShadowShape::Polygon;
        switch (shape) {
            case ShadowShape::ExplicitEllipse:
                mask = synthdetail::ellipse_mask(w, h, params.ell_cx, params.ell_cy, params.ell_rx,
                                                 params.ell_ry, params.ell_rot);
                break;
            case ShadowShape::Ellipse: {
                const double cx = rng.uniform(0.25, 0.75) * w;
                const double cy = rng.uniform(0.25, 0.75) * h;
                const double rx = rng.uniform(0.14, 0.38) * mind;
                const double ry = rng.uniform(0.14, 0.38) * mind;
                const double rot = rng.uniform(0.0, 3.14159265358979323846);
                mask = synthdetail::ellipse_mask(w, h, cx, cy, rx, ry, rot);
                break;
            }
            case ShadowShape::Polygon:
            default: {
                const int nv = 5 + static_cast<int>(rng.uniform_index(5));
                const double cx = rng.uniform(0.3, 0.7) * w;
                const double cy = rng.uniform(0.3, 0.7) * h;
                const double rbase = rng.uniform(0.16, 0.36) * mind;
                std::vector<double> vx, vy;
                for (int i = 0; i < nv; ++i) {
                    const double ang = 2.0 * 3.14159265358979323846 * (i + rng.uniform(0.0, 0.6)) / nv;
                    const double r = rbase * rng.uniform(0.6, 1.4);
                    vx.push_back(cx + r * std::cos(ang));
                    vy.push_back(cy + r * std::sin(ang));
                }
                mask = synthdetail::polygon_mask(w, h, vx, vy);
                break;
            }
        }
        const double frac = synthdetail::mask_area_fraction(mask);
        ok = frac >= 0.02 && frac <= 0.7;
    }
    check(ok, "synth_shadow: could not generate a usable shadow shape (degenerate area)");

    ShadowSample s;
    s.id = id;
    s.shadow_free = base;
    s.mask = mask;
    s.shadow = base;
    if (params.softness <= 0.0) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (mask.at(y, x, 0) > 0.5)
                    for (int c = 0; c < 3; ++c) s.shadow.at(y, x, c) = base.at(y, x, c) * params.attenuation;
    } else {
        const std::vector<double> dist = synthdetail::interior_distance(mask);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (mask.at(y, x, 0) > 0.5) {
                    double t = dist[static_cast<std::size_t>(y) * w + x] / params.softness;
                    t = std::min(t, 1.0);
                    const double ramp = t * t * (3.0 - 2.0 * t);
                    const double factor = 1.0 - (1.0 - params.attenuation) * ramp;
                    for (int c = 0; c < 3; ++c) s.shadow.at(y, x, c) = base.at(y, x, c) * factor;
                }
    }
    return s;
}

inline Image flip_h(const Image& img) {
    Image out(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    return out;
}

struct AugmentParams {
    int out_size = 64;
    double min_crop_frac = 0.8;  // crop edge as a fraction of min(h,w)
    bool allow_flip = true;
    int crop_px = 0;  // explicit square crop edge; 0 = draw from min_crop_frac
};

/// One random flip/crop/resize applied identically to all three components.
/// With flips off, a full crop, and matching size this is the identity.
inline ShadowSample augment(const ShadowSample& s, Rng& rng, const AugmentParams& p) {
    const int w = s.shadow.width, h = s.shadow.height;
    check(s.shadow_free.width == w && s.shadow_free.height == h && s.mask.width == w &&
              s.mask.height == h,
          "augment: component sizes differ");
    const int mind = std::min(w, h);
    int crop = p.crop_px;
    if (crop <= 0) {
        const double frac = p.min_crop_frac >= 1.0 ? 1.0 : rng.uniform(p.min_crop_frac, 1.0);
        crop = std::max(1, static_cast<int>(std::lround(frac * mind)));
    }
    check(crop <= mind, "augment: crop larger than image");
    const int maxx = w - crop, maxy = h - crop;
    const int x0 = maxx > 0 ? static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(maxx) + 1)) : 0;
    const int y0 = maxy > 0 ? static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(maxy) + 1)) : 0;
    const bool flip = p.allow_flip && rng.uniform() < 0.5;

    auto apply = [&](const Image& img) {
        Image cropped(crop, crop, img.channels);
        for (int y = 0; y < crop; ++y)
            for (int x = 0; x < crop; ++x)
                for (int c = 0; c < img.channels; ++c) cropped.at(y, x, c) = img.at(y0 + y, x0 + x, c);
        if (flip) cropped = flip_h(cropped);
        return resize_bilinear(cropped, p.out_size, p.out_size);
    };

    ShadowSample out;
    out.id = s.id;
    out.shadow = apply(s.shadow);
    out.shadow_free = apply(s.shadow_free);
    out.mask = apply(s.mask);
    threshold_mask(out.mask);
    return out;
}

// ── dataset directory layout ────────────────────────────────────────
// <root>/shadow/<stem>.png, <root>/shadow_free/<stem>.png,
// <root>/mask/<stem>.png, matched by stem.

inline void save_sample(const std::string& root, const ShadowSample& s) {
    namespace fs = std::filesystem;
    for (const char* sub : {"shadow", "shadow_free", "mask"})
        fs::create_directories(fs::path(root) / sub);
    save_png((fs::path(root) / "shadow" / (s.id + ".png")).string(), s.shadow);
    save_png((fs::path(root) / "shadow_free" / (s.id + ".png")).string(), s.shadow_free);
    save_png((fs::path(root) / "mask" / (s.id + ".png")).string(), s.mask);
}

/// Sorted stems present in all three subdirectories.
inline std::vector<std::string> list_dataset(const std::string& root) {
    namespace fs = std::filesystem;
    std::set<std::string> stems;
    const fs::path shadow_dir = fs::path(root) / "shadow";
    check(fs::is_directory(shadow_dir), "list_dataset: missing directory " + shadow_dir.string());
    for (const auto& e : fs::directory_iterator(shadow_dir))
        if (e.path().extension() == ".png") stems.insert(e.path().stem().string());
    std::vector<std::string> out;
    for (const auto& stem : stems) {
        const bool complete = fs::exists(fs::path(root) / "shadow_free" / (stem + ".png")) &&
                              fs::exists(fs::path(root) / "mask" / (stem + ".png"));
        if (complete) out.push_back(stem);
    }
    return out;
}

inline ShadowSample load_sample(const std::string& root, const std::string& stem) {
    namespace fs = std::filesystem;
    ShadowSample s;
    s.id = stem;
    s.shadow = load_png((fs::path(root) / "shadow" / (stem + ".png")).string());
    s.shadow_free = load_png((fs::path(root) / "shadow_free" / (stem + ".png")).string());
    s.mask = load_png((fs::path(root) / "mask" / (stem + ".png")).string(), 1);
    threshold_mask(s.mask);
    check(s.shadow.width == s.shadow_free.width && s.shadow.height == s.shadow_free.height &&
              s.mask.width == s.shadow.width && s.mask.height == s.shadow.height,
          "load_sample: component sizes differ for stem " + stem);
    return s;
}

}  // namespace umbra

#endif  // UMBRA_SYNTH_HPP
