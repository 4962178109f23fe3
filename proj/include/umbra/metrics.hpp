// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_METRICS_HPP
#define UMBRA_METRICS_HPP

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "umbra/color.hpp"
#include "umbra/image.hpp"

namespace umbra {

// Image-quality scores are computed at a fixed 256x256 protocol resolution;
// mask-quality scores compare masks at their native size.

inline constexpr int kMetricResolution = 256;
inline constexpr double kPsnrCap = 99.0;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
inline constexpr double kSsimC2 = 0.03 * 0.03;  // (K2 * L)^2

enum class Region { S, NS, All };

inline const char* region_name(Region r) {
    switch (r) {
        case Region::S: return "S";
        case Region::NS: return "NS";
        default: return "All";
    }
}

namespace metricsdetail {

struct Prepared {
    Image pred, gt;
    std::vector<unsigned char> mask;  // 1 inside the shadow region
};

inline Prepared prepare(const Image& pred, const Image& gt, const Image& mask) {
    check(pred.channels == 3 && gt.channels == 3, "metrics: images must have 3 channels");
    check(mask.channels == 1, "metrics: mask must have 1 channel");
    Prepared out;
    out.pred = resize_bilinear(pred, kMetricResolution, kMetricResolution);
    out.gt = resize_bilinear(gt, kMetricResolution, kMetricResolution);
    const Image m = resize_bilinear(mask, kMetricResolution, kMetricResolution);
    out.mask.resize(static_cast<std::size_t>(kMetricResolution) * kMetricResolution);
    for (std::size_t i = 0; i < out.mask.size(); ++i)
        out.mask[i] = m.pixels[i] >= 0.5 ? 1 : 0;
    return out;
}

/// Per-region accumulator. Sums are kept separately per bucket so the
/// whole-image mean is the exact weighted recombination of the region means.
struct Buckets {
    double sum[2] = {0.0, 0.0};
    long long cnt[2] = {0, 0};

    void add(int bucket, double value) {
        sum[bucket] += value;
        cnt[bucket] += 1;
    }

    double mse(Region r, int comps, const char* what) const {
        const auto need = [&](long long n) {
            if (n == 0)
                throw Error(std::string(what) + ": empty region " +
                            region_name(r));
        };
        switch (r) {
            case Region::S:
                need(cnt[1]);
                return sum[1] / (static_cast<double>(cnt[1]) * comps);
            case Region::NS:
                need(cnt[0]);
                return sum[0] / (static_cast<double>(cnt[0]) * comps);
            default:
                need(cnt[0] + cnt[1]);
                return (sum[0] + sum[1]) / (static_cast<double>(cnt[0] + cnt[1]) * comps);
        }
    }
};

inline Buckets lab_error_buckets(const Prepared& p) {
    Buckets b;
    for (int y = 0; y < kMetricResolution; ++y)
        for (int x = 0; x < kMetricResolution; ++x) {
            const Lab a = srgb_to_lab(p.pred.at(y, x, 0), p.pred.at(y, x, 1), p.pred.at(y, x, 2));
            const Lab g = srgb_to_lab(p.gt.at(y, x, 0), p.gt.at(y, x, 1), p.gt.at(y, x, 2));
            const double dl = a.l - g.l, da = a.a - g.a, db = a.b - g.b;
            b.add(p.mask[static_cast<std::size_t>(y) * kMetricResolution + x],
                  dl * dl + da * da + db * db);
        }
    return b;
}

inline Buckets rgb_error_buckets(const Prepared& p) {
    Buckets b;
    for (int y = 0; y < kMetricResolution; ++y)
        for (int x = 0; x < kMetricResolution; ++x) {
            double acc = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d = p.pred.at(y, x, c) - p.gt.at(y, x, c);
                acc += d * d;
            }
            b.add(p.mask[static_cast<std::size_t>(y) * kMetricResolution + x], acc);
        }
    return b;
}

inline std::vector<double> gaussian_taps() {
    std::vector<double> w(static_cast<std::size_t>(kSsimWindow));
    const int half = kSsimWindow / 2;
    double total = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - half;
        w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        total += w[static_cast<std::size_t>(i)];
    }
    for (double& v : w) v /= total;
    return w;
}

/// Separable valid-mode Gaussian blur of a W x H scalar field.
inline std::vector<double> blur_valid(const std::vector<double>& img, int W, int H,
                                      const std::vector<double>& taps) {
    const int K = static_cast<int>(taps.size());
    const int VW = W - K + 1, VH = H - K + 1;
    std::vector<double> horiz(static_cast<std::size_t>(VW) * H, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < VW; ++x) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc += taps[static_cast<std::size_t>(k)] *
                       img[static_cast<std::size_t>(y) * W + x + k];
            horiz[static_cast<std::size_t>(y) * VW + x] = acc;
        }
    std::vector<double> out(static_cast<std::size_t>(VW) * VH, 0.0);
    for (int y = 0; y < VH; ++y)
        for (int x = 0; x < VW; ++x) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc += taps[static_cast<std::size_t>(k)] *
                       horiz[static_cast<std::size_t>(y + k) * VW + x];
            out[static_cast<std::size_t>(y) * VW + x] = acc;
        }
    return out;
}

/// SSIM map averaged over the three channels; valid window centers only.
inline Buckets ssim_buckets(const Prepared& p) {
    const int R = kMetricResolution;
    const int half = kSsimWindow / 2;
    const int V = R - kSsimWindow + 1;
    const auto taps = gaussian_taps();

    std::vector<double> mean_map(static_cast<std::size_t>(V) * V, 0.0);
    std::vector<double> cx(static_cast<std::size_t>(R) * R), cy(cx), cxx(cx), cyy(cx), cxy(cx);
    for (int ch = 0; ch < 3; ++ch) {
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                const double a = p.pred.at(y, x, ch), g = p.gt.at(y, x, ch);
                const std::size_t i = static_cast<std::size_t>(y) * R + x;
                cx[i] = a;
                cy[i] = g;
                cxx[i] = a * a;
                cyy[i] = g * g;
                cxy[i] = a * g;
            }
        const auto ux = blur_valid(cx, R, R, taps);
        const auto uy = blur_valid(cy, R, R, taps);
        const auto uxx = blur_valid(cxx, R, R, taps);
        const auto uyy = blur_valid(cyy, R, R, taps);
        const auto uxy = blur_valid(cxy, R, R, taps);
        for (std::size_t i = 0; i < mean_map.size(); ++i) {
            const double mx = ux[i], my = uy[i];
            const double vx = uxx[i] - mx * mx;
            const double vy = uyy[i] - my * my;
            const double cov = uxy[i] - mx * my;
            const double ssim = ((2.0 * mx * my + kSsimC1) * (2.0 * cov + kSsimC2)) /
                                ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
            mean_map[i] += ssim / 3.0;
        }
    }

    Buckets b;
    for (int y = 0; y < V; ++y)
        for (int x = 0; x < V; ++x)
            b.add(p.mask[static_cast<std::size_t>(y + half) * R + (x + half)],
                  mean_map[static_cast<std::size_t>(y) * V + x]);
    return b;
}

inline double psnr_from_mse(double mse) {
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

}  // namespace metricsdetail

// ── per-metric entry points ─────────────────────────────────────────

inline double rmse_lab(const Image& pred, const Image& gt, const Image& mask, Region region) {
    const auto p = metricsdetail::prepare(pred, gt, mask);
    return std::sqrt(metricsdetail::lab_error_buckets(p).mse(region, 3, "rmse_lab"));
}

inline double psnr(const Image& pred, const Image& gt, const Image& mask, Region region) {
    const auto p = metricsdetail::prepare(pred, gt, mask);
    return metricsdetail::psnr_from_mse(
        metricsdetail::rgb_error_buckets(p).mse(region, 3, "psnr"));
}

inline double ssim(const Image& pred, const Image& gt, const Image& mask, Region region) {
    const auto p = metricsdetail::prepare(pred, gt, mask);
    // The buckets hold per-center SSIM values, not squared errors; the mean
    // with a single component is the region average.
    return metricsdetail::ssim_buckets(p).mse(region, 1, "ssim");
}

struct RegionReport {
    double rmse_s = 0, rmse_ns = 0, rmse_all = 0;
    double psnr_s = 0, psnr_ns = 0, psnr_all = 0;
    double ssim_s = 0, ssim_ns = 0, ssim_all = 0;
};

/// All nine scores with one resize and one LAB pass.
inline RegionReport evaluate_pair(const Image& pred, const Image& gt, const Image& mask) {
    const auto p = metricsdetail::prepare(pred, gt, mask);
    const auto lab = metricsdetail::lab_error_buckets(p);
    const auto rgb = metricsdetail::rgb_error_buckets(p);
    const auto ss = metricsdetail::ssim_buckets(p);
    RegionReport r;
    r.rmse_s = std::sqrt(lab.mse(Region::S, 3, "rmse_lab"));
    r.rmse_ns = std::sqrt(lab.mse(Region::NS, 3, "rmse_lab"));
    r.rmse_all = std::sqrt(lab.mse(Region::All, 3, "rmse_lab"));
    r.psnr_s = metricsdetail::psnr_from_mse(rgb.mse(Region::S, 3, "psnr"));
    r.psnr_ns = metricsdetail::psnr_from_mse(rgb.mse(Region::NS, 3, "psnr"));
    r.psnr_all = metricsdetail::psnr_from_mse(rgb.mse(Region::All, 3, "psnr"));
    r.ssim_s = ss.mse(Region::S, 1, "ssim");
    r.ssim_ns = ss.mse(Region::NS, 1, "ssim");
    r.ssim_all = ss.mse(Region::All, 1, "ssim");
    return r;
}

// ── mask-quality scores ─────────────────────────────────────────────

struct BerPer {
    double ber = 0.0;
    double per = 0.0;
    bool degenerate = false;  // one class was absent from the ground truth
};

/// Balanced and plain error rates between binary masks at native size.
/// Shadow pixels are the positive class. When the ground truth lacks a
/// class, that class's rate is dropped from the balanced average and the
/// report is flagged.
inline BerPer ber_per(const Image& pred_mask, const Image& gt_mask) {
    check(pred_mask.channels == 1 && gt_mask.channels == 1, "ber_per: masks must have 1 channel");
    check(pred_mask.width == gt_mask.width && pred_mask.height == gt_mask.height,
          "ber_per: mask sizes differ");
    long long tp = 0, tn = 0, fp = 0, fn = 0;
    const std::size_t n = pred_mask.pixels.size();
    for (std::size_t i = 0; i < n; ++i) {
        const bool p = pred_mask.pixels[i] >= 0.5;
        const bool g = gt_mask.pixels[i] >= 0.5;
        if (p && g)
            ++tp;
        else if (!p && !g)
            ++tn;
        else if (p && !g)
            ++fp;
        else
            ++fn;
    }
    BerPer out;
    double rate_sum = 0.0;
    int rate_cnt = 0;
    if (tp + fn > 0) {
        rate_sum += static_cast<double>(fn) / static_cast<double>(tp + fn);
        ++rate_cnt;
    }
    if (tn + fp > 0) {
        rate_sum += static_cast<double>(fp) / static_cast<double>(tn + fp);
        ++rate_cnt;
    }
    check(rate_cnt > 0, "ber_per: empty masks");
    out.degenerate = rate_cnt < 2;
    out.ber = 100.0 * rate_sum / static_cast<double>(rate_cnt);
    out.per = 100.0 * static_cast<double>(fp + fn) / static_cast<double>(n);
    return out;
}

// ── report serialization ────────────────────────────────────────────

inline std::string report_line(const std::string& id, const RegionReport& r) {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    os << id << " rmse S " << r.rmse_s << " NS " << r.rmse_ns << " All " << r.rmse_all << " psnr S "
       << r.psnr_s << " NS " << r.psnr_ns << " All " << r.psnr_all << " ssim S " << r.ssim_s
       << " NS " << r.ssim_ns << " All " << r.ssim_all;
    return os.str();
}

/// Tab-separated table, one row per sample plus a "mean" row.
inline void write_report_table(const std::string& path,
                               const std::vector<std::pair<std::string, RegionReport>>& rows) {
    std::ofstream f(path);
    check(f.good(), "write_report_table: cannot open " + path);
    f << "id\trmse_S\trmse_NS\trmse_All\tpsnr_S\tpsnr_NS\tpsnr_All\tssim_S\tssim_NS\tssim_All\n";
    f.precision(6);
    f << std::fixed;
    RegionReport m;
    for (const auto& [id, r] : rows) {
        f << id << '\t' << r.rmse_s << '\t' << r.rmse_ns << '\t' << r.rmse_all << '\t' << r.psnr_s
          << '\t' << r.psnr_ns << '\t' << r.psnr_all << '\t' << r.ssim_s << '\t' << r.ssim_ns
          << '\t' << r.ssim_all << '\n';
        m.rmse_s += r.rmse_s;
        m.rmse_ns += r.rmse_ns;
        m.rmse_all += r.rmse_all;
        m.psnr_s += r.psnr_s;
        m.psnr_ns += r.psnr_ns;
        m.psnr_all += r.psnr_all;
        m.ssim_s += r.ssim_s;
        m.ssim_ns += r.ssim_ns;
        m.ssim_all += r.ssim_all;
    }
    if (!rows.empty()) {
        const double k = static_cast<double>(rows.size());
        f << "mean\t" << m.rmse_s / k << '\t' << m.rmse_ns / k << '\t' << m.rmse_all / k << '\t'
          << m.psnr_s / k << '\t' << m.psnr_ns / k << '\t' << m.psnr_all / k << '\t' << m.ssim_s / k
          << '\t' << m.ssim_ns / k << '\t' << m.ssim_all / k << '\n';
    }
    check(f.good(), "write_report_table: write failed for " + path);
}

}  // namespace umbra

#endif  // UMBRA_METRICS_HPP
