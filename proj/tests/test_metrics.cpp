// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "umbra/metrics.hpp"

using namespace umbra;

namespace {

Image solid(int w, int h, double r, double g, double b) {
    Image img;
    img.width = w;
    img.height = h;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            img.at(y, x, 0) = r;
            img.at(y, x, 1) = g;
            img.at(y, x, 2) = b;
        }
    return img;
}

Image gray1(int w, int h, double v) {
    Image img;
    img.width = w;
    img.height = h;
    img.channels = 1;
    img.pixels.assign(static_cast<std::size_t>(w) * h, v);
    return img;
}

Image half_mask(int w, int h) {
    Image m = gray1(w, h, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) m.at(y, x, 0) = 1.0;
    return m;
}

Image random_rgb(int w, int h, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Image img = solid(w, h, 0, 0, 0);
    for (double& p : img.pixels) p = rng.uniform(lo, hi);
    return img;
}

}  // namespace

TEST_CASE("identical images score perfectly in every region") {
    Rng rng(3);
    const Image img = random_rgb(64, 48, rng);
    const Image mask = half_mask(64, 48);
    for (Region r : {Region::S, Region::NS, Region::All}) {
        REQUIRE(rmse_lab(img, img, mask, r) == 0.0);
        REQUIRE(psnr(img, img, mask, r) == kPsnrCap);
        REQUIRE(ssim(img, img, mask, r) == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("uniform absolute error of 0.1 gives 20 dB") {
    const Image gt = solid(40, 40, 0.45, 0.45, 0.45);
    const Image pred = solid(40, 40, 0.55, 0.55, 0.55);
    const Image mask = half_mask(40, 40);
    for (Region r : {Region::S, Region::NS, Region::All})
        REQUIRE(psnr(pred, gt, mask, r) == Catch::Approx(20.0).margin(1e-9));
}

TEST_CASE("black versus white matches the color-space closed form") {
    const Image black = solid(32, 32, 0, 0, 0);
    const Image white = solid(32, 32, 1, 1, 1);
    const Image mask = half_mask(32, 32);
    // Frozen conversion anchors for pure white; black maps to exact zeros.
    const double L = 100.000003866667, a = -0.000016666666, b = 0.000006666666;
    const double want = std::sqrt((L * L + a * a + b * b) / 3.0);
    for (Region r : {Region::S, Region::NS, Region::All})
        REQUIRE(rmse_lab(black, white, mask, r) == Catch::Approx(want).margin(1e-6));
}

TEST_CASE("region means recombine exactly into the whole-image mean") {
    Rng rng(13);
    const Image pred = random_rgb(80, 60, rng);
    const Image gt = random_rgb(80, 60, rng);
    const Image mask = half_mask(80, 60);

    const auto p = metricsdetail::prepare(pred, gt, mask);
    for (const auto& buckets : {metricsdetail::lab_error_buckets(p),
                                metricsdetail::rgb_error_buckets(p),
                                metricsdetail::ssim_buckets(p)}) {
        const double ns = buckets.mse(Region::NS, 1, "t");
        const double s = buckets.mse(Region::S, 1, "t");
        const double all = buckets.mse(Region::All, 1, "t");
        const double n0 = static_cast<double>(buckets.cnt[0]);
        const double n1 = static_cast<double>(buckets.cnt[1]);
        const double recombined = (n0 * ns + n1 * s) / (n0 + n1);
        REQUIRE(all == Catch::Approx(recombined).epsilon(1e-12));
    }
}

TEST_CASE("empty regions are reported by name") {
    Rng rng(23);
    const Image pred = random_rgb(32, 32, rng);
    const Image gt = random_rgb(32, 32, rng);
    using Catch::Matchers::ContainsSubstring;
    REQUIRE_THROWS_WITH(rmse_lab(pred, gt, gray1(32, 32, 1.0), Region::NS),
                        ContainsSubstring("empty region NS"));
    REQUIRE_THROWS_WITH(psnr(pred, gt, gray1(32, 32, 0.0), Region::S),
                        ContainsSubstring("empty region S"));
    REQUIRE_THROWS_WITH(ssim(pred, gt, gray1(32, 32, 0.0), Region::S),
                        ContainsSubstring("empty region S"));
}

TEST_CASE("scores are symmetric in their two images") {
    Rng rng(33);
    const Image a = random_rgb(48, 48, rng);
    const Image b = random_rgb(48, 48, rng);
    const Image mask = half_mask(48, 48);
    for (Region r : {Region::S, Region::NS, Region::All}) {
        REQUIRE(rmse_lab(a, b, mask, r) == Catch::Approx(rmse_lab(b, a, mask, r)).epsilon(1e-12));
        REQUIRE(psnr(a, b, mask, r) == Catch::Approx(psnr(b, a, mask, r)).epsilon(1e-12));
        REQUIRE(ssim(a, b, mask, r) == Catch::Approx(ssim(b, a, mask, r)).epsilon(1e-12));
    }
}

TEST_CASE("color error grows with noise amplitude") {
    Rng rng(43);
    const Image gt = random_rgb(40, 40, rng, 0.3, 0.7);
    const Image mask = half_mask(40, 40);
    Image noise = random_rgb(40, 40, rng, -1.0, 1.0);
    double prev = 0.0;
    for (double amp : {0.02, 0.05, 0.1}) {
        Image pred = gt;
        for (std::size_t i = 0; i < pred.pixels.size(); ++i)
            pred.pixels[i] += amp * noise.pixels[i];
        const double e = rmse_lab(pred, gt, mask, Region::All);
        REQUIRE(e > prev);
        prev = e;
    }
}

TEST_CASE("structural score on constant images follows the luminance term") {
    const Image x = solid(64, 64, 0.3, 0.3, 0.3);
    const Image y = solid(64, 64, 0.5, 0.5, 0.5);
    const Image mask = half_mask(64, 64);
    const double want = (2.0 * 0.3 * 0.5 + kSsimC1) / (0.3 * 0.3 + 0.5 * 0.5 + kSsimC1);
    REQUIRE(ssim(x, y, mask, Region::All) == Catch::Approx(want).margin(1e-9));
}

TEST_CASE("inverted binary texture lands near the structural minimum") {
    Image gt = solid(kMetricResolution, kMetricResolution, 0, 0, 0);
    for (int y = 0; y < kMetricResolution; ++y)
        for (int x = 0; x < kMetricResolution; ++x)
            for (int c = 0; c < 3; ++c) gt.at(y, x, c) = (x + y) % 2 == 0 ? 1.0 : 0.0;
    Image pred = gt;
    for (double& v : pred.pixels) v = 1.0 - v;
    const Image mask = half_mask(kMetricResolution, kMetricResolution);
    REQUIRE(ssim(pred, gt, mask, Region::All) < -0.5);
}

TEST_CASE("structural score matches a direct windowed oracle") {
    Rng rng(53);
    const Image pred = random_rgb(kMetricResolution, kMetricResolution, rng);
    const Image gt = random_rgb(kMetricResolution, kMetricResolution, rng);
    const Image mask = half_mask(kMetricResolution, kMetricResolution);

    // Independent computation: explicit 2D window sums at every valid center.
    const int R = kMetricResolution, K = kSsimWindow, half = K / 2, V = R - K + 1;
    std::vector<double> taps(static_cast<std::size_t>(K));
    double tsum = 0.0;
    for (int i = 0; i < K; ++i) {
        const double d = i - half;
        taps[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        tsum += taps[static_cast<std::size_t>(i)];
    }
    for (double& t : taps) t /= tsum;

    double sum_all = 0.0;
    long long cnt_all = 0;
    for (int cy = 0; cy < V; ++cy)
        for (int cx = 0; cx < V; ++cx) {
            double acc = 0.0;
            for (int ch = 0; ch < 3; ++ch) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int wy = 0; wy < K; ++wy)
                    for (int wx = 0; wx < K; ++wx) {
                        const double w = taps[static_cast<std::size_t>(wy)] *
                                         taps[static_cast<std::size_t>(wx)];
                        const double a = pred.at(cy + wy, cx + wx, ch);
                        const double g = gt.at(cy + wy, cx + wx, ch);
                        mx += w * a;
                        my += w * g;
                        mxx += w * a * a;
                        myy += w * g * g;
                        mxy += w * a * g;
                    }
                const double vx = mxx - mx * mx, vy = myy - my * my, cov = mxy - mx * my;
                acc += ((2 * mx * my + kSsimC1) * (2 * cov + kSsimC2)) /
                       ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2)) / 3.0;
            }
            sum_all += acc;
            ++cnt_all;
        }
    const double want = sum_all / static_cast<double>(cnt_all);
    REQUIRE(ssim(pred, gt, mask, Region::All) == Catch::Approx(want).margin(1e-9));
}

TEST_CASE("mask error rates cover exact, inverted, and random cases") {
    const int W = 20, H = 10;
    Image gt = gray1(W, H, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W / 2; ++x) gt.at(y, x, 0) = 1.0;

    const auto same = ber_per(gt, gt);
    REQUIRE(same.ber == 0.0);
    REQUIRE(same.per == 0.0);
    REQUIRE_FALSE(same.degenerate);

    Image inv = gt;
    for (double& v : inv.pixels) v = 1.0 - v;
    const auto flipped = ber_per(inv, gt);
    REQUIRE(flipped.ber == 100.0);
    REQUIRE(flipped.per == 100.0);

    Rng rng(63);
    Image pred = gray1(W, H, 0.0);
    for (double& v : pred.pixels) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    long long tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
        const bool p = pred.pixels[i] >= 0.5, g = gt.pixels[i] >= 0.5;
        tp += p && g;
        tn += !p && !g;
        fp += p && !g;
        fn += !p && g;
    }
    const auto got = ber_per(pred, gt);
    const double want_ber = 50.0 * (static_cast<double>(fn) / static_cast<double>(tp + fn) +
                                    static_cast<double>(fp) / static_cast<double>(tn + fp));
    const double want_per = 100.0 * static_cast<double>(fp + fn) / (W * H);
    REQUIRE(got.ber == Catch::Approx(want_ber).margin(1e-12));
    REQUIRE(got.per == Catch::Approx(want_per).margin(1e-12));
    REQUIRE_FALSE(got.degenerate);

    // Degenerate truths drop the undefined class rate and say so.
    const auto all_s = ber_per(pred, gray1(W, H, 1.0));
    REQUIRE(all_s.degenerate);
    long long miss = 0;
    for (double v : pred.pixels) miss += v < 0.5;
    REQUIRE(all_s.ber == Catch::Approx(100.0 * miss / (W * H)).margin(1e-12));

    const auto all_ns = ber_per(pred, gray1(W, H, 0.0));
    REQUIRE(all_ns.degenerate);

    REQUIRE_THROWS_AS(ber_per(gray1(8, 8, 0.0), gray1(8, 9, 0.0)), Error);
}

TEST_CASE("reports serialize as one line per sample plus a mean row") {
    RegionReport r;
    r.rmse_s = 12.5;
    r.psnr_all = 33.25;
    r.ssim_ns = 0.875;
    const std::string line = report_line("s0", r);
    REQUIRE(line.find("s0") == 0);
    REQUIRE(line.find("rmse S 12.5") != std::string::npos);
    REQUIRE(line.find("ssim") != std::string::npos);

    const std::string path = "metrics_report_test.tsv";
    write_report_table(path, {{"s0", r}, {"s1", r}});
    std::ifstream f(path);
    REQUIRE(f.good());
    std::string l;
    int lines = 0;
    bool saw_mean = false;
    while (std::getline(f, l)) {
        ++lines;
        if (l.rfind("mean\t", 0) == 0) saw_mean = true;
    }
    REQUIRE(lines == 4);  // header, two samples, mean
    REQUIRE(saw_mean);
    std::remove(path.c_str());
}
