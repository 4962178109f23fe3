// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "umbra/igtr.hpp"
#include "testutil.hpp"

using namespace umbra;

namespace {

// Pointwise projection with explicit loops.
Tensor conv1x1_ref(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0);
    Tensor out({N, O, H, W});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    double acc = b[o];
                    for (int c = 0; c < C; ++c)
                        acc += w[(static_cast<long long>(o) * C + c)] * x.at4(n, c, y, xx);
                    out.at4(n, o, y, xx) = acc;
                }
    return out;
}

// Dense-loop region attention oracle working straight off the stored weights.
Tensor coa_oracle(const Tensor& fq, const Tensor& fkv, const nn::ParamStore& ps,
                  const std::string& pre, int K) {
    const Tensor q = conv1x1_ref(fq, ps.at(pre + ".q.w")->value, ps.at(pre + ".q.b")->value);
    const Tensor k = conv1x1_ref(fkv, ps.at(pre + ".k.w")->value, ps.at(pre + ".k.b")->value);
    const Tensor v = conv1x1_ref(fkv, ps.at(pre + ".v.w")->value, ps.at(pre + ".v.b")->value);
    const int N = q.dim(0), D = q.dim(1), H = q.dim(2), W = q.dim(3);
    const int T = K * K;
    Tensor mixed({N, D, H, W});
    for (int n = 0; n < N; ++n)
        for (int ry = 0; ry < H / K; ++ry)
            for (int rx = 0; rx < W / K; ++rx) {
                auto tok_y = [&](int t) { return ry * K + t / K; };
                auto tok_x = [&](int t) { return rx * K + t % K; };
                for (int ti = 0; ti < T; ++ti) {
                    std::vector<double> logits(static_cast<std::size_t>(T));
                    double mx = -1e300;
                    for (int tj = 0; tj < T; ++tj) {
                        double dot = 0.0;
                        for (int c = 0; c < D; ++c)
                            dot += q.at4(n, c, tok_y(ti), tok_x(ti)) *
                                   k.at4(n, c, tok_y(tj), tok_x(tj));
                        logits[static_cast<std::size_t>(tj)] = dot / std::sqrt(D);
                        mx = std::max(mx, logits[static_cast<std::size_t>(tj)]);
                    }
                    double z = 0.0;
                    for (double& l : logits) {
                        l = std::exp(l - mx);
                        z += l;
                    }
                    double wsum = 0.0;
                    for (int c = 0; c < D; ++c) {
                        double acc = 0.0;
                        for (int tj = 0; tj < T; ++tj)
                            acc += logits[static_cast<std::size_t>(tj)] / z *
                                   v.at4(n, c, tok_y(tj), tok_x(tj));
                        mixed.at4(n, c, tok_y(ti), tok_x(ti)) = acc;
                    }
                    for (int tj = 0; tj < T; ++tj) wsum += logits[static_cast<std::size_t>(tj)] / z;
                    if (std::abs(wsum - 1.0) > 1e-6) throw Error("oracle: attention rows drifted");
                }
            }
    return conv1x1_ref(mixed, ps.at(pre + ".o.w")->value, ps.at(pre + ".o.b")->value);
}

void zero_value_projections(nn::ParamStore& ps) {
    for (const auto& item : ps.items()) {
        const std::string& name = item.first;
        const auto ends_with = [&](const std::string& suf) {
            return name.size() >= suf.size() &&
                   name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
        };
        if (ends_with(".v.w") || ends_with(".v.b")) item.second->value.fill(0.0);
    }
}

}  // namespace

TEST_CASE("variant names round-trip and region sizes resolve") {
    const char* names[] = {"full", "igtr-l", "igtr-g", "sa", "cat-i", "cat-f"};
    for (const char* n : names) REQUIRE(igtr_variant_name(parse_igtr_variant(n)) == std::string(n));
    REQUIRE_THROWS_AS(parse_igtr_variant("igtr"), Error);

    REQUIRE(default_region_size(5) == 4);
    for (int i = 1; i <= 4; ++i) REQUIRE(default_region_size(i) == 8);
    REQUIRE_THROWS_AS(default_region_size(0), Error);

    REQUIRE(resolve_region_size(8, 64, 64) == 8);
    REQUIRE(resolve_region_size(8, 4, 4) == 4);
    REQUIRE(resolve_region_size(8, 2, 2) == 2);
    REQUIRE(resolve_region_size(8, 6, 6) == 6);
    REQUIRE(resolve_region_size(4, 6, 6) == 3);
    REQUIRE(resolve_region_size(7, 7, 7) == 7);
    REQUIRE(resolve_region_size(5, 7, 7) == 1);
}

TEST_CASE("region attention matches the dense-loop oracle") {
    Rng rng(7);
    nn::ParamStore ps;
    CoAttention coa(ps, "c", 8, rng);
    Rng dr(8);
    const Tensor fq = Tensor::randn({2, 8, 4, 4}, dr);
    const Tensor fkv = Tensor::randn({2, 8, 4, 4}, dr);

    for (int K : {1, 2, 4}) {
        ad::NoGradGuard g;
        const Tensor got = coa(ad::constant(fq), ad::constant(fkv), K)->value;
        const Tensor want = coa_oracle(fq, fkv, ps, "c", K);
        REQUIRE(testutil::max_abs_diff(got, want) < 1e-12);
    }
}

TEST_CASE("single-token regions pass the projected value straight through") {
    Rng rng(17);
    nn::ParamStore ps;
    CoAttention coa(ps, "c", 6, rng);
    Rng dr(18);
    const Tensor fq = Tensor::randn({1, 6, 3, 3}, dr);
    const Tensor fkv = Tensor::randn({1, 6, 3, 3}, dr);

    ad::NoGradGuard g;
    const Tensor got = coa(ad::constant(fq), ad::constant(fkv), 1)->value;
    const Tensor v = conv1x1_ref(fkv, ps.at("c.v.w")->value, ps.at("c.v.b")->value);
    const Tensor want = conv1x1_ref(v, ps.at("c.o.w")->value, ps.at("c.o.b")->value);
    REQUIRE(testutil::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("identical projected keys spread attention uniformly") {
    Rng rng(27);
    nn::ParamStore ps;
    CoAttention coa(ps, "c", 4, rng);
    // Zeroing the key projection makes every key equal, so attention must
    // average the values over each region.
    ps.at("c.k.w")->value.fill(0.0);
    ps.at("c.k.b")->value.fill(0.0);

    Rng dr(28);
    const Tensor fq = Tensor::randn({1, 4, 4, 4}, dr);
    const Tensor fkv = Tensor::randn({1, 4, 4, 4}, dr);
    const int K = 2;

    ad::NoGradGuard g;
    const Tensor got = coa(ad::constant(fq), ad::constant(fkv), K)->value;

    const Tensor v = conv1x1_ref(fkv, ps.at("c.v.w")->value, ps.at("c.v.b")->value);
    Tensor avg({1, 2, 4, 4});
    for (int c = 0; c < 2; ++c)
        for (int ry = 0; ry < 2; ++ry)
            for (int rx = 0; rx < 2; ++rx) {
                double acc = 0.0;
                for (int ty = 0; ty < K; ++ty)
                    for (int tx = 0; tx < K; ++tx) acc += v.at4(0, c, ry * K + ty, rx * K + tx);
                acc /= K * K;
                for (int ty = 0; ty < K; ++ty)
                    for (int tx = 0; tx < K; ++tx) avg.at4(0, c, ry * K + ty, rx * K + tx) = acc;
            }
    const Tensor want = conv1x1_ref(avg, ps.at("c.o.w")->value, ps.at("c.o.b")->value);
    REQUIRE(testutil::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("zeroed value projections collapse attention variants to identity") {
    Rng dr(38);
    const Tensor f_r = Tensor::randn({2, 8, 8, 8}, dr);
    const Tensor f_l = Tensor::randn({2, 8, 8, 8}, dr);

    for (IGTRVariant v : {IGTRVariant::Full, IGTRVariant::LocalOnly, IGTRVariant::NonlocalOnly,
                          IGTRVariant::SelfAttention}) {
        Rng rng(39);
        nn::ParamStore ps;
        IGTRBlock block(ps, "b", 8, 4, v, rng);
        zero_value_projections(ps);
        ad::NoGradGuard g;
        const Tensor out = block(ad::constant(f_r), ad::constant(f_l))->value;
        INFO("variant " << igtr_variant_name(v));
        REQUIRE(out.bit_equal(f_r));
    }
}

TEST_CASE("every variant preserves shape and stays finite") {
    Rng dr(48);
    const Tensor f_r = Tensor::randn({2, 8, 8, 8}, dr);
    const Tensor f_l = Tensor::randn({2, 8, 8, 8}, dr);

    for (IGTRVariant v :
         {IGTRVariant::Full, IGTRVariant::LocalOnly, IGTRVariant::NonlocalOnly,
          IGTRVariant::SelfAttention, IGTRVariant::ConcatInput, IGTRVariant::ConcatFeature}) {
        Rng rng(49);
        nn::ParamStore ps;
        IGTRBlock block(ps, "b", 8, 8, v, rng);
        ad::NoGradGuard g;
        const Tensor out = block(ad::constant(f_r), ad::constant(f_l))->value;
        INFO("variant " << igtr_variant_name(v));
        REQUIRE(out.same_shape(f_r));
        REQUIRE(out.all_finite());
    }

    Rng rng(49);
    nn::ParamStore ps;
    IGTRBlock block(ps, "b", 8, 8, IGTRVariant::Full, rng);
    REQUIRE_THROWS_AS(block(ad::constant(Tensor::zeros({2, 6, 8, 8})),
                            ad::constant(Tensor::zeros({2, 6, 8, 8}))),
                      Error);
    REQUIRE_THROWS_AS(block(ad::constant(f_r), ad::constant(Tensor::zeros({2, 8, 4, 8}))), Error);
}

TEST_CASE("variant wiring uses exactly the advertised streams") {
    Rng dr(58);
    const Tensor f_r = Tensor::randn({1, 8, 8, 8}, dr);
    const Tensor f_l1 = Tensor::randn({1, 8, 8, 8}, dr);
    const Tensor f_l2 = Tensor::randn({1, 8, 8, 8}, dr);

    auto run = [&](IGTRVariant v, const Tensor& fl) {
        Rng rng(59);
        nn::ParamStore ps;
        IGTRBlock block(ps, "b", 8, 4, v, rng);
        ad::NoGradGuard g;
        return block(ad::constant(f_r), ad::constant(fl))->value;
    };

    // Self-attention never touches the lighting stream.
    REQUIRE(run(IGTRVariant::SelfAttention, f_l1).bit_equal(run(IGTRVariant::SelfAttention, f_l2)));

    // Everything else does.
    for (IGTRVariant v : {IGTRVariant::Full, IGTRVariant::LocalOnly, IGTRVariant::NonlocalOnly,
                          IGTRVariant::ConcatInput, IGTRVariant::ConcatFeature}) {
        INFO("variant " << igtr_variant_name(v));
        REQUIRE(testutil::max_abs_diff(run(v, f_l1), run(v, f_l2)) > 1e-9);
    }
}

TEST_CASE("local stage equals attention oracle plus residual") {
    Rng rng(68);
    nn::ParamStore ps;
    IGTRBlock block(ps, "b", 8, 4, IGTRVariant::LocalOnly, rng);
    Rng dr(69);
    const Tensor f_r = Tensor::randn({1, 8, 8, 8}, dr);
    const Tensor f_l = Tensor::randn({1, 8, 8, 8}, dr);

    ad::NoGradGuard g;
    const Tensor got = block(ad::constant(f_r), ad::constant(f_l))->value;
    Tensor want = coa_oracle(f_r, f_l, ps, "b.loc", 4);
    for (long long i = 0; i < want.numel(); ++i) want[i] += f_r[i];
    REQUIRE(testutil::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("concat-input variant is a plain projection of the joined streams") {
    Rng rng(78);
    nn::ParamStore ps;
    IGTRBlock block(ps, "b", 6, 4, IGTRVariant::ConcatInput, rng);
    Rng dr(79);
    const Tensor f_r = Tensor::randn({1, 6, 4, 4}, dr);
    const Tensor f_l = Tensor::randn({1, 6, 4, 4}, dr);

    Tensor joined({1, 12, 4, 4});
    for (int c = 0; c < 6; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                joined.at4(0, c, y, x) = f_r.at4(0, c, y, x);
                joined.at4(0, 6 + c, y, x) = f_l.at4(0, c, y, x);
            }
    ad::NoGradGuard g;
    const Tensor got = block(ad::constant(f_r), ad::constant(f_l))->value;
    const Tensor want = conv1x1_ref(joined, ps.at("b.cat1.w")->value, ps.at("b.cat1.b")->value);
    REQUIRE(testutil::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("integer offsets reduce resampling to clamped indexing") {
    Rng dr(88);
    const Tensor f = Tensor::randn({1, 3, 5, 5}, dr);
    Tensor off = Tensor::zeros({1, 2, 5, 5});
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
            off.at4(0, 0, y, x) = 1.0;   // one pixel right
            off.at4(0, 1, y, x) = -2.0;  // two pixels up
        }
    ad::NoGradGuard g;
    const Tensor got = ad::bilinear_sample(ad::constant(f), ad::constant(off))->value;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 5; ++x) {
                const int sy = std::max(0, y - 2);
                const int sx = std::min(4, x + 1);
                REQUIRE(got.at4(0, c, y, x) == Catch::Approx(f.at4(0, c, sy, sx)).margin(1e-12));
            }
}

TEST_CASE("full block backpropagates to both streams") {
    Rng rng(98);
    nn::ParamStore ps;
    IGTRBlock block(ps, "b", 4, 2, IGTRVariant::Full, rng);
    Rng dr(99);
    ad::Var f_r = ad::param(Tensor::randn({1, 4, 4, 4}, dr));
    ad::Var f_l = ad::param(Tensor::randn({1, 4, 4, 4}, dr));

    const double err = testutil::max_rel_grad_error(
        [&]() { return ad::mean_all(ad::square(block(f_r, f_l))); }, {f_r, f_l}, 1e-6);
    REQUIRE(err < 1e-4);
}
