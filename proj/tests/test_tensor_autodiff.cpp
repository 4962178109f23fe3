// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#include <catch2/catch_amalgamated.hpp>

#include "testutil.hpp"
#include "umbra/autodiff.hpp"
#include "umbra/optim.hpp"

using umbra::Rng;
using umbra::Tensor;
namespace ad = umbra::ad;

TEST_CASE("tensor layout is row-major NCHW") {
    Tensor t({2, 3, 4, 5});
    REQUIRE(t.numel() == 120);
    t.at4(1, 2, 3, 4) = 7.0;
    REQUIRE(t[119] == 7.0);
    t.at4(0, 0, 0, 1) = 3.0;
    REQUIRE(t[1] == 3.0);

    Tensor r = t.reshaped({120});
    REQUIRE(r.ndim() == 1);
    REQUIRE(r[119] == 7.0);
    REQUIRE_THROWS_AS(t.reshaped({7}), umbra::Error);

    Tensor u = Tensor::from({2, 2}, {1, 2, 3, 4});
    REQUIRE(u.sum() == 10.0);
    REQUIRE(u.mean() == 2.5);
    REQUIRE(u.bit_equal(u));
    Tensor v = u;
    v[3] = 5.0;
    REQUIRE_FALSE(u.bit_equal(v));
}

TEST_CASE("rng is deterministic and serializable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng c(7);
    for (int i = 0; i < 13; ++i) c.uniform();
    std::uint64_t snap[4];
    std::copy(c.state(), c.state() + 4, snap);
    std::vector<double> cont1, cont2;
    for (int i = 0; i < 50; ++i) cont1.push_back(c.normal());
    Rng d(999);
    d.set_state(snap);
    for (int i = 0; i < 50; ++i) cont2.push_back(d.normal());
    REQUIRE(cont1 == cont2);

    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }

    REQUIRE(umbra::derive_seed(1, 0) != umbra::derive_seed(1, 1));
    REQUIRE(umbra::derive_seed(1, 0) != umbra::derive_seed(2, 0));
}

TEST_CASE("rng normal draws have unit moments") {
    Rng rng(123);
    const int n = 20000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    REQUIRE(std::fabs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
    REQUIRE(std::fabs(var - 1.0) < 3.0 * std::sqrt(2.0 / static_cast<double>(n)));
}

namespace {

// Random values bounded away from the kinks of abs/relu so finite
// differences stay on one side.
Tensor signed_away_from_zero(std::vector<int> shape, Rng& rng) {
    Tensor t = Tensor::rand(std::move(shape), rng, 0.2, 1.0);
    for (long long i = 0; i < t.numel(); ++i)
        if (rng.uniform() < 0.5) t[i] = -t[i];
    return t;
}

}  // namespace

TEST_CASE("elementwise op gradients check against finite differences") {
    Rng rng(5);
    auto x = ad::param(signed_away_from_zero({2, 3}, rng));
    auto y = ad::param(signed_away_from_zero({2, 3}, rng));
    auto build = [&] {
        auto a = ad::mul(ad::sigmoid_v(x), ad::tanh_v(y));
        auto b = ad::exp_v(ad::mul_scalar(ad::abs_v(x), -1.0));
        auto c = ad::add(ad::silu(y), ad::mul_scalar(ad::square(x), 0.3));
        auto d = ad::add(ad::leaky_relu(x), ad::relu(y));
        return ad::mean_all(ad::add(ad::add(a, b), ad::add(c, d)));
    };
    REQUIRE(testutil::max_rel_grad_error(build, {x, y}) < 1e-6);
}

TEST_CASE("arithmetic op gradients check against finite differences") {
    Rng rng(6);
    auto x = ad::param(Tensor::randn({3, 4}, rng));
    auto y = ad::param(Tensor::randn({3, 4}, rng));
    auto build = [&] {
        auto a = ad::sub(ad::add_scalar(x, 0.7), ad::neg(y));
        return ad::mean_all(ad::square(ad::add(ad::mul(a, y), x)));
    };
    REQUIRE(testutil::max_rel_grad_error(build, {x, y}) < 1e-6);
}

TEST_CASE("reduction and l1 gradients check against finite differences") {
    Rng rng(7);
    auto a = ad::param(Tensor::rand({2, 2, 2}, rng, 1.0, 2.0));
    auto b = ad::param(Tensor::rand({2, 2, 2}, rng, 3.0, 4.0));
    auto build_sum = [&] { return ad::sum_all(ad::mul(a, a)); };
    REQUIRE(testutil::max_rel_grad_error(build_sum, {a}) < 1e-6);
    // |a-b| stays near 2, far from the kink.
    auto build_l1 = [&] { return ad::l1_mean(a, b); };
    REQUIRE(testutil::max_rel_grad_error(build_l1, {a, b}) < 1e-6);
}

TEST_CASE("shared subexpressions accumulate gradients") {
    auto x = ad::param(Tensor::scalar(3.0));
    auto y = ad::add(ad::mul(x, x), x);
    ad::backward(y);
    REQUIRE(y->value[0] == 12.0);
    REQUIRE(x->grad_ready);
    REQUIRE(x->grad[0] == 7.0);  // d(x^2+x)/dx = 2*3+1
}

TEST_CASE("backward requires a scalar root") {
    auto x = ad::param(Tensor::ones({2, 2}));
    auto y = ad::mul(x, x);
    REQUIRE_THROWS_AS(ad::backward(y), umbra::Error);
}

TEST_CASE("no-grad mode builds constants") {
    auto x = ad::param(Tensor::ones({2}));
    ad::Var y;
    {
        ad::NoGradGuard guard;
        y = ad::sum_all(ad::mul(x, x));
    }
    REQUIRE_FALSE(y->requires_grad);
    ad::backward(y);  // harmless no-op
    REQUIRE_FALSE(x->grad_ready);
}

TEST_CASE("concat and reshape gradients check against finite differences") {
    Rng rng(8);
    auto a = ad::param(Tensor::randn({2, 2, 3, 3}, rng));
    auto b = ad::param(Tensor::randn({2, 1, 3, 3}, rng));
    auto c = ad::param(Tensor::randn({2, 3, 3, 3}, rng));
    auto build = [&] {
        auto cat = ad::concat_ch({a, b, c});
        return ad::mean_all(ad::square(ad::reshape(cat, {2 * 6 * 9})));
    };
    REQUIRE(testutil::max_rel_grad_error(build, {a, b, c}) < 1e-6);

    // Channel order of the concatenation is first-to-last.
    auto cat = ad::concat_ch({a, b, c});
    REQUIRE(cat->value.dim(1) == 6);
    REQUIRE(cat->value.at4(1, 2, 0, 1) == b->value.at4(1, 0, 0, 1));
    REQUIRE(cat->value.at4(0, 3, 2, 2) == c->value.at4(0, 0, 2, 2));
}

TEST_CASE("zero_grad resets leaves") {
    auto x = ad::param(Tensor::ones({3}));
    ad::backward(ad::sum_all(x));
    REQUIRE(x->grad_ready);
    ad::zero_grad({x});
    REQUIRE_FALSE(x->grad_ready);
}

TEST_CASE("adam converges on a quadratic and warmup-cosine schedule is sane") {
    auto x = ad::param(Tensor::from({2}, {5.0, -3.0}));
    umbra::optim::Adam opt({x});
    for (int i = 0; i < 400; ++i) {
        ad::zero_grad({x});
        auto loss = ad::sum_all(ad::square(x));
        ad::backward(loss);
        opt.step(0.05);
    }
    REQUIRE(std::fabs(x->value[0]) < 1e-3);
    REQUIRE(std::fabs(x->value[1]) < 1e-3);

    const long long total = 1000;
    const double peak = 2e-4;
    // Ramp ends at the peak and decay starts there too.
    const long long warm = 50;
    REQUIRE(umbra::optim::lr_at(0, total, peak) == Catch::Approx(peak / warm));
    REQUIRE(umbra::optim::lr_at(warm - 1, total, peak) == Catch::Approx(peak));
    REQUIRE(umbra::optim::lr_at(warm, total, peak) == Catch::Approx(peak).margin(peak * 0.01));
    REQUIRE(umbra::optim::lr_at(total - 1, total, peak) < 1e-8);
    for (long long s = 1; s < total; ++s)
        if (s >= warm)
            REQUIRE(umbra::optim::lr_at(s, total, peak) <= umbra::optim::lr_at(s - 1, total, peak) + 1e-15);
}
