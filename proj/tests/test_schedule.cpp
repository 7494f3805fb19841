#include <doctest.h>

#include "storydiff/schedule.hpp"

using namespace storydiff;

TEST_CASE("single step schedule") {
    auto s = build_schedule(1, 0.1, 0.1);
    CHECK(s.T == 1);
    CHECK(s.alpha[0] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(s.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("two step schedule: alpha_bar = [0.9, 0.72]") {
    auto s = build_schedule(2, 0.1, 0.2);
    CHECK(s.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(s.alpha_bar[1] == doctest::Approx(0.72).epsilon(1e-12));
}

TEST_CASE("reference schedule matches a sequential-product oracle") {
    const int T = 1000;
    const double b0 = 1e-4, b1 = 0.02;
    auto s = build_schedule(T, b0, b1);

    // independent oracle: accumulate the product step by step
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double beta = b0 + (b1 - b0) * double(t) / double(T - 1);
        prod *= 1.0 - beta;
        CHECK(s.alpha_bar[size_t(t)] == doctest::Approx(prod).epsilon(1e-12));
    }
    CHECK(std::sqrt(s.alpha_bar.back()) < 0.05);  // terminal state is near-pure noise
}

TEST_CASE("desk schedule (T=200, beta scaled by 1000/T) also ends near pure noise") {
    // the T=1000 beta range kept as-is would leave sqrt(alpha_bar_T) = 0.36 at T=200
    auto s = build_schedule(200, 5e-4, 0.1);
    CHECK(std::sqrt(s.alpha_bar.back()) < 0.05);
}

TEST_CASE("schedule invariants across configs") {
    for (auto [T, b0, b1] : {std::tuple{5, 0.01, 0.3}, {200, 1e-4, 0.02}, {1000, 1e-4, 0.02}}) {
        auto s = build_schedule(T, b0, b1);
        double prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            CHECK(s.a(t) > 0.0);
            CHECK(s.a(t) < 1.0);
            CHECK(s.a_bar(t) < prev);                                         // strictly decreasing
            CHECK(s.a_bar(t) == doctest::Approx(prev * s.a(t)).epsilon(1e-12));  // product identity
            prev = s.a_bar(t);
        }
        CHECK(s.a_bar(0) == 1.0);
    }
}

TEST_CASE("schedule parameter validation") {
    CHECK_THROWS_AS(build_schedule(0, 0.1, 0.2), ValidationError);
    CHECK_THROWS_AS(build_schedule(10, 0.2, 0.1), ValidationError);  // non-monotone range
    CHECK_THROWS_AS(build_schedule(10, 0.0, 0.1), ValidationError);
    CHECK_THROWS_AS(build_schedule(10, -0.1, 0.1), ValidationError);
    CHECK_THROWS_AS(build_schedule(10, 0.1, 1.0), ValidationError);
}

TEST_CASE("forward_sample with zero noise scales by sqrt(alpha_bar)") {
    auto s = build_schedule(4, 0.05, 0.2);
    Rng rng(3);
    TensorD x0 = TensorD::randn({3, 4, 4}, rng);
    TensorD eps = TensorD::zeros({3, 4, 4});
    for (int t = 1; t <= 4; ++t) {
        auto xt = forward_sample(x0, t, eps, s);
        double c = std::sqrt(s.a_bar(t));
        for (int64_t i = 0; i < x0.numel(); ++i)
            CHECK(xt[i] == doctest::Approx(c * x0[i]).epsilon(1e-12));
    }
}

TEST_CASE("hand-evaluated forward sample at alpha_bar = 0.72") {
    auto s = build_schedule(2, 0.1, 0.2);  // a_bar(2) = 0.72
    TensorD x0 = TensorD::full({1, 2, 2}, 1.0);
    TensorD eps = TensorD::full({1, 2, 2}, 1.0);
    auto xt = forward_sample(x0, 2, eps, s);
    for (int64_t i = 0; i < xt.numel(); ++i)
        CHECK(xt[i] == doctest::Approx(1.377679).epsilon(1e-4));  // sqrt(.72) + sqrt(.28)
}

TEST_CASE("closed form matches iterated one-step corruption (Monte Carlo)") {
    auto s = build_schedule(2, 0.1, 0.2);
    const int N = 10000;
    TensorD x0 = TensorD::full({1, 2, 2}, 1.0);
    Rng rng(42);

    double sum = 0, sumsq = 0;
    int64_t count = 0;
    for (int n = 0; n < N; ++n) {
        // x_t = sqrt(a_t) x_{t-1} + sqrt(1-a_t) eps_t, iterated for t=1,2
        TensorD x = x0.clone();
        for (int t = 1; t <= 2; ++t) {
            double ca = std::sqrt(s.a(t)), cb = std::sqrt(1.0 - s.a(t));
            for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = ca * x[i] + cb * rng.normal();
        }
        for (int64_t i = 0; i < x.numel(); ++i) {
            sum += x[i];
            sumsq += x[i] * x[i];
            ++count;
        }
    }
    double mean = sum / double(count);
    double var = sumsq / double(count) - mean * mean;
    double want_mean = std::sqrt(s.a_bar(2)) * 1.0;
    double want_var = 1.0 - s.a_bar(2);
    CHECK(std::abs(mean - want_mean) / want_mean < 0.02);
    CHECK(std::abs(var - want_var) / want_var < 0.05);
}

TEST_CASE("recover_x0 inverts forward_sample exactly with the true noise") {
    auto s = build_schedule(10, 0.01, 0.2);
    Rng rng(7);
    TensorD x0 = TensorD::randn({3, 4, 4}, rng);
    for (int t = 1; t <= 10; ++t) {
        TensorD eps = TensorD::randn({3, 4, 4}, rng);
        auto xt = forward_sample(x0, t, eps, s);
        auto rec = recover_x0(xt, t, eps, s);
        for (int64_t i = 0; i < x0.numel(); ++i)
            CHECK(std::abs(rec[i] - x0[i]) < 1e-5);
    }
}

TEST_CASE("recover_x0 round trip in float, 100 random seeds at t = T/2") {
    auto s = build_schedule(1000, 1e-4, 0.02);
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        Tensor x0 = Tensor::randn({1, 3, 3}, rng);
        Tensor eps = Tensor::randn({1, 3, 3}, rng);
        auto xt = forward_sample(x0, 500, eps, s);
        auto rec = recover_x0(xt, 500, eps, s);
        for (int64_t i = 0; i < x0.numel(); ++i)
            CHECK(std::abs(double(rec[i]) - double(x0[i])) < 1e-5);
    }
}

TEST_CASE("recover_x0 with zero predicted noise divides by sqrt(alpha_bar)") {
    auto s = build_schedule(3, 0.1, 0.3);
    Rng rng(9);
    TensorD xt = TensorD::randn({2, 2, 2}, rng);
    TensorD z = TensorD::zeros({2, 2, 2});
    auto rec = recover_x0(xt, 2, z, s);
    double inv = 1.0 / std::sqrt(s.a_bar(2));
    for (int64_t i = 0; i < xt.numel(); ++i)
        CHECK(rec[i] == doctest::Approx(xt[i] * inv).epsilon(1e-12));
}

TEST_CASE("reparam_input limit cases and blend weights") {
    Rng rng(11);
    TensorD xt = TensorD::randn({1, 3, 3}, rng);
    TensorD x0h = TensorD::randn({1, 3, 3}, rng);

    // alpha_bar -> 1: w = 0, x_in = x_t
    auto a = detail::reparam_with(xt, x0h, 1.0);
    for (int64_t i = 0; i < xt.numel(); ++i) CHECK(a[i] == doctest::Approx(xt[i]).epsilon(1e-12));

    // alpha_bar -> 0: w = 1, x_in = x0_hat
    auto b = detail::reparam_with(xt, x0h, 0.0);
    for (int64_t i = 0; i < xt.numel(); ++i) CHECK(b[i] == doctest::Approx(x0h[i]).epsilon(1e-12));

    // alpha_bar = 0.75: even blend (sqrt(0.25) = 0.5)
    auto c = detail::reparam_with(xt, x0h, 0.75);
    for (int64_t i = 0; i < xt.numel(); ++i)
        CHECK(c[i] == doctest::Approx(0.5 * xt[i] + 0.5 * x0h[i]).epsilon(1e-12));

    // weights are in [0,1] and sum to 1 for any schedule step
    auto s = build_schedule(50, 1e-3, 0.1);
    for (int t = 1; t <= 50; ++t) {
        double w = std::sqrt(1.0 - s.a_bar(t));
        CHECK(w >= 0.0);
        CHECK(w <= 1.0);
        CHECK(w + (1.0 - w) == doctest::Approx(1.0));
    }

    // public path: T=1 with beta 0.25 gives a_bar = 0.75 exactly
    auto s1 = build_schedule(1, 0.25, 0.25);
    auto d = reparam_input(xt, x0h, 1, s1);
    for (int64_t i = 0; i < xt.numel(); ++i)
        CHECK(d[i] == doctest::Approx(0.5 * xt[i] + 0.5 * x0h[i]).epsilon(1e-12));
}

TEST_CASE("step and shape validation") {
    auto s = build_schedule(5, 0.1, 0.2);
    TensorD a = TensorD::zeros({1, 2, 2});
    TensorD b = TensorD::zeros({1, 2, 3});
    CHECK_THROWS_AS(forward_sample(a, 0, a, s), ValidationError);
    CHECK_THROWS_AS(forward_sample(a, 6, a, s), ValidationError);
    CHECK_THROWS_AS(forward_sample(a, 1, b, s), ValidationError);
    CHECK_THROWS_AS(recover_x0(a, 1, b, s), ValidationError);
    CHECK_THROWS_AS(reparam_input(a, b, 1, s), ValidationError);
}
