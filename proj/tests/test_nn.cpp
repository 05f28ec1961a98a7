#include <doctest.h>

#include <cmath>

#include "nn/nn.hpp"
#include "oracles.hpp"

using namespace xcb;

TEST_CASE("xavier uniform init bounds, determinism, centering") {
    Rng rng(42);
    Tensor w = xavier_uniform_init({100, 100}, rng);
    const double bound = std::sqrt(6.0 / 200.0);
    double mean = 0.0;
    for (double v : w.data()) {
        CHECK(std::abs(v) <= bound);
        mean += v;
    }
    mean /= static_cast<double>(w.numel());
    CHECK(std::abs(mean) < 0.01);

    Rng r1(7), r2(7);
    CHECK(xavier_uniform_init({3, 4}, r1).data() == xavier_uniform_init({3, 4}, r2).data());
    CHECK_THROWS_AS(xavier_uniform_init({0, 3}, rng), ContractError);
}

TEST_CASE("gumbel sigmoid closed-form points") {
    CHECK(gumbel_sigmoid_with_noise(Tensor::scalar(0.0), 1.0, Tensor::scalar(0.0), false).item() ==
          0.5);
    const double sig4 = 1.0 / (1.0 + std::exp(-4.0));
    CHECK(gumbel_sigmoid_with_noise(Tensor::scalar(2.0), 0.5, Tensor::scalar(0.0), false).item() ==
          doctest::Approx(sig4).epsilon(1e-10));

    Tensor logits = Tensor::scalar(2.0, true);
    Tensor hard = gumbel_sigmoid_with_noise(logits, 0.5, Tensor::scalar(0.0), true);
    CHECK(hard.item() == 1.0);
    backward(sum(hard));
    // Straight-through passes identity into soft, then the sigmoid/temperature
    // chain: d soft/d logit = sigma'(4)/tau.
    CHECK(logits.grad()[0] == doctest::Approx(sig4 * (1 - sig4) / 0.5).epsilon(1e-10));

    Rng rng(3);
    CHECK_THROWS_AS(gumbel_sigmoid(Tensor::scalar(0.0), 0.0, rng, false), ContractError);
}

TEST_CASE("gumbel sigmoid saturates at low temperature") {
    // sigma(x/tau) is within 1e-6 of {0,1} once |x|/tau > ln(1e6) ~ 13.8, so
    // tau = 0.005 guarantees the bound for every |logit+noise| > 0.1.
    Rng rng(11);
    Tensor logits = Tensor::from_data({64}, std::vector<double>(64, 0.0));
    Tensor noise = logistic_noise({64}, rng);
    Tensor soft = gumbel_sigmoid_with_noise(logits, 0.005, noise, false);
    for (int64_t i = 0; i < 64; ++i) {
        if (std::abs(noise.data()[i]) > 0.1) {
            const double v = soft.data()[i];
            CHECK(std::min(v, 1.0 - v) < 1e-6);
        }
    }
}

TEST_CASE("entmax15 analytic cases") {
    Tensor p0 = entmax15(Tensor::from_data({2}, {0.0, 0.0}), 0);
    CHECK(p0.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p0.data()[1] == doctest::Approx(0.5).epsilon(1e-12));

    Tensor p1 = entmax15(Tensor::from_data({2}, {4.0, 0.0}), 0);
    CHECK(p1.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p1.data()[1] == 0.0);

    Tensor p2 = entmax15(Tensor::from_data({2}, {1.0, 0.0}), 0);
    CHECK(p2.data()[0] == doctest::Approx(0.8307).epsilon(1e-3));
    CHECK(p2.data()[1] == doctest::Approx(0.1693).epsilon(1e-3));
}

TEST_CASE("entmax15 matches bisection reference on random inputs") {
    Rng rng(2025);
    double worst = 0.0;
    for (int trial = 0; trial < 2000; ++trial) {
        const int n = 2 + static_cast<int>(rng.randint(9));
        std::vector<double> z(n);
        for (auto& v : z) v = rng.normal() * 3.0;
        Tensor p = entmax15(Tensor::from_data({n}, z), 0);
        const auto ref = oracles::entmax15_bisection(z);
        for (int i = 0; i < n; ++i) worst = std::max(worst, std::abs(p.data()[i] - ref[i]));
    }
    CHECK(worst < 1e-8);
}

TEST_CASE("entmax15 simplex and sparsity properties") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> z(6);
        for (auto& v : z) v = rng.normal() * 2.0;
        Tensor p = entmax15(Tensor::from_data({6}, z), 0);
        double s = 0.0;
        int support = 0;
        for (double v : p.data()) {
            CHECK(v >= 0.0);
            s += v;
            if (v > 0.0) ++support;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(support <= 6);  // never denser than softmax's full support

        // Permutation equivariance: reverse input, expect reversed output.
        std::vector<double> zr(z.rbegin(), z.rend());
        Tensor pr = entmax15(Tensor::from_data({6}, zr), 0);
        for (int i = 0; i < 6; ++i)
            CHECK(pr.data()[i] == doctest::Approx(p.data()[5 - i]).epsilon(1e-12));
    }
    // Strict sparsity exists: a wide gap zeroes the loser.
    Tensor ph = entmax15(Tensor::from_data({2}, {4.0, 0.0}), 0);
    CHECK(ph.data()[1] == 0.0);
}

TEST_CASE("entmax15 works along a middle axis") {
    Tensor x = Tensor::from_data({2, 2, 2}, {4, 1, 0, 1, 0, 0, 1, 4});
    Tensor p = entmax15(x, 1);  // slices are {4,0},{1,1},{0,1},{1,4}
    CHECK(p.at({0, 0, 0}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.at({0, 1, 0}) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(p.at({0, 0, 1}) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.at({1, 1, 1}) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("entmax15 backward matches finite differences at stable points") {
    Rng rng(31);
    std::vector<double> z(5), wv(5);
    for (auto& v : z) v = rng.normal() * 2.0;
    for (auto& v : wv) v = rng.uniform(-1, 1);
    Tensor w = Tensor::from_data({5}, wv);
    double err = grad_check(
        [&](const std::vector<Tensor>& in) { return sum(mul(entmax15(in[0], 0), w)); },
        {Tensor::from_data({5}, z)});
    CHECK(err < 1e-4);
}

TEST_CASE("softmax stability and gradient") {
    Tensor x = Tensor::from_data({2, 3}, {1000, 1001, 1002, -5, 0, 5});
    Tensor p = softmax(x, 1);
    for (int64_t r = 0; r < 2; ++r) {
        double s = 0;
        for (int64_t c = 0; c < 3; ++c) s += p.at({r, c});
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(p.at({0, 2}) == doctest::Approx(std::exp(2.0) / (1 + std::exp(1.0) + std::exp(2.0)))
                              .epsilon(1e-12));

    Rng rng(12);
    std::vector<double> z(8);
    for (auto& v : z) v = rng.normal();
    Tensor w = Tensor::from_data({2, 4}, {1, -2, 3, -4, 2, 0.5, -1, 1});
    double err = grad_check(
        [&](const std::vector<Tensor>& in) { return sum(mul(softmax(in[0], 1), w)); },
        {Tensor::from_data({2, 4}, z)});
    CHECK(err < 1e-5);
}

TEST_CASE("sinusoidal positional encoding") {
    Tensor pe = sinusoidal_pe(10, 50);
    CHECK(pe.shape() == Shape{10, 50});
    for (int64_t i = 0; i < 25; ++i) {
        CHECK(pe.at({0, 2 * i}) == 0.0);      // sin 0
        CHECK(pe.at({0, 2 * i + 1}) == 1.0);  // cos 0
    }
    for (double v : pe.data()) CHECK((v >= -1.0 && v <= 1.0));
    CHECK(sinusoidal_pe(10, 50).data() == pe.data());
    CHECK_THROWS_AS(sinusoidal_pe(4, 7), ContractError);
}

TEST_CASE("onecycle schedule shape") {
    const double max_lr = 0.25;
    const int64_t total = 1000;
    CHECK(onecycle_lr(0, total, max_lr) == doctest::Approx(max_lr / 25.0).epsilon(1e-12));
    CHECK(onecycle_lr(300, total, max_lr) == doctest::Approx(max_lr).epsilon(1e-12));
    CHECK(onecycle_lr(total, total, max_lr) == doctest::Approx(max_lr / 1e4).epsilon(1e-12));
    CHECK(onecycle_lr(total + 50, total, max_lr) == onecycle_lr(total, total, max_lr));
    double prev = onecycle_lr(0, total, max_lr);
    for (int64_t s = 1; s <= total; ++s) {
        const double cur = onecycle_lr(s, total, max_lr);
        CHECK(std::abs(cur - prev) < max_lr / 100.0);
        prev = cur;
    }
}

TEST_CASE("gumbel temperature schedule") {
    ScheduleConfig cfg;
    cfg.total_steps = 1000;
    cfg.tau_decay = default_tau_decay(cfg.tau0, cfg.tau_min, cfg.total_steps);
    cfg.validate();
    CHECK(gumbel_temperature(0, cfg) == cfg.tau0);
    CHECK(gumbel_temperature(600, cfg) == doctest::Approx(cfg.tau_min).epsilon(1e-9));
    CHECK(gumbel_temperature(100000, cfg) == cfg.tau_min);
    double prev = gumbel_temperature(0, cfg);
    for (int64_t s = 1; s < 1200; s += 7) {
        const double cur = gumbel_temperature(s, cfg);
        CHECK(cur <= prev + 1e-15);
        prev = cur;
    }
    ScheduleConfig bad = cfg;
    bad.tau_min = 0.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("adamw first-step magnitude and decoupled decay") {
    Tensor w = Tensor::from_data({1}, {0.0});
    Optimizer opt = Optimizer::adamw(1e-3, 0.9, 0.999, 1e-8, 0.0);
    opt.add_param("w", w);
    w.impl()->grad = {1.0};
    opt.step();
    CHECK(w.data()[0] == doctest::Approx(-1e-3).epsilon(1e-7));

    Tensor w2 = Tensor::from_data({1}, {1.0});
    Optimizer opt2 = Optimizer::adamw(1e-3, 0.9, 0.999, 1e-8, 0.01);
    opt2.add_param("w", w2);
    opt2.step();  // no gradient: pure decoupled decay
    CHECK(w2.data()[0] == doctest::Approx(1.0 - 1e-3 * 0.01).epsilon(1e-12));
}

TEST_CASE("zero gradient and zero weight decay leave parameters unchanged") {
    Tensor wa = Tensor::from_data({2}, {0.3, -0.7});
    Optimizer a = Optimizer::adamw(1e-3, 0.9, 0.999, 1e-8, 0.0);
    a.add_param("wa", wa);
    a.step();
    CHECK(wa.data() == std::vector<double>{0.3, -0.7});

    Tensor wd = Tensor::from_data({2}, {0.3, -0.7});
    Optimizer d = Optimizer::adadelta();
    d.add_param("wd", wd);
    d.step();
    CHECK(wd.data() == std::vector<double>{0.3, -0.7});
}

TEST_CASE("both optimizers descend a convex quadratic monotonically") {
    auto run = [](Optimizer opt) {
        Tensor w = Tensor::from_data({3}, {2.0, -1.5, 0.7}, true);
        Tensor target = Tensor::from_data({3}, {-0.4, 0.9, 0.1});
        opt.add_param("w", w);
        double prev = 1e300;
        for (int step = 0; step < 100; ++step) {
            opt.zero_grad();
            Tensor d = sub(w, target);
            Tensor loss = sum(mul(d, d));
            backward(loss);
            CHECK(loss.item() <= prev + 1e-12);
            prev = loss.item();
            opt.step();
        }
    };
    run(Optimizer::adamw(1e-3, 0.9, 0.999, 1e-8, 0.0));
    run(Optimizer::adadelta(0.25, 0.95, 1e-6));
}

TEST_CASE("optimizer rejects non-finite gradients by parameter name") {
    Tensor w = Tensor::from_data({1}, {1.0});
    Optimizer opt = Optimizer::adamw();
    opt.add_param("conv1.weight", w);
    w.impl()->grad = {std::numeric_limits<double>::infinity()};
    CHECK_THROWS_WITH_AS(opt.step(), "optimizer: non-finite gradient for parameter conv1.weight",
                         NumericError);
}
