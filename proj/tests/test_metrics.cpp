#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "metrics/metrics.hpp"

using namespace xcb;

TEST_CASE("macro f1 closed forms") {
    // Perfect predictions over all classes.
    CHECK(macro_f1({0, 1, 2, 0}, {0, 1, 2, 0}, 3) == doctest::Approx(1.0).epsilon(1e-15));

    // Binary task, constant 0 predictor on a balanced set:
    // class 0 has F1 = 2/3, class 1 has F1 = 0, macro = 1/3.
    CHECK(macro_f1({0, 0, 0, 0}, {0, 0, 1, 1}, 2) ==
          doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    // A class absent from predictions and labels contributes 0.
    CHECK(macro_f1({0, 1}, {0, 1}, 3) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    const auto per = per_class_f1({0, 0, 0, 0}, {0, 0, 1, 1}, 2);
    REQUIRE(per.size() == 2);
    CHECK(per[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(per[1] == 0.0);
}

TEST_CASE("macro f1 is invariant to sample order and validates input") {
    std::vector<int64_t> preds = {0, 1, 2, 1, 0, 2, 2, 1};
    std::vector<int64_t> labels = {0, 2, 2, 1, 1, 2, 0, 1};
    const double base = macro_f1(preds, labels, 3);

    Rng rng(91);
    for (size_t i = preds.size(); i > 1; --i) {
        const auto j = static_cast<size_t>(rng.randint(static_cast<int64_t>(i)));
        std::swap(preds[i - 1], preds[j]);
        std::swap(labels[i - 1], labels[j]);
    }
    CHECK(macro_f1(preds, labels, 3) == base);

    CHECK_THROWS_AS(macro_f1({}, {}, 2), ContractError);
    CHECK_THROWS_AS(macro_f1({0}, {0, 1}, 2), ContractError);
    CHECK_THROWS_AS(macro_f1({2}, {0}, 2), ContractError);
    CHECK_THROWS_AS(macro_f1({0}, {-1}, 2), ContractError);
}

namespace {

Tensor random_features(int64_t n, int64_t l, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(n * l));
    for (auto& x : v) x = rng.normal() * 1.5 + rng.uniform(-1.0, 1.0);
    return Tensor::from_data({n, l}, std::move(v));
}

}  // namespace

TEST_CASE("lasso with zero penalty recovers an exact linear model") {
    Rng rng(7);
    const int64_t n = 80, l = 4;
    Tensor f = random_features(n, l, rng);
    const std::vector<double> w_true = {1.5, -2.0, 0.0, 0.75};
    const double b_true = 0.3;
    std::vector<double> y(static_cast<size_t>(n), b_true);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < l; ++j)
            y[static_cast<size_t>(i)] +=
                w_true[static_cast<size_t>(j)] * f.data()[static_cast<size_t>(i * l + j)];

    const LassoFit fit = fit_lasso(f, y, 0.0);
    for (int64_t j = 0; j < l; ++j)
        CHECK(fit.weights[static_cast<size_t>(j)] ==
              doctest::Approx(w_true[static_cast<size_t>(j)]).epsilon(1e-6));
    CHECK(fit.intercept == doctest::Approx(b_true).epsilon(1e-6));
    CHECK(fit.sweeps >= 1);
}

TEST_CASE("lasso saturates to the null model under a huge penalty") {
    Rng rng(11);
    Tensor f = random_features(50, 3, rng);
    std::vector<double> y(50);
    for (auto& v : y) v = rng.uniform(-2.0, 5.0);
    const double ybar = std::accumulate(y.begin(), y.end(), 0.0) / 50.0;

    const LassoFit fit = fit_lasso(f, y, 1e3);
    for (double w : fit.weights) CHECK(w == 0.0);
    for (double w : fit.std_weights) CHECK(w == 0.0);
    CHECK(fit.intercept == doctest::Approx(ybar).epsilon(1e-12));
}

TEST_CASE("lasso solution satisfies the KKT conditions in standardized space") {
    Rng rng(23);
    const int64_t n = 120, l = 6;
    Tensor f = random_features(n, l, rng);
    std::vector<double> y(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const auto* row = f.data().data() + i * l;
        y[static_cast<size_t>(i)] = 2.0 * row[0] - 1.2 * row[3] + 0.3 * rng.normal();
    }
    const double lambda = 0.05;
    const LassoFit fit = fit_lasso(f, y, lambda);

    // Recompute the standardized design and residual independently.
    std::vector<double> mean(static_cast<size_t>(l), 0.0), sd(static_cast<size_t>(l), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < l; ++j) mean[static_cast<size_t>(j)] += f.data()[static_cast<size_t>(i * l + j)];
    for (auto& v : mean) v /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < l; ++j) {
            const double d = f.data()[static_cast<size_t>(i * l + j)] - mean[static_cast<size_t>(j)];
            sd[static_cast<size_t>(j)] += d * d;
        }
    for (auto& v : sd) v = std::sqrt(v / static_cast<double>(n));

    std::vector<double> resid(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double pred = fit.intercept;
        for (int64_t j = 0; j < l; ++j)
            pred += fit.weights[static_cast<size_t>(j)] * f.data()[static_cast<size_t>(i * l + j)];
        resid[static_cast<size_t>(i)] = y[static_cast<size_t>(i)] - pred;
    }
    for (int64_t j = 0; j < l; ++j) {
        double corr = 0.0;
        for (int64_t i = 0; i < n; ++i)
            corr += (f.data()[static_cast<size_t>(i * l + j)] - mean[static_cast<size_t>(j)]) /
                    sd[static_cast<size_t>(j)] * resid[static_cast<size_t>(i)];
        corr /= static_cast<double>(n);
        const double w = fit.std_weights[static_cast<size_t>(j)];
        if (w == 0.0)
            CHECK(std::abs(corr) <= lambda + 1e-6);
        else
            CHECK(corr == doctest::Approx(lambda * (w > 0 ? 1.0 : -1.0)).epsilon(1e-6));
    }

    for (size_t s = 1; s < fit.objective_trace.size(); ++s)
        CHECK(fit.objective_trace[s] <= fit.objective_trace[s - 1] + 1e-12);
}

TEST_CASE("lasso input validation and convergence guard") {
    Rng rng(3);
    Tensor f = random_features(40, 5, rng);
    std::vector<double> y(40);
    for (int64_t i = 0; i < 40; ++i) {
        const auto* row = f.data().data() + i * 5;
        y[static_cast<size_t>(i)] = row[0] + row[1] + row[2];
    }
    CHECK_THROWS_AS(fit_lasso(f, y, 0.001, 1), NumericError);
    CHECK_THROWS_AS(fit_lasso(Tensor::zeros({40}), y, 0.1), DimensionError);
    CHECK_THROWS_AS(fit_lasso(f, std::vector<double>(39, 0.0), 0.1), ContractError);
    CHECK_THROWS_AS(fit_lasso(f, y, -0.1), ContractError);
    std::vector<double> bad = y;
    bad[0] = std::nan("");
    CHECK_THROWS_AS(fit_lasso(f, bad, 0.1), NumericError);

    // Constant features are dropped rather than dividing by a zero sd.
    Tensor constant = Tensor::ones({40, 2});
    const LassoFit fit = fit_lasso(constant, y, 0.01);
    CHECK(fit.weights[0] == 0.0);
    CHECK(fit.weights[1] == 0.0);
}

TEST_CASE("dci analytic matrices") {
    const DciReport ident = dci_from_importance(Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0}));
    CHECK(std::abs(ident.disentanglement - 1.0) <= 1e-12);
    CHECK(std::abs(ident.completeness - 1.0) <= 1e-12);

    const DciReport uniform = dci_from_importance(Tensor::ones({2, 2}));
    CHECK(std::abs(uniform.disentanglement) <= 1e-12);
    CHECK(std::abs(uniform.completeness) <= 1e-12);

    const DciReport mixed = dci_from_importance(Tensor::from_data({2, 2}, {1.0, 1.0, 0.0, 2.0}));
    CHECK(std::abs(mixed.disentanglement - 0.5) <= 1e-12);
    // Columns: [1,0] is pure, [1,2] has entropy H(1/3,2/3).
    const double h = -(1.0 / 3.0) * std::log(1.0 / 3.0) - (2.0 / 3.0) * std::log(2.0 / 3.0);
    const double c_expected = (1.0 + (1.0 - h / std::log(2.0))) / 2.0;
    CHECK(mixed.completeness == doctest::Approx(c_expected).epsilon(1e-12));
    CHECK(mixed.per_factor_d[0] == doctest::Approx(0.0));
    CHECK(mixed.per_factor_d[1] == doctest::Approx(1.0));
    CHECK(mixed.factor_weights[0] == doctest::Approx(0.5));
}

TEST_CASE("dci handles dead factors, degenerate bases and permutations") {
    const DciReport rep =
        dci_from_importance(Tensor::from_data({3, 2}, {0.0, 0.0, 1.0, 1.0, 0.0, 2.0}));
    CHECK(rep.per_factor_d[0] == 0.0);
    CHECK(rep.factor_weights[0] == 0.0);
    CHECK(std::abs(rep.disentanglement - 0.5) <= 1e-12);

    // A single attribute makes every live factor perfectly disentangled.
    const DciReport single = dci_from_importance(Tensor::from_data({2, 1}, {2.0, 3.0}));
    CHECK(single.per_factor_d[0] == doctest::Approx(1.0));
    CHECK(single.per_factor_d[1] == doctest::Approx(1.0));
    CHECK(std::abs(single.disentanglement - 1.0) <= 1e-12);
    const double h = -0.4 * std::log(0.4) - 0.6 * std::log(0.6);
    CHECK(single.completeness == doctest::Approx(1.0 - h / std::log(2.0)).epsilon(1e-12));

    // Permuting factor rows leaves both scores unchanged.
    Rng rng(5);
    std::vector<double> base(4 * 3);
    for (auto& v : base) v = rng.uniform(0.0, 2.0);
    const DciReport a = dci_from_importance(Tensor::from_data({4, 3}, base));
    std::vector<double> permuted(base.size());
    const std::vector<int64_t> order = {2, 0, 3, 1};
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 3; ++j)
            permuted[static_cast<size_t>(i * 3 + j)] =
                base[static_cast<size_t>(order[static_cast<size_t>(i)] * 3 + j)];
    const DciReport b = dci_from_importance(Tensor::from_data({4, 3}, permuted));
    CHECK(a.disentanglement == doctest::Approx(b.disentanglement).epsilon(1e-12));
    CHECK(a.completeness == doctest::Approx(b.completeness).epsilon(1e-12));

    CHECK_THROWS_AS(dci_from_importance(Tensor::from_data({1, 2}, {1.0, -0.5})), ContractError);
    CHECK_THROWS_AS(dci_from_importance(Tensor::ones({4})), DimensionError);
}

namespace {

struct DciFixture {
    Tensor repr_train, attr_train, repr_test, attr_test;
};

// Binary attributes with a representation that either mirrors them (aligned)
// or ignores them (noise).
DciFixture make_dci_data(bool aligned, uint64_t seed) {
    Rng rng(seed);
    const int64_t n_train = 400, n_test = 200, l = 4, k = 2;
    DciFixture fx;
    auto make = [&](int64_t n, Tensor& repr, Tensor& attr) {
        std::vector<double> a(static_cast<size_t>(n * k));
        for (auto& v : a) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
        std::vector<double> r(static_cast<size_t>(n * l));
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < l; ++j) {
                double v = 0.1 * rng.normal();
                if (aligned && j < k) v += a[static_cast<size_t>(i * k + j)];
                r[static_cast<size_t>(i * l + j)] = v;
            }
        repr = Tensor::from_data({n, l}, std::move(r));
        attr = Tensor::from_data({n, k}, std::move(a));
    };
    make(n_train, fx.repr_train, fx.attr_train);
    make(n_test, fx.repr_test, fx.attr_test);
    return fx;
}

}  // namespace

TEST_CASE("dci pipeline separates aligned from uninformative representations") {
    const DciFixture aligned = make_dci_data(true, 31);
    const DciReport good = dci(aligned.repr_train, aligned.attr_train, aligned.repr_test,
                               aligned.attr_test);
    CHECK(good.disentanglement > 0.9);
    CHECK(good.completeness > 0.9);
    CHECK(good.informativeness < 0.3);
    for (double v : good.per_attribute_rmse) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    const DciFixture noise = make_dci_data(false, 32);
    const DciReport bad =
        dci(noise.repr_train, noise.attr_train, noise.repr_test, noise.attr_test);
    CHECK(bad.informativeness > 0.85);

    Tensor half = Tensor::from_data({2, 1}, {0.5, 1.0});
    CHECK_THROWS_AS(dci(aligned.repr_train, half, aligned.repr_test, half), ContractError);
    CHECK_THROWS_AS(dci(aligned.repr_train, aligned.attr_train, Tensor::ones({10, 9}),
                        aligned.attr_test),
                    DimensionError);
}

TEST_CASE("integrated gradients is exact for linear scores") {
    const Tensor w = Tensor::from_data({4}, {0.5, -1.0, 2.0, 0.25});
    auto score = [&w](const Tensor& x) { return add_scalar(sum(mul(x, w)), 3.0); };

    const Tensor image = Tensor::from_data({4}, {1.0, 0.5, -0.5, 2.0});
    const Tensor baseline = Tensor::from_data({4}, {0.0, 1.0, 0.0, -1.0});
    for (int64_t steps : {1, 7}) {
        const AttributionMap map = integrated_gradients_fn(score, image, baseline, steps);
        double total = 0.0;
        for (int64_t i = 0; i < 4; ++i) {
            const double expected =
                w.data()[static_cast<size_t>(i)] *
                (image.data()[static_cast<size_t>(i)] - baseline.data()[static_cast<size_t>(i)]);
            CHECK(map.values.data()[static_cast<size_t>(i)] ==
                  doctest::Approx(expected).epsilon(1e-12));
            total += map.values.data()[static_cast<size_t>(i)];
        }
        CHECK(total == doctest::Approx(map.score_input - map.score_baseline).epsilon(1e-12));
        CHECK(map.steps == steps);
        CHECK(map.spatial.shape() == Shape{4});
    }

    const AttributionMap trivial = integrated_gradients_fn(score, image, image, 3);
    for (double v : trivial.values.data()) CHECK(v == 0.0);
    CHECK(trivial.score_input == doctest::Approx(trivial.score_baseline).epsilon(1e-12));

    CHECK_THROWS_AS(integrated_gradients_fn(score, image, baseline, 0), ContractError);
    CHECK_THROWS_AS(integrated_gradients_fn(score, image, Tensor::zeros({5}), 4),
                    DimensionError);
}

TEST_CASE("integrated gradients on a model leaves parameters untouched") {
    ModelConfig cfg;
    cfg.kind = ModelKind::standard;
    cfg.resolution = 16;
    Model m(cfg, 5);

    Rng rng(41);
    std::vector<double> img(3 * 16 * 16);
    for (auto& v : img) v = rng.uniform();
    const Tensor image = Tensor::from_data({3, 16, 16}, std::move(img));
    const Tensor baseline = white_baseline(16);
    CHECK(baseline.shape() == Shape{3, 16, 16});
    for (double v : baseline.data()) CHECK(v == 1.0);

    const AttributionMap map = integrated_gradients(m, image, baseline, 256, 2);
    CHECK(map.values.shape() == Shape{3, 16, 16});
    CHECK(map.spatial.shape() == Shape{16, 16});
    CHECK(map.target_class == 2);
    for (int64_t i = 0; i < 256; ++i) {
        double channel_sum = 0.0;
        for (int64_t c = 0; c < 3; ++c)
            channel_sum += map.values.data()[static_cast<size_t>(c * 256 + i)];
        CHECK(map.spatial.data()[static_cast<size_t>(i)] ==
              doctest::Approx(channel_sum).epsilon(1e-12));
    }

    // The Riemann sum approximately satisfies the completeness axiom on a
    // smooth trained-from-init network.
    double total = 0.0;
    for (double v : map.values.data()) total += v;
    const double delta = map.score_input - map.score_baseline;
    CHECK(std::abs(total - delta) <= 0.05 * std::max(std::abs(delta), 1e-6));

    // Attribution must not leak gradients into, or unfreeze, the parameters.
    for (const auto& [name, t] : m.params()) {
        CHECK(!t.has_grad());
        if (name.rfind("norm.", 0) != 0) CHECK(t.requires_grad());
    }

    ModelConfig xcfg;
    xcfg.kind = ModelKind::xcb;
    xcfg.resolution = 16;
    Model xm(xcfg, 9);
    const AttributionMap xmap = integrated_gradients(xm, image, baseline, 4, 0, 0.7);
    CHECK(xmap.values.shape() == Shape{3, 16, 16});

    CHECK_THROWS_AS(integrated_gradients(m, image, baseline, 8, 9), ContractError);
    CHECK_THROWS_AS(integrated_gradients(m, Tensor::ones({3, 32, 32}), baseline, 8, 0),
                    DimensionError);
}

TEST_CASE("shortcut attribution share") {
    // Uniform attribution over a 64x64 map: the 12x16 corner box holds
    // 192 of 4096 spatial cells.
    AttributionMap uniform;
    uniform.values = Tensor::ones({3, 64, 64});
    const AttributionShare u = shortcut_attribution_share(uniform);
    CHECK(u.value == doctest::Approx(192.0 / 4096.0).epsilon(1e-15));
    CHECK(!u.zero_total);

    AttributionMap corner;
    {
        std::vector<double> v(3 * 64 * 64, 0.0);
        v[5 * 64 + 3] = 2.5;                   // channel 0, row 5, col 3
        v[64 * 64 + 15 * 64 + 11] = -1.0;      // channel 1, row 15, col 11: abs counts
        corner.values = Tensor::from_data({3, 64, 64}, std::move(v));
    }
    CHECK(shortcut_attribution_share(corner).value == doctest::Approx(1.0).epsilon(1e-15));

    AttributionMap outside = corner;
    {
        std::vector<double> v = corner.values.data();
        v[16 * 64 + 0] = 3.5;  // row 16 sits just below the box
        outside.values = Tensor::from_data({3, 64, 64}, std::move(v));
    }
    CHECK(shortcut_attribution_share(outside).value == doctest::Approx(0.5).epsilon(1e-12));

    // Rescaling the map leaves the ratio unchanged.
    AttributionMap scaled;
    scaled.values = scale(outside.values, 3.7);
    CHECK(shortcut_attribution_share(scaled).value ==
          doctest::Approx(shortcut_attribution_share(outside).value).epsilon(1e-12));

    AttributionMap zero;
    zero.values = Tensor::zeros({3, 8, 8});
    const AttributionShare z = shortcut_attribution_share(zero, 4, 4);
    CHECK(z.zero_total);
    CHECK(z.value == 0.0);

    CHECK_THROWS_AS(shortcut_attribution_share(zero), ContractError);  // box exceeds 8x8
    CHECK_THROWS_AS(shortcut_attribution_share(AttributionMap{}), ContractError);
}

namespace {

ConceptReport make_report() {
    ConceptReport report;
    report.bottleneck = 3;
    const std::vector<std::vector<std::pair<std::string, double>>> tokens = {
        {{"red", 1.0}, {"crimson", 0.4}},
        {{"square", 1.0}, {"box", 0.25}},
        {{"tiny", 1.0}},
    };
    for (int64_t f = 0; f < 3; ++f) {
        FactorReport fr;
        fr.factor = f;
        int64_t id = 1;
        for (const auto& [tok, psi] : tokens[static_cast<size_t>(f)]) {
            TokenScore ts;
            ts.token_id = id++;
            ts.token = tok;
            ts.score = psi * 0.8;
            ts.psi = psi;
            fr.tokens.push_back(ts);
        }
        fr.active_examples = {0, 1, 2, 3, 4};
        report.factors.push_back(std::move(fr));
    }
    return report;
}

}  // namespace

TEST_CASE("survey questions carry one distractor and score by psi") {
    const ConceptReport report = make_report();
    const Dataset data = generate_dataset(12, 77, 32);

    Rng rng(13);
    const auto questions = survey_generate(report, data, 6, rng);
    REQUIRE(questions.size() == 6);

    std::vector<int64_t> pick_distractor, pick_best, pick_weak;
    for (const auto& q : questions) {
        CHECK(q.factor >= 0);
        CHECK(q.factor < 3);
        CHECK(!q.image_ids.empty());
        CHECK(q.image_ids.size() <= 4);
        for (int64_t id : q.image_ids) {
            CHECK(id >= 0);
            CHECK(id < data.n());
        }

        int64_t distractors = 0, zero_psi = 0, best = -1, weak = -1;
        for (size_t i = 0; i < q.options.size(); ++i) {
            const auto& o = q.options[i];
            if (o.distractor) ++distractors;
            if (o.psi == 0.0) ++zero_psi;
            if (o.psi == 1.0) best = static_cast<int64_t>(i);
            if (o.psi > 0.0 && o.psi < 1.0) weak = static_cast<int64_t>(i);
        }
        CHECK(distractors == 1);
        CHECK(zero_psi == 1);
        REQUIRE(best >= 0);
        pick_best.push_back(best);
        pick_weak.push_back(weak);
        int64_t d = -1;
        for (size_t i = 0; i < q.options.size(); ++i)
            if (q.options[i].distractor) d = static_cast<int64_t>(i);
        pick_distractor.push_back(d);
    }

    CHECK(survey_score(pick_distractor, questions) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(survey_score(pick_best, questions) == doctest::Approx(0.0).epsilon(1e-15));

    // Picking the weaker token where it exists scores 1 - psi for that factor.
    std::vector<int64_t> blended;
    double expected = 0.0;
    for (size_t i = 0; i < questions.size(); ++i) {
        if (pick_weak[i] >= 0) {
            blended.push_back(pick_weak[i]);
            expected += 1.0 - questions[i].options[static_cast<size_t>(pick_weak[i])].psi;
        } else {
            blended.push_back(pick_best[i]);
        }
    }
    expected /= static_cast<double>(questions.size());
    CHECK(survey_score(blended, questions) == doctest::Approx(expected).epsilon(1e-12));

    // Same seed, same questions.
    Rng r1(99), r2(99);
    CHECK(survey_to_json(survey_generate(report, data, 4, r1)) ==
          survey_to_json(survey_generate(report, data, 4, r2)));
}

TEST_CASE("survey validation and serialization") {
    const ConceptReport report = make_report();
    const Dataset data = generate_dataset(12, 77, 32);
    Rng rng(1);

    const auto questions = survey_generate(report, data, 3, rng);
    const auto round = survey_from_json(survey_to_json(questions));
    REQUIRE(round.size() == questions.size());
    for (size_t i = 0; i < round.size(); ++i) {
        CHECK(round[i].factor == questions[i].factor);
        CHECK(round[i].image_ids == questions[i].image_ids);
        REQUIRE(round[i].options.size() == questions[i].options.size());
        for (size_t j = 0; j < round[i].options.size(); ++j) {
            CHECK(round[i].options[j].token == questions[i].options[j].token);
            CHECK(round[i].options[j].psi == questions[i].options[j].psi);
            CHECK(round[i].options[j].distractor == questions[i].options[j].distractor);
        }
    }

    CHECK(answers_from_json("[0, 2, 1]") == std::vector<int64_t>{0, 2, 1});
    CHECK(answers_from_json("{\"answers\": [1]}") == std::vector<int64_t>{1});
    CHECK_THROWS_AS(answers_from_json("{}"), ParseError);
    CHECK_THROWS_AS(answers_from_json("[0, \"x\"]"), ParseError);
    CHECK_THROWS_AS(survey_from_json("{\"factor\": 0}"), ParseError);
    CHECK_THROWS_AS(survey_from_json("[{\"factor\": 0}]"), ParseError);

    CHECK_THROWS_AS(survey_score({0}, questions), ContractError);
    CHECK_THROWS_AS(survey_score({0, 0, 99}, questions), ContractError);
    CHECK_THROWS_AS(survey_score({0, 0, -1}, questions), ContractError);
    CHECK_THROWS_AS(survey_score({}, {}), ContractError);

    ConceptReport lone;
    lone.bottleneck = 1;
    lone.factors.push_back(report.factors[0]);
    CHECK_THROWS_AS(survey_generate(lone, data, 1, rng), ContractError);

    ConceptReport unscored = report;
    for (auto& fr : unscored.factors)
        for (auto& ts : fr.tokens) ts.psi = 0.0;
    CHECK_THROWS_AS(survey_generate(unscored, data, 1, rng), ContractError);

    ConceptReport stale = report;
    stale.factors[0].active_examples = {999};
    CHECK_THROWS_AS(survey_generate(stale, data, 3, rng), ContractError);
    CHECK_THROWS_AS(survey_generate(report, data, 0, rng), ContractError);
}

TEST_CASE("attribution serialization") {
    AttributionMap map;
    map.values = Tensor::from_data({3, 2, 2}, {1.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0,
                                               -0.5, 0.0, 0.0, 1.0});
    map.spatial = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});

    const std::string csv = attribution_csv(map);
    CHECK(csv == "1,0\n0,1\n");

    const std::string dir = "/tmp/xcb_metrics_test";
    std::filesystem::create_directories(dir);
    write_attribution_pgm(map, dir + "/map.pgm");
    const std::string pgm = read_file(dir + "/map.pgm");
    CHECK(pgm == "P2\n2 2\n255\n255 0\n0 255\n");

    const std::string imp = importance_csv(Tensor::from_data({2, 2}, {1.0, 0.0, 0.25, 0.5}));
    CHECK(imp == "factor,attr0,attr1\n0,1,0\n1,0.25,0.5\n");

    const DciReport rep = dci_from_importance(Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0}));
    const std::string js = dci_to_json(rep);
    CHECK(js.find("\"disentanglement\": 1.0") != std::string::npos);
    CHECK(js.find("\"importance\"") != std::string::npos);
}
