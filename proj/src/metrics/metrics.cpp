#include "metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

using nlohmann::json;

namespace xcb {

std::vector<double> per_class_f1(const std::vector<int64_t>& predictions,
                                 const std::vector<int64_t>& labels, int64_t num_classes) {
    if (predictions.empty()) throw ContractError("f1: empty input");
    if (predictions.size() != labels.size())
        throw ContractError("f1: " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(labels.size()) + " labels");
    if (num_classes < 1) throw ContractError("f1: need at least one class");
    std::vector<int64_t> tp(static_cast<size_t>(num_classes), 0);
    std::vector<int64_t> fp(static_cast<size_t>(num_classes), 0);
    std::vector<int64_t> fn(static_cast<size_t>(num_classes), 0);
    for (size_t i = 0; i < predictions.size(); ++i) {
        const int64_t p = predictions[i], y = labels[i];
        if (p < 0 || p >= num_classes || y < 0 || y >= num_classes)
            throw ContractError("f1: class id outside [0," + std::to_string(num_classes) + ")");
        if (p == y)
            ++tp[static_cast<size_t>(p)];
        else {
            ++fp[static_cast<size_t>(p)];
            ++fn[static_cast<size_t>(y)];
        }
    }
    std::vector<double> f1(static_cast<size_t>(num_classes), 0.0);
    for (size_t c = 0; c < f1.size(); ++c) {
        const int64_t denom = 2 * tp[c] + fp[c] + fn[c];
        f1[c] = denom > 0 ? 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom) : 0.0;
    }
    return f1;
}

double macro_f1(const std::vector<int64_t>& predictions, const std::vector<int64_t>& labels,
                int64_t num_classes) {
    const std::vector<double> f1 = per_class_f1(predictions, labels, num_classes);
    return std::accumulate(f1.begin(), f1.end(), 0.0) / static_cast<double>(f1.size());
}

LassoFit fit_lasso(const Tensor& features, const std::vector<double>& target, double lambda,
                   int64_t max_sweeps) {
    if (features.ndim() != 2)
        throw DimensionError("lasso: features must be [N,L], got " + shape_str(features.shape()));
    const int64_t n = features.dim(0), l = features.dim(1);
    if (n < 1 || l < 1) throw ContractError("lasso: empty feature matrix");
    if (static_cast<int64_t>(target.size()) != n)
        throw ContractError("lasso: " + std::to_string(target.size()) + " targets for " +
                            std::to_string(n) + " rows");
    if (lambda < 0.0 || !std::isfinite(lambda))
        throw ContractError("lasso: lambda must be finite and >= 0");
    if (max_sweeps < 1) throw ContractError("lasso: max_sweeps must be >= 1");
    for (double v : features.data())
        if (!std::isfinite(v)) throw NumericError("lasso: non-finite feature value");
    for (double v : target)
        if (!std::isfinite(v)) throw NumericError("lasso: non-finite target value");

    const auto& x = features.data();
    const auto nn = static_cast<size_t>(n), ll = static_cast<size_t>(l);
    std::vector<double> mean(ll, 0.0), sd(ll, 0.0);
    for (size_t i = 0; i < nn; ++i)
        for (size_t j = 0; j < ll; ++j) mean[j] += x[i * ll + j];
    for (auto& v : mean) v /= static_cast<double>(n);
    for (size_t i = 0; i < nn; ++i)
        for (size_t j = 0; j < ll; ++j) {
            const double d = x[i * ll + j] - mean[j];
            sd[j] += d * d;
        }
    for (auto& v : sd) v = std::sqrt(v / static_cast<double>(n));

    std::vector<double> xs(nn * ll, 0.0);
    for (size_t j = 0; j < ll; ++j) {
        if (sd[j] < 1e-12) continue;  // constant feature carries no signal
        for (size_t i = 0; i < nn; ++i) xs[i * ll + j] = (x[i * ll + j] - mean[j]) / sd[j];
    }
    const double ybar =
        std::accumulate(target.begin(), target.end(), 0.0) / static_cast<double>(n);
    std::vector<double> resid(nn);
    for (size_t i = 0; i < nn; ++i) resid[i] = target[i] - ybar;

    std::vector<double> colsq(ll, 0.0);
    for (size_t j = 0; j < ll; ++j) {
        for (size_t i = 0; i < nn; ++i) colsq[j] += xs[i * ll + j] * xs[i * ll + j];
        colsq[j] /= static_cast<double>(n);
    }

    LassoFit fit;
    fit.std_weights.assign(ll, 0.0);
    auto& w = fit.std_weights;
    bool converged = false;
    while (fit.sweeps < max_sweeps && !converged) {
        double max_delta = 0.0;
        for (size_t j = 0; j < ll; ++j) {
            if (colsq[j] <= 0.0) continue;
            double corr = 0.0;
            for (size_t i = 0; i < nn; ++i) corr += xs[i * ll + j] * resid[i];
            const double rho = corr / static_cast<double>(n) + colsq[j] * w[j];
            double wnew = 0.0;
            if (rho > lambda)
                wnew = (rho - lambda) / colsq[j];
            else if (rho < -lambda)
                wnew = (rho + lambda) / colsq[j];
            const double delta = wnew - w[j];
            if (delta != 0.0) {
                for (size_t i = 0; i < nn; ++i) resid[i] -= xs[i * ll + j] * delta;
                w[j] = wnew;
            }
            max_delta = std::max(max_delta, std::abs(delta));
        }
        ++fit.sweeps;
        double obj = 0.0;
        for (double r : resid) obj += r * r;
        obj /= 2.0 * static_cast<double>(n);
        for (double v : w) obj += lambda * std::abs(v);
        fit.objective_trace.push_back(obj);
        converged = max_delta < 1e-8;
        if (!converged && fit.sweeps == max_sweeps)
            throw NumericError("lasso: no convergence after " + std::to_string(max_sweeps) +
                               " sweeps (last max coordinate change " + std::to_string(max_delta) +
                               ")");
    }

    fit.weights.assign(ll, 0.0);
    for (size_t j = 0; j < ll; ++j)
        if (sd[j] >= 1e-12) fit.weights[j] = w[j] / sd[j];
    fit.intercept = ybar;
    for (size_t j = 0; j < ll; ++j) fit.intercept -= fit.weights[j] * mean[j];
    return fit;
}

namespace {

// Entropy of a nonnegative vector normalized to the given log base; bases
// below 2 carry no uncertainty, so the normalized entropy is 0.
double normalized_entropy(const double* p, int64_t n, int64_t base) {
    if (base < 2) return 0.0;
    double h = 0.0;
    for (int64_t i = 0; i < n; ++i)
        if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    return h / std::log(static_cast<double>(base));
}

}  // namespace

DciReport dci_from_importance(const Tensor& importance) {
    if (importance.ndim() != 2)
        throw DimensionError("dci: importance must be [L,K], got " +
                             shape_str(importance.shape()));
    const int64_t l = importance.dim(0), k = importance.dim(1);
    const auto& r = importance.data();
    for (double v : r)
        if (v < 0.0 || !std::isfinite(v))
            throw ContractError("dci: importance entries must be finite and >= 0");

    DciReport report;
    report.importance = importance;
    report.per_factor_d.assign(static_cast<size_t>(l), 0.0);
    report.factor_weights.assign(static_cast<size_t>(l), 0.0);
    report.per_attribute_c.assign(static_cast<size_t>(k), 0.0);

    const double total = std::accumulate(r.begin(), r.end(), 0.0);
    std::vector<double> p(static_cast<size_t>(std::max(l, k)));
    for (int64_t i = 0; i < l; ++i) {
        double row = 0.0;
        for (int64_t j = 0; j < k; ++j) row += r[static_cast<size_t>(i * k + j)];
        if (row <= 0.0) continue;  // dead factor: D_i = 0 with zero weight
        for (int64_t j = 0; j < k; ++j) p[static_cast<size_t>(j)] = r[static_cast<size_t>(i * k + j)] / row;
        report.per_factor_d[static_cast<size_t>(i)] = 1.0 - normalized_entropy(p.data(), k, k);
        report.factor_weights[static_cast<size_t>(i)] = row / total;
        report.disentanglement += report.factor_weights[static_cast<size_t>(i)] *
                                  report.per_factor_d[static_cast<size_t>(i)];
    }
    for (int64_t j = 0; j < k; ++j) {
        double col = 0.0;
        for (int64_t i = 0; i < l; ++i) col += r[static_cast<size_t>(i * k + j)];
        if (col <= 0.0) continue;  // unexplained attribute contributes C_k = 0
        for (int64_t i = 0; i < l; ++i) p[static_cast<size_t>(i)] = r[static_cast<size_t>(i * k + j)] / col;
        report.per_attribute_c[static_cast<size_t>(j)] = 1.0 - normalized_entropy(p.data(), l, l);
        report.completeness += report.per_attribute_c[static_cast<size_t>(j)];
    }
    report.completeness /= static_cast<double>(k);
    return report;
}

DciReport dci(const Tensor& repr_train, const Tensor& attr_train, const Tensor& repr_test,
              const Tensor& attr_test, double lambda) {
    if (repr_train.ndim() != 2 || attr_train.ndim() != 2 || repr_test.ndim() != 2 ||
        attr_test.ndim() != 2)
        throw DimensionError("dci: representations and attributes must be 2-D");
    const int64_t l = repr_train.dim(1), k = attr_train.dim(1);
    if (repr_test.dim(1) != l)
        throw DimensionError("dci: train has " + std::to_string(l) + " factors, test " +
                             std::to_string(repr_test.dim(1)));
    if (attr_test.dim(1) != k)
        throw DimensionError("dci: train has " + std::to_string(k) + " attributes, test " +
                             std::to_string(attr_test.dim(1)));
    if (attr_train.dim(0) != repr_train.dim(0) || attr_test.dim(0) != repr_test.dim(0))
        throw DimensionError("dci: representation/attribute row counts disagree");
    for (double v : repr_train.data())
        if (!std::isfinite(v)) throw NumericError("dci: non-finite representation");
    for (double v : repr_test.data())
        if (!std::isfinite(v)) throw NumericError("dci: non-finite representation");
    auto check_binary = [](const Tensor& a) {
        for (double v : a.data())
            if (std::abs(v) > 1e-9 && std::abs(v - 1.0) > 1e-9)
                throw ContractError("dci: attributes must be binary");
    };
    check_binary(attr_train);
    check_binary(attr_test);

    const int64_t n_train = repr_train.dim(0), n_test = repr_test.dim(0);
    std::vector<double> importance(static_cast<size_t>(l * k), 0.0);
    std::vector<double> rmses(static_cast<size_t>(k), 0.0);
    for (int64_t a = 0; a < k; ++a) {
        std::vector<double> target(static_cast<size_t>(n_train));
        for (int64_t i = 0; i < n_train; ++i)
            target[static_cast<size_t>(i)] = attr_train.data()[static_cast<size_t>(i * k + a)];
        const LassoFit fit = fit_lasso(repr_train, target, lambda);
        for (int64_t j = 0; j < l; ++j)
            importance[static_cast<size_t>(j * k + a)] = std::abs(fit.weights[static_cast<size_t>(j)]);

        double sse = 0.0, mean_y = 0.0;
        for (int64_t i = 0; i < n_test; ++i)
            mean_y += attr_test.data()[static_cast<size_t>(i * k + a)];
        mean_y /= static_cast<double>(n_test);
        double var_y = 0.0;
        for (int64_t i = 0; i < n_test; ++i) {
            const double y = attr_test.data()[static_cast<size_t>(i * k + a)];
            double pred = fit.intercept;
            for (int64_t j = 0; j < l; ++j)
                pred += fit.weights[static_cast<size_t>(j)] *
                        repr_test.data()[static_cast<size_t>(i * l + j)];
            sse += (pred - y) * (pred - y);
            var_y += (y - mean_y) * (y - mean_y);
        }
        const double rmse = std::sqrt(sse / static_cast<double>(n_test));
        const double sd_y = std::sqrt(var_y / static_cast<double>(n_test));
        double norm = sd_y > 1e-12 ? rmse / sd_y : (rmse < 1e-12 ? 0.0 : 1.0);
        rmses[static_cast<size_t>(a)] = std::clamp(norm, 0.0, 1.0);
    }

    DciReport report = dci_from_importance(Tensor::from_data({l, k}, std::move(importance)));
    report.per_attribute_rmse = std::move(rmses);
    report.informativeness =
        std::accumulate(report.per_attribute_rmse.begin(), report.per_attribute_rmse.end(), 0.0) /
        static_cast<double>(k);
    return report;
}

namespace {

// Drops trainable-parameter gradients out of the graph for the duration of an
// attribution pass so model state stays untouched.
class ParamFreeze {
public:
    explicit ParamFreeze(const Model& m) {
        for (const auto& [name, t] : m.params())
            if (t.requires_grad()) frozen_.push_back(t);
        for (auto& t : frozen_) t.set_requires_grad(false);
    }
    ~ParamFreeze() {
        for (auto& t : frozen_) t.set_requires_grad(true);
    }

private:
    std::vector<Tensor> frozen_;
};

}  // namespace

AttributionMap integrated_gradients_fn(const std::function<Tensor(const Tensor&)>& score_fn,
                                       const Tensor& image, const Tensor& baseline,
                                       int64_t steps) {
    if (!image.defined() || !baseline.defined())
        throw ContractError("ig: image and baseline must be defined");
    if (image.shape() != baseline.shape())
        throw DimensionError("ig: baseline shape " + shape_str(baseline.shape()) +
                             " differs from image shape " + shape_str(image.shape()));
    if (steps < 1) throw ContractError("ig: steps must be >= 1");

    const auto n = static_cast<size_t>(image.numel());
    const auto& xv = image.data();
    const auto& bv = baseline.data();

    AttributionMap map;
    map.steps = steps;
    map.baseline = baseline;
    {
        NoGradGuard guard;
        map.score_baseline = score_fn(baseline).item();
    }

    std::vector<double> acc(n, 0.0);
    for (int64_t t = 1; t <= steps; ++t) {
        const double alpha = static_cast<double>(t) / static_cast<double>(steps);
        std::vector<double> point(n);
        for (size_t i = 0; i < n; ++i) point[i] = bv[i] + alpha * (xv[i] - bv[i]);
        Tensor xt = Tensor::from_data(image.shape(), std::move(point), true);
        Tensor score = score_fn(xt);
        backward(score);
        const auto& g = xt.grad();
        for (size_t i = 0; i < n; ++i) acc[i] += g[i];
        if (t == steps) map.score_input = score.item();
    }

    std::vector<double> vals(n);
    for (size_t i = 0; i < n; ++i)
        vals[i] = (xv[i] - bv[i]) * acc[i] / static_cast<double>(steps);
    map.values = Tensor::from_data(image.shape(), std::move(vals));

    if (image.ndim() == 3 && image.dim(0) == 3) {
        const int64_t h = image.dim(1), w = image.dim(2);
        std::vector<double> flat(static_cast<size_t>(h * w), 0.0);
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t i = 0; i < h * w; ++i)
                flat[static_cast<size_t>(i)] +=
                    map.values.data()[static_cast<size_t>(c * h * w + i)];
        map.spatial = Tensor::from_data({h, w}, std::move(flat));
    } else {
        map.spatial = map.values;
    }
    return map;
}

AttributionMap integrated_gradients(const Model& m, const Tensor& image, const Tensor& baseline,
                                    int64_t steps, int64_t target_class, double tau) {
    const ModelConfig& cfg = m.config();
    if (target_class < 0 || target_class >= cfg.num_classes)
        throw ContractError("ig: target class " + std::to_string(target_class) +
                            " outside [0," + std::to_string(cfg.num_classes) + ")");
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.resolution ||
        image.dim(2) != cfg.resolution)
        throw DimensionError("ig: expected [3," + std::to_string(cfg.resolution) + "," +
                             std::to_string(cfg.resolution) + "] image, got " +
                             shape_str(image.shape()));

    ParamFreeze freeze(m);
    auto score_fn = [&m, &cfg, target_class, tau](const Tensor& x) {
        Tensor batch = reshape(x, {1, 3, cfg.resolution, cfg.resolution});
        Tensor logits;
        switch (cfg.kind) {
            case ModelKind::standard: logits = standard_forward(m, batch).logits; break;
            case ModelKind::cbm: logits = cbm_forward(m, batch).logits; break;
            case ModelKind::xcb:
                logits = xcb_visual_forward(m, batch, tau, nullptr, true).logits;
                break;
        }
        return slice(reshape(logits, {cfg.num_classes}), 0, target_class, target_class + 1);
    };
    AttributionMap map = integrated_gradients_fn(score_fn, image, baseline, steps);
    map.target_class = target_class;
    return map;
}

Tensor white_baseline(int64_t resolution) {
    if (resolution < 1) throw ContractError("baseline: resolution must be >= 1");
    return Tensor::ones({3, resolution, resolution});
}

AttributionShare shortcut_attribution_share(const AttributionMap& map, int64_t box_cols,
                                            int64_t box_rows) {
    if (!map.values.defined() || map.values.ndim() != 3)
        throw ContractError("share: attribution map lacks [C,H,W] values");
    const int64_t c = map.values.dim(0), h = map.values.dim(1), w = map.values.dim(2);
    if (box_cols < 1 || box_rows < 1 || box_cols > w || box_rows > h)
        throw ContractError("share: box " + std::to_string(box_cols) + "x" +
                            std::to_string(box_rows) + " exceeds the " + std::to_string(w) + "x" +
                            std::to_string(h) + " map");
    double inside = 0.0, total = 0.0;
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t wi = 0; wi < w; ++wi) {
                const double a =
                    std::abs(map.values.data()[static_cast<size_t>((ci * h + hi) * w + wi)]);
                total += a;
                if (hi < box_rows && wi < box_cols) inside += a;
            }
    AttributionShare share;
    if (total <= 0.0) {
        share.zero_total = true;
        return share;
    }
    share.value = inside / total;
    return share;
}

std::vector<SurveyQuestion> survey_generate(const ConceptReport& report, const Dataset& dataset,
                                            int64_t num_questions, Rng& rng) {
    if (report.factors.size() < 2)
        throw ContractError("survey: need at least 2 factors to draw a distractor");
    if (num_questions < 1) throw ContractError("survey: need at least 1 question");

    std::vector<size_t> usable;
    for (size_t i = 0; i < report.factors.size(); ++i) {
        const auto& fr = report.factors[i];
        const bool scored = std::any_of(fr.tokens.begin(), fr.tokens.end(),
                                        [](const TokenScore& t) { return t.psi > 0.0; });
        if (!fr.active_examples.empty() && scored) usable.push_back(i);
    }
    if (usable.empty())
        throw ContractError("survey: no factor has both active images and scored tokens");

    constexpr size_t kImagesPerQuestion = 4;
    std::vector<SurveyQuestion> out;
    size_t cursor = 0;
    for (int64_t qi = 0; qi < num_questions; ++qi) {
        bool built = false;
        for (size_t attempt = 0; attempt < usable.size() && !built; ++attempt) {
            const auto& fr = report.factors[usable[cursor % usable.size()]];
            ++cursor;

            std::vector<SurveyOption> options;
            std::unordered_set<std::string> own;
            for (const TokenScore& ts : fr.tokens)
                if (ts.psi > 0.0) {
                    options.push_back({ts.token, ts.psi, false});
                    own.insert(ts.token);
                }

            std::vector<std::string> candidates;
            std::unordered_set<std::string> seen;
            for (const auto& other : report.factors) {
                if (other.factor == fr.factor) continue;
                for (const TokenScore& ts : other.tokens)
                    if (own.count(ts.token) == 0 && seen.insert(ts.token).second)
                        candidates.push_back(ts.token);
            }
            if (candidates.empty()) continue;
            std::sort(candidates.begin(), candidates.end());
            options.push_back(
                {candidates[static_cast<size_t>(rng.randint(static_cast<int64_t>(candidates.size())))],
                 0.0, true});

            SurveyQuestion question;
            question.factor = fr.factor;
            std::vector<int64_t> pool = fr.active_examples;
            const size_t take = std::min(kImagesPerQuestion, pool.size());
            for (size_t i = 0; i < take; ++i) {
                const auto j =
                    static_cast<size_t>(rng.randint(static_cast<int64_t>(pool.size() - i))) + i;
                std::swap(pool[i], pool[j]);
                if (pool[i] < 0 || pool[i] >= dataset.n())
                    throw ContractError("survey: report references example " +
                                        std::to_string(pool[i]) + " beyond the dataset");
                question.image_ids.push_back(pool[i]);
            }
            for (size_t i = options.size(); i > 1; --i) {
                const auto j = static_cast<size_t>(rng.randint(static_cast<int64_t>(i)));
                std::swap(options[i - 1], options[j]);
            }
            question.options = std::move(options);
            out.push_back(std::move(question));
            built = true;
        }
        if (!built)
            throw ContractError("survey: no factor yields a distractor distinct from its tokens");
    }
    return out;
}

double survey_score(const std::vector<int64_t>& answers,
                    const std::vector<SurveyQuestion>& questions) {
    if (questions.empty()) throw ContractError("survey: no questions to score");
    if (answers.size() != questions.size())
        throw ContractError("survey: " + std::to_string(answers.size()) + " answers for " +
                            std::to_string(questions.size()) + " questions");
    double acc = 0.0;
    for (size_t i = 0; i < questions.size(); ++i) {
        const auto& options = questions[i].options;
        if (answers[i] < 0 || answers[i] >= static_cast<int64_t>(options.size()))
            throw ContractError("survey: answer " + std::to_string(answers[i]) +
                                " out of range for question " + std::to_string(i));
        acc += 1.0 - options[static_cast<size_t>(answers[i])].psi;
    }
    return acc / static_cast<double>(questions.size());
}

std::string dci_to_json(const DciReport& report) {
    json j{{"disentanglement", report.disentanglement},
           {"completeness", report.completeness},
           {"informativeness", report.informativeness},
           {"per_factor_d", report.per_factor_d},
           {"factor_weights", report.factor_weights},
           {"per_attribute_c", report.per_attribute_c},
           {"per_attribute_rmse", report.per_attribute_rmse}};
    if (report.importance.defined()) {
        json rows = json::array();
        const int64_t l = report.importance.dim(0), k = report.importance.dim(1);
        for (int64_t i = 0; i < l; ++i) {
            json row = json::array();
            for (int64_t a = 0; a < k; ++a)
                row.push_back(report.importance.data()[static_cast<size_t>(i * k + a)]);
            rows.push_back(std::move(row));
        }
        j["importance"] = std::move(rows);
    }
    return j.dump(2);
}

std::string importance_csv(const Tensor& importance) {
    if (!importance.defined() || importance.ndim() != 2)
        throw ContractError("csv: importance must be a 2-D matrix");
    const int64_t l = importance.dim(0), k = importance.dim(1);
    std::ostringstream out;
    out << "factor";
    for (int64_t a = 0; a < k; ++a) out << ",attr" << a;
    out << "\n";
    out.precision(17);
    for (int64_t i = 0; i < l; ++i) {
        out << i;
        for (int64_t a = 0; a < k; ++a)
            out << "," << importance.data()[static_cast<size_t>(i * k + a)];
        out << "\n";
    }
    return out.str();
}

std::string attribution_csv(const AttributionMap& map) {
    if (!map.spatial.defined() || map.spatial.ndim() != 2)
        throw ContractError("csv: attribution map lacks a spatial matrix");
    const int64_t h = map.spatial.dim(0), w = map.spatial.dim(1);
    std::ostringstream out;
    out.precision(17);
    for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
            if (j) out << ",";
            out << map.spatial.data()[static_cast<size_t>(i * w + j)];
        }
        out << "\n";
    }
    return out.str();
}

void write_attribution_pgm(const AttributionMap& map, const std::string& path) {
    if (!map.spatial.defined() || map.spatial.ndim() != 2)
        throw ContractError("pgm: attribution map lacks a spatial matrix");
    const int64_t h = map.spatial.dim(0), w = map.spatial.dim(1);
    double peak = 0.0;
    for (double v : map.spatial.data()) peak = std::max(peak, std::abs(v));
    std::ostringstream out;
    out << "P2\n" << w << " " << h << "\n255\n";
    for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
            const double v = std::abs(map.spatial.data()[static_cast<size_t>(i * w + j)]);
            const int gray = peak > 0.0 ? static_cast<int>(std::lround(255.0 * v / peak)) : 0;
            if (j) out << " ";
            out << gray;
        }
        out << "\n";
    }
    write_file_atomic(path, out.str());
}

std::string survey_to_json(const std::vector<SurveyQuestion>& questions) {
    json arr = json::array();
    for (const auto& q : questions) {
        json options = json::array();
        for (const auto& o : q.options)
            options.push_back(
                {{"token", o.token}, {"psi", o.psi}, {"distractor", o.distractor}});
        arr.push_back({{"factor", q.factor},
                       {"image_ids", q.image_ids},
                       {"options", std::move(options)}});
    }
    return arr.dump(2);
}

std::vector<SurveyQuestion> survey_from_json(const std::string& text) {
    try {
        const json arr = json::parse(text);
        if (!arr.is_array()) throw ParseError("survey: expected a top-level array");
        std::vector<SurveyQuestion> out;
        for (const auto& jq : arr) {
            SurveyQuestion q;
            q.factor = jq.at("factor").get<int64_t>();
            q.image_ids = jq.at("image_ids").get<std::vector<int64_t>>();
            for (const auto& jo : jq.at("options"))
                q.options.push_back({jo.at("token").get<std::string>(),
                                     jo.at("psi").get<double>(),
                                     jo.at("distractor").get<bool>()});
            out.push_back(std::move(q));
        }
        return out;
    } catch (const json::exception& e) {
        throw ParseError(std::string("survey: bad question file: ") + e.what());
    }
}

std::vector<int64_t> answers_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        const json& arr = j.is_object() ? j.at("answers") : j;
        if (!arr.is_array()) throw ParseError("survey: expected an array of answer indices");
        return arr.get<std::vector<int64_t>>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("survey: bad answer file: ") + e.what());
    }
}

}  // namespace xcb
