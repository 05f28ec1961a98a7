#include "training/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "nn/nn.hpp"

using nlohmann::json;

namespace xcb {

namespace {

constexpr uint64_t kStreamShuffle = 301;
constexpr uint64_t kStreamGumbel = 302;
constexpr uint64_t kStreamSubsample = 303;

std::vector<int64_t> argmax_rows(const Tensor& logits) {
    const int64_t b = logits.dim(0), c = logits.dim(1);
    std::vector<int64_t> out(static_cast<size_t>(b), 0);
    for (int64_t i = 0; i < b; ++i) {
        const double* row = logits.data().data() + i * c;
        out[static_cast<size_t>(i)] =
            static_cast<int64_t>(std::max_element(row, row + c) - row);
    }
    return out;
}

Tensor tie_term(const Tensor& c_prob, const Tensor& f_prob, TieKind kind) {
    switch (kind) {
        case TieKind::js: return js_tie(c_prob, f_prob);
        case TieKind::kl_fc: return kl_tie(f_prob, c_prob, KlDirection::pq);
        case TieKind::kl_cf: return kl_tie(c_prob, f_prob, KlDirection::pq);
        case TieKind::none: return {};
    }
    throw ContractError("train: unknown tie kind");
}

// Per-channel statistics of the training images, used to normalize every
// split through the model's stored constants.
void fit_normalization(Model& m, const Dataset& train) {
    std::array<double, 3> mean{}, sd{};
    int64_t count = 0;
    for (const auto& ex : train.examples) {
        for (size_t i = 0; i < ex.image.size(); i += 3)
            for (size_t c = 0; c < 3; ++c) mean[c] += ex.image[i + c];
        count += static_cast<int64_t>(ex.image.size() / 3);
    }
    for (auto& v : mean) v /= static_cast<double>(count);
    for (const auto& ex : train.examples)
        for (size_t i = 0; i < ex.image.size(); i += 3)
            for (size_t c = 0; c < 3; ++c) {
                const double d = ex.image[i + c] - mean[c];
                sd[c] += d * d;
            }
    for (auto& v : sd) {
        v = std::sqrt(v / static_cast<double>(count));
        if (v < 1e-6) v = 1.0;  // constant channel: leave it unscaled
    }
    m.set_normalization(mean, sd);
}

void check_disjoint(const Splits& splits) {
    std::unordered_set<int64_t> seen;
    auto add = [&seen](const Dataset& d, const char* name) {
        for (const auto& ex : d.examples)
            if (!seen.insert(ex.id).second)
                throw ContractError(std::string("train: example ") + std::to_string(ex.id) +
                                    " appears in more than one split (" + name + ")");
    };
    add(splits.train, "train");
    add(splits.val, "val");
    add(splits.test, "test");
}

struct BatchLoss {
    LossBreakdown breakdown;
    std::vector<int64_t> predictions;
};

// Forward pass plus combined objective for one batch. `joint` enables the
// textual branch; rng pointers are null on the deterministic validation path.
BatchLoss batch_loss(Model& m, const Dataset& data, const std::vector<int64_t>& idx, double tau,
                     bool joint, const LossWeights& weights, double subsample_frac,
                     Rng* noise_rng, Rng& subsample_rng) {
    const ModelConfig& cfg = m.config();
    const auto b = static_cast<int64_t>(idx.size());
    Tensor images = batch_images(data, idx);
    std::vector<int64_t> labels(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i)
        labels[static_cast<size_t>(i)] = data.examples[static_cast<size_t>(idx[static_cast<size_t>(i)])].label;

    Tensor visual_logits, f_prob;
    switch (cfg.kind) {
        case ModelKind::standard: {
            auto fwd = standard_forward(m, images);
            visual_logits = fwd.logits;
            f_prob = fwd.f;
            break;
        }
        case ModelKind::cbm: {
            auto fwd = cbm_forward(m, images);
            visual_logits = fwd.logits;
            f_prob = fwd.concept_logits;
            break;
        }
        case ModelKind::xcb: {
            auto fwd = xcb_visual_forward(m, images, tau, noise_rng, true);
            visual_logits = fwd.logits;
            f_prob = fwd.f_prob;
            break;
        }
    }
    Tensor ce_visual = cross_entropy_batch(visual_logits, labels);

    Tensor ce_text = Tensor::zeros(ce_visual.shape());
    Tensor tie;
    std::vector<Tensor> r_sets;
    if (joint) {
        Tensor ce_acc, tie_acc;
        for (int64_t i = 0; i < b; ++i) {
            const auto& ex = data.examples[static_cast<size_t>(idx[static_cast<size_t>(i)])];
            TextForward tf = xcb_text_forward(m, ex.tokens, tau, noise_rng, true);
            Tensor ce = cross_entropy(tf.logits, ex.label);
            ce_acc = ce_acc.defined() ? add(ce_acc, ce) : ce;
            if (cfg.tie != TieKind::none && weights.lambda_tie > 0.0) {
                Tensor f_row = reshape(slice(f_prob, 0, i, i + 1), {cfg.bottleneck});
                Tensor t = tie_term(tf.c_prob, f_row, cfg.tie);
                tie_acc = tie_acc.defined() ? add(tie_acc, t) : t;
            }
            if (cfg.sparsity_reg && weights.lambda_reg > 0.0)
                r_sets.push_back(slice(tf.attention.contextual, 0, 0, cfg.bottleneck));
        }
        ce_text = reshape(scale(ce_acc, 1.0 / static_cast<double>(b)), ce_visual.shape());
        if (tie_acc.defined())
            tie = reshape(scale(tie_acc, 1.0 / static_cast<double>(b)), ce_visual.shape());
    }

    BatchLoss out;
    out.breakdown =
        total_loss(ce_visual, ce_text, tie, r_sets, weights, subsample_rng, subsample_frac);
    out.predictions = argmax_rows(visual_logits);
    return out;
}

struct EpochStats {
    double ce_visual = 0.0, ce_text = 0.0, tie = 0.0, sparsity = 0.0, total = 0.0;
    int64_t examples = 0;

    void absorb(const LossBreakdown& bd, int64_t batch) {
        const auto w = static_cast<double>(batch);
        ce_visual += bd.ce_visual * w;
        ce_text += bd.ce_text * w;
        tie += bd.tie * w;
        sparsity += bd.sparsity * w;
        total += bd.total * w;
        examples += batch;
    }
    EpochRow row(int64_t epoch, const std::string& split) const {
        const auto n = static_cast<double>(std::max<int64_t>(examples, 1));
        EpochRow r;
        r.epoch = epoch;
        r.split = split;
        r.ce_visual = ce_visual / n;
        r.ce_text = ce_text / n;
        r.tie = tie / n;
        r.sparsity = sparsity / n;
        r.total = total / n;
        return r;
    }
};

std::string run_config_json(const RunArtifacts& run) {
    json j{{"seed", run.seed},
           {"model", json::parse(model_config_json(run.model_config))},
           {"train", json::parse(train_config_json(run.train_config))}};
    return j.dump(2);
}

double sample_sd(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

std::string csv_quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ContractError("train config: batch size must be >= 1");
    if (patience < 1) throw ContractError("train config: patience must be >= 1");
    if (visual_period < 1 || textual_period < 1)
        throw ContractError("train config: update periods must be >= 1");
    if (visual_period < textual_period)
        throw ContractError("train config: visual period must be >= textual period");
    if (pretrain_epochs < 0) throw ContractError("train config: pretrain epochs must be >= 0");
    if (seeds.empty()) throw ContractError("train config: seed list is empty");
    if (!(subsample_frac > 0.0) || subsample_frac > 1.0)
        throw ContractError("train config: subsample fraction must be in (0,1]");
    if (tau0 <= 0.0 || tau_min <= 0.0 || tau_min > tau0)
        throw ContractError("train config: need tau0 >= tau_min > 0");
    if (adadelta_lr <= 0.0 || adamw_lr <= 0.0 || max_lr_visual <= 0.0 || max_lr_text <= 0.0)
        throw ContractError("train config: learning rates must be positive");
    if (weights.lambda_tie < 0.0 || weights.lambda_reg < 0.0)
        throw ContractError("train config: loss weights must be >= 0");
}

RunArtifacts train(const ModelConfig& mcfg, const TrainConfig& tcfg, const Splits& splits,
                   uint64_t seed, const std::string& run_dir) {
    mcfg.validate();
    tcfg.validate();
    if (splits.train.n() == 0) throw ContractError("train: training split is empty");
    if (splits.val.n() == 0) throw ContractError("train: validation split is empty");
    check_disjoint(splits);
    if (splits.train.resolution != mcfg.resolution)
        throw ContractError("train: dataset resolution " + std::to_string(splits.train.resolution) +
                            " does not match model resolution " + std::to_string(mcfg.resolution));
    if (mcfg.kind == ModelKind::xcb && splits.train.vocab.size() > mcfg.vocab_size)
        throw ContractError("train: vocabulary has " + std::to_string(splits.train.vocab.size()) +
                            " entries but the model embeds only " +
                            std::to_string(mcfg.vocab_size));

    RunArtifacts run;
    run.model_config = mcfg;
    run.train_config = tcfg;
    run.seed = seed;
    run.run_dir = run_dir;
    if (!run_dir.empty()) std::filesystem::create_directories(run_dir);

    run.model = std::make_shared<Model>(mcfg, seed);
    Model& m = *run.model;
    fit_normalization(m, splits.train);

    const bool trainable_text = mcfg.kind == ModelKind::xcb && !tcfg.freeze_text;
    std::vector<Tensor> frozen_text;
    if (tcfg.freeze_text)
        for (const auto& [name, t] : m.text_params()) {
            frozen_text.push_back(t);
            frozen_text.back().set_requires_grad(false);
        }

    Optimizer visual_opt = Optimizer::adadelta(tcfg.adadelta_lr, tcfg.adadelta_rho, tcfg.adadelta_eps);
    visual_opt.add_params(m.visual_params());
    Optimizer text_opt = Optimizer::adamw(tcfg.adamw_lr, tcfg.adamw_beta1, tcfg.adamw_beta2, 1e-8,
                                          tcfg.adamw_wd);
    if (trainable_text) text_opt.add_params(m.text_params());

    const int64_t n_train = splits.train.n();
    const int64_t steps_per_epoch = (n_train + tcfg.batch_size - 1) / tcfg.batch_size;
    ScheduleConfig sched;
    sched.max_lr_visual = tcfg.max_lr_visual;
    sched.max_lr_text = tcfg.max_lr_text;
    sched.total_steps = tcfg.epochs * steps_per_epoch;
    sched.tau0 = tcfg.tau0;
    sched.tau_min = tcfg.tau_min;
    sched.tau_decay = tcfg.tau_decay > 0.0
                          ? tcfg.tau_decay
                          : default_tau_decay(tcfg.tau0, tcfg.tau_min, sched.total_steps);
    sched.validate();

    LossWeights weights = tcfg.weights;
    if (mcfg.tie == TieKind::none) weights.lambda_tie = 0.0;
    if (!mcfg.sparsity_reg) weights.lambda_reg = 0.0;

    Rng shuffle_rng(derive_seed(seed, kStreamShuffle));
    Rng noise_rng(derive_seed(seed, kStreamGumbel));
    Rng subsample_rng(derive_seed(seed, kStreamSubsample));

    const int64_t pretrain = trainable_text ? std::min(tcfg.pretrain_epochs, tcfg.epochs) : 0;

    std::vector<std::pair<std::string, std::vector<double>>> best_params;
    auto snapshot = [&best_params, &m]() {
        best_params.clear();
        for (const auto& [name, t] : m.params()) best_params.emplace_back(name, t.data());
    };
    auto restore = [&best_params, &m]() {
        for (const auto& [name, v] : best_params) {
            Tensor t = m.param(name);
            std::copy(v.begin(), v.end(), t.data().begin());
        }
    };

    std::vector<int64_t> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);

    int64_t global_step = 0, joint_batches = 0, bad_epochs = 0;
    double last_tau = tcfg.tau0, last_lr_v = 0.0, last_lr_t = 0.0;
    const auto run_start = std::chrono::steady_clock::now();

    try {
        for (int64_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
            const auto epoch_start = std::chrono::steady_clock::now();
            const bool joint = trainable_text && epoch >= pretrain;

            for (size_t i = order.size(); i > 1; --i) {
                const auto j = static_cast<size_t>(shuffle_rng.randint(static_cast<int64_t>(i)));
                std::swap(order[i - 1], order[j]);
            }

            EpochStats train_stats;
            for (int64_t start = 0; start < n_train; start += tcfg.batch_size) {
                const int64_t end = std::min(n_train, start + tcfg.batch_size);
                const std::vector<int64_t> idx(order.begin() + start, order.begin() + end);

                last_tau = gumbel_temperature(global_step, sched);
                last_lr_v = onecycle_lr(global_step, sched.total_steps, tcfg.max_lr_visual);
                last_lr_t = onecycle_lr(global_step, sched.total_steps, tcfg.max_lr_text);

                BatchLoss bl = batch_loss(m, splits.train, idx, last_tau, joint, weights,
                                          tcfg.subsample_frac, &noise_rng, subsample_rng);
                backward(bl.breakdown.total_tensor);

                if (joint) {
                    ++joint_batches;
                    if (joint_batches % tcfg.visual_period == 0) {
                        visual_opt.step_with_lr(last_lr_v);
                        visual_opt.zero_grad();
                    }
                    if (joint_batches % tcfg.textual_period == 0) {
                        text_opt.step_with_lr(last_lr_t);
                        text_opt.zero_grad();
                    }
                } else {
                    visual_opt.step_with_lr(last_lr_v);
                    visual_opt.zero_grad();
                }

                run.step_losses.push_back(bl.breakdown.total);
                train_stats.absorb(bl.breakdown, end - start);
                ++global_step;
            }
            run.log.push_back(train_stats.row(epoch, "train"));

            // Deterministic validation pass with the full sparsity term.
            EpochStats val_stats;
            std::vector<int64_t> val_preds, val_labels;
            {
                NoGradGuard guard;
                const int64_t n_val = splits.val.n();
                for (int64_t start = 0; start < n_val; start += tcfg.batch_size) {
                    const int64_t end = std::min(n_val, start + tcfg.batch_size);
                    std::vector<int64_t> idx(static_cast<size_t>(end - start));
                    std::iota(idx.begin(), idx.end(), start);
                    BatchLoss bl = batch_loss(m, splits.val, idx, last_tau, joint, weights, 1.0,
                                              nullptr, subsample_rng);
                    val_stats.absorb(bl.breakdown, end - start);
                    val_preds.insert(val_preds.end(), bl.predictions.begin(), bl.predictions.end());
                    for (int64_t i = start; i < end; ++i)
                        val_labels.push_back(splits.val.examples[static_cast<size_t>(i)].label);
                }
            }
            EpochRow val_row = val_stats.row(epoch, "val");
            val_row.f1 = macro_f1(val_preds, val_labels, mcfg.num_classes);
            run.log.push_back(val_row);
            run.epochs_run = epoch + 1;

            // Pretrain epochs score validation on ce_visual alone, so their
            // losses are not comparable with the joint objective. Reset the
            // early-stop baseline at the phase boundary and keep patience out
            // of the warmup epochs.
            const bool warming = trainable_text && epoch < pretrain;
            if (trainable_text && pretrain > 0 && epoch == pretrain) {
                run.best_val_loss = std::numeric_limits<double>::infinity();
                bad_epochs = 0;
            }
            if (val_row.total < run.best_val_loss) {
                run.best_val_loss = val_row.total;
                run.best_epoch = epoch;
                bad_epochs = 0;
                snapshot();
            } else if (!warming && ++bad_epochs >= tcfg.patience) {
                run.early_stopped = true;
            }

            run.epoch_seconds.push_back(
                std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
                    .count());
            if (run.early_stopped) break;
        }
    } catch (const NumericError& e) {
        if (!run_dir.empty()) {
            const size_t tail = std::min<size_t>(run.step_losses.size(), 20);
            json snap{{"error", e.what()},
                      {"epoch", run.epochs_run},
                      {"step", global_step},
                      {"tau", last_tau},
                      {"lr_visual", last_lr_v},
                      {"lr_text", last_lr_t},
                      {"recent_step_losses",
                       std::vector<double>(run.step_losses.end() - static_cast<int64_t>(tail),
                                           run.step_losses.end())}};
            write_file_atomic(run_dir + "/diverged.json", snap.dump(2));
        }
        throw NumericError("train: diverged at step " + std::to_string(global_step) + ": " +
                           e.what());
    }

    restore();
    for (auto& t : frozen_text) t.set_requires_grad(true);
    run.total_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();

    if (!run_dir.empty()) write_run_artifacts(run, run_dir);
    return run;
}

EvalReport evaluate(const Model& m, const Dataset& data) {
    const ModelConfig& cfg = m.config();
    if (data.n() == 0) throw ContractError("evaluate: empty dataset");
    if (data.resolution != cfg.resolution)
        throw ContractError("evaluate: dataset resolution " + std::to_string(data.resolution) +
                            " does not match model resolution " + std::to_string(cfg.resolution));

    EvalReport report;
    const int64_t n = data.n();
    std::vector<double> repr;
    repr.reserve(static_cast<size_t>(n * cfg.bottleneck));
    std::vector<double> attrs;
    attrs.reserve(static_cast<size_t>(n) * 6);

    NoGradGuard guard;
    constexpr int64_t kEvalBatch = 64;
    for (int64_t start = 0; start < n; start += kEvalBatch) {
        const int64_t end = std::min(n, start + kEvalBatch);
        std::vector<int64_t> idx(static_cast<size_t>(end - start));
        std::iota(idx.begin(), idx.end(), start);
        Tensor images = batch_images(data, idx);

        Tensor logits, f;
        switch (cfg.kind) {
            case ModelKind::standard: {
                auto fwd = standard_forward(m, images);
                logits = fwd.logits;
                f = fwd.f;
                break;
            }
            case ModelKind::cbm: {
                auto fwd = cbm_forward(m, images);
                logits = fwd.logits;
                f = fwd.concept_logits;
                break;
            }
            case ModelKind::xcb: {
                auto fwd = xcb_visual_forward(m, images, 1.0, nullptr, true);
                logits = fwd.logits;
                f = fwd.f_prob;
                break;
            }
        }
        const auto preds = argmax_rows(logits);
        report.predictions.insert(report.predictions.end(), preds.begin(), preds.end());
        repr.insert(repr.end(), f.data().begin(), f.data().end());
        for (int64_t i = start; i < end; ++i) {
            const auto& ex = data.examples[static_cast<size_t>(i)];
            report.labels.push_back(ex.label);
            for (int a : ex.attributes) attrs.push_back(static_cast<double>(a));
        }
    }

    report.per_class = per_class_f1(report.predictions, report.labels, cfg.num_classes);
    report.macro = macro_f1(report.predictions, report.labels, cfg.num_classes);
    report.repr = Tensor::from_data({n, cfg.bottleneck}, std::move(repr));
    report.attributes = Tensor::from_data({n, 6}, std::move(attrs));
    return report;
}

DciReport run_dci(const Model& m, const Dataset& fit_split, const Dataset& test_split,
                  double lambda) {
    const EvalReport fit = evaluate(m, fit_split);
    const EvalReport test = evaluate(m, test_split);
    return dci(fit.repr, fit.attributes, test.repr, test.attributes, lambda);
}

std::vector<AblationRow> default_ablation_grid(const ModelConfig& base) {
    if (base.kind != ModelKind::xcb)
        throw ContractError("ablate: the baseline config must be an xcb model");
    std::vector<AblationRow> grid;
    auto variant = [&base](auto&& mutate) {
        ModelConfig cfg = base;
        mutate(cfg);
        return cfg;
    };
    grid.push_back({"sigmoid_to_gumbel",
                    variant([](ModelConfig& c) { c.bottleneck_activation = BottleneckActivation::sigmoid; }),
                    base});
    grid.push_back({"softmax_to_entmax",
                    variant([](ModelConfig& c) { c.attention_activation = AttentionActivation::softmax; }),
                    base});
    grid.push_back({"regular_to_slot_norm",
                    variant([](ModelConfig& c) { c.normalization = AttentionNorm::regular; }),
                    base});
    grid.push_back({"dummies_off_to_on",
                    variant([](ModelConfig& c) { c.use_dummies = false; }), base});
    grid.push_back({"sparsity_reg_on",
                    variant([](ModelConfig& c) { c.sparsity_reg = false; }), base});
    grid.push_back({"js_to_kl_fc", base,
                    variant([](ModelConfig& c) { c.tie = TieKind::kl_fc; })});
    grid.push_back({"js_to_kl_cf", base,
                    variant([](ModelConfig& c) { c.tie = TieKind::kl_cf; })});
    return grid;
}

namespace {

struct AblationCell {
    bool ok = false;
    double f1 = 0.0, disent = 0.0, compl_ = 0.0, inform = 0.0;
    std::string error;
};

}  // namespace

AblationResult ablate(const std::vector<AblationRow>& grid, const TrainConfig& cfg,
                      const Splits& splits) {
    if (grid.empty()) throw ContractError("ablate: empty grid");
    TrainConfig tcfg = cfg;
    tcfg.pretrain_epochs = 0;  // keep every variant on the same schedule

    // Each distinct config trains once per seed; rows share cached cells.
    std::unordered_map<std::string, std::vector<AblationCell>> cache;
    auto cells = [&](const ModelConfig& mcfg) -> const std::vector<AblationCell>& {
        const std::string key = model_config_json(mcfg);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        std::vector<AblationCell> column;
        for (uint64_t seed : tcfg.seeds) {
            AblationCell cell;
            try {
                RunArtifacts run = train(mcfg, tcfg, splits, seed);
                const EvalReport eval = evaluate(*run.model, splits.test);
                const DciReport d = run_dci(*run.model, splits.train, splits.test);
                cell.f1 = eval.macro;
                cell.disent = d.disentanglement;
                cell.compl_ = d.completeness;
                cell.inform = d.informativeness;
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            column.push_back(std::move(cell));
        }
        return cache.emplace(key, std::move(column)).first->second;
    };

    AblationResult result;
    for (const auto& row : grid) {
        AblationRowResult rr;
        rr.label = row.label;
        const auto& from = cells(row.from);
        const auto& to = cells(row.to);
        std::vector<double> df1, dd, dc, di;
        for (size_t s = 0; s < tcfg.seeds.size(); ++s) {
            if (!from[s].ok || !to[s].ok) {
                const auto& bad = from[s].ok ? to[s] : from[s];
                rr.errors.push_back("seed " + std::to_string(tcfg.seeds[s]) + ": " + bad.error);
                continue;
            }
            df1.push_back(to[s].f1 - from[s].f1);
            dd.push_back(to[s].disent - from[s].disent);
            dc.push_back(to[s].compl_ - from[s].compl_);
            di.push_back(to[s].inform - from[s].inform);
        }
        rr.seeds_ok = static_cast<int64_t>(df1.size());
        auto mean = [](const std::vector<double>& v) {
            return v.empty() ? 0.0
                             : std::accumulate(v.begin(), v.end(), 0.0) /
                                   static_cast<double>(v.size());
        };
        rr.df1_mean = mean(df1);
        rr.df1_sd = sample_sd(df1, rr.df1_mean);
        rr.ddisent_mean = mean(dd);
        rr.ddisent_sd = sample_sd(dd, rr.ddisent_mean);
        rr.dcompl_mean = mean(dc);
        rr.dcompl_sd = sample_sd(dc, rr.dcompl_mean);
        rr.dinform_mean = mean(di);
        rr.dinform_sd = sample_sd(di, rr.dinform_mean);
        result.rows.push_back(std::move(rr));
    }
    return result;
}

std::string ablation_csv(const AblationResult& result) {
    std::ostringstream out;
    out.precision(17);
    out << "modification,delta_f1_mean,delta_f1_sd,delta_disent_mean,delta_disent_sd,"
           "delta_compl_mean,delta_compl_sd,delta_inform_mean,delta_inform_sd,seeds_ok,errors\n";
    for (const auto& r : result.rows) {
        std::string errors;
        for (const auto& e : r.errors) {
            if (!errors.empty()) errors += "; ";
            errors += e;
        }
        out << r.label << "," << r.df1_mean << "," << r.df1_sd << "," << r.ddisent_mean << ","
            << r.ddisent_sd << "," << r.dcompl_mean << "," << r.dcompl_sd << "," << r.dinform_mean
            << "," << r.dinform_sd << "," << r.seeds_ok << "," << csv_quote(errors) << "\n";
    }
    return out.str();
}

double mean_epoch_seconds(const RunArtifacts& run) {
    if (run.epoch_seconds.empty()) return 0.0;
    return std::accumulate(run.epoch_seconds.begin(), run.epoch_seconds.end(), 0.0) /
           static_cast<double>(run.epoch_seconds.size());
}

namespace {

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t h = v.size() / 2;
    return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

void stamp_all(Dataset& ds) {
    for (auto& ex : ds.examples) inject_shortcut(ex.image, ds.resolution, ex.label);
}

double mean_corner_share(const Model& m, const Dataset& stamped_test, int64_t ig_steps,
                         int64_t ig_images) {
    const int64_t res = stamped_test.resolution;
    const Tensor base = white_baseline(res);
    const int64_t n = std::min<int64_t>(ig_images, stamped_test.n());
    if (n == 0) throw ContractError("robustness: empty test split");
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        Tensor image = reshape(batch_images(stamped_test, {i}), {3, res, res});
        AttributionMap map = integrated_gradients(m, image, base, ig_steps,
                                                  stamped_test.examples[static_cast<size_t>(i)].label);
        total += shortcut_attribution_share(map).value;
    }
    return total / static_cast<double>(n);
}

}  // namespace

RobustnessResult shortcut_robustness(const ModelConfig& base, const TrainConfig& tcfg,
                                     const Dataset& clean, int64_t ig_steps, int64_t ig_images) {
    if (base.kind != ModelKind::xcb)
        throw ContractError("robustness: the base config must be an xcb model");
    if (base.resolution != clean.resolution)
        throw ContractError("robustness: dataset resolution does not match the model config");
    if (tcfg.seeds.empty()) throw ContractError("robustness: need at least one seed");
    if (ig_steps < 1 || ig_images < 1)
        throw ContractError("robustness: ig_steps and ig_images must be positive");

    ModelConfig std_cfg = base;
    std_cfg.kind = ModelKind::standard;

    RobustnessResult result;
    std::vector<double> df1, dd, dc, di, dshare, ratios;
    for (uint64_t seed : tcfg.seeds) {
        Splits splits = split(clean, SplitRatios{}, seed);
        Splits stamped = splits;
        stamp_all(stamped.train);
        stamp_all(stamped.val);
        Dataset stamped_test = splits.test;
        stamp_all(stamped_test);

        RobustnessSeedRow row;
        row.seed = seed;

        RunArtifacts std_run = train(std_cfg, tcfg, stamped, seed);
        row.f1_standard = evaluate(*std_run.model, splits.test).macro;
        DciReport std_dci = run_dci(*std_run.model, splits.train, splits.test);
        row.disent_standard = std_dci.disentanglement;
        row.compl_standard = std_dci.completeness;
        row.inform_standard = std_dci.informativeness;
        row.share_standard = mean_corner_share(*std_run.model, stamped_test, ig_steps, ig_images);
        row.epoch_seconds_standard = mean_epoch_seconds(std_run);

        RunArtifacts xcb_run = train(base, tcfg, stamped, seed);
        row.f1_xcb = evaluate(*xcb_run.model, splits.test).macro;
        DciReport xcb_dci = run_dci(*xcb_run.model, splits.train, splits.test);
        row.disent_xcb = xcb_dci.disentanglement;
        row.compl_xcb = xcb_dci.completeness;
        row.inform_xcb = xcb_dci.informativeness;
        row.share_xcb = mean_corner_share(*xcb_run.model, stamped_test, ig_steps, ig_images);
        row.epoch_seconds_xcb = mean_epoch_seconds(xcb_run);

        df1.push_back(row.f1_xcb - row.f1_standard);
        dd.push_back(row.disent_xcb - row.disent_standard);
        dc.push_back(row.compl_xcb - row.compl_standard);
        di.push_back(row.inform_xcb - row.inform_standard);
        dshare.push_back(row.share_standard - row.share_xcb);
        if (row.epoch_seconds_standard > 0.0)
            ratios.push_back(row.epoch_seconds_xcb / row.epoch_seconds_standard);
        result.rows.push_back(row);
    }
    result.median_delta_f1 = median_of(df1);
    result.median_delta_disent = median_of(dd);
    result.median_delta_compl = median_of(dc);
    result.median_delta_inform = median_of(di);
    result.median_delta_share = median_of(dshare);
    result.epoch_time_ratio =
        ratios.empty() ? 0.0
                       : std::accumulate(ratios.begin(), ratios.end(), 0.0) /
                             static_cast<double>(ratios.size());
    return result;
}

std::string robustness_csv(const RobustnessResult& result) {
    std::ostringstream out;
    out.precision(17);
    out << "seed,f1_standard,f1_xcb,delta_f1,disent_standard,disent_xcb,delta_disent,"
           "compl_standard,compl_xcb,delta_compl,inform_standard,inform_xcb,delta_inform,"
           "share_standard,share_xcb,delta_share\n";
    for (const auto& r : result.rows) {
        out << r.seed << "," << r.f1_standard << "," << r.f1_xcb << ","
            << (r.f1_xcb - r.f1_standard) << "," << r.disent_standard << "," << r.disent_xcb << ","
            << (r.disent_xcb - r.disent_standard) << "," << r.compl_standard << "," << r.compl_xcb
            << "," << (r.compl_xcb - r.compl_standard) << "," << r.inform_standard << ","
            << r.inform_xcb << "," << (r.inform_xcb - r.inform_standard) << "," << r.share_standard
            << "," << r.share_xcb << "," << (r.share_standard - r.share_xcb) << "\n";
    }
    return out.str();
}

std::string robustness_json(const RobustnessResult& result) {
    json rows = json::array();
    for (const auto& r : result.rows) {
        rows.push_back(json{{"seed", r.seed},
                            {"f1_standard", r.f1_standard},
                            {"f1_xcb", r.f1_xcb},
                            {"disent_standard", r.disent_standard},
                            {"disent_xcb", r.disent_xcb},
                            {"compl_standard", r.compl_standard},
                            {"compl_xcb", r.compl_xcb},
                            {"inform_standard", r.inform_standard},
                            {"inform_xcb", r.inform_xcb},
                            {"share_standard", r.share_standard},
                            {"share_xcb", r.share_xcb},
                            {"epoch_seconds_standard", r.epoch_seconds_standard},
                            {"epoch_seconds_xcb", r.epoch_seconds_xcb}});
    }
    return json{{"rows", std::move(rows)},
                {"median_delta_f1", result.median_delta_f1},
                {"median_delta_disent", result.median_delta_disent},
                {"median_delta_compl", result.median_delta_compl},
                {"median_delta_inform", result.median_delta_inform},
                {"median_delta_share", result.median_delta_share},
                {"epoch_time_ratio", result.epoch_time_ratio}}
        .dump(2);
}

std::string train_config_json(const TrainConfig& cfg) {
    json j{{"epochs", cfg.epochs},
           {"batch_size", cfg.batch_size},
           {"patience", cfg.patience},
           {"adadelta_lr", cfg.adadelta_lr},
           {"adadelta_rho", cfg.adadelta_rho},
           {"adadelta_eps", cfg.adadelta_eps},
           {"adamw_lr", cfg.adamw_lr},
           {"adamw_beta1", cfg.adamw_beta1},
           {"adamw_beta2", cfg.adamw_beta2},
           {"adamw_wd", cfg.adamw_wd},
           {"max_lr_visual", cfg.max_lr_visual},
           {"max_lr_text", cfg.max_lr_text},
           {"tau0", cfg.tau0},
           {"tau_min", cfg.tau_min},
           {"tau_decay", cfg.tau_decay},
           {"lambda_tie", cfg.weights.lambda_tie},
           {"lambda_reg", cfg.weights.lambda_reg},
           {"subsample_frac", cfg.subsample_frac},
           {"visual_period", cfg.visual_period},
           {"textual_period", cfg.textual_period},
           {"pretrain_epochs", cfg.pretrain_epochs},
           {"freeze_text", cfg.freeze_text},
           {"seeds", cfg.seeds}};
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
    TrainConfig cfg;
    try {
        const json j = json::parse(text);
        if (!j.is_object()) throw ParseError("train config: expected a JSON object");
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.patience = j.value("patience", cfg.patience);
        cfg.adadelta_lr = j.value("adadelta_lr", cfg.adadelta_lr);
        cfg.adadelta_rho = j.value("adadelta_rho", cfg.adadelta_rho);
        cfg.adadelta_eps = j.value("adadelta_eps", cfg.adadelta_eps);
        cfg.adamw_lr = j.value("adamw_lr", cfg.adamw_lr);
        cfg.adamw_beta1 = j.value("adamw_beta1", cfg.adamw_beta1);
        cfg.adamw_beta2 = j.value("adamw_beta2", cfg.adamw_beta2);
        cfg.adamw_wd = j.value("adamw_wd", cfg.adamw_wd);
        cfg.max_lr_visual = j.value("max_lr_visual", cfg.max_lr_visual);
        cfg.max_lr_text = j.value("max_lr_text", cfg.max_lr_text);
        cfg.tau0 = j.value("tau0", cfg.tau0);
        cfg.tau_min = j.value("tau_min", cfg.tau_min);
        cfg.tau_decay = j.value("tau_decay", cfg.tau_decay);
        cfg.weights.lambda_tie = j.value("lambda_tie", cfg.weights.lambda_tie);
        cfg.weights.lambda_reg = j.value("lambda_reg", cfg.weights.lambda_reg);
        cfg.subsample_frac = j.value("subsample_frac", cfg.subsample_frac);
        cfg.visual_period = j.value("visual_period", cfg.visual_period);
        cfg.textual_period = j.value("textual_period", cfg.textual_period);
        cfg.pretrain_epochs = j.value("pretrain_epochs", cfg.pretrain_epochs);
        cfg.freeze_text = j.value("freeze_text", cfg.freeze_text);
        cfg.seeds = j.value("seeds", cfg.seeds);
    } catch (const json::exception& e) {
        throw ParseError(std::string("train config: ") + e.what());
    }
    return cfg;
}

std::string log_csv(const std::vector<EpochRow>& log) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,split,ce_visual,ce_text,tie,sparsity,total,f1\n";
    for (const auto& r : log) {
        out << r.epoch << "," << r.split << "," << r.ce_visual << "," << r.ce_text << "," << r.tie
            << "," << r.sparsity << "," << r.total << ",";
        if (std::isfinite(r.f1)) out << r.f1;
        out << "\n";
    }
    return out.str();
}

std::string repr_csv(const EvalReport& report) {
    const int64_t n = report.repr.dim(0), l = report.repr.dim(1);
    const int64_t k = report.attributes.dim(1);
    std::ostringstream out;
    out.precision(17);
    for (int64_t j = 0; j < l; ++j) out << "f" << j << ",";
    for (int64_t j = 0; j < k; ++j) out << "a" << j << ",";
    out << "label\n";
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < l; ++j)
            out << report.repr.data()[static_cast<size_t>(i * l + j)] << ",";
        for (int64_t j = 0; j < k; ++j)
            out << report.attributes.data()[static_cast<size_t>(i * k + j)] << ",";
        out << report.labels[static_cast<size_t>(i)] << "\n";
    }
    return out.str();
}

std::string eval_json(const EvalReport& report) {
    json j{{"macro_f1", report.macro},
           {"per_class_f1", report.per_class},
           {"examples", report.labels.size()}};
    return j.dump(2);
}

void write_run_artifacts(const RunArtifacts& run, const std::string& dir) {
    if (!run.model) throw ContractError("artifacts: run has no model");
    std::filesystem::create_directories(dir);
    write_file_atomic(dir + "/config.json", run_config_json(run));
    write_file_atomic(dir + "/log.csv", log_csv(run.log));
    json timings{{"epoch_seconds", run.epoch_seconds},
                 {"mean_epoch_seconds", mean_epoch_seconds(run)},
                 {"total_seconds", run.total_seconds},
                 {"epochs_run", run.epochs_run},
                 {"best_epoch", run.best_epoch},
                 {"best_val_loss", run.best_val_loss},
                 {"early_stopped", run.early_stopped}};
    write_file_atomic(dir + "/timings.json", timings.dump(2));
    save_checkpoint(*run.model, dir + "/best.ckpt");
}

}  // namespace xcb
