#include "xcblab/xcblab.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core/common.hpp"
#include "data/shapes.hpp"
#include "metrics/metrics.hpp"
#include "models/models.hpp"
#include "training/training.hpp"

using nlohmann::json;

struct xcblab_dataset {
    xcb::Dataset d;
};

struct xcblab_model {
    xcb::Model m;
};

namespace {

thread_local std::string g_last_error;

void set_error(const std::string& msg) { g_last_error = msg; }

char* dup_string(const std::string& s) {
    char* out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

// Runs the body, converting the core error taxonomy into status codes.
template <typename F>
xcblab_status guarded(F&& body) noexcept {
    try {
        body();
        g_last_error.clear();
        return XCBLAB_OK;
    } catch (const xcb::ParseError& e) {
        set_error(e.what());
        return XCBLAB_ERR_PARSE;
    } catch (const xcb::NumericError& e) {
        set_error(e.what());
        return XCBLAB_ERR_NUMERIC;
    } catch (const xcb::IoError& e) {
        set_error(e.what());
        return XCBLAB_ERR_IO;
    } catch (const xcb::ContractError& e) {
        set_error(e.what());
        return XCBLAB_ERR_CONTRACT;
    } catch (const std::exception& e) {
        set_error(e.what());
        return XCBLAB_ERR_INTERNAL;
    } catch (...) {
        set_error("unknown error");
        return XCBLAB_ERR_INTERNAL;
    }
}

void require(bool ok, const char* what) {
    if (!ok) throw xcb::ContractError(std::string("capi: ") + what);
}

xcb::ModelConfig parse_model_config(const char* text) {
    require(text != nullptr, "model config is null");
    xcb::ModelConfig cfg = xcb::model_config_from_json(text);
    cfg.validate();
    return cfg;
}

xcb::TrainConfig parse_train_config(const char* text) {
    require(text != nullptr, "train config is null");
    xcb::TrainConfig cfg = xcb::train_config_from_json(text);
    cfg.validate();
    return cfg;
}

json summary_json(const xcb::RunArtifacts& run, uint64_t split_seed) {
    return json{{"seed", run.seed},
                {"split_seed", split_seed},
                {"best_epoch", run.best_epoch},
                {"best_val_loss", run.best_val_loss},
                {"epochs_run", run.epochs_run},
                {"early_stopped", run.early_stopped},
                {"mean_epoch_seconds", xcb::mean_epoch_seconds(run)},
                {"total_seconds", run.total_seconds},
                {"run_dir", run.run_dir}};
}

std::vector<std::string> split_csv_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const size_t a = item.find_first_not_of(" \t");
        if (a == std::string::npos) continue;
        const size_t b = item.find_last_not_of(" \t");
        out.push_back(item.substr(a, b - a + 1));
    }
    return out;
}

}  // namespace

extern "C" {

const char* xcblab_version(void) { return "0.1.0"; }

const char* xcblab_last_error(void) { return g_last_error.c_str(); }

void xcblab_set_threads(int n) { xcb::set_threads(n); }

void xcblab_string_free(char* s) { delete[] s; }

xcblab_status xcblab_dataset_generate(int64_t n, uint64_t seed, int32_t resolution,
                                      int32_t shortcut, double noisy_frac, int32_t redundant,
                                      xcblab_dataset** out) {
    return guarded([&] {
        require(out != nullptr, "output handle is null");
        xcb::GenOptions opts;
        opts.shortcut = shortcut != 0;
        opts.noisy_frac = noisy_frac;
        opts.redundant = redundant != 0;
        auto handle = std::make_unique<xcblab_dataset>();
        handle->d = xcb::generate_dataset(n, seed, resolution, opts);
        *out = handle.release();
    });
}

xcblab_status xcblab_dataset_save(const xcblab_dataset* data, const char* dir) {
    return guarded([&] {
        require(data != nullptr, "dataset is null");
        require(dir != nullptr, "directory is null");
        xcb::save_dataset(data->d, dir);
    });
}

xcblab_status xcblab_dataset_load(const char* dir, xcblab_dataset** out) {
    return guarded([&] {
        require(dir != nullptr, "directory is null");
        require(out != nullptr, "output handle is null");
        auto handle = std::make_unique<xcblab_dataset>();
        handle->d = xcb::load_dataset(dir);
        *out = handle.release();
    });
}

xcblab_status xcblab_dataset_info_json(const xcblab_dataset* data, char** out_json) {
    return guarded([&] {
        require(data != nullptr, "dataset is null");
        require(out_json != nullptr, "output string is null");
        const xcb::CorpusStats stats = xcb::corpus_stats(data->d);
        json j{{"n", data->d.n()},
               {"resolution", data->d.resolution},
               {"vocab_size", data->d.vocab.size()},
               {"vocab_real", stats.vocab_real},
               {"mean_tokens", stats.mean_tokens},
               {"max_tokens", stats.max_tokens}};
        *out_json = dup_string(j.dump(2));
    });
}

void xcblab_dataset_free(xcblab_dataset* data) { delete data; }

xcblab_status xcblab_default_config_json(const char* kind, char** out_json) {
    return guarded([&] {
        require(kind != nullptr, "kind is null");
        require(out_json != nullptr, "output string is null");
        xcb::ModelConfig mcfg;
        mcfg.kind = xcb::model_kind_from_string(kind);
        if (mcfg.kind == xcb::ModelKind::cbm) mcfg.bottleneck = mcfg.num_attributes;
        json j{{"model", json::parse(xcb::model_config_json(mcfg))},
               {"train", json::parse(xcb::train_config_json(xcb::TrainConfig{}))}};
        *out_json = dup_string(j.dump(2));
    });
}

xcblab_status xcblab_model_create(const char* model_config_json, uint64_t seed,
                                  xcblab_model** out) {
    return guarded([&] {
        require(out != nullptr, "output handle is null");
        const xcb::ModelConfig cfg = parse_model_config(model_config_json);
        auto handle = std::make_unique<xcblab_model>();
        handle->m = xcb::Model(cfg, seed);
        *out = handle.release();
    });
}

xcblab_status xcblab_model_load(const char* checkpoint_path, xcblab_model** out) {
    return guarded([&] {
        require(checkpoint_path != nullptr, "checkpoint path is null");
        require(out != nullptr, "output handle is null");
        auto handle = std::make_unique<xcblab_model>();
        handle->m = xcb::load_checkpoint(checkpoint_path);
        *out = handle.release();
    });
}

xcblab_status xcblab_model_save(const xcblab_model* model, const char* checkpoint_path) {
    return guarded([&] {
        require(model != nullptr, "model is null");
        require(checkpoint_path != nullptr, "checkpoint path is null");
        xcb::save_checkpoint(model->m, checkpoint_path);
    });
}

xcblab_status xcblab_model_config_json(const xcblab_model* model, char** out_json) {
    return guarded([&] {
        require(model != nullptr, "model is null");
        require(out_json != nullptr, "output string is null");
        *out_json = dup_string(xcb::model_config_json(model->m.config()));
    });
}

void xcblab_model_free(xcblab_model* model) { delete model; }

xcblab_status xcblab_train(const xcblab_dataset* data, const char* model_config_json,
                           const char* train_config_json, uint64_t split_seed, uint64_t seed,
                           const char* run_dir, xcblab_model** out_model,
                           char** out_summary_json) {
    return guarded([&] {
        require(data != nullptr, "dataset is null");
        const xcb::ModelConfig mcfg = parse_model_config(model_config_json);
        const xcb::TrainConfig tcfg = parse_train_config(train_config_json);
        const xcb::Splits splits = xcb::split(data->d, xcb::SplitRatios{}, split_seed);
        const std::string dir = run_dir != nullptr ? run_dir : "";
        xcb::RunArtifacts run = xcb::train(mcfg, tcfg, splits, seed, dir);
        if (out_summary_json != nullptr)
            *out_summary_json = dup_string(summary_json(run, split_seed).dump(2));
        if (out_model != nullptr) {
            auto handle = std::make_unique<xcblab_model>();
            handle->m = std::move(*run.model);
            *out_model = handle.release();
        }
    });
}

xcblab_status xcblab_eval(const xcblab_model* model, const xcblab_dataset* data,
                          uint64_t split_seed, const char* metrics, char** out_json) {
    return guarded([&] {
        require(model != nullptr, "model is null");
        require(data != nullptr, "dataset is null");
        require(metrics != nullptr, "metrics list is null");
        require(out_json != nullptr, "output string is null");
        const std::vector<std::string> wanted = split_csv_list(metrics);
        require(!wanted.empty(), "metrics list is empty");
        const xcb::Splits splits = xcb::split(data->d, xcb::SplitRatios{}, split_seed);
        json j{{"split_seed", split_seed}, {"n_test", splits.test.n()}};
        for (const auto& metric : wanted) {
            if (metric == "f1") {
                const xcb::EvalReport report = xcb::evaluate(model->m, splits.test);
                j["f1"] = report.macro;
                j["per_class_f1"] = report.per_class;
            } else if (metric == "dci") {
                const xcb::DciReport report =
                    xcb::run_dci(model->m, splits.train, splits.test);
                j["dci"] = json::parse(xcb::dci_to_json(report));
            } else {
                throw xcb::ContractError("eval: unknown metric '" + metric +
                                         "' (expected f1 or dci)");
            }
        }
        *out_json = dup_string(j.dump(2));
    });
}

xcblab_status xcblab_ablate(const xcblab_dataset* data, const char* model_config_json,
                            const char* train_config_json, uint64_t split_seed, char** out_csv,
                            char** out_json) {
    return guarded([&] {
        require(data != nullptr, "dataset is null");
        require(out_csv != nullptr, "output string is null");
        const xcb::ModelConfig mcfg = parse_model_config(model_config_json);
        const xcb::TrainConfig tcfg = parse_train_config(train_config_json);
        const xcb::Splits splits = xcb::split(data->d, xcb::SplitRatios{}, split_seed);
        const xcb::AblationResult result =
            xcb::ablate(xcb::default_ablation_grid(mcfg), tcfg, splits);
        *out_csv = dup_string(xcb::ablation_csv(result));
        if (out_json != nullptr) {
            json rows = json::array();
            for (const auto& r : result.rows) {
                rows.push_back(json{{"modification", r.label},
                                    {"delta_f1_mean", r.df1_mean},
                                    {"delta_f1_sd", r.df1_sd},
                                    {"delta_disent_mean", r.ddisent_mean},
                                    {"delta_disent_sd", r.ddisent_sd},
                                    {"delta_compl_mean", r.dcompl_mean},
                                    {"delta_compl_sd", r.dcompl_sd},
                                    {"delta_inform_mean", r.dinform_mean},
                                    {"delta_inform_sd", r.dinform_sd},
                                    {"seeds_ok", r.seeds_ok},
                                    {"errors", r.errors}});
            }
            *out_json = dup_string(json{{"rows", std::move(rows)}}.dump(2));
        }
    });
}

xcblab_status xcblab_robustness(const xcblab_dataset* data, const char* model_config_json,
                                const char* train_config_json, int64_t ig_steps, int64_t ig_images,
                                char** out_csv, char** out_json) {
    return guarded([&] {
        require(data != nullptr, "dataset is null");
        require(out_csv != nullptr, "output string is null");
        const xcb::ModelConfig mcfg = parse_model_config(model_config_json);
        const xcb::TrainConfig tcfg = parse_train_config(train_config_json);
        const xcb::RobustnessResult result =
            xcb::shortcut_robustness(mcfg, tcfg, data->d, ig_steps, ig_images);
        *out_csv = dup_string(xcb::robustness_csv(result));
        if (out_json != nullptr) *out_json = dup_string(xcb::robustness_json(result));
    });
}

xcblab_status xcblab_concepts(const xcblab_model* model, const xcblab_dataset* data,
                              int64_t top_k, char** out_json) {
    return guarded([&] {
        require(model != nullptr, "model is null");
        require(data != nullptr, "dataset is null");
        require(out_json != nullptr, "output string is null");
        const xcb::ConceptReport report = xcb::concept_candidates(model->m, data->d, top_k);
        *out_json = dup_string(xcb::concept_report_json(report));
    });
}

xcblab_status xcblab_attribute(const xcblab_model* model, const xcblab_dataset* data,
                               int64_t index, int64_t steps, int64_t target_class,
                               int32_t stamp_shortcut, const char* out_dir, char** out_json) {
    return guarded([&] {
        require(model != nullptr, "model is null");
        require(data != nullptr, "dataset is null");
        require(out_json != nullptr, "output string is null");
        require(index >= 0 && index < data->d.n(), "example index out of range");

        // One-example dataset so the tested HWC to CHW conversion is reused.
        xcb::Dataset one;
        one.resolution = data->d.resolution;
        one.vocab = data->d.vocab;
        one.examples.push_back(data->d.examples[static_cast<size_t>(index)]);
        if (stamp_shortcut != 0)
            xcb::inject_shortcut(one.examples[0].image, one.resolution, one.examples[0].label);

        const int64_t res = one.resolution;
        const xcb::Tensor image = xcb::reshape(xcb::batch_images(one, {0}), {3, res, res});
        int64_t target = target_class;
        if (target < 0) target = xcb::evaluate(model->m, one).predictions[0];

        const xcb::AttributionMap map = xcb::integrated_gradients(
            model->m, image, xcb::white_baseline(res), steps, target);
        const xcb::AttributionShare share = xcb::shortcut_attribution_share(map);

        double sum = 0.0;
        for (double v : map.values.data()) sum += v;
        const double span = map.score_input - map.score_baseline;
        const double gap = std::abs(sum - span);

        json j{{"id", one.examples[0].id},
               {"index", index},
               {"label", one.examples[0].label},
               {"target_class", target},
               {"steps", steps},
               {"stamped", stamp_shortcut != 0},
               {"score_input", map.score_input},
               {"score_baseline", map.score_baseline},
               {"completeness_gap", gap},
               {"completeness_gap_relative", span != 0.0 ? gap / std::abs(span) : gap},
               {"corner_share", share.value},
               {"corner_share_zero_total", share.zero_total}};

        if (out_dir != nullptr && out_dir[0] != '\0') {
            namespace fs = std::filesystem;
            fs::create_directories(out_dir);
            const std::string stem = "ig_" + std::to_string(one.examples[0].id);
            const fs::path pgm = fs::path(out_dir) / (stem + ".pgm");
            const fs::path csv = fs::path(out_dir) / (stem + ".csv");
            xcb::write_attribution_pgm(map, pgm.string());
            xcb::write_file_atomic(csv, xcb::attribution_csv(map));
            j["pgm"] = pgm.string();
            j["csv"] = csv.string();
        }
        *out_json = dup_string(j.dump(2));
    });
}

xcblab_status xcblab_survey_generate(const xcblab_model* model, const xcblab_dataset* data,
                                     int64_t top_k, int64_t num_questions, uint64_t seed,
                                     char** out_json) {
    return guarded([&] {
        require(model != nullptr, "model is null");
        require(data != nullptr, "dataset is null");
        require(out_json != nullptr, "output string is null");
        const xcb::ConceptReport report = xcb::concept_candidates(model->m, data->d, top_k);
        xcb::Rng rng(seed);
        const std::vector<xcb::SurveyQuestion> questions =
            xcb::survey_generate(report, data->d, num_questions, rng);
        *out_json = dup_string(xcb::survey_to_json(questions));
    });
}

xcblab_status xcblab_survey_score(const char* questions_json, const char* answers_json,
                                  double* out_xscore) {
    return guarded([&] {
        require(questions_json != nullptr, "questions are null");
        require(answers_json != nullptr, "answers are null");
        require(out_xscore != nullptr, "output score is null");
        const std::vector<xcb::SurveyQuestion> questions = xcb::survey_from_json(questions_json);
        const std::vector<int64_t> answers = xcb::answers_from_json(answers_json);
        *out_xscore = xcb::survey_score(answers, questions);
    });
}

}  // extern "C"
