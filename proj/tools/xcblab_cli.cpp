// xcblab command-line tool. Links the C interface only; all heavy lifting
// lives behind libxcblab. Exit codes: 0 success, 1 downstream failure,
// 2 usage error.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xcblab/xcblab.h"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CStr {
    char* ptr = nullptr;
    ~CStr() { xcblab_string_free(ptr); }
    std::string str() const { return ptr != nullptr ? std::string(ptr) : std::string(); }
};

struct DatasetHandle {
    xcblab_dataset* ptr = nullptr;
    ~DatasetHandle() { xcblab_dataset_free(ptr); }
};

struct ModelHandle {
    xcblab_model* ptr = nullptr;
    ~ModelHandle() { xcblab_model_free(ptr); }
};

// Downstream failures carry the library diagnostic to main's catch block.
struct CommandError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void check(xcblab_status status, const std::string& what) {
    if (status == XCBLAB_OK) return;
    const std::string msg = xcblab_last_error();
    if (msg.rfind(what + ":", 0) == 0) throw CommandError(msg);
    throw CommandError(what + ": " + msg);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CommandError("cannot read " + path.string());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CommandError("cannot write " + tmp.string());
        out << contents;
    }
    fs::rename(tmp, path);
}

// ---- config plumbing ----

json deep_merge(json base, const json& patch) {
    if (!base.is_object() || !patch.is_object()) return patch;
    for (const auto& [key, value] : patch.items())
        base[key] = base.contains(key) ? deep_merge(base[key], value) : value;
    return base;
}

void collect_keys(const json& j, const std::string& prefix, std::set<std::string>& out) {
    if (!j.is_object()) {
        out.insert(prefix);
        return;
    }
    for (const auto& [key, value] : j.items())
        collect_keys(value, prefix.empty() ? key : prefix + "." + key, out);
}

std::vector<std::string> split_dotted(const std::string& key) {
    std::vector<std::string> parts;
    std::stringstream ss(key);
    std::string part;
    while (std::getline(ss, part, '.')) {
        if (part.empty()) throw CommandError("bad override key '" + key + "'");
        parts.push_back(part);
    }
    if (parts.empty()) throw CommandError("bad override key '" + key + "'");
    return parts;
}

void apply_override(json& root, const std::string& key, const json& value) {
    const std::vector<std::string> parts = split_dotted(key);
    json* cur = &root;
    for (size_t i = 0; i + 1 < parts.size(); ++i) cur = &((*cur)[parts[i]]);
    (*cur)[parts.back()] = value;
}

// KEY=VALUE with the value read as JSON when it parses, else as a string.
std::pair<std::string, json> parse_override(const std::string& text) {
    const size_t eq = text.find('=');
    if (eq == std::string::npos || eq == 0)
        throw CommandError("override '" + text + "' is not KEY=VALUE");
    const std::string key = text.substr(0, eq);
    const std::string raw = text.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = json(raw);
    return {key, value};
}

struct ResolvedConfig {
    json exp;  // the fully resolved echo written next to the run
    std::string model_json;
    std::string train_json;
    uint64_t seed = 42;
    uint64_t split_seed = 42;
};

// defaults(kind) <- config file <- KEY=VALUE overrides <- explicit flags;
// resolution and vocab size follow the dataset unless set somewhere above.
ResolvedConfig resolve_config(const std::string& kind_flag, bool kind_given,
                              const std::string& config_file,
                              const std::vector<std::string>& extra_args, uint64_t seed_flag,
                              bool seed_given, const std::string& data_dir,
                              const json& data_info) {
    json file_cfg = json::object();
    if (!config_file.empty()) {
        file_cfg = json::parse(read_file(config_file), nullptr, false);
        if (file_cfg.is_discarded() || !file_cfg.is_object())
            throw CommandError("config file " + config_file + " is not a JSON object");
    }

    std::vector<std::pair<std::string, json>> overrides;
    for (const auto& extra : extra_args) overrides.push_back(parse_override(extra));

    std::set<std::string> touched;
    collect_keys(file_cfg, "", touched);
    for (const auto& [key, value] : overrides) touched.insert(key);

    std::string kind = "xcb";
    if (touched.count("model.kind") > 0) {
        json probe = file_cfg;
        for (const auto& [key, value] : overrides) apply_override(probe, key, value);
        kind = probe["model"]["kind"].get<std::string>();
    }
    if (kind_given) kind = kind_flag;

    CStr defaults;
    check(xcblab_default_config_json(kind.c_str(), &defaults.ptr), "defaults");
    json exp = json::parse(defaults.str());
    exp["data"] = data_dir;
    exp["seed"] = 42;

    exp = deep_merge(std::move(exp), file_cfg);
    for (const auto& [key, value] : overrides) apply_override(exp, key, value);
    if (kind_given) exp["model"]["kind"] = kind_flag;
    if (seed_given) exp["seed"] = seed_flag;

    if (touched.count("model.resolution") == 0)
        exp["model"]["resolution"] = data_info["resolution"];
    if (touched.count("model.vocab_size") == 0)
        exp["model"]["vocab_size"] = data_info["vocab_size"];
    if (touched.count("split_seed") == 0) exp["split_seed"] = exp["seed"];

    ResolvedConfig out;
    out.exp = exp;
    out.model_json = exp["model"].dump();
    out.train_json = exp["train"].dump();
    out.seed = exp["seed"].get<uint64_t>();
    out.split_seed = exp["split_seed"].get<uint64_t>();
    return out;
}

DatasetHandle open_dataset(const std::string& dir, json* info_out = nullptr) {
    DatasetHandle data;
    check(xcblab_dataset_load(dir.c_str(), &data.ptr), "load dataset " + dir);
    if (info_out != nullptr) {
        CStr info;
        check(xcblab_dataset_info_json(data.ptr, &info.ptr), "dataset info");
        *info_out = json::parse(info.str());
    }
    return data;
}

// A trained run directory: best.ckpt plus the experiment.json echo.
struct OpenedRun {
    ModelHandle model;
    json experiment;  // null when the echo is absent
};

OpenedRun open_run(const std::string& run_dir) {
    OpenedRun run;
    const fs::path ckpt = fs::path(run_dir) / "best.ckpt";
    check(xcblab_model_load(ckpt.string().c_str(), &run.model.ptr), "load " + ckpt.string());
    const fs::path echo = fs::path(run_dir) / "experiment.json";
    run.experiment = json();
    if (fs::exists(echo)) run.experiment = json::parse(read_file(echo));
    return run;
}

std::string run_data_dir(const OpenedRun& run, const std::string& data_flag,
                         const std::string& run_dir) {
    if (!data_flag.empty()) return data_flag;
    if (run.experiment.is_object() && run.experiment.contains("data"))
        return run.experiment["data"].get<std::string>();
    throw CommandError("run " + run_dir + " has no experiment.json; pass --data");
}

uint64_t run_split_seed(const OpenedRun& run) {
    if (run.experiment.is_object() && run.experiment.contains("split_seed"))
        return run.experiment["split_seed"].get<uint64_t>();
    return 42;
}

void apply_thread_env() {
    const char* env = std::getenv("XCB_THREADS");
    if (env == nullptr || env[0] == '\0') return;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != nullptr && *end == '\0' && n > 0) xcblab_set_threads(static_cast<int>(n));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"xcblab: concept-bottleneck experiments on the Shapes corpus"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a Shapes corpus into --out");
    int64_t gen_n = 2700;
    uint64_t gen_seed = 42;
    int32_t gen_res = 64;
    bool gen_shortcut = false, gen_redundant = false;
    double gen_noisy = 0.0;
    std::string gen_out;
    gen->add_option("--n", gen_n, "Number of examples");
    gen->add_option("--seed", gen_seed, "Generator seed");
    gen->add_option("--resolution", gen_res, "Canvas side in pixels");
    gen->add_flag("--shortcut", gen_shortcut, "Stamp the label glyph into a corner");
    gen->add_option("--noisy-frac", gen_noisy, "Fraction of captions to corrupt");
    gen->add_flag("--redundant", gen_redundant, "Append paraphrased duplicates");
    gen->add_option("--out", gen_out, "Output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "Train one model and write a run directory");
    std::string train_model = "xcb", train_data, train_out, train_config;
    uint64_t train_seed = 42;
    train->add_option("--model", train_model, "standard, cbm or xcb")
        ->check(CLI::IsMember({"standard", "cbm", "xcb"}));
    train->add_option("--data", train_data, "Dataset directory")->required();
    train->add_option("--out", train_out, "Run directory")->required();
    train->add_option("--config", train_config, "JSON config file");
    train->add_option("--seed", train_seed, "Training seed");
    train->allow_extras();

    // eval
    auto* eval = app.add_subcommand("eval", "Score a trained run on the test split");
    std::string eval_run, eval_data, eval_metrics = "f1", eval_out;
    eval->add_option("--run", eval_run, "Run directory")->required();
    eval->add_option("--data", eval_data, "Dataset directory (defaults to the run's)");
    eval->add_option("--metrics", eval_metrics, "Comma list from {f1, dci}");
    eval->add_option("--out", eval_out, "Report directory (defaults to the run)");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Single-toggle ablation table");
    std::string ablate_data, ablate_out, ablate_config;
    uint64_t ablate_seed = 42;
    bool ablate_seed_given = false;
    ablate->add_option("--data", ablate_data, "Dataset directory")->required();
    ablate->add_option("--out", ablate_out, "Output directory")->required();
    ablate->add_option("--config", ablate_config, "JSON config file");
    ablate->add_option("--seed", ablate_seed, "Split seed");
    ablate->allow_extras();

    // robustness
    auto* robust = app.add_subcommand(
        "robustness", "Train on shortcut-stamped splits, score on the clean test split");
    std::string robust_data, robust_out, robust_config;
    int64_t robust_steps = 128, robust_images = 8;
    robust->add_option("--data", robust_data, "Dataset directory")->required();
    robust->add_option("--out", robust_out, "Output directory")->required();
    robust->add_option("--config", robust_config, "JSON config file");
    robust->add_option("--steps", robust_steps, "Integrated-gradients steps");
    robust->add_option("--n", robust_images, "Test images per attribution share");
    robust->allow_extras();

    // concepts
    auto* concepts = app.add_subcommand("concepts", "Dump the concept report of a run");
    std::string con_run, con_data, con_out;
    int64_t con_topk = 5;
    concepts->add_option("--run", con_run, "Run directory")->required();
    concepts->add_option("--data", con_data, "Dataset directory (defaults to the run's)");
    concepts->add_option("--top-k", con_topk, "Tokens per factor");
    concepts->add_option("--out", con_out, "Report directory (defaults to the run)");

    // attribute
    auto* attribute = app.add_subcommand("attribute", "Integrated-gradients maps for a run");
    std::string attr_run, attr_data, attr_out;
    int64_t attr_n = 4, attr_steps = 128;
    bool attr_shortcut = false;
    attribute->add_option("--run", attr_run, "Run directory")->required();
    attribute->add_option("--data", attr_data, "Dataset directory (defaults to the run's)");
    attribute->add_option("--n", attr_n, "Attribute the first N examples");
    attribute->add_option("--steps", attr_steps, "Integration steps");
    attribute->add_flag("--shortcut", attr_shortcut, "Stamp the label glyph before attributing");
    attribute->add_option("--out", attr_out, "Map directory (defaults to run/attributions)");

    // survey gen | score
    auto* survey = app.add_subcommand("survey", "Concept survey tooling");
    survey->require_subcommand(1);
    auto* sgen = survey->add_subcommand("gen", "Generate survey questions from a run");
    std::string sgen_run, sgen_data, sgen_out;
    int64_t sgen_n = 20, sgen_topk = 5;
    uint64_t sgen_seed = 42;
    sgen->add_option("--run", sgen_run, "Run directory")->required();
    sgen->add_option("--data", sgen_data, "Dataset directory (defaults to the run's)");
    sgen->add_option("--n", sgen_n, "Number of questions");
    sgen->add_option("--top-k", sgen_topk, "Options per question");
    sgen->add_option("--seed", sgen_seed, "Sampling seed");
    sgen->add_option("--out", sgen_out, "Question directory (defaults to the run)");
    auto* sscore = survey->add_subcommand("score", "Score answers against questions");
    std::string sscore_questions, sscore_answers;
    sscore->add_option("questions", sscore_questions, "questions JSON file")->required();
    sscore->add_option("answers", sscore_answers, "answers JSON file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    apply_thread_env();

    try {
        // Leftover arguments must be KEY=VALUE config overrides; a stray
        // flag-looking token is a usage error, not an override.
        auto take_overrides = [](const CLI::App* sub) {
            std::vector<std::string> extras = sub->remaining();
            for (const auto& extra : extras)
                if (extra.rfind('-', 0) == 0 || extra.find('=') == std::string::npos) {
                    std::cerr << "error: unrecognized argument '" << extra << "'\n";
                    std::exit(2);
                }
            return extras;
        };

        if (app.got_subcommand(gen)) {
            DatasetHandle data;
            check(xcblab_dataset_generate(gen_n, gen_seed, gen_res, gen_shortcut ? 1 : 0,
                                          gen_noisy, gen_redundant ? 1 : 0, &data.ptr),
                  "gen-data");
            check(xcblab_dataset_save(data.ptr, gen_out.c_str()), "save dataset");
            CStr info;
            check(xcblab_dataset_info_json(data.ptr, &info.ptr), "dataset info");
            json echo{{"n", gen_n},           {"seed", gen_seed},
                      {"resolution", gen_res}, {"shortcut", gen_shortcut},
                      {"noisy_frac", gen_noisy}, {"redundant", gen_redundant}};
            write_file_atomic(fs::path(gen_out) / "gen.json", echo.dump(2) + "\n");
            std::cout << info.str() << "\n";
            return 0;
        }

        if (app.got_subcommand(train)) {
            json info;
            DatasetHandle data = open_dataset(train_data, &info);
            ResolvedConfig cfg = resolve_config(
                train_model, train->count("--model") > 0, train_config, take_overrides(train),
                train_seed, train->count("--seed") > 0, train_data, info);
            ModelHandle model;
            CStr summary;
            check(xcblab_train(data.ptr, cfg.model_json.c_str(), cfg.train_json.c_str(),
                               cfg.split_seed, cfg.seed, train_out.c_str(), &model.ptr,
                               &summary.ptr),
                  "train");
            cfg.exp["command"] = "train";
            write_file_atomic(fs::path(train_out) / "experiment.json", cfg.exp.dump(2) + "\n");
            std::cout << summary.str() << "\n";
            return 0;
        }

        if (app.got_subcommand(eval)) {
            OpenedRun run = open_run(eval_run);
            const std::string data_dir = run_data_dir(run, eval_data, eval_run);
            DatasetHandle data = open_dataset(data_dir);
            CStr report;
            check(xcblab_eval(run.model.ptr, data.ptr, run_split_seed(run),
                              eval_metrics.c_str(), &report.ptr),
                  "eval");
            const fs::path out_dir = eval_out.empty() ? fs::path(eval_run) : fs::path(eval_out);
            write_file_atomic(out_dir / "eval.json", report.str() + "\n");
            std::cout << report.str() << "\n";
            return 0;
        }

        if (app.got_subcommand(ablate)) {
            json info;
            DatasetHandle data = open_dataset(ablate_data, &info);
            ResolvedConfig cfg =
                resolve_config("xcb", false, ablate_config, take_overrides(ablate), ablate_seed,
                               ablate->count("--seed") > 0, ablate_data, info);
            CStr csv, js;
            check(xcblab_ablate(data.ptr, cfg.model_json.c_str(), cfg.train_json.c_str(),
                                cfg.split_seed, &csv.ptr, &js.ptr),
                  "ablate");
            cfg.exp["command"] = "ablate";
            write_file_atomic(fs::path(ablate_out) / "experiment.json", cfg.exp.dump(2) + "\n");
            write_file_atomic(fs::path(ablate_out) / "ablation.csv", csv.str());
            write_file_atomic(fs::path(ablate_out) / "ablation.json", js.str() + "\n");
            std::cout << csv.str();
            return 0;
        }

        if (app.got_subcommand(robust)) {
            json info;
            DatasetHandle data = open_dataset(robust_data, &info);
            ResolvedConfig cfg = resolve_config("xcb", false, robust_config,
                                                take_overrides(robust), 42, false, robust_data,
                                                info);
            CStr csv, js;
            check(xcblab_robustness(data.ptr, cfg.model_json.c_str(), cfg.train_json.c_str(),
                                    robust_steps, robust_images, &csv.ptr, &js.ptr),
                  "robustness");
            cfg.exp["command"] = "robustness";
            write_file_atomic(fs::path(robust_out) / "experiment.json", cfg.exp.dump(2) + "\n");
            write_file_atomic(fs::path(robust_out) / "robustness.csv", csv.str());
            write_file_atomic(fs::path(robust_out) / "robustness.json", js.str() + "\n");
            std::cout << js.str() << "\n";
            return 0;
        }

        if (app.got_subcommand(concepts)) {
            OpenedRun run = open_run(con_run);
            const std::string data_dir = run_data_dir(run, con_data, con_run);
            DatasetHandle data = open_dataset(data_dir);
            CStr report;
            check(xcblab_concepts(run.model.ptr, data.ptr, con_topk, &report.ptr), "concepts");
            const fs::path out_dir = con_out.empty() ? fs::path(con_run) : fs::path(con_out);
            write_file_atomic(out_dir / "concepts.json", report.str() + "\n");
            std::cout << report.str() << "\n";
            return 0;
        }

        if (app.got_subcommand(attribute)) {
            OpenedRun run = open_run(attr_run);
            const std::string data_dir = run_data_dir(run, attr_data, attr_run);
            DatasetHandle data = open_dataset(data_dir);
            const fs::path out_dir = attr_out.empty()
                                         ? fs::path(attr_run) / "attributions"
                                         : fs::path(attr_out);
            json rows = json::array();
            for (int64_t i = 0; i < attr_n; ++i) {
                CStr row;
                check(xcblab_attribute(run.model.ptr, data.ptr, i, attr_steps, -1,
                                       attr_shortcut ? 1 : 0, out_dir.string().c_str(),
                                       &row.ptr),
                      "attribute");
                rows.push_back(json::parse(row.str()));
            }
            write_file_atomic(out_dir / "attributions.json", rows.dump(2) + "\n");
            std::cout << rows.dump(2) << "\n";
            return 0;
        }

        if (survey->got_subcommand(sgen)) {
            OpenedRun run = open_run(sgen_run);
            const std::string data_dir = run_data_dir(run, sgen_data, sgen_run);
            DatasetHandle data = open_dataset(data_dir);
            CStr questions;
            check(xcblab_survey_generate(run.model.ptr, data.ptr, sgen_topk, sgen_n, sgen_seed,
                                         &questions.ptr),
                  "survey gen");
            const fs::path out_dir = sgen_out.empty() ? fs::path(sgen_run) : fs::path(sgen_out);
            write_file_atomic(out_dir / "survey.json", questions.str() + "\n");
            std::cout << questions.str() << "\n";
            return 0;
        }

        if (survey->got_subcommand(sscore)) {
            const std::string questions = read_file(sscore_questions);
            const std::string answers = read_file(sscore_answers);
            double xscore = 0.0;
            check(xcblab_survey_score(questions.c_str(), answers.c_str(), &xscore),
                  "survey score");
            std::cout << json{{"xscore", xscore}}.dump(2) << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
