// The C interface is exercised through the public header only; this binary
// links libxcblab and never touches core headers directly.

#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include <json.hpp>

#include "xcblab/xcblab.h"

using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("xcblab_capi_" + tag + "_" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

struct StringOut {
    char* ptr = nullptr;
    ~StringOut() { xcblab_string_free(ptr); }
    std::string str() const { return ptr != nullptr ? std::string(ptr) : std::string(); }
};

using DatasetPtr = std::unique_ptr<xcblab_dataset, decltype(&xcblab_dataset_free)>;
using ModelPtr = std::unique_ptr<xcblab_model, decltype(&xcblab_model_free)>;

DatasetPtr make_dataset(int64_t n = 72, uint64_t seed = 5, int32_t resolution = 32) {
    xcblab_dataset* d = nullptr;
    REQUIRE(xcblab_dataset_generate(n, seed, resolution, 0, 0.0, 0, &d) == XCBLAB_OK);
    return DatasetPtr(d, &xcblab_dataset_free);
}

std::string tiny_train_config() {
    json j{{"epochs", 2},        {"batch_size", 16},      {"patience", 5},
           {"pretrain_epochs", 0}, {"seeds", json::array({5})}};
    return j.dump();
}

std::string model_config(const char* kind, int32_t resolution = 32) {
    StringOut defaults;
    REQUIRE(xcblab_default_config_json(kind, &defaults.ptr) == XCBLAB_OK);
    json j = json::parse(defaults.str());
    j["model"]["resolution"] = resolution;
    j["model"]["vocab_size"] = 39;
    j["model"]["bottleneck"] = j["model"]["kind"] == "cbm" ? 6 : 8;
    return j["model"].dump();
}

}  // namespace

TEST_CASE("capi: version and error state") {
    CHECK(std::string(xcblab_version()) == "0.1.0");

    CHECK(xcblab_dataset_generate(10, 1, 32, 0, 0.0, 0, nullptr) == XCBLAB_ERR_CONTRACT);
    CHECK(std::string(xcblab_last_error()).find("null") != std::string::npos);

    // A successful call clears the thread's message.
    auto d = make_dataset(12, 1);
    CHECK(std::string(xcblab_last_error()).empty());
}

TEST_CASE("capi: dataset generate, info, save and load") {
    auto d = make_dataset(48, 9);

    StringOut info;
    REQUIRE(xcblab_dataset_info_json(d.get(), &info.ptr) == XCBLAB_OK);
    json j = json::parse(info.str());
    CHECK(j["n"] == 48);
    CHECK(j["resolution"] == 32);
    CHECK(j["vocab_real"].get<int64_t>() <= 53);
    CHECK(j["max_tokens"].get<int64_t>() <= 12);
    CHECK(j["mean_tokens"].get<double>() > 8.0);

    TempDir tmp("data");
    const std::string dir = (tmp.path / "shapes").string();
    REQUIRE(xcblab_dataset_save(d.get(), dir.c_str()) == XCBLAB_OK);

    xcblab_dataset* back = nullptr;
    REQUIRE(xcblab_dataset_load(dir.c_str(), &back) == XCBLAB_OK);
    DatasetPtr loaded(back, &xcblab_dataset_free);
    StringOut info2;
    REQUIRE(xcblab_dataset_info_json(loaded.get(), &info2.ptr) == XCBLAB_OK);
    CHECK(info2.str() == info.str());

    CHECK(xcblab_dataset_load((tmp.path / "missing").string().c_str(), &back) == XCBLAB_ERR_IO);
}

TEST_CASE("capi: generation contract failures map to status codes") {
    xcblab_dataset* d = nullptr;
    CHECK(xcblab_dataset_generate(4, 1, 32, 0, 0.0, 0, &d) == XCBLAB_ERR_CONTRACT);
    CHECK(std::string(xcblab_last_error()).find("at least 9") != std::string::npos);
    CHECK(xcblab_dataset_generate(12, 1, 8, 0, 0.0, 0, &d) == XCBLAB_ERR_CONTRACT);
    CHECK(xcblab_dataset_generate(12, 1, 32, 0, 1.5, 0, &d) == XCBLAB_ERR_CONTRACT);
}

TEST_CASE("capi: default config json covers model and train keys") {
    StringOut out;
    REQUIRE(xcblab_default_config_json("xcb", &out.ptr) == XCBLAB_OK);
    json j = json::parse(out.str());
    CHECK(j["model"]["kind"] == "xcb");
    CHECK(j["model"]["bottleneck"] == 10);
    CHECK(j["train"]["batch_size"] == 64);
    CHECK(j["train"]["epochs"] == 40);

    StringOut cbm;
    REQUIRE(xcblab_default_config_json("cbm", &cbm.ptr) == XCBLAB_OK);
    CHECK(json::parse(cbm.str())["model"]["bottleneck"] == 6);

    StringOut bad;
    CHECK(xcblab_default_config_json("resnet", &bad.ptr) == XCBLAB_ERR_PARSE);
    CHECK(bad.ptr == nullptr);
}

TEST_CASE("capi: model create, save, load and config echo") {
    const std::string cfg = model_config("xcb");
    xcblab_model* m = nullptr;
    REQUIRE(xcblab_model_create(cfg.c_str(), 3, &m) == XCBLAB_OK);
    ModelPtr model(m, &xcblab_model_free);

    StringOut echo;
    REQUIRE(xcblab_model_config_json(model.get(), &echo.ptr) == XCBLAB_OK);
    CHECK(json::parse(echo.str())["bottleneck"] == 8);

    TempDir tmp("ckpt");
    const std::string path = (tmp.path / "m.ckpt").string();
    REQUIRE(xcblab_model_save(model.get(), path.c_str()) == XCBLAB_OK);

    xcblab_model* back = nullptr;
    REQUIRE(xcblab_model_load(path.c_str(), &back) == XCBLAB_OK);
    ModelPtr loaded(back, &xcblab_model_free);
    StringOut echo2;
    REQUIRE(xcblab_model_config_json(loaded.get(), &echo2.ptr) == XCBLAB_OK);
    CHECK(echo2.str() == echo.str());

    CHECK(xcblab_model_load((tmp.path / "absent.ckpt").string().c_str(), &back) ==
          XCBLAB_ERR_IO);
    CHECK(xcblab_model_create("{", 3, &m) == XCBLAB_ERR_PARSE);
}

TEST_CASE("capi: train, eval and run artifacts") {
    auto d = make_dataset();
    const std::string mcfg = model_config("xcb");
    const std::string tcfg = tiny_train_config();

    TempDir tmp("run");
    const std::string run_dir = (tmp.path / "r1").string();
    xcblab_model* m = nullptr;
    StringOut summary;
    REQUIRE(xcblab_train(d.get(), mcfg.c_str(), tcfg.c_str(), 5, 5, run_dir.c_str(), &m,
                         &summary.ptr) == XCBLAB_OK);
    ModelPtr model(m, &xcblab_model_free);

    json s = json::parse(summary.str());
    CHECK(s["epochs_run"].get<int64_t>() >= 1);
    CHECK(s["best_epoch"].get<int64_t>() >= 0);
    CHECK(s["split_seed"] == 5);
    CHECK(std::isfinite(s["best_val_loss"].get<double>()));
    CHECK(fs::exists(fs::path(run_dir) / "best.ckpt"));
    CHECK(fs::exists(fs::path(run_dir) / "log.csv"));
    CHECK(fs::exists(fs::path(run_dir) / "config.json"));

    StringOut eval;
    REQUIRE(xcblab_eval(model.get(), d.get(), 5, "f1,dci", &eval.ptr) == XCBLAB_OK);
    json e = json::parse(eval.str());
    CHECK(e["f1"].get<double>() >= 0.0);
    CHECK(e["f1"].get<double>() <= 1.0);
    CHECK(e["per_class_f1"].size() == 9);
    CHECK(e["dci"]["disentanglement"].get<double>() >= 0.0);
    CHECK(e["dci"]["informativeness"].get<double>() <= 1.0);

    StringOut bad;
    CHECK(xcblab_eval(model.get(), d.get(), 5, "f1,auc", &bad.ptr) == XCBLAB_ERR_CONTRACT);
    CHECK(std::string(xcblab_last_error()).find("auc") != std::string::npos);
}

TEST_CASE("capi: attribution writes maps and reports the corner share") {
    auto d = make_dataset();
    const std::string mcfg = model_config("standard");
    xcblab_model* m = nullptr;
    REQUIRE(xcblab_model_create(mcfg.c_str(), 11, &m) == XCBLAB_OK);
    ModelPtr model(m, &xcblab_model_free);

    TempDir tmp("attr");
    StringOut out;
    REQUIRE(xcblab_attribute(model.get(), d.get(), 0, 16, -1, 1, tmp.path.string().c_str(),
                             &out.ptr) == XCBLAB_OK);
    json j = json::parse(out.str());
    CHECK(j["steps"] == 16);
    CHECK(j["stamped"] == true);
    CHECK(j["target_class"].get<int64_t>() >= 0);
    CHECK(j["corner_share"].get<double>() >= 0.0);
    CHECK(j["corner_share"].get<double>() <= 1.0);
    CHECK(fs::exists(fs::path(j["pgm"].get<std::string>())));
    CHECK(fs::exists(fs::path(j["csv"].get<std::string>())));

    StringOut oob;
    CHECK(xcblab_attribute(model.get(), d.get(), 99, 16, -1, 0, nullptr, &oob.ptr) ==
          XCBLAB_ERR_CONTRACT);
}

TEST_CASE("capi: concepts and survey round trip") {
    auto d = make_dataset();
    const std::string mcfg = model_config("xcb");
    xcblab_model* m = nullptr;
    REQUIRE(xcblab_model_create(mcfg.c_str(), 7, &m) == XCBLAB_OK);
    ModelPtr model(m, &xcblab_model_free);

    StringOut concepts;
    REQUIRE(xcblab_concepts(model.get(), d.get(), 5, &concepts.ptr) == XCBLAB_OK);
    json c = json::parse(concepts.str());
    CHECK(c["bottleneck"] == 8);
    CHECK(c["factors"].size() == 8);
    CHECK(c["factors"][0]["tokens"].size() <= 5);

    StringOut questions;
    REQUIRE(xcblab_survey_generate(model.get(), d.get(), 5, 6, 21, &questions.ptr) == XCBLAB_OK);
    json q = json::parse(questions.str());
    REQUIRE(q.is_array());
    REQUIRE(q.size() == 6);

    // Always pick option 0; the score is a mean of values in [0,1].
    json answers = json::array();
    for (size_t i = 0; i < 6; ++i) answers.push_back(0);
    double xscore = -1.0;
    REQUIRE(xcblab_survey_score(questions.str().c_str(), answers.dump().c_str(), &xscore) ==
            XCBLAB_OK);
    CHECK(xscore >= 0.0);
    CHECK(xscore <= 1.0);

    json wrapped{{"answers", answers}};
    double xscore2 = -1.0;
    REQUIRE(xcblab_survey_score(questions.str().c_str(), wrapped.dump().c_str(), &xscore2) ==
            XCBLAB_OK);
    CHECK(xscore2 == doctest::Approx(xscore).epsilon(1e-12));

    double bad = 0.0;
    CHECK(xcblab_survey_score(questions.str().c_str(), "[99]", &bad) == XCBLAB_ERR_CONTRACT);
}

TEST_CASE("capi: robustness and ablation smoke" * doctest::timeout(300)) {
    auto d = make_dataset(72, 5);
    const std::string mcfg = model_config("xcb");
    const std::string tcfg = tiny_train_config();

    StringOut csv, js;
    REQUIRE(xcblab_robustness(d.get(), mcfg.c_str(), tcfg.c_str(), 4, 2, &csv.ptr, &js.ptr) ==
            XCBLAB_OK);
    CHECK(csv.str().rfind("seed,f1_standard,f1_xcb", 0) == 0);
    json r = json::parse(js.str());
    REQUIRE(r["rows"].size() == 1);
    CHECK(r["rows"][0]["seed"] == 5);
    CHECK(r["rows"][0]["share_standard"].get<double>() >= 0.0);

    StringOut acsv, ajson;
    REQUIRE(xcblab_ablate(d.get(), mcfg.c_str(), tcfg.c_str(), 5, &acsv.ptr, &ajson.ptr) ==
            XCBLAB_OK);
    json a = json::parse(ajson.str());
    CHECK(a["rows"].size() == 7);
    CHECK(acsv.str().rfind("modification,", 0) == 0);
}
