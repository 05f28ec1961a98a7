#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "data/shapes.hpp"
#include "losses/losses.hpp"
#include "metrics/metrics.hpp"
#include "models/models.hpp"

namespace xcb {

struct TrainConfig {
    int64_t epochs = 40;
    int64_t batch_size = 64;
    int64_t patience = 5;

    double adadelta_lr = 0.25;
    double adadelta_rho = 0.95;
    double adadelta_eps = 1e-6;
    double adamw_lr = 1e-3;
    double adamw_beta1 = 0.9;
    double adamw_beta2 = 0.999;
    double adamw_wd = 0.01;

    double max_lr_visual = 0.25;
    double max_lr_text = 1e-3;

    double tau0 = 1.0;
    double tau_min = 0.5;
    double tau_decay = 0.0;  // 0 derives a rate from the total step count

    LossWeights weights;
    double subsample_frac = 0.05;

    int64_t visual_period = 2;   // joint-phase visual update cadence
    int64_t textual_period = 1;  // joint-phase textual update cadence
    int64_t pretrain_epochs = 2;
    bool freeze_text = false;  // keep textual weights at init, visual CE only

    std::vector<uint64_t> seeds{42, 0, 17, 9, 3};

    void validate() const;
};

struct EpochRow {
    int64_t epoch = 0;
    std::string split;  // "train" or "val"
    double ce_visual = 0.0;
    double ce_text = 0.0;
    double tie = 0.0;
    double sparsity = 0.0;
    double total = 0.0;
    double f1 = std::numeric_limits<double>::quiet_NaN();  // recorded on val rows
};

struct RunArtifacts {
    ModelConfig model_config;
    TrainConfig train_config;
    uint64_t seed = 0;
    std::shared_ptr<Model> model;  // best-epoch weights restored
    std::vector<EpochRow> log;
    std::vector<double> step_losses;  // training objective per optimizer step
    int64_t best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int64_t epochs_run = 0;
    bool early_stopped = false;
    std::vector<double> epoch_seconds;
    double total_seconds = 0.0;
    std::string run_dir;  // empty when nothing was persisted
};

// Trains one model on splits.train with early stopping on splits.val. When
// run_dir is nonempty writes config.json, log.csv, best.ckpt and timings.json
// there; a diverged run leaves diverged.json behind before rethrowing.
RunArtifacts train(const ModelConfig& mcfg, const TrainConfig& tcfg, const Splits& splits,
                   uint64_t seed, const std::string& run_dir = "");

struct EvalReport {
    double macro = 0.0;
    std::vector<double> per_class;
    std::vector<int64_t> predictions;
    std::vector<int64_t> labels;
    Tensor repr;        // [N,L] deterministic bottleneck representation
    Tensor attributes;  // [N,num_attributes] binary ground truth
};

// Deterministic noise-free inference over a whole split.
EvalReport evaluate(const Model& m, const Dataset& data);

// DCI with regressors fit on the fit split's representation and
// informativeness measured on the test split's.
DciReport run_dci(const Model& m, const Dataset& fit_split, const Dataset& test_split,
                  double lambda = 0.01);

struct AblationRow {
    std::string label;
    ModelConfig from;
    ModelConfig to;
};

// The seven single-toggle modifications measured against the full model.
std::vector<AblationRow> default_ablation_grid(const ModelConfig& base);

struct AblationRowResult {
    std::string label;
    int64_t seeds_ok = 0;
    double df1_mean = 0.0, df1_sd = 0.0;
    double ddisent_mean = 0.0, ddisent_sd = 0.0;
    double dcompl_mean = 0.0, dcompl_sd = 0.0;
    double dinform_mean = 0.0, dinform_sd = 0.0;
    std::vector<std::string> errors;
};

struct AblationResult {
    std::vector<AblationRowResult> rows;
};

// Trains every distinct config over cfg.seeds (visual pretraining disabled
// for parity) and reports per-row deltas metric(to) - metric(from) as
// mean +- sd. Failures are captured per cell without stopping the grid.
AblationResult ablate(const std::vector<AblationRow>& grid, const TrainConfig& cfg,
                      const Splits& splits);

std::string ablation_csv(const AblationResult& result);

struct RobustnessSeedRow {
    uint64_t seed = 0;
    double f1_standard = 0.0, f1_xcb = 0.0;
    double disent_standard = 0.0, disent_xcb = 0.0;
    double compl_standard = 0.0, compl_xcb = 0.0;
    double inform_standard = 0.0, inform_xcb = 0.0;
    double share_standard = 0.0, share_xcb = 0.0;
    double epoch_seconds_standard = 0.0, epoch_seconds_xcb = 0.0;
};

struct RobustnessResult {
    std::vector<RobustnessSeedRow> rows;  // one per seed
    double median_delta_f1 = 0.0;         // xcb minus standard, clean test
    double median_delta_disent = 0.0;
    double median_delta_compl = 0.0;
    double median_delta_inform = 0.0;
    double median_delta_share = 0.0;  // standard minus xcb; positive means the
                                      // standard model leans on the corner box
    double epoch_time_ratio = 0.0;    // mean xcb/standard epoch seconds
};

// Shortcut protocol: per seed, split the clean corpus, stamp the label glyph
// into every train and val image, train a standard and an xcb model on the
// stamped splits, then score both on the untouched test split. Attribution
// shares are measured on stamped copies of the first ig_images test images.
RobustnessResult shortcut_robustness(const ModelConfig& base, const TrainConfig& tcfg,
                                     const Dataset& clean, int64_t ig_steps = 128,
                                     int64_t ig_images = 8);

std::string robustness_csv(const RobustnessResult& result);
std::string robustness_json(const RobustnessResult& result);

double mean_epoch_seconds(const RunArtifacts& run);

std::string train_config_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
std::string log_csv(const std::vector<EpochRow>& log);
std::string repr_csv(const EvalReport& report);
std::string eval_json(const EvalReport& report);

void write_run_artifacts(const RunArtifacts& run, const std::string& dir);

}  // namespace xcb
