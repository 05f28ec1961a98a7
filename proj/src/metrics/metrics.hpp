#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "core/tensor.hpp"
#include "models/models.hpp"

namespace xcb {

// Unweighted mean of per-class F1. Classes absent from both predictions and
// labels contribute an F1 of 0.
double macro_f1(const std::vector<int64_t>& predictions, const std::vector<int64_t>& labels,
                int64_t num_classes);
std::vector<double> per_class_f1(const std::vector<int64_t>& predictions,
                                 const std::vector<int64_t>& labels, int64_t num_classes);

struct LassoFit {
    std::vector<double> weights;          // original-feature scale
    double intercept = 0.0;
    std::vector<double> std_weights;      // solution of the standardized problem
    std::vector<double> objective_trace;  // standardized objective after each sweep
    int64_t sweeps = 0;
};

// Coordinate descent on (1/2N)*||a - f w - b||^2 + lambda*||w||_1 over
// internally standardized features; returned weights and intercept are mapped
// back to the original feature scale. Converged when the largest coordinate
// change in a sweep drops below 1e-8.
LassoFit fit_lasso(const Tensor& features, const std::vector<double>& target, double lambda,
                   int64_t max_sweeps = 10000);

struct DciReport {
    Tensor importance;  // [L factors, K attributes], entries >= 0
    double disentanglement = 0.0;
    double completeness = 0.0;
    double informativeness = 0.0;
    std::vector<double> per_factor_d;
    std::vector<double> factor_weights;
    std::vector<double> per_attribute_c;
    std::vector<double> per_attribute_rmse;  // sd-normalized, clipped to [0,1]
};

// Entropy-based D and C for a given importance matrix; informativeness stays 0.
DciReport dci_from_importance(const Tensor& importance);

// Full pipeline: one lasso per attribute on the train split gives the
// importance matrix (|w| on the original scale); informativeness is the mean
// sd-normalized test RMSE.
DciReport dci(const Tensor& repr_train, const Tensor& attr_train, const Tensor& repr_test,
              const Tensor& attr_test, double lambda = 0.01);

struct AttributionMap {
    Tensor values;    // [3,H,W] per-channel attributions
    Tensor spatial;   // [H,W] channel sums
    Tensor baseline;  // baseline the path started from
    int64_t steps = 0;
    int64_t target_class = -1;
    double score_input = 0.0;
    double score_baseline = 0.0;
};

// Right Riemann sum of grad(score) along the straight path baseline -> image.
// The callback receives one interpolated image and returns a scalar score.
AttributionMap integrated_gradients_fn(const std::function<Tensor(const Tensor&)>& score_fn,
                                       const Tensor& image, const Tensor& baseline, int64_t steps);

// Attribution of the target-class logit for any model kind; image is [3,H,W]
// with raw pixel values (normalization happens inside the model). Model
// parameter gradients are untouched. XCB scores go through the deterministic
// straight-through path at temperature tau.
AttributionMap integrated_gradients(const Model& m, const Tensor& image, const Tensor& baseline,
                                    int64_t steps, int64_t target_class, double tau = 1.0);

// Convenience constructor for the dataset's true background.
Tensor white_baseline(int64_t resolution);

struct AttributionShare {
    double value = 0.0;
    bool zero_total = false;  // warning: the map carried no attribution at all
};

// Fraction of total |attribution| inside the top-left box of box_cols x
// box_rows pixels (all channels), the region inject_shortcut draws into.
AttributionShare shortcut_attribution_share(const AttributionMap& map, int64_t box_cols = 12,
                                            int64_t box_rows = 16);

struct SurveyOption {
    std::string token;
    double psi = 0.0;
    bool distractor = false;
};

struct SurveyQuestion {
    int64_t factor = 0;
    std::vector<int64_t> image_ids;
    std::vector<SurveyOption> options;  // exactly one has psi == 0, the distractor
};

// Builds num_questions questions cycling over usable factors: images with the
// factor active, the factor's positive-psi top tokens as options, plus one
// distractor token borrowed from another factor with psi forced to 0.
std::vector<SurveyQuestion> survey_generate(const ConceptReport& report, const Dataset& dataset,
                                            int64_t num_questions, Rng& rng);

// answers[i] indexes questions[i].options; XScore = mean of 1 - psi_selected.
double survey_score(const std::vector<int64_t>& answers,
                    const std::vector<SurveyQuestion>& questions);

// Report serialization used by the command-line tools.
std::string dci_to_json(const DciReport& report);
std::string importance_csv(const Tensor& importance);
std::string attribution_csv(const AttributionMap& map);
// P2 graymap of |spatial| attribution, normalized to 0..255.
void write_attribution_pgm(const AttributionMap& map, const std::string& path);
std::string survey_to_json(const std::vector<SurveyQuestion>& questions);
std::vector<SurveyQuestion> survey_from_json(const std::string& text);
std::vector<int64_t> answers_from_json(const std::string& text);

}  // namespace xcb
