#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "core/tensor.hpp"
#include "data/shapes.hpp"
#include "losses/losses.hpp"

namespace xcb {

enum class ModelKind { standard, cbm, xcb };
enum class BottleneckActivation { sigmoid, gumbel_sigmoid };
enum class AttentionActivation { softmax, entmax15 };
enum class AttentionNorm { regular, slot };

const char* to_string(ModelKind v);
const char* to_string(BottleneckActivation v);
const char* to_string(AttentionActivation v);
const char* to_string(AttentionNorm v);
const char* to_string(TieKind v);
ModelKind model_kind_from_string(const std::string& s);
BottleneckActivation bottleneck_activation_from_string(const std::string& s);
AttentionActivation attention_activation_from_string(const std::string& s);
AttentionNorm attention_norm_from_string(const std::string& s);
TieKind tie_kind_from_string(const std::string& s);

// Architecture plus the ablation switches; the defaults are the full XCB
// configuration. `bottleneck` is both the visual latent width and the number
// of concept queries; CBM instead requires bottleneck == num_attributes.
struct ModelConfig {
    ModelKind kind = ModelKind::xcb;
    int64_t resolution = 64;
    int64_t num_classes = 9;
    int64_t bottleneck = 10;
    int64_t num_attributes = 6;
    int64_t vocab_size = 39;  // pad + real tokens; dummies live outside the table
    int64_t embed_dim = 50;
    BottleneckActivation bottleneck_activation = BottleneckActivation::gumbel_sigmoid;
    AttentionActivation attention_activation = AttentionActivation::entmax15;
    AttentionNorm normalization = AttentionNorm::slot;
    bool use_dummies = true;
    bool sparsity_reg = true;
    TieKind tie = TieKind::js;

    void validate() const;
    bool operator==(const ModelConfig& other) const = default;
};

// Named parameter registry. Visual parameters are registered first and in a
// kind-independent order, so models of different kinds built from the same
// seed share bit-identical visual initializations.
class Model {
public:
    Model() = default;
    Model(const ModelConfig& cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    bool has_param(const std::string& name) const { return index_.count(name) > 0; }
    Tensor param(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

    // Trainable parameters only (normalization constants are excluded).
    std::vector<std::pair<std::string, Tensor>> visual_params() const;
    std::vector<std::pair<std::string, Tensor>> text_params() const;

    void set_normalization(const std::array<double, 3>& mean, const std::array<double, 3>& sd);
    std::array<double, 3> norm_mean() const;
    std::array<double, 3> norm_std() const;

private:
    void register_param(const std::string& name, Tensor t, bool visual);
    void build(Rng& rng);

    ModelConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<bool> visual_group_;
    std::unordered_map<std::string, size_t> index_;
};

struct StandardForward {
    Tensor f;       // [B,N] sigmoid activations
    Tensor logits;  // [B,num_classes]
};

struct CbmForward {
    Tensor concept_logits;  // [B,num_attributes]
    Tensor logits;          // [B,num_classes]
};

struct VisualForward {
    Tensor f_prob;  // [B,N] pre-noise sigmoid probabilities (tying loss input)
    Tensor f_hard;  // [B,N] straight-through bits (or f_prob in sigmoid mode)
    Tensor logits;  // [B,num_classes], computed from f_hard only
};

struct AttentionRecord {
    Tensor attention;   // [tokens, queries] final weights
    Tensor contextual;  // [queries, d] r vectors, dummy query row last if present
    int64_t real_tokens = 0;      // leading rows that are caption tokens
    int64_t concept_queries = 0;  // leading columns that are concept queries
};

struct TextForward {
    Tensor c_prob;  // [N]
    Tensor c_hard;  // [N]
    Tensor logits;  // [num_classes]
    AttentionRecord attention;
};

// Converts HWC float images to one [B,3,H,W] tensor.
Tensor batch_images(const Dataset& dataset, const std::vector<int64_t>& idx);

StandardForward standard_forward(const Model& m, const Tensor& images);
CbmForward cbm_forward(const Model& m, const Tensor& images);

// rng == nullptr runs the deterministic path (zero logistic noise), used for
// validation and inference; `hard` selects straight-through discretization.
VisualForward xcb_visual_forward(const Model& m, const Tensor& images, double tau, Rng* rng,
                                 bool hard);

// S = K Q^T / sqrt(d). Slot mode activates each token row across queries and
// then rescales every query column to unit mass; regular mode activates each
// query column across tokens. real_tokens/concept_queries default to the full
// extents; xcb_text_forward overwrites them with the caption geometry.
AttentionRecord slot_cross_attention(const Tensor& keys, const Tensor& queries,
                                     const Tensor& values, const ModelConfig& cfg);

TextForward xcb_text_forward(const Model& m, const std::vector<int>& tokens, double tau, Rng* rng,
                             bool hard);

struct TokenScore {
    int token_id = 0;
    std::string token;
    double score = 0.0;  // mean attention over occurrences
    double psi = 0.0;    // score / factor max score
};

struct FactorReport {
    int64_t factor = 0;
    std::vector<TokenScore> tokens;            // top_k by score, descending
    std::vector<int64_t> active_examples;      // ids with this bit set, strongest first
};

struct ConceptReport {
    int64_t bottleneck = 0;
    std::vector<FactorReport> factors;
};

ConceptReport concept_candidates(const Model& m, const Dataset& dataset, int64_t top_k);

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);
std::string concept_report_json(const ConceptReport& report);

// Self-describing binary: magic+version, config echo as JSON, then named
// parameter blobs (name, shape, f64 little-endian data).
void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);
// Rejects a checkpoint whose echoed config differs from `expected`.
Model load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace xcb
