#include "models/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include <json.hpp>

#include "nn/nn.hpp"

using nlohmann::json;

namespace xcb {

static_assert(std::endian::native == std::endian::little,
              "checkpoints are little-endian; big-endian hosts need byte swaps");

namespace {

// Keeps empty slot-attention columns finite without visibly distorting the
// per-column unit mass of populated columns.
constexpr double kSlotEps = 1e-9;
constexpr uint64_t kStreamModelInit = 201;
constexpr char kCheckpointMagic[9] = "XCBMDL01";

}  // namespace

const char* to_string(ModelKind v) {
    switch (v) {
        case ModelKind::standard: return "standard";
        case ModelKind::cbm: return "cbm";
        case ModelKind::xcb: return "xcb";
    }
    throw ContractError("model kind out of range");
}

const char* to_string(BottleneckActivation v) {
    return v == BottleneckActivation::sigmoid ? "sigmoid" : "gumbel_sigmoid";
}

const char* to_string(AttentionActivation v) {
    return v == AttentionActivation::softmax ? "softmax" : "entmax15";
}

const char* to_string(AttentionNorm v) {
    return v == AttentionNorm::regular ? "regular" : "slot";
}

const char* to_string(TieKind v) {
    switch (v) {
        case TieKind::js: return "js";
        case TieKind::kl_fc: return "kl_fc";
        case TieKind::kl_cf: return "kl_cf";
        case TieKind::none: return "none";
    }
    throw ContractError("tie kind out of range");
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "standard") return ModelKind::standard;
    if (s == "cbm") return ModelKind::cbm;
    if (s == "xcb") return ModelKind::xcb;
    throw ParseError("unknown model kind '" + s + "' (expected standard|cbm|xcb)");
}

BottleneckActivation bottleneck_activation_from_string(const std::string& s) {
    if (s == "sigmoid") return BottleneckActivation::sigmoid;
    if (s == "gumbel_sigmoid") return BottleneckActivation::gumbel_sigmoid;
    throw ParseError("unknown bottleneck activation '" + s + "' (expected sigmoid|gumbel_sigmoid)");
}

AttentionActivation attention_activation_from_string(const std::string& s) {
    if (s == "softmax") return AttentionActivation::softmax;
    if (s == "entmax15") return AttentionActivation::entmax15;
    throw ParseError("unknown attention activation '" + s + "' (expected softmax|entmax15)");
}

AttentionNorm attention_norm_from_string(const std::string& s) {
    if (s == "regular") return AttentionNorm::regular;
    if (s == "slot") return AttentionNorm::slot;
    throw ParseError("unknown attention normalization '" + s + "' (expected regular|slot)");
}

TieKind tie_kind_from_string(const std::string& s) {
    if (s == "js") return TieKind::js;
    if (s == "kl_fc") return TieKind::kl_fc;
    if (s == "kl_cf") return TieKind::kl_cf;
    if (s == "none") return TieKind::none;
    throw ParseError("unknown tie kind '" + s + "' (expected js|kl_fc|kl_cf|none)");
}

void ModelConfig::validate() const {
    if (resolution < 16 || resolution % 16 != 0)
        throw ContractError("config: resolution must be a positive multiple of 16, got " +
                            std::to_string(resolution));
    if (num_classes < 2) throw ContractError("config: need at least 2 classes");
    if (bottleneck < 1) throw ContractError("config: bottleneck width must be >= 1");
    if (num_attributes < 1) throw ContractError("config: attribute count must be >= 1");
    if (kind == ModelKind::cbm && bottleneck != num_attributes)
        throw ContractError("config: cbm bottleneck (" + std::to_string(bottleneck) +
                            ") must equal the attribute count (" + std::to_string(num_attributes) +
                            ")");
    if (kind == ModelKind::xcb) {
        if (vocab_size < 2) throw ContractError("config: xcb needs a vocabulary of >= 2 tokens");
        if (embed_dim < 2 || embed_dim % 2 != 0)
            throw ContractError("config: embed_dim must be a positive even number, got " +
                                std::to_string(embed_dim));
    }
}

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, kStreamModelInit));
    build(rng);
}

void Model::register_param(const std::string& name, Tensor t, bool visual) {
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
    visual_group_.push_back(visual);
}

void Model::build(Rng& rng) {
    const int64_t width = cfg_.bottleneck;
    auto trainable = [&](Shape shape) { return xavier_uniform_init(std::move(shape), rng).set_requires_grad(true); };
    auto zeros = [](Shape shape) {
        Tensor t = Tensor::zeros(std::move(shape));
        t.set_requires_grad(true);
        return t;
    };

    // Visual parameters come first in a kind-independent order so identical
    // seeds give identical visual weights across model kinds.
    register_param("norm.mean", Tensor::zeros({3}), true);
    register_param("norm.std", Tensor::ones({3}), true);
    const int64_t channels[4] = {3, 8, 16, 32};
    for (int i = 1; i <= 3; ++i) {
        const std::string base = "conv" + std::to_string(i);
        register_param(base + ".weight", trainable({channels[i], channels[i - 1], 3, 3}), true);
        register_param(base + ".bias", zeros({channels[i]}), true);
    }
    // The pool pyramid ends at 1x1, so the flatten feeds only channel values.
    register_param("fc.weight", trainable({width, 32}), true);
    register_param("fc.bias", zeros({width}), true);
    register_param("pf.weight", trainable({cfg_.num_classes, width}), true);
    register_param("pf.bias", zeros({cfg_.num_classes}), true);

    if (cfg_.kind != ModelKind::xcb) return;
    register_param("text.embed", trainable({cfg_.vocab_size, cfg_.embed_dim}), false);
    if (cfg_.use_dummies)
        register_param("text.dummy", trainable({width, cfg_.embed_dim}), false);
    register_param("text.wk", trainable({cfg_.embed_dim, cfg_.embed_dim}), false);
    register_param("text.wv", trainable({cfg_.embed_dim, cfg_.embed_dim}), false);
    const int64_t query_rows = width + (cfg_.use_dummies ? 1 : 0);
    register_param("text.query", trainable({query_rows, cfg_.embed_dim}), false);
    register_param("text.pr.weight", trainable({width, cfg_.embed_dim}), false);
    register_param("text.pr.bias", zeros({width}), false);
    register_param("pc.weight", trainable({cfg_.num_classes, width}), false);
    register_param("pc.bias", zeros({cfg_.num_classes}), false);
}

Tensor Model::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("model: unknown parameter '" + name + "'");
    return params_[it->second].second;
}

std::vector<std::pair<std::string, Tensor>> Model::visual_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < params_.size(); ++i)
        if (visual_group_[i] && params_[i].second.requires_grad()) out.push_back(params_[i]);
    return out;
}

std::vector<std::pair<std::string, Tensor>> Model::text_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < params_.size(); ++i)
        if (!visual_group_[i] && params_[i].second.requires_grad()) out.push_back(params_[i]);
    return out;
}

void Model::set_normalization(const std::array<double, 3>& mean, const std::array<double, 3>& sd) {
    Tensor m = param("norm.mean");
    Tensor s = param("norm.std");
    for (int i = 0; i < 3; ++i) {
        if (!(sd[i] > 0.0) || !std::isfinite(sd[i]) || !std::isfinite(mean[i]))
            throw ContractError("normalization: per-channel std must be finite and positive");
        m.data()[static_cast<size_t>(i)] = mean[static_cast<size_t>(i)];
        s.data()[static_cast<size_t>(i)] = sd[static_cast<size_t>(i)];
    }
}

std::array<double, 3> Model::norm_mean() const {
    const auto& d = param("norm.mean").data();
    return {d[0], d[1], d[2]};
}

std::array<double, 3> Model::norm_std() const {
    const auto& d = param("norm.std").data();
    return {d[0], d[1], d[2]};
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, transpose(w)), b);
}

Tensor visual_trunk(const Model& m, const Tensor& images) {
    const ModelConfig& cfg = m.config();
    if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != cfg.resolution ||
        images.dim(3) != cfg.resolution)
        throw DimensionError("visual: expected [B,3," + std::to_string(cfg.resolution) + "," +
                             std::to_string(cfg.resolution) + "] images, got " +
                             shape_str(images.shape()));
    Tensor x = div(sub(images, reshape(m.param("norm.mean"), {1, 3, 1, 1})),
                   reshape(m.param("norm.std"), {1, 3, 1, 1}));
    // Pools of 4, 4 and resolution/16 collapse the map to 1x1, so the linear
    // layer sees position-free channel responses; shapes land anywhere on the
    // canvas and a spatial flatten would have to relearn every placement.
    const int pools[3] = {4, 4, static_cast<int>(cfg.resolution / 16)};
    for (int i = 1; i <= 3; ++i) {
        const std::string base = "conv" + std::to_string(i);
        x = conv2d(x, m.param(base + ".weight"), m.param(base + ".bias"), 1, 1);
        x = maxpool2d(relu(x), pools[i - 1], pools[i - 1]);
    }
    x = reshape(x, {x.dim(0), x.dim(1) * x.dim(2) * x.dim(3)});
    return linear(x, m.param("fc.weight"), m.param("fc.bias"));
}

Tensor discretize(const Tensor& logits, double tau, Rng* rng, bool hard) {
    if (rng) return gumbel_sigmoid(logits, tau, *rng, hard);
    return gumbel_sigmoid_with_noise(logits, tau, Tensor::zeros(logits.shape()), hard);
}

}  // namespace

Tensor batch_images(const Dataset& dataset, const std::vector<int64_t>& idx) {
    const int64_t res = dataset.resolution;
    const auto b = static_cast<int64_t>(idx.size());
    if (b == 0) throw ContractError("batch_images: empty index list");
    std::vector<double> out(static_cast<size_t>(b * 3 * res * res));
    for (int64_t e = 0; e < b; ++e) {
        const int64_t i = idx[static_cast<size_t>(e)];
        if (i < 0 || i >= dataset.n())
            throw ContractError("batch_images: index " + std::to_string(i) + " out of range");
        const auto& img = dataset.examples[static_cast<size_t>(i)].image;
        if (static_cast<int64_t>(img.size()) != res * res * 3)
            throw ContractError("batch_images: example " + std::to_string(i) +
                                " image size does not match resolution " + std::to_string(res));
        for (int64_t h = 0; h < res; ++h)
            for (int64_t w = 0; w < res; ++w)
                for (int64_t c = 0; c < 3; ++c)
                    out[static_cast<size_t>(((e * 3 + c) * res + h) * res + w)] =
                        static_cast<double>(img[static_cast<size_t>((h * res + w) * 3 + c)]);
    }
    return Tensor::from_data({b, 3, res, res}, std::move(out));
}

StandardForward standard_forward(const Model& m, const Tensor& images) {
    if (m.config().kind != ModelKind::standard)
        throw ContractError(std::string("standard_forward: model kind is ") +
                            to_string(m.config().kind));
    StandardForward out;
    out.f = sigmoid(visual_trunk(m, images));
    out.logits = linear(out.f, m.param("pf.weight"), m.param("pf.bias"));
    return out;
}

CbmForward cbm_forward(const Model& m, const Tensor& images) {
    if (m.config().kind != ModelKind::cbm)
        throw ContractError(std::string("cbm_forward: model kind is ") +
                            to_string(m.config().kind));
    CbmForward out;
    out.concept_logits = visual_trunk(m, images);
    out.logits = linear(out.concept_logits, m.param("pf.weight"), m.param("pf.bias"));
    return out;
}

VisualForward xcb_visual_forward(const Model& m, const Tensor& images, double tau, Rng* rng,
                                 bool hard) {
    if (m.config().kind != ModelKind::xcb)
        throw ContractError(std::string("xcb_visual_forward: model kind is ") +
                            to_string(m.config().kind));
    Tensor z = visual_trunk(m, images);
    VisualForward out;
    out.f_prob = sigmoid(z);
    out.f_hard = m.config().bottleneck_activation == BottleneckActivation::sigmoid
                     ? out.f_prob
                     : discretize(z, tau, rng, hard);
    out.logits = linear(out.f_hard, m.param("pf.weight"), m.param("pf.bias"));
    return out;
}

AttentionRecord slot_cross_attention(const Tensor& keys, const Tensor& queries,
                                     const Tensor& values, const ModelConfig& cfg) {
    if (keys.ndim() != 2 || queries.ndim() != 2 || values.ndim() != 2)
        throw DimensionError("attention: keys, queries and values must be 2-D");
    if (keys.dim(1) != queries.dim(1))
        throw DimensionError("attention: key width " + std::to_string(keys.dim(1)) +
                             " vs query width " + std::to_string(queries.dim(1)));
    if (values.dim(0) != keys.dim(0))
        throw DimensionError("attention: " + std::to_string(values.dim(0)) + " values for " +
                             std::to_string(keys.dim(0)) + " keys");
    Tensor s = scale(matmul(keys, transpose(queries)),
                     1.0 / std::sqrt(static_cast<double>(keys.dim(1))));
    const bool use_entmax = cfg.attention_activation == AttentionActivation::entmax15;
    AttentionRecord rec;
    if (cfg.normalization == AttentionNorm::slot) {
        Tensor p = use_entmax ? entmax15(s, 1) : softmax(s, 1);
        rec.attention = div(p, add_scalar(sum(p, 0, true), kSlotEps));
    } else {
        rec.attention = use_entmax ? entmax15(s, 0) : softmax(s, 0);
    }
    rec.contextual = matmul(transpose(rec.attention), values);
    rec.real_tokens = keys.dim(0);
    rec.concept_queries = queries.dim(0);
    return rec;
}

TextForward xcb_text_forward(const Model& m, const std::vector<int>& tokens, double tau, Rng* rng,
                             bool hard) {
    const ModelConfig& cfg = m.config();
    if (cfg.kind != ModelKind::xcb)
        throw ContractError(std::string("xcb_text_forward: model kind is ") + to_string(cfg.kind));
    if (tokens.empty()) throw ContractError("text: empty token sequence");
    std::vector<int64_t> ids(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size)
            throw ContractError("text: unknown token id " + std::to_string(tokens[i]) +
                                " (vocabulary size " + std::to_string(cfg.vocab_size) + ")");
        ids[i] = tokens[i];
    }
    const auto t_real = static_cast<int64_t>(ids.size());
    Tensor x = add(gather_rows(m.param("text.embed"), ids), sinusoidal_pe(t_real, cfg.embed_dim));
    if (cfg.use_dummies) x = concat({x, m.param("text.dummy")}, 0);

    TextForward out;
    out.attention = slot_cross_attention(matmul(x, m.param("text.wk")), m.param("text.query"),
                                         matmul(x, m.param("text.wv")), cfg);
    out.attention.real_tokens = t_real;
    out.attention.concept_queries = cfg.bottleneck;

    // The dummy query's contextualized row (the last one) feeds no predictor.
    Tensor r = cfg.use_dummies ? slice(out.attention.contextual, 0, 0, cfg.bottleneck)
                               : out.attention.contextual;
    Tensor c_logits = add(sum(mul(m.param("text.pr.weight"), r), 1, false),
                          m.param("text.pr.bias"));
    out.c_prob = sigmoid(c_logits);
    out.c_hard = cfg.bottleneck_activation == BottleneckActivation::sigmoid
                     ? out.c_prob
                     : discretize(c_logits, tau, rng, hard);
    out.logits = reshape(linear(reshape(out.c_hard, {1, cfg.bottleneck}), m.param("pc.weight"),
                                m.param("pc.bias")),
                         {cfg.num_classes});
    return out;
}

ConceptReport concept_candidates(const Model& m, const Dataset& dataset, int64_t top_k) {
    const ModelConfig& cfg = m.config();
    if (cfg.kind != ModelKind::xcb) throw ContractError("concepts: requires an xcb model");
    if (dataset.n() == 0) throw ContractError("concepts: empty dataset");
    if (top_k < 1) throw ContractError("concepts: top_k must be >= 1");
    NoGradGuard guard;

    const int64_t q = cfg.bottleneck;
    std::vector<std::vector<double>> acc(static_cast<size_t>(cfg.vocab_size),
                                         std::vector<double>(static_cast<size_t>(q), 0.0));
    std::vector<int64_t> count(static_cast<size_t>(cfg.vocab_size), 0);
    for (int64_t i = 0; i < dataset.n(); ++i) {
        const auto& ex = dataset.examples[static_cast<size_t>(i)];
        TextForward tf = xcb_text_forward(m, ex.tokens, 1.0, nullptr, true);
        const Tensor& a = tf.attention.attention;
        const int64_t cols = a.dim(1);
        for (int64_t t = 0; t < tf.attention.real_tokens; ++t) {
            const auto id = static_cast<size_t>(ex.tokens[static_cast<size_t>(t)]);
            count[id] += 1;
            for (int64_t j = 0; j < q; ++j)
                acc[id][static_cast<size_t>(j)] += a.data()[static_cast<size_t>(t * cols + j)];
        }
    }

    std::vector<std::vector<std::pair<double, int64_t>>> active(static_cast<size_t>(q));
    constexpr int64_t kBatch = 64;
    for (int64_t start = 0; start < dataset.n(); start += kBatch) {
        const int64_t stop = std::min(dataset.n(), start + kBatch);
        std::vector<int64_t> idx(static_cast<size_t>(stop - start));
        std::iota(idx.begin(), idx.end(), start);
        VisualForward vf = xcb_visual_forward(m, batch_images(dataset, idx), 1.0, nullptr, true);
        for (int64_t b = 0; b < stop - start; ++b)
            for (int64_t j = 0; j < q; ++j)
                if (vf.f_hard.data()[static_cast<size_t>(b * q + j)] > 0.5)
                    active[static_cast<size_t>(j)].push_back(
                        {vf.f_prob.data()[static_cast<size_t>(b * q + j)],
                         dataset.examples[static_cast<size_t>(start + b)].id});
    }

    constexpr size_t kMaxActiveExamples = 64;
    ConceptReport report;
    report.bottleneck = q;
    for (int64_t j = 0; j < q; ++j) {
        FactorReport fr;
        fr.factor = j;
        std::vector<TokenScore> ranked;
        double factor_max = 0.0;
        for (int64_t id = 0; id < cfg.vocab_size; ++id) {
            if (count[static_cast<size_t>(id)] == 0) continue;
            TokenScore ts;
            ts.token_id = static_cast<int>(id);
            ts.token = dataset.vocab.token_of(static_cast<int>(id));
            ts.score = acc[static_cast<size_t>(id)][static_cast<size_t>(j)] /
                       static_cast<double>(count[static_cast<size_t>(id)]);
            factor_max = std::max(factor_max, ts.score);
            ranked.push_back(std::move(ts));
        }
        for (auto& ts : ranked) ts.psi = factor_max > 0.0 ? ts.score / factor_max : 0.0;
        std::sort(ranked.begin(), ranked.end(), [](const TokenScore& a, const TokenScore& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.token_id < b.token_id;
        });
        if (static_cast<int64_t>(ranked.size()) > top_k) ranked.resize(static_cast<size_t>(top_k));
        fr.tokens = std::move(ranked);

        auto& act = active[static_cast<size_t>(j)];
        std::sort(act.begin(), act.end(),
                  [](const std::pair<double, int64_t>& a, const std::pair<double, int64_t>& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                  });
        for (size_t i = 0; i < std::min(act.size(), kMaxActiveExamples); ++i)
            fr.active_examples.push_back(act[i].second);
        report.factors.push_back(std::move(fr));
    }
    return report;
}

namespace {

json config_to_json(const ModelConfig& cfg) {
    return json{{"kind", to_string(cfg.kind)},
                {"resolution", cfg.resolution},
                {"num_classes", cfg.num_classes},
                {"bottleneck", cfg.bottleneck},
                {"num_attributes", cfg.num_attributes},
                {"vocab_size", cfg.vocab_size},
                {"embed_dim", cfg.embed_dim},
                {"bottleneck_activation", to_string(cfg.bottleneck_activation)},
                {"attention_activation", to_string(cfg.attention_activation)},
                {"normalization", to_string(cfg.normalization)},
                {"use_dummies", cfg.use_dummies},
                {"sparsity_reg", cfg.sparsity_reg},
                {"tie", to_string(cfg.tie)}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.kind = model_kind_from_string(j.at("kind").get<std::string>());
    cfg.resolution = j.at("resolution").get<int64_t>();
    cfg.num_classes = j.at("num_classes").get<int64_t>();
    cfg.bottleneck = j.at("bottleneck").get<int64_t>();
    cfg.num_attributes = j.at("num_attributes").get<int64_t>();
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.embed_dim = j.at("embed_dim").get<int64_t>();
    cfg.bottleneck_activation =
        bottleneck_activation_from_string(j.at("bottleneck_activation").get<std::string>());
    cfg.attention_activation =
        attention_activation_from_string(j.at("attention_activation").get<std::string>());
    cfg.normalization = attention_norm_from_string(j.at("normalization").get<std::string>());
    cfg.use_dummies = j.at("use_dummies").get<bool>();
    cfg.sparsity_reg = j.at("sparsity_reg").get<bool>();
    cfg.tie = tie_kind_from_string(j.at("tie").get<std::string>());
    return cfg;
}

void append_u64(std::string& buf, uint64_t v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

void append_i64(std::string& buf, int64_t v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

class CheckpointReader {
public:
    CheckpointReader(std::string bytes, std::string path)
        : bytes_(std::move(bytes)), path_(std::move(path)) {}

    const char* take(size_t n) {
        if (n > bytes_.size() - pos_)
            throw ParseError("checkpoint " + path_ + ": truncated at byte " + std::to_string(pos_));
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

    uint64_t take_u64() {
        uint64_t v;
        std::memcpy(&v, take(sizeof(v)), sizeof(v));
        return v;
    }

    int64_t take_i64() {
        int64_t v;
        std::memcpy(&v, take(sizeof(v)), sizeof(v));
        return v;
    }

    bool exhausted() const { return pos_ == bytes_.size(); }
    const std::string& path() const { return path_; }

private:
    std::string bytes_;
    std::string path_;
    size_t pos_ = 0;
};

}  // namespace

std::string model_config_json(const ModelConfig& cfg) { return config_to_json(cfg).dump(2); }

std::string concept_report_json(const ConceptReport& report) {
    json factors = json::array();
    for (const auto& f : report.factors) {
        json tokens = json::array();
        for (const auto& t : f.tokens) {
            tokens.push_back(json{{"token_id", t.token_id},
                                  {"token", t.token},
                                  {"score", t.score},
                                  {"psi", t.psi}});
        }
        factors.push_back(json{{"factor", f.factor},
                               {"tokens", std::move(tokens)},
                               {"active_examples", f.active_examples}});
    }
    return json{{"bottleneck", report.bottleneck}, {"factors", std::move(factors)}}.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
    try {
        return config_from_json(json::parse(text));
    } catch (const json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
}

void save_checkpoint(const Model& m, const std::string& path) {
    if (m.params().empty()) throw ContractError("checkpoint: cannot save an empty model");
    std::string buf;
    buf.append(kCheckpointMagic, 8);
    const std::string cfg_json = config_to_json(m.config()).dump();
    append_u64(buf, cfg_json.size());
    buf += cfg_json;
    append_u64(buf, m.params().size());
    for (const auto& [name, t] : m.params()) {
        append_u64(buf, name.size());
        buf += name;
        append_u64(buf, static_cast<uint64_t>(t.ndim()));
        for (int64_t d : t.shape()) append_i64(buf, d);
        buf.append(reinterpret_cast<const char*>(t.data().data()),
                   static_cast<size_t>(t.numel()) * sizeof(double));
    }
    write_file_atomic(path, buf);
}

Model load_checkpoint(const std::string& path) {
    CheckpointReader in(read_file(path), path);
    if (std::memcmp(in.take(8), kCheckpointMagic, 8) != 0)
        throw ParseError("checkpoint " + path + ": bad magic (not a checkpoint file?)");
    const uint64_t cfg_len = in.take_u64();
    const std::string cfg_json(in.take(cfg_len), cfg_len);
    ModelConfig cfg;
    try {
        cfg = config_from_json(json::parse(cfg_json));
    } catch (const json::exception& e) {
        throw ParseError("checkpoint " + path + ": bad config echo: " + e.what());
    }

    Model m(cfg, 0);
    const uint64_t n_params = in.take_u64();
    if (n_params != m.params().size())
        throw ParseError("checkpoint " + path + ": holds " + std::to_string(n_params) +
                         " parameters, config implies " + std::to_string(m.params().size()));
    for (uint64_t p = 0; p < n_params; ++p) {
        const uint64_t name_len = in.take_u64();
        const std::string name(in.take(name_len), name_len);
        if (!m.has_param(name))
            throw ParseError("checkpoint " + path + ": unknown parameter '" + name + "'");
        Tensor t = m.param(name);
        const auto ndim = static_cast<int64_t>(in.take_u64());
        if (ndim < 0 || ndim > 8)
            throw ParseError("checkpoint " + path + ": parameter '" + name +
                             "' claims rank " + std::to_string(ndim));
        Shape shape(static_cast<size_t>(ndim));
        for (auto& d : shape) d = in.take_i64();
        if (shape != t.shape())
            throw ParseError("checkpoint " + path + ": parameter '" + name + "' has shape " +
                             shape_str(shape) + ", expected " + shape_str(t.shape()));
        const auto n = static_cast<size_t>(t.numel());
        std::memcpy(t.data().data(), in.take(n * sizeof(double)), n * sizeof(double));
    }
    if (!in.exhausted())
        throw ParseError("checkpoint " + path + ": trailing bytes after the last parameter");
    return m;
}

Model load_checkpoint(const std::string& path, const ModelConfig& expected) {
    Model m = load_checkpoint(path);
    if (!(m.config() == expected))
        throw ContractError("checkpoint " + path + ": config mismatch (stored " +
                            config_to_json(m.config()).dump() + ", expected " +
                            config_to_json(expected).dump() + ")");
    return m;
}

}  // namespace xcb
