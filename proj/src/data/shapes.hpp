#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "core/common.hpp"

namespace xcb {

enum class ShapeKind { square = 0, triangle = 1, circle = 2 };
enum class ColorKind { red = 0, green = 1, blue = 2 };
enum class SizeKind { small = 0, medium = 1, large = 2 };

struct ShapeSpec {
    ShapeKind shape;
    ColorKind color;
    SizeKind size;
    int row = 0;  // center, pixels
    int col = 0;
};

// Half-extent in pixels of each size class at a given canvas resolution
// (10% / 17% / 25% of the side).
int shape_radius(SizeKind size, int resolution);

struct ShapesExample {
    int64_t id = 0;
    std::vector<float> image;        // H*W*3 row-major, values in [0,1]
    std::vector<int> tokens;         // vocabulary ids
    std::array<int, 6> attributes{}; // one-hot shape ++ one-hot color
    int label = 0;                   // 3*shape + color
};

class Vocabulary {
public:
    Vocabulary() = default;

    int add(const std::string& token);          // idempotent, returns id
    int id_of(const std::string& token) const;  // throws ContractError if absent
    bool contains(const std::string& token) const { return ids_.count(token) > 0; }
    const std::string& token_of(int id) const;
    int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
    int64_t real_size() const;  // excludes <pad> and dummy entries

    int pad_id() const { return pad_id_; }
    bool is_dummy(int id) const;
    // Appends q dummy entries (<dummy0>..) if not yet present; returns first id.
    int ensure_dummies(int q);
    int num_dummies() const { return num_dummy_; }
    int first_dummy_id() const { return first_dummy_id_; }

    const std::vector<std::string>& all_tokens() const { return tokens_; }

    bool operator==(const Vocabulary& other) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
    int pad_id_ = -1;
    int first_dummy_id_ = -1;
    int num_dummy_ = 0;

    friend Vocabulary make_shapes_vocabulary();
    friend Vocabulary vocabulary_from_lines(const std::vector<std::string>& lines);
};

// The fixed caption vocabulary: <pad> at id 0, then every grammar word in a
// stable order. Dummy entries are added later by the text model.
Vocabulary make_shapes_vocabulary();
Vocabulary vocabulary_from_lines(const std::vector<std::string>& lines);

struct GenOptions {
    bool shortcut = false;
    double noisy_frac = 0.0;
    bool redundant = false;
};

// Per-caption synonym decisions, kept at generation time so a paraphrase can
// take the complementary choice in every slot.
struct CaptionDraw {
    int det = 0, noun = 0, verb = 0, size_syn = 0, color_syn = 0;
    bool two_word_shape = false;
    int shape_variant = 0;
    int prep = 0;
    bool tail = true;
    int tail_word = 0;
};

struct Dataset {
    int resolution = 0;
    Vocabulary vocab;
    std::vector<ShapesExample> examples;

    // Generation-time sidecar (not persisted): lets redundancy and tests
    // reason about the true underlying spec.
    bool has_specs = false;
    std::vector<ShapeSpec> specs;
    std::vector<CaptionDraw> draws;

    int64_t n() const { return static_cast<int64_t>(examples.size()); }
};

CaptionDraw draw_caption(Rng& rng);
CaptionDraw complement_draw(const CaptionDraw& d);
std::vector<std::string> render_caption(const ShapeSpec& spec, int resolution,
                                        const CaptionDraw& draw);
std::vector<std::string> generate_caption(const ShapeSpec& spec, int resolution, Rng& rng);

std::vector<float> rasterize(const ShapeSpec& spec, int resolution);

// 5x7 digit bitmap rows ("01110", ...), scaled x2 and stamped black at
// offset (2,2); the glyph stays inside a 12-wide x 16-tall corner box.
const std::array<std::array<const char*, 7>, 10>& digit_font();
void inject_shortcut(std::vector<float>& image, int resolution, int label);

Dataset generate_dataset(int64_t n, uint64_t seed, int resolution, const GenOptions& opts = {});

void corrupt_captions(Dataset& dataset, double frac, Rng& rng);
void add_redundancy(Dataset& dataset, Rng& rng);

struct SplitRatios {
    double train = 0.75, val = 0.15, test = 0.10;
};
struct Splits {
    Dataset train, val, test;
};
Splits split(const Dataset& dataset, const SplitRatios& ratios, uint64_t seed);

void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

bool datasets_equal(const Dataset& a, const Dataset& b);

struct CorpusStats {
    int64_t vocab_real = 0;
    double mean_tokens = 0.0;
    int64_t max_tokens = 0;
};
CorpusStats corpus_stats(const Dataset& dataset);

}  // namespace xcb
