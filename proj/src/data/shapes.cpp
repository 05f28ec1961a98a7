#include "data/shapes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace xcb {

static_assert(std::endian::native == std::endian::little,
              "dataset files are little-endian; big-endian hosts need byte swaps");

namespace {

// Stream tags for derive_seed: every purpose draws from its own stream so
// adding a consumer never shifts another one.
constexpr uint64_t kStreamExamples = 101;
constexpr uint64_t kStreamCorrupt = 102;
constexpr uint64_t kStreamSplit = 103;
constexpr uint64_t kStreamRedundant = 104;

const std::array<const char*, 2> kDets = {"the", "this"};
const std::array<const char*, 2> kNouns = {"image", "picture"};
const std::array<const char*, 2> kVerbs = {"shows", "contains"};
const std::array<std::array<const char*, 2>, 3> kSizeWords = {{
    {"small", "tiny"}, {"medium", "midsize"}, {"large", "big"}}};
const std::array<std::array<const char*, 2>, 3> kColorWords = {{
    {"red", "crimson"}, {"green", "emerald"}, {"blue", "azure"}}};
const std::array<const char*, 3> kShapeOneWord = {"square", "triangle", "circle"};
// Two-token shape phrases; the paper-attested attention tokens live here.
const std::array<std::vector<std::array<const char*, 2>>, 3> kShapeTwoWord = {{
    {{{"quadratic", "shape"}}},
    {{{"triangular", "shape"}}, {{"three", "angles"}}},
    {{{"circular", "shape"}}, {{"round", "shape"}}}}};
const std::array<const char*, 2> kPreps = {"in", "at"};
const std::array<const char*, 5> kPositions = {"top", "bottom", "left", "right", "center"};
const std::array<const char*, 2> kTails = {"part", "area"};

constexpr double kTwoWordShapeProb = 0.35;
constexpr double kTailProb = 0.8;

const char* position_word(const ShapeSpec& spec, int resolution) {
    const int row_third = std::min(2, 3 * spec.row / resolution);
    const int col_third = std::min(2, 3 * spec.col / resolution);
    if (row_third == 0) return "top";
    if (row_third == 2) return "bottom";
    if (col_third == 0) return "left";
    if (col_third == 2) return "right";
    return "center";
}

void set_pixel(std::vector<float>& img, int resolution, int r, int c,
               const std::array<float, 3>& color) {
    float* px = img.data() + (static_cast<size_t>(r) * resolution + c) * 3;
    px[0] = color[0];
    px[1] = color[1];
    px[2] = color[2];
}

void write_images_atomic(const fs::path& path, const Dataset& ds) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for write: " + tmp.string());
        for (const auto& ex : ds.examples) {
            out.write(reinterpret_cast<const char*>(ex.image.data()),
                      static_cast<std::streamsize>(ex.image.size() * sizeof(float)));
        }
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

}  // namespace

int shape_radius(SizeKind size, int resolution) {
    const double frac = size == SizeKind::small ? 0.10 : size == SizeKind::medium ? 0.17 : 0.25;
    return std::max(1, static_cast<int>(std::lround(frac * resolution)));
}

int Vocabulary::add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) throw ContractError("vocabulary: unknown token \"" + token + "\"");
    return it->second;
}

const std::string& Vocabulary::token_of(int id) const {
    if (id < 0 || id >= static_cast<int>(tokens_.size()))
        throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<size_t>(id)];
}

int64_t Vocabulary::real_size() const {
    return size() - (pad_id_ >= 0 ? 1 : 0) - num_dummy_;
}

bool Vocabulary::is_dummy(int id) const {
    return num_dummy_ > 0 && id >= first_dummy_id_ && id < first_dummy_id_ + num_dummy_;
}

int Vocabulary::ensure_dummies(int q) {
    if (q < 1) throw ContractError("vocabulary: dummy count must be >= 1");
    if (num_dummy_ == q) return first_dummy_id_;
    if (num_dummy_ != 0) throw ContractError("vocabulary: dummy count already fixed");
    first_dummy_id_ = static_cast<int>(tokens_.size());
    num_dummy_ = q;
    for (int i = 0; i < q; ++i) add("<dummy" + std::to_string(i) + ">");
    return first_dummy_id_;
}

bool Vocabulary::operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && pad_id_ == other.pad_id_ &&
           first_dummy_id_ == other.first_dummy_id_ && num_dummy_ == other.num_dummy_;
}

Vocabulary make_shapes_vocabulary() {
    Vocabulary v;
    v.pad_id_ = v.add("<pad>");
    for (auto w : kDets) v.add(w);
    for (auto w : kNouns) v.add(w);
    for (auto w : kVerbs) v.add(w);
    v.add("a");
    for (const auto& pair : kSizeWords)
        for (auto w : pair) v.add(w);
    for (const auto& pair : kColorWords)
        for (auto w : pair) v.add(w);
    for (auto w : kShapeOneWord) v.add(w);
    for (const auto& variants : kShapeTwoWord)
        for (const auto& pair : variants)
            for (auto w : pair) v.add(w);
    for (auto w : kPreps) v.add(w);
    for (auto w : kPositions) v.add(w);
    for (auto w : kTails) v.add(w);
    return v;
}

Vocabulary vocabulary_from_lines(const std::vector<std::string>& lines) {
    Vocabulary v;
    for (const auto& line : lines) {
        const int id = v.add(line);
        if (line == "<pad>") v.pad_id_ = id;
        if (line.rfind("<dummy", 0) == 0) {
            if (v.num_dummy_ == 0) v.first_dummy_id_ = id;
            ++v.num_dummy_;
        } else if (v.num_dummy_ > 0) {
            throw ParseError("vocab.txt: dummy entries must be contiguous at the end");
        }
    }
    return v;
}

CaptionDraw draw_caption(Rng& rng) {
    CaptionDraw d;
    d.det = static_cast<int>(rng.randint(2));
    d.noun = static_cast<int>(rng.randint(2));
    d.verb = static_cast<int>(rng.randint(2));
    d.size_syn = static_cast<int>(rng.randint(2));
    d.color_syn = static_cast<int>(rng.randint(2));
    d.two_word_shape = rng.uniform() < kTwoWordShapeProb;
    d.shape_variant = static_cast<int>(rng.randint(2));
    d.prep = static_cast<int>(rng.randint(2));
    d.tail = rng.uniform() < kTailProb;
    d.tail_word = static_cast<int>(rng.randint(2));
    return d;
}

CaptionDraw complement_draw(const CaptionDraw& d) {
    CaptionDraw c;
    c.det = 1 - d.det;
    c.noun = 1 - d.noun;
    c.verb = 1 - d.verb;
    c.size_syn = 1 - d.size_syn;
    c.color_syn = 1 - d.color_syn;
    c.two_word_shape = !d.two_word_shape;
    c.shape_variant = d.shape_variant + 1;
    c.prep = 1 - d.prep;
    c.tail = true;
    c.tail_word = 1 - d.tail_word;
    return c;
}

std::vector<std::string> render_caption(const ShapeSpec& spec, int resolution,
                                        const CaptionDraw& d) {
    const auto si = static_cast<size_t>(spec.shape);
    const auto ci = static_cast<size_t>(spec.color);
    const auto zi = static_cast<size_t>(spec.size);
    std::vector<std::string> t;
    t.reserve(12);
    t.emplace_back(kDets[d.det]);
    t.emplace_back(kNouns[d.noun]);
    t.emplace_back(kVerbs[d.verb]);
    t.emplace_back("a");
    t.emplace_back(kSizeWords[zi][d.size_syn]);
    t.emplace_back(kColorWords[ci][d.color_syn]);
    if (d.two_word_shape) {
        const auto& variants = kShapeTwoWord[si];
        const auto& phrase = variants[static_cast<size_t>(d.shape_variant) % variants.size()];
        t.emplace_back(phrase[0]);
        t.emplace_back(phrase[1]);
    } else {
        t.emplace_back(kShapeOneWord[si]);
    }
    t.emplace_back(kPreps[d.prep]);
    t.emplace_back("the");
    t.emplace_back(position_word(spec, resolution));
    if (d.tail) t.emplace_back(kTails[d.tail_word]);
    return t;
}

std::vector<std::string> generate_caption(const ShapeSpec& spec, int resolution, Rng& rng) {
    return render_caption(spec, resolution, draw_caption(rng));
}

std::vector<float> rasterize(const ShapeSpec& spec, int resolution) {
    const int r = shape_radius(spec.size, resolution);
    if (spec.row - r < 0 || spec.row + r >= resolution || spec.col - r < 0 ||
        spec.col + r >= resolution) {
        throw ContractError("rasterize: shape does not fit canvas at center (" +
                            std::to_string(spec.row) + "," + std::to_string(spec.col) + ")");
    }
    std::vector<float> img(static_cast<size_t>(resolution) * resolution * 3, 1.0f);
    std::array<float, 3> color{0, 0, 0};
    color[static_cast<size_t>(spec.color)] = 1.0f;

    switch (spec.shape) {
        case ShapeKind::square:
            for (int row = spec.row - r; row <= spec.row + r; ++row)
                for (int col = spec.col - r; col <= spec.col + r; ++col)
                    set_pixel(img, resolution, row, col, color);
            break;
        case ShapeKind::triangle:
            for (int row = spec.row - r; row <= spec.row + r; ++row) {
                const double t = static_cast<double>(row - (spec.row - r)) / (2.0 * r);
                const int hw = static_cast<int>(std::lround(t * r));
                for (int col = spec.col - hw; col <= spec.col + hw; ++col)
                    set_pixel(img, resolution, row, col, color);
            }
            break;
        case ShapeKind::circle:
            for (int row = spec.row - r; row <= spec.row + r; ++row)
                for (int col = spec.col - r; col <= spec.col + r; ++col) {
                    const int dr = row - spec.row, dc = col - spec.col;
                    if (dr * dr + dc * dc <= r * r) set_pixel(img, resolution, row, col, color);
                }
            break;
    }
    return img;
}

const std::array<std::array<const char*, 7>, 10>& digit_font() {
    static const std::array<std::array<const char*, 7>, 10> font = {{
        {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},  // 0
        {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},  // 1
        {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},  // 2
        {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},  // 3
        {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},  // 4
        {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},  // 5
        {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},  // 6
        {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},  // 7
        {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},  // 8
        {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},  // 9
    }};
    return font;
}

void inject_shortcut(std::vector<float>& image, int resolution, int label) {
    if (label < 0 || label > 8) throw ContractError("inject_shortcut: label out of [0,8]");
    if (static_cast<size_t>(resolution) * resolution * 3 != image.size())
        throw DimensionError("inject_shortcut: image size does not match resolution");
    const auto& glyph = digit_font()[static_cast<size_t>(label)];
    constexpr int kScale = 2, kOffset = 2;
    const std::array<float, 3> black{0, 0, 0};
    for (int gr = 0; gr < 7; ++gr) {
        for (int gc = 0; gc < 5; ++gc) {
            if (glyph[gr][gc] != '1') continue;
            for (int dy = 0; dy < kScale; ++dy)
                for (int dx = 0; dx < kScale; ++dx)
                    set_pixel(image, resolution, kOffset + gr * kScale + dy,
                              kOffset + gc * kScale + dx, black);
        }
    }
}

Dataset generate_dataset(int64_t n, uint64_t seed, int resolution, const GenOptions& opts) {
    if (n < 9) throw ContractError("generate_dataset: need at least 9 examples (one per class)");
    if (resolution < 32) throw ContractError("generate_dataset: resolution must be >= 32");

    Dataset ds;
    ds.resolution = resolution;
    ds.vocab = make_shapes_vocabulary();
    ds.has_specs = true;
    ds.examples.reserve(static_cast<size_t>(n));
    ds.specs.reserve(static_cast<size_t>(n));
    ds.draws.reserve(static_cast<size_t>(n));

    const uint64_t example_stream = derive_seed(seed, kStreamExamples);
    for (int64_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(example_stream, static_cast<uint64_t>(i)));
        const int cls = static_cast<int>(i % 9);

        ShapeSpec spec;
        spec.shape = static_cast<ShapeKind>(cls / 3);
        spec.color = static_cast<ColorKind>(cls % 3);
        spec.size = static_cast<SizeKind>(rng.randint(3));
        const int r = shape_radius(spec.size, resolution);
        spec.row = r + static_cast<int>(rng.randint(resolution - 2 * r));
        spec.col = r + static_cast<int>(rng.randint(resolution - 2 * r));

        const CaptionDraw draw = draw_caption(rng);
        const auto words = render_caption(spec, resolution, draw);

        ShapesExample ex;
        ex.id = i;
        ex.image = rasterize(spec, resolution);
        if (opts.shortcut) inject_shortcut(ex.image, resolution, cls);
        for (const auto& w : words) ex.tokens.push_back(ds.vocab.id_of(w));
        ex.attributes.fill(0);
        ex.attributes[static_cast<size_t>(spec.shape)] = 1;
        ex.attributes[3 + static_cast<size_t>(spec.color)] = 1;
        ex.label = cls;

        ds.examples.push_back(std::move(ex));
        ds.specs.push_back(spec);
        ds.draws.push_back(draw);
    }

    if (opts.redundant) {
        Rng rng(derive_seed(seed, kStreamRedundant));
        add_redundancy(ds, rng);
    }
    if (opts.noisy_frac > 0.0) {
        Rng rng(derive_seed(seed, kStreamCorrupt));
        corrupt_captions(ds, opts.noisy_frac, rng);
    }
    return ds;
}

void corrupt_captions(Dataset& dataset, double frac, Rng& rng) {
    if (frac < 0.0 || frac > 1.0) throw ContractError("corrupt_captions: frac must be in [0,1]");
    const int64_t n = dataset.n();
    const auto k = static_cast<int64_t>(std::floor(frac * static_cast<double>(n)));
    if (k == 0 || n < 2) return;

    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int64_t i = 0; i < k; ++i) {
        const int64_t j = i + rng.randint(n - i);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }

    // Donors come from the pre-corruption captions.
    std::vector<std::vector<int>> originals;
    originals.reserve(static_cast<size_t>(n));
    for (const auto& ex : dataset.examples) originals.push_back(ex.tokens);

    for (int64_t i = 0; i < k; ++i) {
        const int64_t target = idx[static_cast<size_t>(i)];
        int64_t donor = rng.randint(n - 1);
        if (donor >= target) ++donor;
        dataset.examples[static_cast<size_t>(target)].tokens =
            originals[static_cast<size_t>(donor)];
    }
}

void add_redundancy(Dataset& dataset, Rng& rng) {
    (void)rng;  // the paraphrase is the deterministic synonym complement
    if (!dataset.has_specs)
        throw ContractError("add_redundancy: dataset lacks generation-time specs");
    for (size_t i = 0; i < dataset.examples.size(); ++i) {
        const auto words = render_caption(dataset.specs[i], dataset.resolution,
                                          complement_draw(dataset.draws[i]));
        for (const auto& w : words)
            dataset.examples[i].tokens.push_back(dataset.vocab.id_of(w));
    }
}

Splits split(const Dataset& dataset, const SplitRatios& ratios, uint64_t seed) {
    if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw ContractError("split: ratios must sum to 1");
    const int64_t n = dataset.n();
    std::vector<int64_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(seed, kStreamSplit));
    for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = rng.randint(i + 1);
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }
    const auto n_train = static_cast<int64_t>(std::floor(ratios.train * static_cast<double>(n)));
    const auto n_val = static_cast<int64_t>(std::floor(ratios.val * static_cast<double>(n)));

    auto take = [&](int64_t lo, int64_t hi) {
        Dataset out;
        out.resolution = dataset.resolution;
        out.vocab = dataset.vocab;
        out.has_specs = dataset.has_specs;
        for (int64_t i = lo; i < hi; ++i) {
            const auto src = static_cast<size_t>(perm[static_cast<size_t>(i)]);
            out.examples.push_back(dataset.examples[src]);
            if (dataset.has_specs) {
                out.specs.push_back(dataset.specs[src]);
                out.draws.push_back(dataset.draws[src]);
            }
        }
        return out;
    };
    Splits s;
    s.train = take(0, n_train);
    s.val = take(n_train, n_train + n_val);
    s.test = take(n_train + n_val, n);
    return s;
}

void save_dataset(const Dataset& dataset, const std::string& dir) {
    fs::create_directories(dir);

    std::string vocab_txt;
    for (const auto& t : dataset.vocab.all_tokens()) {
        vocab_txt += t;
        vocab_txt += '\n';
    }
    write_file_atomic(fs::path(dir) / "vocab.txt", vocab_txt);

    write_images_atomic(fs::path(dir) / "images.bin", dataset);

    const size_t block_bytes =
        static_cast<size_t>(dataset.resolution) * dataset.resolution * 3 * sizeof(float);
    std::string manifest;
    for (size_t i = 0; i < dataset.examples.size(); ++i) {
        const auto& ex = dataset.examples[i];
        json rec;
        rec["id"] = ex.id;
        rec["resolution"] = dataset.resolution;
        rec["tokens"] = ex.tokens;
        std::vector<std::string> strs;
        strs.reserve(ex.tokens.size());
        for (int id : ex.tokens) strs.push_back(dataset.vocab.token_of(id));
        rec["token_strings"] = strs;
        rec["attributes"] = ex.attributes;
        rec["label"] = ex.label;
        rec["image_offset"] = i * block_bytes;
        manifest += rec.dump();
        manifest += '\n';
    }
    write_file_atomic(fs::path(dir) / "manifest.jsonl", manifest);
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.has_specs = false;

    {
        const std::string raw = read_file(fs::path(dir) / "vocab.txt");
        std::vector<std::string> lines;
        std::string cur;
        for (char ch : raw) {
            if (ch == '\n') {
                lines.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        if (!cur.empty()) lines.push_back(cur);
        ds.vocab = vocabulary_from_lines(lines);
    }

    const std::string images = read_file(fs::path(dir) / "images.bin");
    const std::string manifest = read_file(fs::path(dir) / "manifest.jsonl");

    size_t pos = 0;
    int line_no = 0;
    while (pos < manifest.size()) {
        size_t end = manifest.find('\n', pos);
        if (end == std::string::npos) end = manifest.size();
        const std::string line = manifest.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        ++line_no;

        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            ShapesExample ex;
            ex.id = rec.at("id").get<int64_t>();
            if (ds.resolution == 0) ds.resolution = rec.at("resolution").get<int>();
            ex.tokens = rec.at("tokens").get<std::vector<int>>();
            const auto attrs = rec.at("attributes").get<std::vector<int>>();
            if (attrs.size() != 6)
                throw ParseError("manifest record " + std::to_string(ex.id) +
                                 ": expected 6 attributes");
            std::copy(attrs.begin(), attrs.end(), ex.attributes.begin());
            ex.label = rec.at("label").get<int>();

            const auto offset = rec.at("image_offset").get<size_t>();
            const size_t block_bytes =
                static_cast<size_t>(ds.resolution) * ds.resolution * 3 * sizeof(float);
            if (offset + block_bytes > images.size())
                throw ParseError("images.bin: missing image record for id " +
                                 std::to_string(ex.id));
            ex.image.resize(block_bytes / sizeof(float));
            std::memcpy(ex.image.data(), images.data() + offset, block_bytes);

            // Light consistency check against the id-resolved strings.
            const auto strs = rec.at("token_strings").get<std::vector<std::string>>();
            if (strs.size() != ex.tokens.size())
                throw ParseError("manifest record " + std::to_string(ex.id) +
                                 ": token/string length mismatch");
            for (size_t t = 0; t < strs.size(); ++t) {
                if (ds.vocab.token_of(ex.tokens[t]) != strs[t])
                    throw ParseError("manifest record " + std::to_string(ex.id) +
                                     ": token string disagrees with vocab");
            }
            ds.examples.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
    }

    const size_t block_bytes =
        static_cast<size_t>(ds.resolution) * ds.resolution * 3 * sizeof(float);
    if (block_bytes == 0 || images.size() != ds.examples.size() * block_bytes)
        throw ParseError("dataset integrity: manifest lists " +
                         std::to_string(ds.examples.size()) + " records but images.bin holds " +
                         std::to_string(block_bytes ? images.size() / block_bytes : 0) +
                         " blocks");
    return ds;
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
    if (a.resolution != b.resolution || !(a.vocab == b.vocab) || a.n() != b.n()) return false;
    for (int64_t i = 0; i < a.n(); ++i) {
        const auto& x = a.examples[static_cast<size_t>(i)];
        const auto& y = b.examples[static_cast<size_t>(i)];
        if (x.id != y.id || x.tokens != y.tokens || x.attributes != y.attributes ||
            x.label != y.label || x.image.size() != y.image.size())
            return false;
        if (std::memcmp(x.image.data(), y.image.data(), x.image.size() * sizeof(float)) != 0)
            return false;
    }
    return true;
}

CorpusStats corpus_stats(const Dataset& dataset) {
    CorpusStats s;
    s.vocab_real = dataset.vocab.real_size();
    for (const auto& ex : dataset.examples) {
        s.mean_tokens += static_cast<double>(ex.tokens.size());
        s.max_tokens = std::max<int64_t>(s.max_tokens, static_cast<int64_t>(ex.tokens.size()));
    }
    if (!dataset.examples.empty()) s.mean_tokens /= static_cast<double>(dataset.n());
    return s;
}

}  // namespace xcb
