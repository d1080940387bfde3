#pragma once

// Vocabulary and tokenization, PPM image codec, synthetic scene corpora for
// pretraining and the downstream tasks, manifests and batch collation.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vlkit/batch.hpp"
#include "vlkit/config.hpp"
#include "vlkit/params.hpp"
#include "vlkit/random.hpp"

namespace vlkit {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
public:
    static inline const std::vector<std::string> kReserved{"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};

    Vocab() : Vocab(std::vector<std::string>{}) {}

    /// Reserved tokens followed by `words` (which must not repeat).
    explicit Vocab(const std::vector<std::string>& words) {
        for (const auto& t : kReserved) push(t);
        for (const auto& w : words) push(w);
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::int32_t id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnkId : it->second;
    }
    bool contains(const std::string& token) const { return index_.count(token) > 0; }

    const std::string& token(std::int32_t id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw std::out_of_range("vocab: id " + std::to_string(id) + " outside " + std::to_string(size()) + " tokens");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    /// One token per line; the line number is the id.
    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw DataError("cannot write vocab " + path.string());
        for (const auto& t : tokens_) os << t << '\n';
    }

    static Vocab load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw DataError("cannot read vocab " + path.string());
        std::vector<std::string> lines;
        for (std::string line; std::getline(is, line);) lines.push_back(line);
        if (lines.size() < kReserved.size() || !std::equal(kReserved.begin(), kReserved.end(), lines.begin())) {
            throw DataError(path.string() + ": vocab must start with the five reserved tokens");
        }
        return Vocab(std::vector<std::string>(lines.begin() + static_cast<std::ptrdiff_t>(kReserved.size()), lines.end()));
    }

private:
    void push(const std::string& t) {
        if (!index_.emplace(t, static_cast<std::int32_t>(tokens_.size())).second) {
            throw DataError("vocab: duplicate token '" + t + "'");
        }
        tokens_.push_back(t);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
};

/// Lowercases, splits on whitespace and maps unknown words to [UNK].
inline std::vector<std::int32_t> tokenize(const std::string& text, const Vocab& vocab) {
    std::vector<std::int32_t> ids;
    std::istringstream is(text);
    for (std::string word; is >> word;) {
        std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
        ids.push_back(vocab.id(word));
    }
    return ids;
}

inline std::string detokenize(std::span<const std::int32_t> ids, const Vocab& vocab) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += vocab.token(ids[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// PPM (P6) images

enum class ImageErrorKind { io, malformed_header, truncated, geometry };

class ImageError : public DataError {
public:
    ImageError(ImageErrorKind kind, const std::string& message) : DataError(message), kind_(kind) {}
    ImageErrorKind kind() const noexcept { return kind_; }

private:
    ImageErrorKind kind_;
};

/// 8-bit RGB raster, row-major with interleaved channels.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::array<std::uint8_t, 3> fill = {0, 0, 0}) : height(h), width(w) {
        pixels.reserve(h * w * 3);
        for (std::size_t i = 0; i < h * w; ++i) pixels.insert(pixels.end(), fill.begin(), fill.end());
    }

    void set(std::size_t row, std::size_t col, std::array<std::uint8_t, 3> rgb) {
        std::copy(rgb.begin(), rgb.end(), pixels.begin() + static_cast<std::ptrdiff_t>((row * width + col) * 3));
    }
};

inline void write_ppm(const std::filesystem::path& path, const Image& image) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ImageError(ImageErrorKind::io, "cannot write " + path.string());
    os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

inline Image read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ImageError(ImageErrorKind::io, "cannot open image " + path.string());
    auto next_token = [&]() {
        std::string tok;
        int c;
        while ((c = is.get()) != EOF) {
            if (c == '#') {
                while ((c = is.get()) != EOF && c != '\n') {}
                continue;
            }
            if (std::isspace(c)) {
                if (!tok.empty()) break;
                continue;
            }
            tok += static_cast<char>(c);
        }
        return tok;
    };
    auto number = [&](const char* what) {
        const auto tok = next_token();
        if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); })) {
            throw ImageError(ImageErrorKind::malformed_header, path.string() + ": bad " + what + " '" + tok + "'");
        }
        return std::stoul(tok);
    };
    if (next_token() != "P6") throw ImageError(ImageErrorKind::malformed_header, path.string() + ": not a binary PPM (P6)");
    Image img;
    img.width = number("width");
    img.height = number("height");
    const auto maxval = number("maxval");
    if (maxval != 255) throw ImageError(ImageErrorKind::malformed_header, path.string() + ": only 8-bit PPM is supported");
    if (img.width == 0 || img.height == 0) throw ImageError(ImageErrorKind::malformed_header, path.string() + ": empty image");
    img.pixels.resize(img.width * img.height * 3);
    is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (static_cast<std::size_t>(is.gcount()) != img.pixels.size()) {
        throw ImageError(ImageErrorKind::truncated, path.string() + ": payload holds " + std::to_string(is.gcount()) +
                                                         " of " + std::to_string(img.pixels.size()) + " bytes");
    }
    return img;
}

/// Maps 8-bit values to [0, 1] then standardizes with (x - 0.5) / 0.5.
inline std::vector<float> standardize(const Image& image) {
    std::vector<float> out(image.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (static_cast<float>(image.pixels[i]) / 255.0f - 0.5f) / 0.5f;
    return out;
}

inline std::vector<float> decode_image(const std::filesystem::path& path, const ImageGeometry& geometry) {
    auto image = read_ppm(path);
    if (image.height != geometry.height || image.width != geometry.width || geometry.channels != 3) {
        throw ImageError(ImageErrorKind::geometry, path.string() + ": image is " + std::to_string(image.height) + "x" +
                                                       std::to_string(image.width) + "x3, configured " +
                                                       std::to_string(geometry.height) + "x" +
                                                       std::to_string(geometry.width) + "x" +
                                                       std::to_string(geometry.channels));
    }
    return standardize(image);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class ShapeKind { square, circle, triangle };
enum class Color { red, green, blue, yellow, purple, orange };

inline constexpr std::array<const char*, 3> kShapeNames{"square", "circle", "triangle"};
inline constexpr std::array<const char*, 6> kColorNames{"red", "green", "blue", "yellow", "purple", "orange"};
inline constexpr std::array<std::array<std::uint8_t, 3>, 6> kColorRgb{{
    {220, 40, 40}, {40, 180, 60}, {50, 80, 220}, {230, 210, 50}, {150, 60, 190}, {240, 140, 30}}};
inline constexpr std::array<const char*, 4> kNeutralAdjectives{"heavy", "old", "wooden", "soft"};
inline constexpr std::array<const char*, 4> kCountWords{"one", "two", "three", "four"};

inline const char* name(ShapeKind s) { return kShapeNames[static_cast<std::size_t>(s)]; }
inline const char* name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }

/// Closed vocabulary shared by every synthetic task.
inline Vocab synthetic_vocab() {
    std::vector<std::string> words{"a", "the", "there", "is", "left", "right", "of", "above", "below",
                                   "both", "images", "have", "what", "color", "how", "many", "shapes", "are"};
    for (auto c : kColorNames) words.emplace_back(c);
    for (auto s : kShapeNames) words.emplace_back(s);
    for (auto a : kNeutralAdjectives) words.emplace_back(a);
    for (auto n : kCountWords) words.emplace_back(n);
    return Vocab(words);
}

/// Closed answer set of the question-answering task: colors then counts.
inline std::vector<std::string> vqa_answers() {
    std::vector<std::string> a(kColorNames.begin(), kColorNames.end());
    a.insert(a.end(), kCountWords.begin(), kCountWords.end());
    return a;
}

struct SceneObject {
    std::size_t row = 0;
    std::size_t col = 0;
    ShapeKind shape = ShapeKind::square;
    Color color = Color::red;

    bool operator==(const SceneObject&) const = default;
};

/// Objects on a grid x grid lattice of cells over a square canvas.
struct Scene {
    std::size_t grid = 4;
    std::uint8_t background = 128;  // gray level
    std::vector<SceneObject> objects;

    bool has(Color c, ShapeKind s) const {
        return std::any_of(objects.begin(), objects.end(), [&](const auto& o) { return o.color == c && o.shape == s; });
    }
    bool has_color(Color c) const {
        return std::any_of(objects.begin(), objects.end(), [&](const auto& o) { return o.color == c; });
    }
    std::size_t count_color(Color c) const {
        return static_cast<std::size_t>(std::count_if(objects.begin(), objects.end(), [&](const auto& o) { return o.color == c; }));
    }
    std::size_t count_shape(ShapeKind s) const {
        return static_cast<std::size_t>(std::count_if(objects.begin(), objects.end(), [&](const auto& o) { return o.shape == s; }));
    }
    bool operator==(const Scene&) const = default;
};

inline void to_json(json& j, const Scene& s) {
    json objects = json::array();
    for (const auto& o : s.objects) {
        objects.push_back({{"row", o.row}, {"col", o.col}, {"shape", name(o.shape)}, {"color", name(o.color)}});
    }
    j = json{{"grid", s.grid}, {"background", s.background}, {"objects", objects}};
}

inline void from_json(const json& j, Scene& s) {
    s.grid = j.at("grid").get<std::size_t>();
    s.background = j.at("background").get<std::uint8_t>();
    s.objects.clear();
    auto lookup = [](const auto& names, const std::string& v, const char* what) {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (v == names[i]) return i;
        }
        throw DataError(std::string("scene: unknown ") + what + " '" + v + "'");
    };
    for (const auto& o : j.at("objects")) {
        s.objects.push_back({o.at("row").get<std::size_t>(), o.at("col").get<std::size_t>(),
                             static_cast<ShapeKind>(lookup(kShapeNames, o.at("shape").get<std::string>(), "shape")),
                             static_cast<Color>(lookup(kColorNames, o.at("color").get<std::string>(), "color"))});
    }
}

/// Draws each object inside its own cell with a one-pixel margin.
inline Image render_scene(const Scene& scene, const ImageGeometry& geometry) {
    if (geometry.height != geometry.width || geometry.height % scene.grid != 0 || geometry.channels != 3) {
        throw DataError("render: canvas must be square RGB and divisible by the scene grid");
    }
    const std::size_t cell = geometry.height / scene.grid;
    const std::uint8_t bg = scene.background;
    Image img(geometry.height, geometry.width, {bg, bg, bg});
    const double inner = static_cast<double>(cell) - 2.0;
    const double center = static_cast<double>(cell - 1) / 2.0;
    for (const auto& o : scene.objects) {
        for (std::size_t y = 1; y + 1 < cell; ++y) {
            for (std::size_t x = 1; x + 1 < cell; ++x) {
                bool inside = false;
                const double dy = static_cast<double>(y) - center, dx = static_cast<double>(x) - center;
                switch (o.shape) {
                case ShapeKind::square: inside = true; break;
                case ShapeKind::circle: inside = dx * dx + dy * dy <= (inner / 2.0) * (inner / 2.0); break;
                case ShapeKind::triangle: {
                    // apex at the top row, base along the bottom row
                    inside = std::abs(dx) <= static_cast<double>(y) / 2.0;
                    break;
                }
                }
                if (inside) img.set(o.row * cell + y, o.col * cell + x, kColorRgb[static_cast<std::size_t>(o.color)]);
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Tasks and manifests

enum class TaskKind { pretrain, snli_ve, nlvr2, ref_res, retrieval, vqa };

inline std::string to_string(TaskKind t) {
    switch (t) {
    case TaskKind::pretrain: return "pretrain";
    case TaskKind::snli_ve: return "snli_ve";
    case TaskKind::nlvr2: return "nlvr2";
    case TaskKind::ref_res: return "ref_res";
    case TaskKind::retrieval: return "retrieval";
    case TaskKind::vqa: return "vqa";
    }
    return "?";
}

inline TaskKind task_from(const std::string& s) {
    for (auto t : {TaskKind::pretrain, TaskKind::snli_ve, TaskKind::nlvr2, TaskKind::ref_res, TaskKind::retrieval,
                   TaskKind::vqa}) {
        if (to_string(t) == s) return t;
    }
    throw ConfigError("unknown task '" + s + "'");
}

inline constexpr std::size_t kRefResCandidates = 4;
inline constexpr std::array<const char*, 3> kSnliLabels{"entailment", "neutral", "contradiction"};

/// One manifest line.
struct ManifestRecord {
    std::string id;
    std::string image;  // path relative to the corpus directory
    std::string caption;
    std::string split;
    std::string task;
    std::string image2;         // pair tasks only
    std::int32_t label = -1;    // -1 when the task has none
    RegionSet regions;          // ref_res only
    std::string answer;         // vqa only
    json scene;                 // ground-truth scene(s) for inspection and oracles
};

inline json to_json_line(const ManifestRecord& r) {
    json j{{"id", r.id}, {"image", r.image}, {"caption", r.caption}, {"split", r.split}, {"task", r.task}};
    if (!r.image2.empty()) j["image2"] = r.image2;
    if (r.label >= 0) j["label"] = r.label;
    if (!r.regions.empty()) j["regions"] = r.regions;
    if (!r.answer.empty()) j["answer"] = r.answer;
    if (!r.scene.is_null()) j["scene"] = r.scene;
    return j;
}

inline ManifestRecord record_from_json(const json& j) {
    ManifestRecord r;
    StrictObject o(j, "manifest record");
    o.get("id", r.id).get("image", r.image).get("caption", r.caption).get("split", r.split).get("task", r.task);
    o.get("image2", r.image2).get("label", r.label).get("regions", r.regions).get("answer", r.answer);
    if (o.has("scene")) r.scene = o.raw("scene");
    o.finish();
    return r;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write manifest " + path.string());
    for (const auto& r : records) os << to_json_line(r).dump() << '\n';
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read manifest " + path.string());
    std::vector<ManifestRecord> records;
    std::size_t line_no = 0;
    for (std::string line; std::getline(is, line);) {
        ++line_no;
        if (line.empty()) continue;
        try {
            records.push_back(record_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

/// Split name -> number of records to generate.
using SplitCounts = std::map<std::string, std::size_t>;

namespace detail {

inline std::uint64_t split_code(const std::string& split) { return fnv1a(split); }

/// 1..max_objects objects in distinct cells with distinct (color, shape) pairs.
inline Scene random_scene(KeyedStream& rng, std::size_t min_objects, std::size_t max_objects, std::size_t grid = 4) {
    Scene s;
    s.grid = grid;
    s.background = static_cast<std::uint8_t>(96 + rng.below(64));
    const std::size_t n = min_objects + static_cast<std::size_t>(rng.below(max_objects - min_objects + 1));
    std::vector<std::size_t> cells(grid * grid);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
    for (std::size_t i = cells.size(); i > 1; --i) std::swap(cells[i - 1], cells[rng.below(i)]);
    std::set<std::pair<int, int>> used;
    for (std::size_t k = 0; s.objects.size() < n; ++k) {
        const auto color = static_cast<Color>(rng.below(kColorNames.size()));
        const auto shape = static_cast<ShapeKind>(rng.below(kShapeNames.size()));
        if (!used.insert({static_cast<int>(color), static_cast<int>(shape)}).second) continue;
        const std::size_t cell = cells[s.objects.size()];
        s.objects.push_back({cell / grid, cell % grid, shape, color});
    }
    return s;
}

inline std::string phrase(const SceneObject& o) { return std::string(name(o.color)) + " " + name(o.shape); }

/// Spatial relation of `a` with respect to `b` that holds in the scene.
inline std::string relation(const SceneObject& a, const SceneObject& b, KeyedStream& rng) {
    std::vector<std::string> valid;
    if (a.col < b.col) valid.push_back("left of");
    if (a.col > b.col) valid.push_back("right of");
    if (a.row < b.row) valid.push_back("above");
    if (a.row > b.row) valid.push_back("below");
    return valid[rng.below(valid.size())];
}

} // namespace detail

/// A generated example before it is written to disk.
struct GeneratedExample {
    ManifestRecord record;
    Scene scene;
    std::optional<Scene> scene2;
};

/// Deterministic example `index` of `split` for `task`.
inline GeneratedExample generate_example(std::uint64_t seed, TaskKind task, const std::string& split, std::size_t index) {
    KeyedStream rng(seed, static_cast<std::uint64_t>(task) + 1, detail::split_code(split), index);
    GeneratedExample ex;
    auto& r = ex.record;
    r.id = to_string(task) + "-" + split + "-" + std::to_string(index);
    r.split = split;
    r.task = to_string(task);
    r.image = "images/" + r.id + ".ppm";
    switch (task) {
    case TaskKind::pretrain:
    case TaskKind::retrieval: {
        ex.scene = detail::random_scene(rng, 2, 4);
        const auto& objs = ex.scene.objects;
        const std::size_t a = rng.below(objs.size());
        std::size_t b = rng.below(objs.size() - 1);
        if (b >= a) ++b;
        r.caption = "a " + detail::phrase(objs[a]) + " " + detail::relation(objs[a], objs[b], rng) + " a " +
                    detail::phrase(objs[b]);
        break;
    }
    case TaskKind::snli_ve: {
        ex.scene = detail::random_scene(rng, 2, 4);
        const auto& objs = ex.scene.objects;
        r.label = static_cast<std::int32_t>(index % 3);
        const auto& target = objs[rng.below(objs.size())];
        if (r.label == 0) {
            r.caption = "there is a " + detail::phrase(target);
        } else if (r.label == 1) {
            r.caption = "the " + detail::phrase(target) + " is " + kNeutralAdjectives[rng.below(kNeutralAdjectives.size())];
        } else {
            std::vector<Color> absent;
            for (std::size_t c = 0; c < kColorNames.size(); ++c) {
                if (!ex.scene.has_color(static_cast<Color>(c))) absent.push_back(static_cast<Color>(c));
            }
            const Color c = absent[rng.below(absent.size())];
            r.caption = std::string("there is a ") + name(c) + " " + name(target.shape);
        }
        break;
    }
    case TaskKind::nlvr2: {
        r.label = static_cast<std::int32_t>((index + 1) % 2);
        r.image2 = "images/" + r.id + "-b.ppm";
        ex.scene = detail::random_scene(rng, 1, 4);
        const auto target = ex.scene.objects[rng.below(ex.scene.objects.size())];
        Scene other;
        do {
            other = detail::random_scene(rng, 1, 4);
        } while (other.has(target.color, target.shape) != (r.label == 1));
        if (r.label == 1 || rng.bernoulli(0.5)) {
            ex.scene2 = other;
        } else {
            ex.scene2 = ex.scene;
            ex.scene = other;
        }
        r.caption = "both images have a " + detail::phrase(target);
        break;
    }
    case TaskKind::ref_res: {
        ex.scene = detail::random_scene(rng, kRefResCandidates, kRefResCandidates);
        const auto target = rng.below(kRefResCandidates);
        r.label = static_cast<std::int32_t>(target);
        for (const auto& o : ex.scene.objects) r.regions.push_back({o.row * ex.scene.grid + o.col});
        r.caption = "the " + detail::phrase(ex.scene.objects[target]);
        break;
    }
    case TaskKind::vqa: {
        ex.scene = detail::random_scene(rng, 1, 4);
        const auto answers = vqa_answers();
        if (index % 2 == 0) {
            // color question about a shape that occurs exactly once
            std::vector<const SceneObject*> unique;
            for (const auto& o : ex.scene.objects) {
                if (ex.scene.count_shape(o.shape) == 1) unique.push_back(&o);
            }
            if (unique.empty()) {
                ex.scene.objects.resize(1);
                unique.push_back(&ex.scene.objects[0]);
            }
            const auto* o = unique[rng.below(unique.size())];
            r.caption = std::string("what color is the ") + name(o->shape);
            r.answer = name(o->color);
        } else {
            const auto color = ex.scene.objects[rng.below(ex.scene.objects.size())].color;
            r.caption = std::string("how many ") + name(color) + " shapes are there";
            r.answer = kCountWords[ex.scene.count_color(color) - 1];
        }
        r.label = static_cast<std::int32_t>(std::find(answers.begin(), answers.end(), r.answer) - answers.begin());
        break;
    }
    }
    r.scene = ex.scene2 ? json::array({json(ex.scene), json(*ex.scene2)}) : json(ex.scene);
    return ex;
}

struct CorpusInfo {
    std::filesystem::path directory;
    std::size_t records = 0;
    std::uint64_t digest = 0;
};

/// FNV-1a over (relative path, contents) of every file, in sorted path order.
inline std::uint64_t corpus_digest(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files.push_back(std::filesystem::relative(e.path(), dir));
    }
    std::sort(files.begin(), files.end());
    std::uint64_t h = fnv1a("");
    for (const auto& f : files) {
        h = fnv1a(f.generic_string(), h);
        std::ifstream is(dir / f, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        h = fnv1a(bytes, h);
    }
    return h;
}

/// Writes `<out>/manifest.jsonl`, `<out>/vocab.txt` and `<out>/images/`.
inline CorpusInfo gen_synthetic(const std::filesystem::path& out, std::uint64_t seed, const SplitCounts& counts,
                                TaskKind task, const ImageGeometry& geometry = {}) {
    if (counts.empty()) throw ConfigError("gen-data: no splits requested");
    for (const auto& [split, n] : counts) {
        if (n == 0) throw ConfigError("gen-data: split '" + split + "' has count 0; counts must be >= 1");
    }
    std::filesystem::create_directories(out / "images");
    std::vector<ManifestRecord> records;
    for (const auto& [split, n] : counts) {
        for (std::size_t i = 0; i < n; ++i) {
            auto ex = generate_example(seed, task, split, i);
            write_ppm(out / ex.record.image, render_scene(ex.scene, geometry));
            if (ex.scene2) write_ppm(out / ex.record.image2, render_scene(*ex.scene2, geometry));
            records.push_back(std::move(ex.record));
        }
    }
    write_manifest(out / "manifest.jsonl", records);
    synthetic_vocab().save(out / "vocab.txt");
    return {out, records.size(), corpus_digest(out)};
}

// ---------------------------------------------------------------------------
// Loaded datasets and collation

struct Example {
    std::string id;
    std::string split;
    std::vector<std::int32_t> tokens;  // caption ids without [CLS]/[SEP]
    std::vector<float> image;
    std::vector<float> image_b;
    std::int32_t label = -1;
    RegionSet regions;
    std::string answer;
    std::size_t objects = 0;  // object count of the (first) scene
};

struct Dataset {
    std::string task;
    Vocab vocab;
    ImageGeometry geometry;
    std::vector<Example> examples;

    std::vector<std::size_t> split_indices(const std::string& split) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < examples.size(); ++i) {
            if (examples[i].split == split) idx.push_back(i);
        }
        return idx;
    }
};

/// Reads the manifest and vocab of a corpus directory and decodes every image.
inline Dataset load_dataset(const std::filesystem::path& dir, const ImageGeometry& geometry) {
    if (!std::filesystem::exists(dir / "manifest.jsonl")) {
        throw DataError("no corpus at " + dir.string() + " (missing manifest.jsonl)");
    }
    Dataset ds;
    ds.vocab = Vocab::load(dir / "vocab.txt");
    ds.geometry = geometry;
    for (auto& r : read_manifest(dir / "manifest.jsonl")) {
        if (ds.task.empty()) ds.task = r.task;
        if (r.task != ds.task) throw DataError(dir.string() + ": manifest mixes tasks '" + ds.task + "' and '" + r.task + "'");
        Example ex{r.id, r.split, tokenize(r.caption, ds.vocab), decode_image(dir / r.image, geometry), {},
                   r.label, r.regions, r.answer};
        if (!r.image2.empty()) ex.image_b = decode_image(dir / r.image2, geometry);
        if (!r.scene.is_null()) {
            const auto& scene = r.scene.is_array() ? r.scene.at(0) : r.scene;
            ex.objects = scene.at("objects").size();
        }
        const std::size_t patches = geometry.num_patches();
        for (const auto& region : ex.regions) {
            for (auto p : region) {
                if (p >= patches) throw DataError(r.id + ": region patch index " + std::to_string(p) + " >= " + std::to_string(patches));
            }
        }
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

/// Collates examples into a batch. Each text row is [CLS] tokens [SEP],
/// truncated to max_len (keeping [SEP] last) and padded to the longest row.
inline Batch collate(const std::vector<const Example*>& examples, std::size_t max_len, const ImageGeometry& geometry,
                     bool with_images = true) {
    if (max_len < 2) throw ConfigError("collate: max_len must fit [CLS] and [SEP]");
    Batch b;
    b.size = examples.size();
    b.geometry = geometry;
    std::vector<std::vector<std::int32_t>> rows;
    for (const auto* ex : examples) {
        std::vector<std::int32_t> row{kClsId};
        const std::size_t keep = std::min(ex->tokens.size(), max_len - 2);
        row.insert(row.end(), ex->tokens.begin(), ex->tokens.begin() + static_cast<std::ptrdiff_t>(keep));
        row.push_back(kSepId);
        b.text_len = std::max(b.text_len, row.size());
        rows.push_back(std::move(row));
    }
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < b.text_len; ++i) {
            b.token_ids.push_back(i < row.size() ? row[i] : kPadId);
            b.text_mask.push_back(i < row.size() ? 1 : 0);
        }
    }
    for (const auto* ex : examples) {
        if (with_images) {
            if (ex->image.size() != geometry.pixels()) throw DataError(ex->id + ": image does not match the batch geometry");
            b.images.insert(b.images.end(), ex->image.begin(), ex->image.end());
            if (!ex->image_b.empty()) b.images_b.insert(b.images_b.end(), ex->image_b.begin(), ex->image_b.end());
        }
        b.labels.push_back(ex->label);
        b.regions.push_back(ex->regions);
        b.example_ids.push_back(ex->id);
    }
    if (!b.images_b.empty() && b.images_b.size() != b.images.size()) {
        throw DataError("collate: pair examples mixed with single-image examples");
    }
    return b;
}

} // namespace vlkit
