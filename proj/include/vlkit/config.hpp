#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace vlkit {

using json = nlohmann::json;

/// Invalid or unknown configuration content. The message names the field path.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Reads fields from a JSON object and rejects any key that was not consumed.
class StrictObject {
public:
    StrictObject(const json& object, std::string path) : object_(object), path_(std::move(path)) {
        if (!object_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <typename V>
    StrictObject& get(const char* key, V& out) {
        seen_.insert(key);
        if (!object_.contains(key)) return *this;
        try {
            out = object_.at(key).get<V>();
        } catch (const json::exception& e) {
            throw ConfigError(child(key) + ": " + e.what());
        }
        return *this;
    }

    bool has(const char* key) const { return object_.contains(key); }
    const json& raw(const char* key) {
        seen_.insert(key);
        return object_.at(key);
    }
    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& item : object_.items()) {
            if (!seen_.count(item.key())) throw ConfigError("unknown field '" + child(item.key()) + "'");
        }
    }

private:
    const json& object_;
    std::string path_;
    std::set<std::string> seen_;
};

enum class ModelType { one_tower, two_tower };

inline std::string to_string(ModelType t) { return t == ModelType::one_tower ? "one_tower" : "two_tower"; }

inline ModelType model_type_from(const std::string& s) {
    if (s == "one_tower") return ModelType::one_tower;
    if (s == "two_tower") return ModelType::two_tower;
    throw ConfigError("model_type: expected one_tower or two_tower, got '" + s + "'");
}

struct ImageGeometry {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 3;
    std::size_t patch_size = 8;

    std::size_t num_patches() const { return (height / patch_size) * (width / patch_size); }
    std::size_t pixels() const { return height * width * channels; }
    bool operator==(const ImageGeometry&) const = default;
};

/// Dimensions of one transformer stack. embedding == 0 means "same as hidden".
struct TowerDims {
    std::size_t hidden = 64;
    std::size_t embedding = 0;
    std::size_t intermediate = 128;
    std::size_t heads = 4;
    std::size_t layers = 2;

    std::size_t embedding_size() const { return embedding ? embedding : hidden; }
    bool operator==(const TowerDims&) const = default;
};

/// Cross-modal stack. hidden == 0 resolves to max(text, vision) hidden;
/// intermediate == 0 resolves to 4 * hidden.
struct CrossDims {
    std::size_t hidden = 0;
    std::size_t intermediate = 0;
    std::size_t heads = 4;
    std::size_t layers = 2;
    bool operator==(const CrossDims&) const = default;
};

enum class HeadKind { mlm, classifier, region_scorer };

inline std::string to_string(HeadKind k) {
    switch (k) {
    case HeadKind::mlm: return "mlm";
    case HeadKind::classifier: return "classifier";
    case HeadKind::region_scorer: return "region_scorer";
    }
    return "?";
}

inline HeadKind head_kind_from(const std::string& s) {
    if (s == "mlm") return HeadKind::mlm;
    if (s == "classifier") return HeadKind::classifier;
    if (s == "region_scorer") return HeadKind::region_scorer;
    throw ConfigError("head kind: unknown '" + s + "'");
}

/// Output head attached to the model's head socket.
///  mlm:           per text position, model_dim -> vocab_size
///  classifier:    pooled_dim * input_multiplier -> num_classes
///  region_scorer: per pooled region state, model_dim -> 1
struct HeadSpec {
    std::string name;
    HeadKind kind = HeadKind::classifier;
    std::size_t num_classes = 2;
    std::size_t layers = 1;
    std::size_t input_multiplier = 1;
    std::vector<std::string> answers;  // closed answer set for vqa-style heads

    bool operator==(const HeadSpec&) const = default;
};

struct ModelConfig {
    ModelType model_type = ModelType::two_tower;
    std::size_t vocab_size = 64;
    std::size_t max_text_len = 16;
    ImageGeometry image;
    TowerDims text;
    TowerDims vision;
    CrossDims cross;
    std::vector<HeadSpec> heads;
    double dropout = 0.1;
    double layer_norm_eps = 1e-12;
    std::uint64_t seed = 0;

    bool one_tower() const { return model_type == ModelType::one_tower; }

    std::size_t cross_hidden() const { return cross.hidden ? cross.hidden : std::max(text.hidden, vision.hidden); }
    std::size_t cross_intermediate() const { return cross.intermediate ? cross.intermediate : 4 * cross_hidden(); }

    /// Width of the per-position output states.
    std::size_t model_dim() const { return one_tower() ? text.hidden : cross_hidden(); }

    /// Width of the pooled vector.
    std::size_t pooled_dim() const { return one_tower() ? text.hidden : 2 * cross_hidden(); }

    /// Vision sequence length including the image CLS token.
    std::size_t vision_tokens() const { return image.num_patches() + 1; }

    const HeadSpec* find_head(const std::string& name) const {
        for (const auto& h : heads) {
            if (h.name == name) return &h;
        }
        return nullptr;
    }

    void validate() const {
        auto require = [](bool ok, const std::string& what) {
            if (!ok) throw ConfigError("model config: " + what);
        };
        require(vocab_size >= 5, "vocab_size must cover the five reserved tokens");
        require(max_text_len >= 2, "max_text_len must fit [CLS] and [SEP]");
        require(image.patch_size > 0 && image.height % image.patch_size == 0 && image.width % image.patch_size == 0,
                "image height " + std::to_string(image.height) + " and width " + std::to_string(image.width) +
                    " must be multiples of patch size " + std::to_string(image.patch_size));
        require(image.channels > 0, "image channels must be positive");
        auto check_tower = [&](const TowerDims& t, const std::string& name) {
            require(t.hidden > 0 && t.heads > 0 && t.intermediate > 0, name + " dims must be positive");
            require(t.hidden % t.heads == 0, name + ".hidden " + std::to_string(t.hidden) +
                                                 " not divisible by heads " + std::to_string(t.heads));
        };
        check_tower(text, "text");
        if (!one_tower()) {
            check_tower(vision, "vision");
            require(cross.heads > 0 && cross_hidden() % cross.heads == 0,
                    "cross hidden " + std::to_string(cross_hidden()) + " not divisible by heads " +
                        std::to_string(cross.heads));
        }
        require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
        std::set<std::string> names;
        for (const auto& h : heads) {
            require(!h.name.empty(), "head names must be non-empty");
            require(names.insert(h.name).second, "duplicate head '" + h.name + "'");
            require(h.layers == 1 || h.layers == 2, "head '" + h.name + "' must have one or two layers");
            require(h.kind != HeadKind::classifier || h.num_classes >= 2, "head '" + h.name + "' needs >= 2 classes");
            require(h.answers.empty() || h.answers.size() == h.num_classes,
                    "head '" + h.name + "' answer list must have num_classes entries");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(json& j, const ImageGeometry& g) {
    j = json{{"height", g.height}, {"width", g.width}, {"channels", g.channels}, {"patch_size", g.patch_size}};
}
inline void from_json(const json& j, ImageGeometry& g) {
    StrictObject o(j, "image");
    o.get("height", g.height).get("width", g.width).get("channels", g.channels).get("patch_size", g.patch_size);
    o.finish();
}

inline void to_json(json& j, const TowerDims& t) {
    j = json{{"hidden", t.hidden}, {"embedding", t.embedding}, {"intermediate", t.intermediate},
             {"heads", t.heads}, {"layers", t.layers}};
}
inline void from_json(const json& j, TowerDims& t) {
    StrictObject o(j, "tower");
    o.get("hidden", t.hidden).get("embedding", t.embedding).get("intermediate", t.intermediate);
    o.get("heads", t.heads).get("layers", t.layers);
    o.finish();
}

inline void to_json(json& j, const CrossDims& c) {
    j = json{{"hidden", c.hidden}, {"intermediate", c.intermediate}, {"heads", c.heads}, {"layers", c.layers}};
}
inline void from_json(const json& j, CrossDims& c) {
    StrictObject o(j, "cross");
    o.get("hidden", c.hidden).get("intermediate", c.intermediate).get("heads", c.heads).get("layers", c.layers);
    o.finish();
}

inline void to_json(json& j, const HeadSpec& h) {
    j = json{{"name", h.name}, {"kind", to_string(h.kind)}, {"num_classes", h.num_classes},
             {"layers", h.layers}, {"input_multiplier", h.input_multiplier}, {"answers", h.answers}};
}
inline void from_json(const json& j, HeadSpec& h) {
    StrictObject o(j, "heads[]");
    std::string kind = to_string(h.kind);
    o.get("name", h.name).get("kind", kind).get("num_classes", h.num_classes).get("layers", h.layers);
    o.get("input_multiplier", h.input_multiplier).get("answers", h.answers);
    o.finish();
    h.kind = head_kind_from(kind);
}

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"model_type", to_string(c.model_type)},
             {"vocab_size", c.vocab_size},
             {"max_text_len", c.max_text_len},
             {"image", c.image},
             {"text", c.text},
             {"vision", c.vision},
             {"cross", c.cross},
             {"heads", c.heads},
             {"dropout", c.dropout},
             {"layer_norm_eps", c.layer_norm_eps},
             {"seed", c.seed}};
}
inline void from_json(const json& j, ModelConfig& c) {
    StrictObject o(j, "model");
    std::string type = to_string(c.model_type);
    o.get("model_type", type).get("vocab_size", c.vocab_size).get("max_text_len", c.max_text_len);
    o.get("image", c.image).get("text", c.text).get("vision", c.vision).get("cross", c.cross);
    o.get("heads", c.heads).get("dropout", c.dropout).get("layer_norm_eps", c.layer_norm_eps).get("seed", c.seed);
    o.finish();
    c.model_type = model_type_from(type);
}

/// Per-module trainability. Embedding flags left unset follow their encoder flag.
struct FreezeSpec {
    std::optional<bool> text_embedding;
    bool text_encoder = false;
    std::optional<bool> vision_embedding;
    bool vision_encoder = false;
    bool cross_modal = false;
    bool head = false;

    bool text_embedding_frozen() const { return text_embedding.value_or(text_encoder); }
    bool vision_embedding_frozen() const { return vision_embedding.value_or(vision_encoder); }
    bool any() const {
        return text_embedding_frozen() || text_encoder || vision_embedding_frozen() || vision_encoder ||
               cross_modal || head;
    }

    static FreezeSpec towers(bool text, bool vision) {
        FreezeSpec s;
        s.text_encoder = text;
        s.vision_encoder = vision;
        return s;
    }
    static FreezeSpec everything() {
        FreezeSpec s = towers(true, true);
        s.cross_modal = true;
        s.head = true;
        return s;
    }
};

inline void to_json(json& j, const FreezeSpec& f) {
    j = json{{"text_encoder", f.text_encoder}, {"vision_encoder", f.vision_encoder},
             {"cross_modal", f.cross_modal}, {"head", f.head}};
    j["text_embedding"] = f.text_embedding ? json(*f.text_embedding) : json(nullptr);
    j["vision_embedding"] = f.vision_embedding ? json(*f.vision_embedding) : json(nullptr);
}
inline void from_json(const json& j, FreezeSpec& f) {
    StrictObject o(j, "freeze");
    o.get("text_encoder", f.text_encoder).get("vision_encoder", f.vision_encoder);
    o.get("cross_modal", f.cross_modal).get("head", f.head);
    if (o.has("text_embedding")) {
        const auto& v = o.raw("text_embedding");
        f.text_embedding = v.is_null() ? std::nullopt : std::optional<bool>(v.get<bool>());
    }
    if (o.has("vision_embedding")) {
        const auto& v = o.raw("vision_embedding");
        f.vision_embedding = v.is_null() ? std::nullopt : std::optional<bool>(v.get<bool>());
    }
    o.finish();
}

/// Copies parameters whose names start with `from` out of a checkpoint file,
/// renaming the prefix to `to`.
struct PrefixMap {
    std::string from;
    std::string to;
    bool operator==(const PrefixMap&) const = default;
};

struct CheckpointSource {
    std::string path;
    std::vector<PrefixMap> prefixes;
    bool operator==(const CheckpointSource&) const = default;
};

/// Where initial weights come from. Parameters not covered by any mapping are
/// drawn randomly.
struct InitSource {
    std::vector<CheckpointSource> checkpoints;

    static InitSource random() { return {}; }
    bool is_random() const { return checkpoints.empty(); }
};

inline void to_json(json& j, const PrefixMap& p) { j = json{{"from", p.from}, {"to", p.to}}; }
inline void from_json(const json& j, PrefixMap& p) {
    StrictObject o(j, "init.prefixes[]");
    o.get("from", p.from).get("to", p.to);
    o.finish();
}
inline void to_json(json& j, const CheckpointSource& s) { j = json{{"path", s.path}, {"prefixes", s.prefixes}}; }
inline void from_json(const json& j, CheckpointSource& s) {
    StrictObject o(j, "init.checkpoints[]");
    o.get("path", s.path).get("prefixes", s.prefixes);
    o.finish();
}
inline void to_json(json& j, const InitSource& s) { j = json{{"checkpoints", s.checkpoints}}; }
inline void from_json(const json& j, InitSource& s) {
    StrictObject o(j, "init");
    o.get("checkpoints", s.checkpoints);
    o.finish();
}

} // namespace vlkit
