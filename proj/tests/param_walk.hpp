#pragma once

#include <functional>
#include <map>
#include <string>

#include "vlkit/models.hpp"

namespace vlkit::testing {

struct Expected {
    Shape shape;
    std::string group;
};
using ParamWalk = std::map<std::string, Expected>;

inline void walk_linear(ParamWalk& w, const std::string& name, std::size_t in, std::size_t out, const std::string& group) {
    w[name + ".weight"] = {{in, out}, group};
    w[name + ".bias"] = {{out}, group};
}

inline void walk_norm(ParamWalk& w, const std::string& name, std::size_t width, const std::string& group) {
    w[name + ".gamma"] = {{width}, group};
    w[name + ".beta"] = {{width}, group};
}

inline void walk_attention(ParamWalk& w, const std::string& name, std::size_t d, const std::string& group) {
    for (const char* p : {"query", "key", "value", "output"}) walk_linear(w, name + "." + p, d, d, group);
}

inline void walk_ffn(ParamWalk& w, const std::string& name, std::size_t d, std::size_t inter, const std::string& group) {
    walk_linear(w, name + ".w1", d, inter, group);
    walk_linear(w, name + ".w2", inter, d, group);
}

inline void walk_stack(ParamWalk& w, const std::string& prefix, const TowerDims& t, const std::string& group) {
    for (std::size_t i = 0; i < t.layers; ++i) {
        const auto b = prefix + ".block" + std::to_string(i);
        walk_attention(w, b + ".attention", t.hidden, group);
        walk_norm(w, b + ".attention_norm", t.hidden, group);
        walk_ffn(w, b + ".ffn", t.hidden, t.intermediate, group);
        walk_norm(w, b + ".ffn_norm", t.hidden, group);
    }
}

/// Every parameter array the architecture declares, derived from the config alone.
inline ParamWalk walk(const ModelConfig& c) {
    ParamWalk w;
    const std::size_t e = c.text.embedding ? c.text.embedding : c.text.hidden;
    w["text_embedding.token_table"] = {{c.vocab_size, e}, "text_embedding"};
    w["text_embedding.position_table"] = {{c.max_text_len, e}, "text_embedding"};
    w["text_embedding.token_type_table"] = {{2, e}, "text_embedding"};
    walk_norm(w, "text_embedding.norm", e, "text_embedding");
    if (e != c.text.hidden) walk_linear(w, "text_embedding.projection", e, c.text.hidden, "text_embedding");
    const std::size_t vd = c.model_type == ModelType::one_tower ? c.text.hidden : c.vision.hidden;
    const std::size_t patches = (c.image.height / c.image.patch_size) * (c.image.width / c.image.patch_size);
    walk_linear(w, "vision_embedding.projection", c.image.patch_size * c.image.patch_size * c.image.channels, vd,
                "vision_embedding");
    w["vision_embedding.cls_token"] = {{vd}, "vision_embedding"};
    w["vision_embedding.position_table"] = {{patches + 1, vd}, "vision_embedding"};
    walk_norm(w, "vision_embedding.norm", vd, "vision_embedding");
    std::size_t pooled = c.text.hidden, per_position = c.text.hidden;
    if (c.model_type == ModelType::one_tower) {
        walk_stack(w, "encoder", c.text, "encoder");
        walk_linear(w, "pooler", c.text.hidden, c.text.hidden, "head");
    } else {
        walk_stack(w, "text_encoder", c.text, "text_encoder");
        walk_stack(w, "vision_encoder", c.vision, "vision_encoder");
        const std::size_t dx = c.cross.hidden, inter = c.cross.intermediate;
        walk_linear(w, "cross_modal.text_projection", c.text.hidden, dx, "cross_modal");
        walk_linear(w, "cross_modal.vision_projection", c.vision.hidden, dx, "cross_modal");
        for (std::size_t i = 0; i < c.cross.layers; ++i) {
            for (const char* s : {"text", "vision"}) {
                const auto b = "cross_modal.block" + std::to_string(i) + "." + s;
                walk_attention(w, b + ".cross_attention", dx, "cross_modal");
                walk_norm(w, b + ".cross_norm", dx, "cross_modal");
                walk_attention(w, b + ".self_attention", dx, "cross_modal");
                walk_norm(w, b + ".self_norm", dx, "cross_modal");
                walk_ffn(w, b + ".ffn", dx, inter, "cross_modal");
                walk_norm(w, b + ".ffn_norm", dx, "cross_modal");
            }
        }
        walk_linear(w, "pooler.text", dx, dx, "head");
        walk_linear(w, "pooler.vision", dx, dx, "head");
        pooled = 2 * dx;
        per_position = dx;
    }
    for (const auto& h : c.heads) {
        std::size_t in = per_position, out = 1;
        if (h.kind == HeadKind::mlm) out = c.vocab_size;
        if (h.kind == HeadKind::classifier) {
            in = pooled * h.input_multiplier;
            out = h.num_classes;
        }
        const auto base = "head." + h.name;
        if (h.layers == 2) {
            walk_linear(w, base + ".layer0", in, in, "head");
            walk_linear(w, base + ".layer1", in, out, "head");
        } else {
            walk_linear(w, base + ".layer0", in, out, "head");
        }
    }
    return w;
}

inline std::size_t walk_total(const ParamWalk& w, const std::function<bool(const std::string&)>& keep = nullptr) {
    std::size_t n = 0;
    for (const auto& [name, e] : w) {
        if (!keep || keep(e.group)) n += shape_numel(e.shape);
    }
    return n;
}

/// ELECTRA-Small text tower, DeiT-Tiny vision tower, 6 cross layers.
inline ModelConfig small_towers_shape() {
    ModelConfig c;
    c.model_type = ModelType::two_tower;
    c.vocab_size = 30522;
    c.max_text_len = 512;
    c.image = {224, 224, 3, 16};
    c.text = {256, 128, 1028, 4, 12};
    c.vision = {192, 0, 768, 3, 12};
    c.cross = {256, 1024, 4, 6};
    c.heads = {{"mlm", HeadKind::mlm, 0, 1, 1, {}}, {"itm", HeadKind::classifier, 2, 1, 1, {}}};
    return c;
}

inline ModelConfig base_shape() {
    auto c = small_towers_shape();
    c.text = {768, 0, 3072, 12, 12};
    c.vision = {768, 0, 3072, 12, 12};
    c.cross = {256, 1024, 4, 10};
    return c;
}

} // namespace vlkit::testing
