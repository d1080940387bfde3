#pragma once

// One-tower and two-tower vision-language encoders, freezing, parameter
// accounting and initialization from checkpoints.

#include <algorithm>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vlkit/batch.hpp"
#include "vlkit/checkpoint.hpp"
#include "vlkit/config.hpp"
#include "vlkit/layers.hpp"
#include "vlkit/params.hpp"

namespace vlkit {

/// Output head: one linear layer, or two with gelu between.
template <typename T>
struct Head {
    HeadSpec spec;
    Linear<T> first;
    std::optional<Linear<T>> second;

    static Head make(const ParamBuilder<T>& pb, const HeadSpec& spec, std::size_t in, std::size_t out) {
        Head h{spec, {}, std::nullopt};
        if (spec.layers == 2) {
            h.first = Linear<T>::make(pb.sub("layer0"), in, in);
            h.second = Linear<T>::make(pb.sub("layer1"), in, out);
        } else {
            h.first = Linear<T>::make(pb.sub("layer0"), in, out);
        }
        return h;
    }

    std::size_t input_dim() const { return first.weight.dim(0); }

    Tensor<T> operator()(const Tensor<T>& x) const { return second ? (*second)(gelu(first(x))) : first(x); }
};

template <typename T>
struct EncoderOutput {
    Tensor<T> text_states;    // (B, Lt, model_dim)
    Tensor<T> vision_states;  // (B, N + 1, model_dim); undefined for text-only input
    Tensor<T> pooled;         // (B, pooled_dim)
    Tensor<T> sequence;       // one-tower: the full shared sequence
};

/// What happened while initializing from checkpoint sources.
struct InitReport {
    std::vector<std::string> copied;
    std::vector<std::string> random;  // unmapped parameters left at their random draw
};

struct ModuleCount {
    ModuleGroup group;
    std::size_t total = 0;
    std::size_t trainable = 0;
};

template <typename T>
class VLModel {
public:
    /// Allocates every parameter with its seeded random draw, then applies any
    /// checkpoint sources in order.
    static VLModel build(const ModelConfig& config, const InitSource& init = InitSource::random(),
                         InitReport* report = nullptr) {
        config.validate();
        VLModel m;
        m.config_ = config;
        m.store_ = std::make_unique<ParameterStore<T>>();
        m.allocate();
        if (!init.is_random()) {
            auto r = m.load_sources(init);
            if (report) *report = std::move(r);
        }
        return m;
    }

    /// Rebuilds the exact model stored in a checkpoint.
    static VLModel from_checkpoint(const Checkpoint& ckpt) {
        auto m = build(ckpt.model_config);
        restore_parameters(*m.store_, ckpt);
        return m;
    }

    const ModelConfig& config() const { return config_; }
    ParameterStore<T>& params() { return *store_; }
    const ParameterStore<T>& params() const { return *store_; }

    bool has_head(const std::string& name) const { return heads_.count(name) > 0; }
    const Head<T>& head(const std::string& name) const {
        auto it = heads_.find(name);
        if (it == heads_.end()) throw std::invalid_argument("model has no head named '" + name + "'");
        return it->second;
    }

    /// Marks parameters of frozen modules non-trainable (and the rest trainable).
    void apply_freeze(const FreezeSpec& spec) {
        for (auto& p : store_->entries()) p.value.set_requires_grad(!is_frozen(p.group, spec));
        for (auto& p : store_->entries()) p.value.zero_grad();
    }

    static bool is_frozen(ModuleGroup group, const FreezeSpec& spec) {
        switch (group) {
        case ModuleGroup::text_embedding: return spec.text_embedding_frozen();
        case ModuleGroup::text_encoder: return spec.text_encoder;
        case ModuleGroup::vision_embedding: return spec.vision_embedding_frozen();
        case ModuleGroup::vision_encoder: return spec.vision_encoder;
        case ModuleGroup::encoder: return spec.text_encoder || spec.vision_encoder;
        case ModuleGroup::cross_modal: return spec.cross_modal;
        case ModuleGroup::head: return spec.head;
        }
        return false;
    }

    /// Per-module totals, in canonical group order, for groups the model has.
    std::vector<ModuleCount> param_report() const {
        std::vector<ModuleCount> rows;
        for (auto g : kAllGroups) {
            ModuleCount row{g};
            bool present = false;
            for (const auto& p : store_->entries()) {
                if (p.group != g) continue;
                present = true;
                row.total += p.value.numel();
                if (p.trainable()) row.trainable += p.value.numel();
            }
            if (present) rows.push_back(row);
        }
        return rows;
    }

    /// Runs the encoder on `batch`. `second_image` selects images_b.
    /// Batches without images are accepted by one-tower models (text-only sequence).
    EncoderOutput<T> encode(const Batch& batch, ForwardContext& ctx, bool second_image = false) const {
        const std::size_t b = batch.size, lt = batch.text_len;
        if (batch.token_ids.size() != b * lt || batch.text_mask.size() != b * lt) {
            throw ShapeError("model.encode", std::to_string(b * lt) + " token ids and mask entries",
                             Shape{batch.token_ids.size()});
        }
        const auto& pixels = second_image ? batch.images_b : batch.images;
        std::optional<Tensor<T>> images;
        if (!pixels.empty()) {
            const auto& g = config_.image;
            if (batch.geometry != g || pixels.size() != b * g.pixels()) {
                throw ShapeError("model.encode", "images of " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                                                     "x" + std::to_string(g.channels),
                                 Shape{pixels.size()});
            }
            images = Tensor<T>({b, g.height, g.width, g.channels}, std::vector<T>(pixels.begin(), pixels.end()));
        } else if (!config_.one_tower()) {
            throw std::invalid_argument("two-tower model requires images");
        }
        return config_.one_tower() ? encode_one_tower(batch, images, ctx) : encode_two_tower(batch, *images, ctx);
    }

private:
    VLModel() = default;

    ParamBuilder<T> builder(const std::string& prefix, ModuleGroup group) const {
        return ParamBuilder<T>(*store_, config_.seed, prefix, group);
    }

    void allocate() {
        const auto& c = config_;
        const double eps = c.layer_norm_eps;
        text_embedding_ = TextEmbedding<T>::make(builder("text_embedding", ModuleGroup::text_embedding), c.vocab_size,
                                                 c.max_text_len, c.text.embedding_size(), c.text.hidden, c.dropout, eps);
        if (c.one_tower()) {
            vision_embedding_ = PatchEmbedding<T>::make(builder("vision_embedding", ModuleGroup::vision_embedding),
                                                        c.image.patch_size, c.image.channels, c.image.num_patches(),
                                                        c.text.hidden, c.dropout, eps);
            make_blocks(encoder_, builder("encoder", ModuleGroup::encoder), c.text);
            pooler_text_ = Linear<T>::make(builder("pooler", ModuleGroup::head), c.text.hidden, c.text.hidden);
        } else {
            make_blocks(encoder_, builder("text_encoder", ModuleGroup::text_encoder), c.text);
            vision_embedding_ = PatchEmbedding<T>::make(builder("vision_embedding", ModuleGroup::vision_embedding),
                                                        c.image.patch_size, c.image.channels, c.image.num_patches(),
                                                        c.vision.hidden, c.dropout, eps);
            make_blocks(vision_encoder_, builder("vision_encoder", ModuleGroup::vision_encoder), c.vision);
            const std::size_t dx = c.cross_hidden();
            auto cross = builder("cross_modal", ModuleGroup::cross_modal);
            text_projection_ = Linear<T>::make(cross.sub("text_projection"), c.text.hidden, dx);
            vision_projection_ = Linear<T>::make(cross.sub("vision_projection"), c.vision.hidden, dx);
            for (std::size_t i = 0; i < c.cross.layers; ++i) {
                cross_blocks_.push_back(CrossModalBlock<T>::make(cross.sub("block" + std::to_string(i)), dx,
                                                                 c.cross.heads, c.cross_intermediate(), c.dropout, eps));
            }
            auto pool = builder("pooler", ModuleGroup::head);
            pooler_text_ = Linear<T>::make(pool.sub("text"), dx, dx);
            pooler_vision_ = Linear<T>::make(pool.sub("vision"), dx, dx);
        }
        auto heads = builder("head", ModuleGroup::head);
        for (const auto& spec : c.heads) {
            std::size_t in = c.model_dim(), out = 1;
            switch (spec.kind) {
            case HeadKind::mlm: out = c.vocab_size; break;
            case HeadKind::classifier:
                in = c.pooled_dim() * spec.input_multiplier;
                out = spec.num_classes;
                break;
            case HeadKind::region_scorer: break;
            }
            heads_.emplace(spec.name, Head<T>::make(heads.sub(spec.name), spec, in, out));
        }
    }

    void make_blocks(std::vector<EncoderBlock<T>>& blocks, const ParamBuilder<T>& pb, const TowerDims& dims) {
        for (std::size_t i = 0; i < dims.layers; ++i) {
            blocks.push_back(EncoderBlock<T>::make(pb.sub("block" + std::to_string(i)), dims.hidden, dims.heads,
                                                   dims.intermediate, config_.dropout, config_.layer_norm_eps));
        }
    }

    InitReport load_sources(const InitSource& init) {
        std::map<std::string, bool> copied;
        for (const auto& p : store_->entries()) copied[p.name] = false;
        for (const auto& source : init.checkpoints) {
            const auto ckpt = read_checkpoint(source.path);
            for (const auto& entry : ckpt.entries) {
                for (const auto& map : source.prefixes) {
                    if (entry.name.rfind(map.from, 0) != 0) continue;
                    const std::string target = map.to + entry.name.substr(map.from.size());
                    const auto* param = store_->find(target);
                    if (!param) continue;
                    if (param->value.shape() != entry.shape) {
                        throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                                              "'" + target + "' model " + shape_str(param->value.shape()) +
                                                  " vs checkpoint '" + entry.name + "' " + shape_str(entry.shape));
                    }
                    auto src = ckpt.values(entry);
                    auto dst = Tensor<T>(param->value).mutable_data();
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
                    copied[target] = true;
                    break;
                }
            }
        }
        InitReport report;
        for (const auto& p : store_->entries()) (copied[p.name] ? report.copied : report.random).push_back(p.name);
        return report;
    }

    std::vector<std::uint8_t> vision_mask(std::size_t batch) const {
        return std::vector<std::uint8_t>(batch * config_.vision_tokens(), 1);
    }

    EncoderOutput<T> encode_one_tower(const Batch& batch, const std::optional<Tensor<T>>& images,
                                      ForwardContext& ctx) const {
        const std::size_t b = batch.size, lt = batch.text_len, nv = images ? config_.vision_tokens() : 0;
        auto text = text_embedding_(batch.token_ids, b, lt, ctx);
        Tensor<T> sequence = text;
        std::vector<std::uint8_t> mask = batch.text_mask;
        if (images) {
            auto vision = add(vision_embedding_(*images, ctx), text_embedding_.type_vector(1));
            sequence = concat<T>({text, vision}, 1);
            mask.clear();
            mask.reserve(b * (lt + nv));
            for (std::size_t i = 0; i < b; ++i) {
                mask.insert(mask.end(), batch.text_mask.begin() + static_cast<std::ptrdiff_t>(i * lt),
                            batch.text_mask.begin() + static_cast<std::ptrdiff_t>((i + 1) * lt));
                mask.insert(mask.end(), nv, 1);
            }
        }
        auto out = vlkit::encode(encoder_, sequence, mask, ctx);
        EncoderOutput<T> result;
        result.sequence = out;
        result.text_states = images ? slice(out, 1, 0, lt) : out;
        if (images) result.vision_states = slice(out, 1, lt, lt + nv);
        result.pooled = tanh(pooler_text_(reshape(slice(out, 1, 0, 1), {b, config_.text.hidden})));
        return result;
    }

    EncoderOutput<T> encode_two_tower(const Batch& batch, const Tensor<T>& images, ForwardContext& ctx) const {
        const std::size_t b = batch.size;
        const auto vmask = vision_mask(b);
        auto t = vlkit::encode(encoder_, text_embedding_(batch.token_ids, b, batch.text_len, ctx), batch.text_mask, ctx);
        auto v = vlkit::encode(vision_encoder_, vision_embedding_(images, ctx), vmask, ctx);
        t = text_projection_(t);
        v = vision_projection_(v);
        for (const auto& block : cross_blocks_) std::tie(t, v) = block(t, v, batch.text_mask, vmask, ctx);
        const std::size_t dx = config_.cross_hidden();
        auto first = [&](const Tensor<T>& x) { return reshape(slice(x, 1, 0, 1), {b, dx}); };
        EncoderOutput<T> result;
        result.text_states = t;
        result.vision_states = v;
        result.pooled = concat<T>({tanh(pooler_text_(first(t))), tanh(pooler_vision_(first(v)))}, 1);
        return result;
    }

    ModelConfig config_;
    std::unique_ptr<ParameterStore<T>> store_;
    TextEmbedding<T> text_embedding_;
    PatchEmbedding<T> vision_embedding_;
    std::vector<EncoderBlock<T>> encoder_;  // shared stack (one-tower) or text tower
    std::vector<EncoderBlock<T>> vision_encoder_;
    Linear<T> text_projection_, vision_projection_;
    std::vector<CrossModalBlock<T>> cross_blocks_;
    Linear<T> pooler_text_, pooler_vision_;
    std::map<std::string, Head<T>> heads_;
};

/// Trainable fraction over the whole model.
template <typename T>
double trainable_fraction(const VLModel<T>& model) {
    const auto total = model.params().total_count();
    return total ? static_cast<double>(model.params().trainable_count()) / static_cast<double>(total) : 0.0;
}

} // namespace vlkit
