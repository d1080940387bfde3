#pragma once

// Transformer building blocks: embeddings, attention, feed-forward, encoder
// blocks (post-layer-norm residual wiring) and the bidirectional cross-modal
// block.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <optional>
#include <utility>
#include <vector>

#include "vlkit/params.hpp"
#include "vlkit/random.hpp"
#include "vlkit/tensor.hpp"

namespace vlkit {

/// Per-forward state: train mode, dropout stream position and debug switches.
struct ForwardContext {
    bool train = false;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::uint64_t op_index = 0;
    // Replaces every attention sublayer's output by its query input.
    bool attention_identity = false;

    std::uint64_t next_dropout_key() { return hash_key(seed, step, op_index++); }
};

template <typename T>
Tensor<T> apply_dropout(const Tensor<T>& x, double rate, ForwardContext& ctx) {
    if (!ctx.train || rate <= 0.0) return x;
    return dropout(x, rate, true, ctx.next_dropout_key());
}

template <typename T>
struct Linear {
    Tensor<T> weight;  // (in, out)
    Tensor<T> bias;    // (out)

    static Linear make(const ParamBuilder<T>& pb, std::size_t in, std::size_t out) {
        return {pb.normal("weight", {in, out}), pb.zeros("bias", {out})};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gamma;
    Tensor<T> beta;
    T eps;

    static LayerNorm make(const ParamBuilder<T>& pb, std::size_t width, double eps) {
        return {pb.ones("gamma", {width}), pb.zeros("beta", {width}), static_cast<T>(eps)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

/// Optional capture of attention internals for inspection in tests.
template <typename T>
struct AttentionTrace {
    Tensor<T> weights;  // (B, heads, Lq, Lk)
    Tensor<T> context;  // (B, Lq, D), before the output projection
};

/// Multi-head scaled dot-product attention. Queries come from one sequence,
/// keys and values from another (the same one for self-attention).
template <typename T>
struct MultiHeadAttention {
    Linear<T> query, key, value, output;
    std::size_t heads = 1;
    double dropout_rate = 0.0;

    static MultiHeadAttention make(const ParamBuilder<T>& pb, std::size_t dim, std::size_t heads, double dropout) {
        if (heads == 0 || dim % heads != 0) {
            throw std::invalid_argument("attention: dim " + std::to_string(dim) + " not divisible by " +
                                        std::to_string(heads) + " heads");
        }
        return {Linear<T>::make(pb.sub("query"), dim, dim), Linear<T>::make(pb.sub("key"), dim, dim),
                Linear<T>::make(pb.sub("value"), dim, dim), Linear<T>::make(pb.sub("output"), dim, dim), heads,
                dropout};
    }

    std::size_t dim() const { return query.weight.dim(0); }

    /// queries (B, Lq, D), keys_values (B, Lk, D), key_mask B*Lk entries (1 = attend).
    Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& keys_values, std::span<const std::uint8_t> key_mask,
                         ForwardContext& ctx, AttentionTrace<T>* trace = nullptr) const {
        const std::size_t d = dim();
        if (queries.rank() != 3 || queries.dim(2) != d) throw ShapeError("attention", "queries (B, Lq, " + std::to_string(d) + ")", queries.shape());
        if (keys_values.rank() != 3 || keys_values.dim(2) != d || keys_values.dim(0) != queries.dim(0)) {
            throw ShapeError("attention", "keys/values (" + std::to_string(queries.dim(0)) + ", Lk, " + std::to_string(d) + ")",
                             keys_values.shape());
        }
        const std::size_t batch = queries.dim(0), lq = queries.dim(1), lk = keys_values.dim(1);
        if (key_mask.size() != batch * lk) {
            throw ShapeError("attention", "key mask of " + std::to_string(batch * lk) + " entries",
                             Shape{key_mask.size()});
        }
        if (ctx.attention_identity) return queries;
        const std::size_t dh = d / heads;
        auto split = [&](const Tensor<T>& x, std::size_t len) {
            return transpose(reshape(x, {batch, len, heads, dh}), 1, 2);  // (B, h, L, dh)
        };
        auto q = split(query(queries), lq);
        auto k = split(key(keys_values), lk);
        auto v = split(value(keys_values), lk);
        auto scores = scale(bmm(q, transpose(k, 2, 3)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
        auto weights = masked_softmax(scores, key_mask);
        auto attended = bmm(apply_dropout(weights, dropout_rate, ctx), v);  // (B, h, Lq, dh)
        auto context = reshape(transpose(attended, 1, 2), {batch, lq, d});
        if (trace) {
            trace->weights = weights;
            trace->context = context;
        }
        return output(context);
    }
};

template <typename T>
struct FeedForward {
    Linear<T> w1, w2;

    static FeedForward make(const ParamBuilder<T>& pb, std::size_t dim, std::size_t intermediate) {
        return {Linear<T>::make(pb.sub("w1"), dim, intermediate), Linear<T>::make(pb.sub("w2"), intermediate, dim)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return w2(gelu(w1(x))); }
};

/// Self-attention -> add & norm -> feed-forward -> add & norm.
template <typename T>
struct EncoderBlock {
    MultiHeadAttention<T> attention;
    LayerNorm<T> attention_norm;
    FeedForward<T> ffn;
    LayerNorm<T> ffn_norm;
    double dropout_rate = 0.0;

    static EncoderBlock make(const ParamBuilder<T>& pb, std::size_t dim, std::size_t heads, std::size_t intermediate,
                             double dropout, double eps) {
        return {MultiHeadAttention<T>::make(pb.sub("attention"), dim, heads, dropout),
                LayerNorm<T>::make(pb.sub("attention_norm"), dim, eps), FeedForward<T>::make(pb.sub("ffn"), dim, intermediate),
                LayerNorm<T>::make(pb.sub("ffn_norm"), dim, eps), dropout};
    }

    Tensor<T> operator()(const Tensor<T>& x, std::span<const std::uint8_t> mask, ForwardContext& ctx) const {
        auto h = attention_norm(add(x, apply_dropout(attention(x, x, mask, ctx), dropout_rate, ctx)));
        return ffn_norm(add(h, apply_dropout(ffn(h), dropout_rate, ctx)));
    }
};

/// Closed-form parameter count of one EncoderBlock.
inline std::size_t encoder_block_param_count(std::size_t dim, std::size_t intermediate) {
    return 4 * dim * dim + 4 * dim + 2 * dim * intermediate + dim + intermediate + 4 * dim;
}

/// Applies blocks in order. Zero blocks is the identity.
template <typename T>
Tensor<T> encode(const std::vector<EncoderBlock<T>>& blocks, Tensor<T> states, std::span<const std::uint8_t> mask,
                 ForwardContext& ctx) {
    for (const auto& block : blocks) states = block(states, mask, ctx);
    return states;
}

/// One stream of a cross-modal block.
template <typename T>
struct CrossModalStream {
    MultiHeadAttention<T> cross_attention;
    LayerNorm<T> cross_norm;
    MultiHeadAttention<T> self_attention;
    LayerNorm<T> self_norm;
    FeedForward<T> ffn;
    LayerNorm<T> ffn_norm;

    static CrossModalStream make(const ParamBuilder<T>& pb, std::size_t dim, std::size_t heads,
                                 std::size_t intermediate, double dropout, double eps) {
        return {MultiHeadAttention<T>::make(pb.sub("cross_attention"), dim, heads, dropout),
                LayerNorm<T>::make(pb.sub("cross_norm"), dim, eps),
                MultiHeadAttention<T>::make(pb.sub("self_attention"), dim, heads, dropout),
                LayerNorm<T>::make(pb.sub("self_norm"), dim, eps),
                FeedForward<T>::make(pb.sub("ffn"), dim, intermediate),
                LayerNorm<T>::make(pb.sub("ffn_norm"), dim, eps)};
    }
};

/// Bidirectional cross-modal block: both cross-attentions read the entering
/// states of the other stream, then each stream runs self-attention and a
/// feed-forward sublayer, each with add & norm.
template <typename T>
struct CrossModalBlock {
    CrossModalStream<T> text;
    CrossModalStream<T> vision;
    double dropout_rate = 0.0;

    static CrossModalBlock make(const ParamBuilder<T>& pb, std::size_t dim, std::size_t heads,
                                std::size_t intermediate, double dropout, double eps) {
        return {CrossModalStream<T>::make(pb.sub("text"), dim, heads, intermediate, dropout, eps),
                CrossModalStream<T>::make(pb.sub("vision"), dim, heads, intermediate, dropout, eps), dropout};
    }

    std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& text_states, const Tensor<T>& vision_states,
                                               std::span<const std::uint8_t> text_mask,
                                               std::span<const std::uint8_t> vision_mask, ForwardContext& ctx) const {
        auto residual = [&](const LayerNorm<T>& norm, const Tensor<T>& x, const Tensor<T>& update) {
            return norm(add(x, apply_dropout(update, dropout_rate, ctx)));
        };
        auto t_cross = text.cross_attention(text_states, vision_states, vision_mask, ctx);
        auto v_cross = vision.cross_attention(vision_states, text_states, text_mask, ctx);
        auto t = residual(text.cross_norm, text_states, t_cross);
        auto v = residual(vision.cross_norm, vision_states, v_cross);
        t = residual(text.self_norm, t, text.self_attention(t, t, text_mask, ctx));
        v = residual(vision.self_norm, v, vision.self_attention(v, v, vision_mask, ctx));
        t = residual(text.ffn_norm, t, text.ffn(t));
        v = residual(vision.ffn_norm, v, vision.ffn(v));
        return {t, v};
    }
};

/// Word-piece style text embedding: token + position + token type, layer norm
/// at the embedding width, then a projection to the hidden width when they differ.
template <typename T>
struct TextEmbedding {
    Tensor<T> token_table;       // (V, E)
    Tensor<T> position_table;    // (L_max, E)
    Tensor<T> token_type_table;  // (2, E)
    LayerNorm<T> norm;
    std::optional<Linear<T>> projection;  // E -> D iff E != D
    double dropout_rate = 0.0;

    static TextEmbedding make(const ParamBuilder<T>& pb, std::size_t vocab, std::size_t max_len, std::size_t embedding,
                              std::size_t hidden, double dropout, double eps) {
        TextEmbedding e{pb.normal("token_table", {vocab, embedding}), pb.normal("position_table", {max_len, embedding}),
                        pb.normal("token_type_table", {2, embedding}), LayerNorm<T>::make(pb.sub("norm"), embedding, eps),
                        std::nullopt, dropout};
        if (embedding != hidden) e.projection = Linear<T>::make(pb.sub("projection"), embedding, hidden);
        return e;
    }

    std::size_t vocab_size() const { return token_table.dim(0); }
    std::size_t hidden() const { return projection ? projection->weight.dim(1) : token_table.dim(1); }

    /// ids holds batch*len token ids, row-major.
    Tensor<T> operator()(std::span<const std::int32_t> ids, std::size_t batch, std::size_t len, ForwardContext& ctx) const {
        if (len > position_table.dim(0)) {
            throw ShapeError("text_embedding", "sequence length <= " + std::to_string(position_table.dim(0)), Shape{batch, len});
        }
        for (auto id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
                throw std::out_of_range("text_embedding: token id " + std::to_string(id) + " >= vocab size " +
                                        std::to_string(vocab_size()));
            }
        }
        auto x = embedding_gather(token_table, ids, {batch, len});
        x = add(x, slice(position_table, 0, 0, len));
        x = add(x, reshape(slice(token_type_table, 0, 0, 1), {token_type_table.dim(1)}));
        x = apply_dropout(norm(x), dropout_rate, ctx);
        return projection ? (*projection)(x) : x;
    }

    /// Token-type vector for `type_id`, mapped to the hidden width.
    Tensor<T> type_vector(std::size_t type_id) const {
        auto row = slice(token_type_table, 0, type_id, type_id + 1);
        return projection ? reshape((*projection)(row), {hidden()}) : reshape(row, {hidden()});
    }
};

/// Reorders images (B, H, W, C) into patches (B, N, P*P*C). Patches are taken
/// row-major over the grid; each patch is flattened in (row, col, channel) order.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch) {
    if (images.rank() != 4) throw ShapeError("patchify", "(B, H, W, C) images", images.shape());
    const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw std::invalid_argument("patch_embed: image height " + std::to_string(h) + " and width " + std::to_string(w) +
                                    " must be multiples of patch size " + std::to_string(patch));
    }
    auto grid = reshape(images, {b, h / patch, patch, w / patch, patch, c});
    grid = transpose(grid, 2, 3);  // (B, H/P, W/P, P, P, C)
    return reshape(grid, {b, (h / patch) * (w / patch), patch * patch * c});
}

/// Patch embedding: projection of flattened patches, CLS token prepended,
/// learned positions added, then layer norm.
template <typename T>
struct PatchEmbedding {
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    Linear<T> projection;    // (P*P*C, D)
    Tensor<T> cls_token;     // (D)
    Tensor<T> position_table;  // (N + 1, D)
    LayerNorm<T> norm;
    double dropout_rate = 0.0;

    static PatchEmbedding make(const ParamBuilder<T>& pb, std::size_t patch, std::size_t channels,
                               std::size_t num_patches, std::size_t hidden, double dropout, double eps) {
        return {patch, channels, Linear<T>::make(pb.sub("projection"), patch * patch * channels, hidden),
                pb.normal("cls_token", {hidden}), pb.normal("position_table", {num_patches + 1, hidden}),
                LayerNorm<T>::make(pb.sub("norm"), hidden, eps), dropout};
    }

    std::size_t hidden() const { return cls_token.dim(0); }

    /// images (B, H, W, C) -> (B, N + 1, D)
    Tensor<T> operator()(const Tensor<T>& images, ForwardContext& ctx) const {
        auto patches = patchify(images, patch_size);
        const std::size_t b = patches.dim(0), n = patches.dim(1);
        if (n + 1 != position_table.dim(0) || images.dim(3) != channels) {
            throw ShapeError("patch_embed", "images yielding " + std::to_string(position_table.dim(0) - 1) +
                                                " patches of " + std::to_string(channels) + " channels",
                             images.shape());
        }
        auto tokens = projection(patches);
        auto cls = add(Tensor<T>({b, 1, hidden()}), cls_token);
        auto x = add(concat<T>({cls, tokens}, 1), position_table);
        return apply_dropout(norm(x), dropout_rate, ctx);
    }
};

} // namespace vlkit
