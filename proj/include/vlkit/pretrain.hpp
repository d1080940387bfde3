#pragma once

// Pretraining objectives: masked language modeling over text positions and
// image-text matching over the pooled representation.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vlkit/batch.hpp"
#include "vlkit/data.hpp"
#include "vlkit/models.hpp"
#include "vlkit/random.hpp"

namespace vlkit {

inline constexpr const char* kMlmHead = "mlm";
inline constexpr const char* kItmHead = "itm";

struct MlmSpec {
    double mask_prob = 0.15;
    double mask_token_frac = 0.8;
    double random_token_frac = 0.1;
    double keep_frac = 0.1;
    // Token ids that are never selected for corruption.
    std::vector<std::int32_t> special_ids{kPadId, kClsId, kSepId, kMaskId};

    void validate() const {
        if (mask_prob < 0.0 || mask_prob > 1.0) throw ConfigError("mlm.mask_prob must be in [0, 1]");
        if (mask_token_frac < 0 || random_token_frac < 0 || keep_frac < 0 ||
            std::abs(mask_token_frac + random_token_frac + keep_frac - 1.0) > 1e-9) {
            throw ConfigError("mlm split fractions must be nonnegative and sum to 1");
        }
    }

    bool is_special(std::int32_t id) const {
        return std::find(special_ids.begin(), special_ids.end(), id) != special_ids.end();
    }
};

struct ItmSpec {
    double negative_prob = 0.5;

    void validate() const {
        if (!(negative_prob > 0.0 && negative_prob < 1.0)) throw ConfigError("itm.negative_prob must be in (0, 1)");
    }
};

struct MlmResult {
    std::vector<std::int32_t> corrupted;
    std::vector<std::int32_t> labels;  // original id where corrupted, kIgnoreLabel elsewhere
};

/// BERT-style corruption. Random replacement tokens are drawn uniformly from
/// the non-reserved ids [kNumReservedIds, vocab_size).
inline MlmResult apply_mlm_mask(std::span<const std::int32_t> ids, const MlmSpec& spec, std::size_t vocab_size,
                                KeyedStream& stream) {
    MlmResult r{std::vector<std::int32_t>(ids.begin(), ids.end()), std::vector<std::int32_t>(ids.size(), kIgnoreLabel)};
    const std::uint64_t ordinary = vocab_size - kNumReservedIds;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (spec.is_special(ids[i]) || !stream.bernoulli(spec.mask_prob)) continue;
        r.labels[i] = ids[i];
        const double u = stream.uniform();
        if (u < spec.mask_token_frac) {
            r.corrupted[i] = kMaskId;
        } else if (u < spec.mask_token_frac + spec.random_token_frac) {
            r.corrupted[i] = kNumReservedIds + static_cast<std::int32_t>(stream.below(ordinary));
        }
    }
    return r;
}

/// A uniformly chosen image index in [0, pool_size) other than `positive`.
inline std::size_t choose_negative(std::size_t positive, std::size_t pool_size, KeyedStream& stream) {
    if (pool_size < 2) throw std::invalid_argument("itm: negative sampling needs at least two images in the pool");
    const auto pick = static_cast<std::size_t>(stream.below(pool_size - 1));
    return pick >= positive ? pick + 1 : pick;
}

struct ItmAssignment {
    std::vector<std::size_t> image_index;
    std::vector<std::int32_t> labels;  // 1 = matched, 0 = mismatched
};

/// For pairs whose positive images are `positives` (indices into a pool of
/// `pool_size` distinct images), independently replaces each image with a
/// different one with probability negative_prob. Captions are never changed.
inline ItmAssignment make_itm_assignment(std::span<const std::size_t> positives, std::size_t pool_size,
                                         const ItmSpec& spec, KeyedStream& stream) {
    if (pool_size < 2) throw std::invalid_argument("itm: negative sampling needs at least two images in the pool");
    ItmAssignment a;
    for (auto pos : positives) {
        if (stream.bernoulli(spec.negative_prob)) {
            a.image_index.push_back(choose_negative(pos, pool_size, stream));
            a.labels.push_back(0);
        } else {
            a.image_index.push_back(pos);
            a.labels.push_back(1);
        }
    }
    return a;
}

template <typename T>
struct PretrainLoss {
    Tensor<T> total;
    std::optional<Tensor<T>> mlm;
    std::optional<Tensor<T>> itm;
};

struct Objectives {
    bool mlm = true;
    bool itm = true;
};

/// MLM logits over every text position: (B * Lt, V).
template <typename T>
Tensor<T> mlm_logits(const VLModel<T>& model, const EncoderOutput<T>& out) {
    const auto& states = out.text_states;
    auto logits = model.head(kMlmHead)(states);
    return reshape(logits, {states.dim(0) * states.dim(1), model.config().vocab_size});
}

template <typename T>
Tensor<T> itm_logits(const VLModel<T>& model, const EncoderOutput<T>& out) {
    return model.head(kItmHead)(out.pooled);
}

/// Loss on a batch whose token ids are already corrupted, with mlm_labels and
/// (for ITM) labels filled. total = mlm + itm with unit weights.
template <typename T>
PretrainLoss<T> pretrain_loss(const VLModel<T>& model, const Batch& batch, const Objectives& objectives,
                              ForwardContext& ctx) {
    if (!objectives.mlm && !objectives.itm) throw ConfigError("pretraining needs at least one objective");
    auto out = model.encode(batch, ctx);
    PretrainLoss<T> loss;
    if (objectives.mlm) loss.mlm = cross_entropy_from_logits(mlm_logits(model, out), batch.mlm_labels);
    if (objectives.itm) loss.itm = cross_entropy_from_logits(itm_logits(model, out), batch.labels);
    if (loss.mlm && loss.itm) {
        loss.total = add(*loss.mlm, *loss.itm);
    } else {
        loss.total = loss.mlm ? *loss.mlm : *loss.itm;
    }
    return loss;
}

/// Draws pretraining batches from a split: examples sampled uniformly with
/// replacement, images swapped for ITM negatives, then MLM corruption of
/// every caption (MLM targets only on matched pairs). Every batch is a pure
/// function of (seed, step).
class PretrainSampler {
public:
    PretrainSampler(const Dataset& data, const std::string& split, std::size_t max_len, MlmSpec mlm, ItmSpec itm,
                    Objectives objectives, std::uint64_t seed, bool with_images = true)
        : data_(&data), pool_(data.split_indices(split)), max_len_(max_len), mlm_(std::move(mlm)), itm_(itm),
          objectives_(objectives), seed_(seed), with_images_(with_images) {
        if (pool_.empty()) throw DataError("pretraining split '" + split + "' is empty");
        mlm_.validate();
        itm_.validate();
    }

    std::size_t pool_size() const { return pool_.size(); }

    Batch batch(std::uint64_t step, std::size_t batch_size) const {
        KeyedStream stream(seed_, kSampleStream, step);
        std::vector<std::size_t> positives(batch_size);
        for (auto& p : positives) p = static_cast<std::size_t>(stream.below(pool_.size()));
        return build(positives, stream, step);
    }

    /// Fixed evaluation batch over pool positions [begin, end). With
    /// `corrupt` false the captions are left unmasked (mlm_labels all ignored).
    Batch eval_batch(std::size_t begin, std::size_t end, bool corrupt = true) const {
        KeyedStream stream(seed_, kEvalStream, begin);
        std::vector<std::size_t> positives;
        for (std::size_t i = begin; i < std::min(end, pool_.size()); ++i) positives.push_back(i);
        return build(positives, stream, ~std::uint64_t{0} - begin, corrupt);
    }

private:
    static constexpr std::uint64_t kSampleStream = 0x73616d706c65ULL;
    static constexpr std::uint64_t kEvalStream = 0x6576616cULL;
    static constexpr std::uint64_t kMaskStream = 0x6d61736bULL;

    Batch build(const std::vector<std::size_t>& positives, KeyedStream& stream, std::uint64_t step,
                bool corrupt = true) const {
        ItmAssignment itm;
        if (objectives_.itm) {
            itm = make_itm_assignment(positives, pool_.size(), itm_, stream);
        } else {
            itm.image_index = positives;
            itm.labels.assign(positives.size(), 1);
        }
        std::vector<Example> examples;
        examples.reserve(positives.size());
        for (std::size_t i = 0; i < positives.size(); ++i) {
            Example ex = data_->examples[pool_[positives[i]]];
            ex.image = data_->examples[pool_[itm.image_index[i]]].image;
            ex.label = itm.labels[i];
            examples.push_back(std::move(ex));
        }
        std::vector<const Example*> ptrs;
        for (const auto& ex : examples) ptrs.push_back(&ex);
        Batch b = collate(ptrs, max_len_, data_->geometry, with_images_);
        b.mlm_labels.assign(b.token_ids.size(), kIgnoreLabel);
        if (!objectives_.mlm || !corrupt) return b;
        for (std::size_t i = 0; i < b.size; ++i) {
            // Every row is corrupted so masking says nothing about the ITM label;
            // MLM targets are kept for matched pairs only.
            KeyedStream mask_stream(seed_, kMaskStream, step, i);
            const auto row = std::span<const std::int32_t>(b.token_ids).subspan(i * b.text_len, b.text_len);
            auto masked = apply_mlm_mask(row, mlm_, data_->vocab.size(), mask_stream);
            const auto offset = static_cast<std::ptrdiff_t>(i * b.text_len);
            std::copy(masked.corrupted.begin(), masked.corrupted.end(), b.token_ids.begin() + offset);
            if (b.labels[i] == 1) std::copy(masked.labels.begin(), masked.labels.end(), b.mlm_labels.begin() + offset);
        }
        return b;
    }

    const Dataset* data_;
    std::vector<std::size_t> pool_;
    std::size_t max_len_;
    MlmSpec mlm_;
    ItmSpec itm_;
    Objectives objectives_;
    std::uint64_t seed_;
    bool with_images_;
};

} // namespace vlkit
