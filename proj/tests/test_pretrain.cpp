#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "vlkit/pretrain.hpp"
#include "test_support.hpp"

using namespace vlkit;
using namespace vlkit::testing;

namespace {

ModelConfig small_config(ModelType type, std::size_t vocab) {
    ModelConfig c;
    c.model_type = type;
    c.vocab_size = vocab;
    c.max_text_len = 16;
    c.text = {32, 0, 64, 4, 2};
    c.vision = {24, 0, 48, 3, 1};
    c.cross = {32, 64, 4, 1};
    c.dropout = 0.0;
    c.heads = {{kMlmHead, HeadKind::mlm, 0, 1, 1, {}}, {kItmHead, HeadKind::classifier, 2, 1, 1, {}}};
    return c;
}

const Dataset& pretrain_corpus() {
    static const Dataset ds = synthetic_dataset("pretrain_corpus", TaskKind::pretrain, {{"train", 300}, {"dev", 40}});
    return ds;
}

template <typename T>
void zero_head(VLModel<T>& model, const std::string& head) {
    for (auto& p : model.params().entries()) {
        if (p.name.rfind("head." + head + ".", 0) == 0) {
            auto d = p.value.mutable_data();
            std::fill(d.begin(), d.end(), T{0});
        }
    }
}

// 3-sigma binomial band around the expected count
bool within_three_sigma(double count, double n, double p) {
    return std::abs(count - n * p) <= 3.0 * std::sqrt(n * p * (1.0 - p));
}

} // namespace

TEST_CASE("mlm masks about 15% of maskable tokens with the 80/10/10 split") {
    const std::size_t vocab = 40, n = 100'000;
    KeyedStream ids_stream(11);
    std::vector<std::int32_t> ids(n);
    for (auto& id : ids) id = kNumReservedIds + static_cast<std::int32_t>(ids_stream.below(vocab - kNumReservedIds));
    KeyedStream stream(3, 0, 0);
    auto r = apply_mlm_mask(ids, MlmSpec{}, vocab, stream);

    double masked = 0, as_mask = 0, unchanged = 0, replaced = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (r.labels[i] == kIgnoreLabel) {
            CHECK(r.corrupted[i] == ids[i]);
            continue;
        }
        CHECK(r.labels[i] == ids[i]);
        ++masked;
        if (r.corrupted[i] == kMaskId) {
            ++as_mask;
        } else if (r.corrupted[i] == ids[i]) {
            ++unchanged;
        } else {
            CHECK(r.corrupted[i] >= kNumReservedIds);
            CHECK(r.corrupted[i] < static_cast<std::int32_t>(vocab));
            ++replaced;
        }
    }
    CHECK(std::abs(masked / n - 0.15) <= 0.01);
    // a random replacement equals the original with probability 1 / ordinary ids
    const double same = 1.0 / static_cast<double>(vocab - kNumReservedIds);
    CHECK(within_three_sigma(as_mask, masked, 0.8));
    CHECK(within_three_sigma(replaced, masked, 0.1 * (1.0 - same)));
    CHECK(within_three_sigma(unchanged, masked, 0.1 + 0.1 * same));
}

TEST_CASE("special tokens are never selected for masking") {
    std::vector<std::int32_t> ids;
    for (int i = 0; i < 2000; ++i) ids.insert(ids.end(), {kClsId, 7, kMaskId, 9, kSepId, kPadId, kPadId});
    MlmSpec spec;
    spec.mask_prob = 0.9;
    KeyedStream stream(5);
    auto r = apply_mlm_mask(ids, spec, 30, stream);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (spec.is_special(ids[i])) {
            CHECK(r.labels[i] == kIgnoreLabel);
            CHECK(r.corrupted[i] == ids[i]);
        }
    }

    const std::vector<std::int32_t> only_special{kClsId, kSepId, kPadId, kPadId};
    KeyedStream s2(1);
    auto none = apply_mlm_mask(only_special, MlmSpec{}, 30, s2);
    CHECK(std::all_of(none.labels.begin(), none.labels.end(), [](auto l) { return l == kIgnoreLabel; }));
    CHECK(none.corrupted == only_special);
}

TEST_CASE("mlm corruption is a function of the stream key") {
    std::vector<std::int32_t> ids(500);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 5 + static_cast<std::int32_t>(i % 30);
    KeyedStream a(9, 4, 2), b(9, 4, 2), c(9, 5, 2);
    auto ra = apply_mlm_mask(ids, MlmSpec{}, 40, a);
    auto rb = apply_mlm_mask(ids, MlmSpec{}, 40, b);
    auto rc = apply_mlm_mask(ids, MlmSpec{}, 40, c);
    CHECK(ra.corrupted == rb.corrupted);
    CHECK(ra.labels == rb.labels);
    CHECK(ra.labels != rc.labels);
}

TEST_CASE("mlm spec validation") {
    MlmSpec bad;
    bad.random_token_frac = 0.2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    MlmSpec prob;
    prob.mask_prob = 1.5;
    CHECK_THROWS_AS(prob.validate(), ConfigError);
    CHECK_NOTHROW(MlmSpec{}.validate());
    for (double p : {0.0, 1.0, -0.1}) {
        ItmSpec itm{p};
        CHECK_THROWS_AS(itm.validate(), ConfigError);
    }
}

TEST_CASE("itm negatives come from a different image") {
    KeyedStream stream(21);
    for (int i = 0; i < 200; ++i) CHECK(choose_negative(0, 2, stream) == 1);
    for (int i = 0; i < 200; ++i) CHECK(choose_negative(1, 2, stream) == 0);

    std::vector<std::size_t> positives(10'000);
    for (auto& p : positives) p = stream.below(7);
    auto a = make_itm_assignment(positives, 7, ItmSpec{}, stream);
    std::size_t matched = 0;
    std::set<std::size_t> negatives_seen;
    for (std::size_t i = 0; i < positives.size(); ++i) {
        if (a.labels[i] == 1) {
            CHECK(a.image_index[i] == positives[i]);
            ++matched;
        } else {
            REQUIRE(a.labels[i] == 0);
            CHECK(a.image_index[i] != positives[i]);
            CHECK(a.image_index[i] < 7);
            negatives_seen.insert(a.image_index[i]);
        }
    }
    CHECK(std::abs(static_cast<double>(matched) / positives.size() - 0.5) <= 0.02);
    CHECK(negatives_seen.size() == 7);
}

TEST_CASE("itm sampling needs at least two images") {
    KeyedStream stream(1);
    std::vector<std::size_t> positives{0, 0};
    CHECK_THROWS_AS(make_itm_assignment(positives, 1, ItmSpec{}, stream), std::invalid_argument);
    CHECK_THROWS_AS(choose_negative(0, 1, stream), std::invalid_argument);
}

TEST_CASE("itm head with zero weights gives ln 2") {
    auto model = VLModel<double>::build(small_config(ModelType::two_tower, 40));
    zero_head(model, kItmHead);
    PretrainSampler sampler(pretrain_corpus(), "train", 16, MlmSpec{}, ItmSpec{}, Objectives{}, 3);
    auto batch = sampler.batch(0, 8);
    ForwardContext ctx;
    auto loss = pretrain_loss(model, batch, Objectives{}, ctx);
    REQUIRE(loss.itm);
    CHECK(loss.itm->item() == Catch::Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("pretraining loss is the exact sum of its components") {
    auto model = VLModel<float>::build(small_config(ModelType::two_tower, 40));
    PretrainSampler sampler(pretrain_corpus(), "train", 16, MlmSpec{}, ItmSpec{}, Objectives{}, 3);
    auto batch = sampler.batch(1, 16);
    ForwardContext ctx;
    auto both = pretrain_loss(model, batch, Objectives{true, true}, ctx);
    REQUIRE(both.mlm);
    REQUIRE(both.itm);
    CHECK(both.total.item() == both.mlm->item() + both.itm->item());

    auto mlm_only = pretrain_loss(model, batch, Objectives{true, false}, ctx);
    CHECK_FALSE(mlm_only.itm);
    CHECK(mlm_only.total.item() == mlm_only.mlm->item());
    CHECK(mlm_only.total.item() == both.mlm->item());

    auto itm_only = pretrain_loss(model, batch, Objectives{false, true}, ctx);
    CHECK(itm_only.total.item() == both.itm->item());
    CHECK_THROWS_AS(pretrain_loss(model, batch, Objectives{false, false}, ctx), ConfigError);
}

TEST_CASE("untrained mlm loss is near ln V") {
    for (auto type : {ModelType::one_tower, ModelType::two_tower}) {
        const std::size_t vocab = pretrain_corpus().vocab.size();
        auto model = VLModel<float>::build(small_config(type, vocab));
        PretrainSampler sampler(pretrain_corpus(), "train", 16, MlmSpec{}, ItmSpec{}, Objectives{}, 4);
        auto batch = sampler.batch(0, 128);
        ForwardContext ctx;
        const double mlm = pretrain_loss(model, batch, Objectives{}, ctx).mlm->item();
        const double ln_v = std::log(static_cast<double>(vocab));
        CHECK(std::abs(mlm - ln_v) <= 0.2 * ln_v);
    }
}

TEST_CASE("mlm head gradient is exactly zero when every label is ignored") {
    auto model = VLModel<double>::build(small_config(ModelType::two_tower, 40));
    PretrainSampler sampler(pretrain_corpus(), "train", 16, MlmSpec{}, ItmSpec{}, Objectives{}, 5);
    auto batch = sampler.batch(0, 6);
    std::fill(batch.mlm_labels.begin(), batch.mlm_labels.end(), kIgnoreLabel);
    Tape<double> tape;
    double value = -1;
    {
        RecordingScope<double> scope(tape);
        ForwardContext ctx;
        auto loss = pretrain_loss(model, batch, Objectives{true, false}, ctx);
        value = loss.total.item();
        backward(loss.total);
    }
    CHECK(value == 0.0);
    for (const auto& p : model.params().entries()) {
        if (p.name.rfind("head.mlm.", 0) != 0 || !p.value.has_grad()) continue;
        for (double g : p.value.grad()) CHECK(g == 0.0);
    }
}

TEST_CASE("mlm logits see the image only through attention") {
    for (auto type : {ModelType::one_tower, ModelType::two_tower}) {
        auto model = VLModel<float>::build(small_config(type, 40));
        PretrainSampler sampler(pretrain_corpus(), "train", 16, MlmSpec{}, ItmSpec{}, Objectives{}, 6);
        auto batch = sampler.batch(0, 4);
        auto perturbed = batch;
        for (auto& px : perturbed.images) px = -px;

        ForwardContext ablated;
        ablated.attention_identity = true;
        auto base = mlm_logits(model, model.encode(batch, ablated));
        auto moved = mlm_logits(model, model.encode(perturbed, ablated));
        CHECK(std::equal(base.data().begin(), base.data().end(), moved.data().begin()));

        ForwardContext normal;
        auto with_attention = mlm_logits(model, model.encode(batch, normal));
        auto with_attention_moved = mlm_logits(model, model.encode(perturbed, normal));
        CHECK_FALSE(std::equal(with_attention.data().begin(), with_attention.data().end(),
                               with_attention_moved.data().begin()));
    }
}

TEST_CASE("sampler batches are reproducible and corrupt every row") {
    const auto& ds = pretrain_corpus();
    PretrainSampler sampler(ds, "train", 16, MlmSpec{}, ItmSpec{}, Objectives{}, 8);
    auto a = sampler.batch(12, 64);
    auto b = sampler.batch(12, 64);
    CHECK(a.token_ids == b.token_ids);
    CHECK(a.images == b.images);
    CHECK(a.mlm_labels == b.mlm_labels);
    CHECK(a.labels == b.labels);
    CHECK(sampler.batch(13, 64).token_ids != a.token_ids);

    std::size_t negative_rows_with_mask = 0;
    for (std::size_t i = 0; i < a.size; ++i) {
        bool has_target = false, has_mask = false;
        for (std::size_t t = 0; t < a.text_len; ++t) {
            has_target = has_target || a.mlm_labels[i * a.text_len + t] != kIgnoreLabel;
            has_mask = has_mask || a.token_ids[i * a.text_len + t] == kMaskId;
        }
        if (a.labels[i] == 0) {
            CHECK_FALSE(has_target);
            negative_rows_with_mask += has_mask;
        }
    }
    CHECK(negative_rows_with_mask > 0);
}

TEST_CASE("clean evaluation batches keep captions and swap only images") {
    const auto& ds = pretrain_corpus();
    PretrainSampler sampler(ds, "dev", 16, MlmSpec{}, ItmSpec{}, Objectives{}, 8);
    auto batch = sampler.eval_batch(0, 40, false);
    REQUIRE(batch.size == 40);
    const auto pool = ds.split_indices("dev");
    std::size_t negatives = 0;
    for (std::size_t i = 0; i < batch.size; ++i) {
        const auto& ex = ds.examples[pool[i]];
        CHECK(batch.example_ids[i] == ex.id);
        CHECK(batch.token_ids[i * batch.text_len] == kClsId);
        for (std::size_t t = 0; t < ex.tokens.size(); ++t) CHECK(batch.token_ids[i * batch.text_len + 1 + t] == ex.tokens[t]);
        const auto px = std::vector<float>(batch.images.begin() + static_cast<std::ptrdiff_t>(i * ex.image.size()),
                                           batch.images.begin() + static_cast<std::ptrdiff_t>((i + 1) * ex.image.size()));
        if (batch.labels[i] == 1) {
            CHECK(px == ex.image);
        } else {
            ++negatives;
            CHECK(px != ex.image);
        }
    }
    CHECK(negatives > 0);
    CHECK(std::all_of(batch.mlm_labels.begin(), batch.mlm_labels.end(), [](auto l) { return l == kIgnoreLabel; }));
}

TEST_CASE("text-only sampling for one-tower text sources") {
    PretrainSampler sampler(pretrain_corpus(), "train", 16, MlmSpec{}, ItmSpec{}, Objectives{true, false}, 2, false);
    auto batch = sampler.batch(0, 8);
    CHECK(batch.images.empty());
    CHECK(std::all_of(batch.labels.begin(), batch.labels.end(), [](auto l) { return l == 1; }));
    auto model = VLModel<float>::build(small_config(ModelType::one_tower, 40));
    ForwardContext ctx;
    auto loss = pretrain_loss(model, batch, Objectives{true, false}, ctx);
    CHECK(std::isfinite(loss.total.item()));
}
