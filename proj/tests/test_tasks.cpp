#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "vlkit/engine.hpp"
#include "vlkit/tasks.hpp"
#include "test_support.hpp"

using namespace vlkit;
using namespace vlkit::testing;

namespace {

ModelConfig task_config(ModelType type, const std::vector<TaskSpec>& tasks) {
    ModelConfig c;
    c.model_type = type;
    c.vocab_size = synthetic_vocab().size();
    c.max_text_len = 16;
    c.text = {32, 0, 64, 4, 2};
    c.vision = {24, 0, 48, 3, 2};
    c.cross = {32, 64, 4, 1};
    c.dropout = 0.0;
    for (const auto& t : tasks) c.heads.push_back(t.head_spec());
    return c;
}

const Dataset& corpus(TaskKind task) {
    static std::map<TaskKind, Dataset> cache;
    auto it = cache.find(task);
    if (it == cache.end()) {
        const SplitCounts counts = task == TaskKind::ref_res ? SplitCounts{{"train", 40}, {"dev", 1000}}
                                                             : SplitCounts{{"train", 1500}, {"dev", 300}};
        it = cache.emplace(task, synthetic_dataset("tasks_" + to_string(task), task, counts)).first;
    }
    return it->second;
}

Batch first_examples(const Dataset& ds, const std::string& split, std::size_t n, std::size_t offset = 0) {
    const auto idx = ds.split_indices(split);
    std::vector<const Example*> ptrs;
    for (std::size_t i = offset; i < offset + n; ++i) ptrs.push_back(&ds.examples[idx[i]]);
    return collate(ptrs, 16, ds.geometry);
}

template <typename T>
void fill_head(VLModel<T>& model, const std::string& head, T value) {
    for (auto& p : model.params().entries()) {
        if (p.name.rfind("head." + head + ".", 0) == 0) {
            auto d = p.value.mutable_data();
            std::fill(d.begin(), d.end(), value);
        }
    }
}

template <typename T>
Tensor<T> param(VLModel<T>& model, const std::string& name) {
    auto* p = model.params().find(name);
    REQUIRE(p);
    return p->value;
}

} // namespace

TEST_CASE("zero-weight heads give ln of the class count") {
    const std::vector<TaskSpec> tasks{TaskSpec::standard(TaskKind::snli_ve), TaskSpec::standard(TaskKind::nlvr2),
                                      TaskSpec::standard(TaskKind::ref_res), TaskSpec::standard(TaskKind::vqa),
                                      TaskSpec::standard(TaskKind::retrieval, 2)};
    for (auto type : {ModelType::one_tower, ModelType::two_tower}) {
        auto model = VLModel<double>::build(task_config(type, tasks));
        for (const auto& task : tasks) {
            fill_head(model, task.head_name(), 0.0);
            const auto kind = task.kind == TaskKind::retrieval ? TaskKind::pretrain : task.kind;
            auto batch = first_examples(corpus(kind), "train", 6);
            if (task.kind == TaskKind::retrieval) std::fill(batch.labels.begin(), batch.labels.end(), 1);
            ForwardContext ctx;
            const double loss = task_loss(model, task, batch, ctx).item();
            const std::size_t classes = task.kind == TaskKind::vqa ? vqa_answers().size() : task.num_classes;
            INFO(to_string(task.kind));
            CHECK(loss == Catch::Approx(std::log(static_cast<double>(classes))).margin(1e-12));
        }
    }
}

TEST_CASE("balanced entailment dev set puts majority-class accuracy at one third") {
    const auto& ds = corpus(TaskKind::snli_ve);
    std::map<std::int32_t, std::size_t> counts;
    std::vector<std::int32_t> labels;
    for (auto i : ds.split_indices("dev")) {
        ++counts[ds.examples[i].label];
        labels.push_back(ds.examples[i].label);
    }
    REQUIRE(counts.size() == 3);
    for (std::int32_t k = 0; k < 3; ++k) {
        const std::vector<std::int32_t> constant(labels.size(), k);
        CHECK(accuracy(constant, labels) == Catch::Approx(1.0 / 3.0).margin(0.01));
    }
}

TEST_CASE("nlvr2 runs both images through shared weights") {
    const auto task = TaskSpec::standard(TaskKind::nlvr2);
    auto model = VLModel<float>::build(task_config(ModelType::two_tower, {task}));
    // head logit 0 reads the first pooled half, logit 1 the second, with the same weights
    auto w = param(model, "head.nlvr2.layer0.weight");
    const std::size_t pooled = w.dim(0) / 2;
    KeyedStream rng(4);
    std::vector<float> shared(pooled);
    for (auto& v : shared) v = static_cast<float>(rng.uniform() - 0.5);
    auto wd = w.mutable_data();
    std::fill(wd.begin(), wd.end(), 0.0f);
    for (std::size_t i = 0; i < pooled; ++i) {
        wd[i * 2 + 0] = shared[i];
        wd[(pooled + i) * 2 + 1] = shared[i];
    }
    auto bias = param(model, "head.nlvr2.layer0.bias");
    std::fill(bias.mutable_data().begin(), bias.mutable_data().end(), 0.0f);

    auto batch = first_examples(corpus(TaskKind::nlvr2), "train", 4);
    ForwardContext ctx;
    auto logits = task_logits(model, task, batch, ctx);

    auto swapped = batch;
    std::swap(swapped.images, swapped.images_b);
    auto swapped_logits = task_logits(model, task, swapped, ctx);
    auto same = batch;
    same.images_b = same.images;
    auto same_logits = task_logits(model, task, same, ctx);
    for (std::size_t r = 0; r < batch.size; ++r) {
        CHECK(swapped_logits[r * 2] == logits[r * 2 + 1]);
        CHECK(swapped_logits[r * 2 + 1] == logits[r * 2]);
        CHECK(same_logits[r * 2] == same_logits[r * 2 + 1]);
    }

    auto first = model.encode(batch, ctx, false).pooled;
    auto second = model.encode(batch, ctx, true).pooled;
    auto twice = model.encode(same, ctx, true).pooled;
    CHECK(std::equal(first.data().begin(), first.data().end(), twice.data().begin()));
    CHECK_FALSE(std::equal(first.data().begin(), first.data().end(), second.data().begin()));

    auto single = batch;
    single.images_b.clear();
    CHECK_THROWS_AS(task_logits(model, task, single, ctx), TaskError);
}

TEST_CASE("nlvr2 gradients accumulate from both passes") {
    const auto task = TaskSpec::standard(TaskKind::nlvr2);
    auto model = VLModel<double>::build(task_config(ModelType::two_tower, {task}));
    auto batch = first_examples(corpus(TaskKind::nlvr2), "train", 3);
    const auto& head = model.head(task.head_name());
    const std::vector<std::string> watched{"text_encoder.block0.ffn.w1.weight", "vision_encoder.block1.attention.key.bias",
                                           "cross_modal.block0.vision.self_attention.value.weight"};

    auto grads_of = [&](const std::function<Tensor<double>()>& loss) {
        model.params().zero_grad();
        Tape<double> tape;
        {
            RecordingScope<double> scope(tape);
            backward(loss());
        }
        std::vector<std::vector<double>> out;
        for (const auto& name : watched) {
            const auto& v = model.params().find(name)->value;
            out.emplace_back(v.grad().begin(), v.grad().end());
        }
        return out;
    };
    auto constant_pooled = [&](bool second) {
        NoRecordScope<double> off;
        ForwardContext ctx;
        auto p = model.encode(batch, ctx, second).pooled;
        return Tensor<double>(p.shape(), std::vector<double>(p.data().begin(), p.data().end()));
    };

    auto full = grads_of([&] {
        ForwardContext ctx;
        return task_loss(model, task, batch, ctx);
    });
    const auto fixed_b = constant_pooled(true);
    auto via_a = grads_of([&] {
        ForwardContext ctx;
        auto a = model.encode(batch, ctx, false).pooled;
        return cross_entropy_from_logits(head(concat<double>({a, fixed_b}, 1)), batch.labels);
    });
    const auto fixed_a = constant_pooled(false);
    auto via_b = grads_of([&] {
        ForwardContext ctx;
        auto b = model.encode(batch, ctx, true).pooled;
        return cross_entropy_from_logits(head(concat<double>({fixed_a, b}, 1)), batch.labels);
    });
    for (std::size_t k = 0; k < watched.size(); ++k) {
        INFO(watched[k]);
        REQUIRE(full[k].size() == via_a[k].size());
        double norm_a = 0, norm_b = 0;
        for (std::size_t i = 0; i < full[k].size(); ++i) {
            CHECK(full[k][i] == Catch::Approx(via_a[k][i] + via_b[k][i]).margin(1e-12));
            norm_a += via_a[k][i] * via_a[k][i];
            norm_b += via_b[k][i] * via_b[k][i];
        }
        CHECK(norm_a > 0);
        CHECK(norm_b > 0);
    }
}

TEST_CASE("ref_res candidates with identical regions tie") {
    const auto task = TaskSpec::standard(TaskKind::ref_res);
    for (auto type : {ModelType::one_tower, ModelType::two_tower}) {
        auto model = VLModel<float>::build(task_config(type, {task}));
        auto batch = first_examples(corpus(TaskKind::ref_res), "train", 3);
        for (auto& regions : batch.regions) regions = {{5, 6}, {6, 5}};
        std::fill(batch.labels.begin(), batch.labels.end(), 0);
        ForwardContext ctx;
        auto logits = task_logits(model, task, batch, ctx);
        REQUIRE(logits.shape() == Shape{3, 2});
        for (std::size_t r = 0; r < 3; ++r) CHECK(logits[r * 2] == Catch::Approx(logits[r * 2 + 1]).epsilon(1e-6));
        auto probs = softmax(logits);
        CHECK(probs[0] == Catch::Approx(0.5).epsilon(1e-6));
    }
}

TEST_CASE("single-patch ref_res scores match the scorer applied per patch") {
    const auto task = TaskSpec::standard(TaskKind::ref_res);
    for (auto type : {ModelType::one_tower, ModelType::two_tower}) {
        auto model = VLModel<double>::build(task_config(type, {task}));
        auto batch = first_examples(corpus(TaskKind::ref_res), "train", 4);
        ForwardContext ctx;
        auto logits = task_logits(model, task, batch, ctx);
        auto states = model.encode(batch, ctx).vision_states;
        const auto& w = model.params().find("head.ref_res.layer0.weight")->value;
        const double b = model.params().find("head.ref_res.layer0.bias")->value[0];
        const std::size_t d = states.dim(2), n = states.dim(1);
        for (std::size_t r = 0; r < batch.size; ++r) {
            REQUIRE(batch.regions[r].size() == kRefResCandidates);
            std::vector<double> oracle;
            for (const auto& region : batch.regions[r]) {
                REQUIRE(region.size() == 1);
                double s = b;
                for (std::size_t j = 0; j < d; ++j) s += states[(r * n + region[0] + 1) * d + j] * w[j];
                oracle.push_back(s);
            }
            for (std::size_t k = 0; k < oracle.size(); ++k) {
                CHECK(logits[r * kRefResCandidates + k] == Catch::Approx(oracle[k]).margin(1e-10));
            }
            const auto best = std::max_element(oracle.begin(), oracle.end()) - oracle.begin();
            std::vector<float> row(oracle.begin(), oracle.end());
            CHECK(argmax_rows(row, row.size())[0] == best);
        }
    }
}

TEST_CASE("ref_res rejects malformed regions") {
    std::vector<RegionSet> empty_candidate{{{1}, {}}};
    CHECK_THROWS_AS(region_pooling_matrix<float>(empty_candidate, 16), TaskError);
    std::vector<RegionSet> out_of_range{{{1}, {16}}};
    CHECK_THROWS_AS(region_pooling_matrix<float>(out_of_range, 16), TaskError);
    std::vector<RegionSet> single{{{1}}};
    CHECK_THROWS_AS(region_pooling_matrix<float>(single, 16), TaskError);
    std::vector<RegionSet> ragged{{{1}, {2}}, {{1}, {2}, {3}}};
    CHECK_THROWS_AS(region_pooling_matrix<float>(ragged, 16), TaskError);
}

TEST_CASE("untrained ref_res is at chance on the K=4 dev set") {
    const auto task = TaskSpec::standard(TaskKind::ref_res);
    auto model = VLModel<float>::build(task_config(ModelType::two_tower, {task}));
    const auto& ds = corpus(TaskKind::ref_res);
    auto eval = evaluate_task(model, task, ds, ds.split_indices("dev"), 16);
    CHECK(eval.examples == 1000);
    CHECK(std::abs(eval.accuracy - 0.25) <= 0.05);
}

TEST_CASE("argmax and accuracy agree with brute force") {
    KeyedStream rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t rows = 1 + rng.below(100), cols = 2 + rng.below(5);
        std::vector<float> scores(rows * cols);
        // coarse values make ties common
        for (auto& s : scores) s = static_cast<float>(rng.below(4));
        std::vector<std::int32_t> labels(rows);
        for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(cols));
        auto preds = argmax_rows(scores, cols);
        std::size_t hits = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            std::int32_t best = -1;
            float best_score = -1e30f;
            for (std::size_t c = 0; c < cols; ++c) {
                if (scores[r * cols + c] > best_score) {
                    best_score = scores[r * cols + c];
                    best = static_cast<std::int32_t>(c);
                }
            }
            CHECK(preds[r] == best);
            hits += best == labels[r];
        }
        CHECK(accuracy(preds, labels) == static_cast<double>(hits) / rows);
    }
    CHECK_THROWS(accuracy(std::vector<std::int32_t>{1}, std::vector<std::int32_t>{}));
}

TEST_CASE("retrieval ranking agrees with brute force") {
    KeyedStream rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 1 + rng.below(30);
        std::vector<std::vector<float>> scores(n, std::vector<float>(n));
        for (auto& row : scores) {
            for (auto& s : row) s = static_cast<float>(rng.below(6));
        }
        for (auto dir : {RetrievalDirection::text_to_image, RetrievalDirection::image_to_text}) {
            auto r = rank_retrieval(scores, dir);
            std::size_t hit1 = 0, hit5 = 0;
            for (std::size_t q = 0; q < n; ++q) {
                auto s = [&](std::size_t g) { return dir == RetrievalDirection::text_to_image ? scores[q][g] : scores[g][q]; };
                // rank = items scored higher, plus equal-scored items with a lower index
                std::size_t rank = 0;
                for (std::size_t g = 0; g < n; ++g) rank += s(g) > s(q) || (s(g) == s(q) && g < q);
                hit1 += rank < 1;
                hit5 += rank < 5;
                CHECK(r.rankings[q][rank] == q);
                for (std::size_t k = 1; k < n; ++k) {
                    const auto a = r.rankings[q][k - 1], b = r.rankings[q][k];
                    CHECK((s(a) > s(b) || (s(a) == s(b) && a < b)));
                }
            }
            CHECK(r.recall_at_1 == static_cast<double>(hit1) / n);
            CHECK(r.recall_at_5 == static_cast<double>(hit5) / n);
            CHECK(r.recall_at_5 >= r.recall_at_1);
        }
    }
    auto one = rank_retrieval({{0.3f}}, RetrievalDirection::text_to_image);
    CHECK(one.recall_at_1 == 1.0);
    CHECK(one.recall_at_5 == 1.0);
}

TEST_CASE("retrieval with random scores is at chance") {
    KeyedStream rng(29);
    double hits = 0;
    const std::size_t gallery = 20, galleries = 25;
    for (std::size_t g = 0; g < galleries; ++g) {
        std::vector<std::vector<float>> scores(gallery, std::vector<float>(gallery));
        for (auto& row : scores) {
            for (auto& s : row) s = static_cast<float>(rng.uniform());
        }
        hits += rank_retrieval(scores, RetrievalDirection::text_to_image).recall_at_1 * gallery;
    }
    CHECK(std::abs(hits / (gallery * galleries) - 0.05) <= 0.03);
}

TEST_CASE("retrieval scores use the matched logit of the itm head") {
    const auto task = TaskSpec::standard(TaskKind::retrieval);
    auto model = VLModel<float>::build(task_config(ModelType::two_tower, {task}));
    const auto& ds = corpus(TaskKind::pretrain);
    const auto idx = ds.split_indices("dev");
    std::vector<const Example*> ex;
    for (std::size_t i = 0; i < 5; ++i) ex.push_back(&ds.examples[idx[i]]);
    auto scores = retrieval_scores(model, ex, 16, 7);
    for (std::size_t t = 0; t < 5; ++t) {
        Example pair = *ex[t];
        pair.image = ex[(t + 2) % 5]->image;
        auto batch = collate({&pair}, 16, ds.geometry);
        ForwardContext ctx;
        auto logits = itm_logits(model, model.encode(batch, ctx));
        CHECK(scores[t][(t + 2) % 5] == Catch::Approx(logits[1]).epsilon(1e-5));
    }
}

TEST_CASE("vqa answer vocabulary must match the head") {
    auto task = TaskSpec::standard(TaskKind::vqa);
    auto model = VLModel<float>::build(task_config(ModelType::two_tower, {task}));
    CHECK_NOTHROW(check_head_compatible(model, task));
    auto other = task;
    other.answers.push_back("seven");
    other.num_classes = other.answers.size();
    CHECK_THROWS_AS(check_head_compatible(model, other), TaskError);
    auto reordered = task;
    std::swap(reordered.answers[0], reordered.answers[1]);
    CHECK_THROWS_AS(check_head_compatible(model, reordered), TaskError);
    CHECK_THROWS_AS(check_head_compatible(model, TaskSpec::standard(TaskKind::snli_ve)), TaskError);
}

TEST_CASE("a briefly trained model answers vqa above chance") {
    const auto task = TaskSpec::standard(TaskKind::vqa);
    auto model = VLModel<float>::build(task_config(ModelType::two_tower, {task}));
    const auto& ds = corpus(TaskKind::vqa);
    const auto train_idx = ds.split_indices("train");
    TrainConfig cfg;
    cfg.steps = 400;
    cfg.batch_size = 32;
    cfg.peak_lr = 1e-3;
    train<float>(model, cfg, [&](std::size_t step, ForwardContext& ctx) {
        KeyedStream pick(1, step);
        std::vector<const Example*> ptrs;
        for (std::size_t i = 0; i < cfg.batch_size; ++i) ptrs.push_back(&ds.examples[train_idx[pick.below(train_idx.size())]]);
        auto batch = collate(ptrs, 16, ds.geometry);
        return StepLoss<float>{task_loss(model, task, batch, ctx), {}};
    });
    const auto dev = ds.split_indices("dev");
    auto eval = evaluate_task(model, task, ds, dev, 16);
    // chance: always answering the most frequent dev answer
    std::map<std::int32_t, std::size_t> freq;
    for (auto i : dev) ++freq[ds.examples[i].label];
    std::size_t majority = 0;
    for (const auto& [label, n] : freq) majority = std::max(majority, n);
    const double chance = static_cast<double>(majority) / dev.size();
    INFO("accuracy " << eval.accuracy << " vs chance " << chance);
    CHECK(eval.accuracy > chance);
    CHECK(binomial_two_sided_p(eval.correct, eval.examples, chance) < 0.01);
}
