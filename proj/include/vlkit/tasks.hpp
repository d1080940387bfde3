#pragma once

// Downstream task heads, losses and metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "vlkit/data.hpp"
#include "vlkit/models.hpp"
#include "vlkit/pretrain.hpp"

namespace vlkit {

class TaskError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Task kind plus head shape. num_classes is the candidate count for ref_res.
struct TaskSpec {
    TaskKind kind = TaskKind::snli_ve;
    std::size_t num_classes = 3;
    std::size_t head_layers = 1;
    std::vector<std::string> answers;  // vqa only

    /// Name of the head the task reads from. Retrieval reuses the ITM head.
    std::string head_name() const { return kind == TaskKind::retrieval ? kItmHead : to_string(kind); }

    HeadSpec head_spec() const {
        HeadSpec h;
        h.name = head_name();
        h.layers = head_layers;
        switch (kind) {
        case TaskKind::ref_res: h.kind = HeadKind::region_scorer; h.num_classes = 1; break;
        case TaskKind::nlvr2: h.num_classes = 2; h.input_multiplier = 2; break;
        case TaskKind::retrieval: h.num_classes = 2; break;
        case TaskKind::vqa: h.num_classes = answers.size(); h.answers = answers; break;
        default: h.num_classes = num_classes; break;
        }
        return h;
    }

    static TaskSpec standard(TaskKind kind, std::size_t head_layers = 1) {
        TaskSpec t;
        t.kind = kind;
        t.head_layers = head_layers;
        switch (kind) {
        case TaskKind::snli_ve: t.num_classes = 3; break;
        case TaskKind::nlvr2: t.num_classes = 2; break;
        case TaskKind::ref_res: t.num_classes = kRefResCandidates; break;
        case TaskKind::retrieval: t.num_classes = 2; break;
        case TaskKind::vqa:
            t.answers = vqa_answers();
            t.num_classes = t.answers.size();
            break;
        case TaskKind::pretrain: throw ConfigError("pretrain is not a downstream task");
        }
        return t;
    }
};

/// Entailment logits (entailment, neutral, contradiction) from the pooled state.
template <typename T>
Tensor<T> snli_ve_forward(const VLModel<T>& model, const Head<T>& head, const Batch& batch, ForwardContext& ctx) {
    return head(model.encode(batch, ctx).pooled);
}

/// Runs the statement against each image with shared weights and classifies
/// the concatenated pooled states.
template <typename T>
Tensor<T> nlvr2_forward(const VLModel<T>& model, const Head<T>& head, const Batch& batch, ForwardContext& ctx) {
    if (batch.images_b.size() != batch.images.size()) throw TaskError("nlvr2: every example needs two images");
    auto first = model.encode(batch, ctx, false).pooled;
    auto second = model.encode(batch, ctx, true).pooled;
    return head(concat<T>({first, second}, 1));
}

/// Closed-answer classification from the pooled state.
template <typename T>
Tensor<T> vqa_forward(const VLModel<T>& model, const Head<T>& head, const Batch& batch, ForwardContext& ctx) {
    return head(model.encode(batch, ctx).pooled);
}

/// (B, K, N + 1) averaging matrix selecting each candidate's image positions.
/// Patch p sits at vision position p + 1 (position 0 is the image CLS state).
template <typename T>
Tensor<T> region_pooling_matrix(const std::vector<RegionSet>& regions, std::size_t num_patches) {
    if (regions.empty()) throw TaskError("ref_res: no examples");
    const std::size_t k = regions.front().size();
    if (k < 2) throw TaskError("ref_res: need at least two candidates per example");
    Tensor<T> pool({regions.size(), k, num_patches + 1});
    auto data = pool.mutable_data();
    for (std::size_t b = 0; b < regions.size(); ++b) {
        if (regions[b].size() != k) throw TaskError("ref_res: every example in a batch needs the same candidate count");
        for (std::size_t c = 0; c < k; ++c) {
            const auto& region = regions[b][c];
            if (region.empty()) throw TaskError("ref_res: candidate " + std::to_string(c) + " of example " + std::to_string(b) + " is empty");
            for (auto p : region) {
                if (p >= num_patches) throw TaskError("ref_res: patch index " + std::to_string(p) + " out of range");
                data[(b * k + c) * (num_patches + 1) + p + 1] += T(1) / T(region.size());
            }
        }
    }
    return pool;
}

/// Candidate logits (B, K): the scorer applied to each candidate's mean image-position state.
template <typename T>
Tensor<T> ref_res_forward(const VLModel<T>& model, const Head<T>& head, const Batch& batch, ForwardContext& ctx) {
    auto out = model.encode(batch, ctx);
    auto pool = region_pooling_matrix<T>(batch.regions, model.config().image.num_patches());
    auto means = bmm(pool, out.vision_states);  // (B, K, D)
    auto scores = head(means);                  // (B, K, 1)
    return reshape(scores, {scores.dim(0), scores.dim(1)});
}

/// Logits for any classification-style task.
template <typename T>
Tensor<T> task_logits(const VLModel<T>& model, const TaskSpec& task, const Batch& batch, ForwardContext& ctx) {
    const auto& head = model.head(task.head_name());
    switch (task.kind) {
    case TaskKind::snli_ve: return snli_ve_forward(model, head, batch, ctx);
    case TaskKind::nlvr2: return nlvr2_forward(model, head, batch, ctx);
    case TaskKind::ref_res: return ref_res_forward(model, head, batch, ctx);
    case TaskKind::vqa: return vqa_forward(model, head, batch, ctx);
    case TaskKind::retrieval: return itm_logits(model, model.encode(batch, ctx));
    case TaskKind::pretrain: break;
    }
    throw TaskError("task_logits: unsupported task " + to_string(task.kind));
}

template <typename T>
Tensor<T> task_loss(const VLModel<T>& model, const TaskSpec& task, const Batch& batch, ForwardContext& ctx) {
    return cross_entropy_from_logits(task_logits(model, task, batch, ctx), batch.labels);
}

/// Checks that the model's head for `task` matches the task's class/answer set.
template <typename T>
void check_head_compatible(const VLModel<T>& model, const TaskSpec& task) {
    const auto* spec = model.config().find_head(task.head_name());
    if (!spec) throw TaskError("model has no '" + task.head_name() + "' head");
    const auto expected = task.head_spec();
    if (spec->kind != expected.kind || spec->num_classes != expected.num_classes ||
        spec->input_multiplier != expected.input_multiplier) {
        throw TaskError("head '" + spec->name + "' does not match task " + to_string(task.kind));
    }
    if (task.kind == TaskKind::vqa && spec->answers != task.answers) {
        throw TaskError("vqa answer vocabulary of the checkpoint head (" + std::to_string(spec->answers.size()) +
                        " answers) differs from the evaluation set's (" + std::to_string(task.answers.size()) + ")");
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Row-wise argmax of a (rows, cols) score matrix; ties go to the lower index.
inline std::vector<std::int32_t> argmax_rows(std::span<const float> scores, std::size_t cols) {
    std::vector<std::int32_t> out;
    for (std::size_t r = 0; r * cols < scores.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c) {
            if (scores[r * cols + c] > scores[r * cols + best]) best = c;
        }
        out.push_back(static_cast<std::int32_t>(best));
    }
    return out;
}

inline double accuracy(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels) {
    if (predictions.size() != labels.size() || labels.empty()) throw std::invalid_argument("accuracy: size mismatch or empty");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

enum class RetrievalDirection { text_to_image, image_to_text };

struct RetrievalResult {
    std::vector<std::vector<std::size_t>> rankings;  // per query, gallery indices best first
    double recall_at_1 = 0;
    double recall_at_5 = 0;
};

/// Ranks a gallery for each query given scores[text][image]. The correct item
/// for query i is gallery item i. Ties are broken by lower index.
inline RetrievalResult rank_retrieval(const std::vector<std::vector<float>>& scores, RetrievalDirection direction) {
    const std::size_t n = scores.size();
    if (n == 0) throw std::invalid_argument("retrieval: empty score matrix");
    RetrievalResult result;
    std::size_t hit1 = 0, hit5 = 0;
    for (std::size_t q = 0; q < n; ++q) {
        auto score = [&](std::size_t g) {
            return direction == RetrievalDirection::text_to_image ? scores[q][g] : scores[g][q];
        };
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score(a) > score(b); });
        const auto rank = static_cast<std::size_t>(std::find(order.begin(), order.end(), q) - order.begin());
        hit1 += rank < 1;
        hit5 += rank < 5;
        result.rankings.push_back(std::move(order));
    }
    result.recall_at_1 = static_cast<double>(hit1) / static_cast<double>(n);
    result.recall_at_5 = static_cast<double>(hit5) / static_cast<double>(n);
    return result;
}

/// Scores every (text, image) pair of `examples` with the ITM head's matched-class logit.
template <typename T>
std::vector<std::vector<float>> retrieval_scores(const VLModel<T>& model, const std::vector<const Example*>& examples,
                                                 std::size_t max_len, std::size_t chunk = 64) {
    NoRecordScope<T> no_record;
    ForwardContext ctx;
    const std::size_t n = examples.size();
    std::vector<std::vector<float>> scores(n, std::vector<float>(n));
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t i = 0; i < n; ++i) pairs.emplace_back(t, i);
    }
    for (std::size_t start = 0; start < pairs.size(); start += chunk) {
        const std::size_t end = std::min(pairs.size(), start + chunk);
        std::vector<Example> owned;
        owned.reserve(end - start);
        for (std::size_t k = start; k < end; ++k) {
            Example ex = *examples[pairs[k].first];
            ex.image = examples[pairs[k].second]->image;
            owned.push_back(std::move(ex));
        }
        std::vector<const Example*> ptrs;
        for (const auto& ex : owned) ptrs.push_back(&ex);
        auto batch = collate(ptrs, max_len, model.config().image);
        auto logits = itm_logits(model, model.encode(batch, ctx));
        for (std::size_t k = start; k < end; ++k) {
            scores[pairs[k].first][pairs[k].second] = static_cast<float>(logits[(k - start) * 2 + 1]);
        }
    }
    return scores;
}

struct Prediction {
    std::string id;
    std::int32_t label = -1;
    std::int32_t prediction = -1;
    std::vector<float> scores;
};

inline json to_json_line(const Prediction& p) {
    return json{{"id", p.id}, {"label", p.label}, {"prediction", p.prediction}, {"scores", p.scores}};
}

struct TaskEvaluation {
    double accuracy = 0;
    std::size_t examples = 0;
    std::size_t correct = 0;
    std::vector<Prediction> predictions;
};

/// Evaluates a classification-style task over examples in chunks, without recording.
template <typename T>
TaskEvaluation evaluate_task(const VLModel<T>& model, const TaskSpec& task, const Dataset& data,
                             const std::vector<std::size_t>& indices, std::size_t max_len, std::size_t chunk = 64) {
    check_head_compatible(model, task);
    NoRecordScope<T> no_record;
    ForwardContext ctx;
    TaskEvaluation eval;
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
        std::vector<const Example*> ptrs;
        for (std::size_t k = start; k < std::min(indices.size(), start + chunk); ++k) ptrs.push_back(&data.examples[indices[k]]);
        auto batch = collate(ptrs, max_len, data.geometry);
        auto logits = task_logits(model, task, batch, ctx);
        const std::size_t cols = logits.dim(1);
        std::vector<float> flat(logits.data().begin(), logits.data().end());
        auto preds = argmax_rows(flat, cols);
        for (std::size_t r = 0; r < ptrs.size(); ++r) {
            Prediction p{ptrs[r]->id, ptrs[r]->label, preds[r],
                         std::vector<float>(flat.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                            flat.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols))};
            eval.correct += p.label == p.prediction;
            eval.predictions.push_back(std::move(p));
        }
    }
    eval.examples = eval.predictions.size();
    eval.accuracy = eval.examples ? static_cast<double>(eval.correct) / static_cast<double>(eval.examples) : 0.0;
    return eval;
}

} // namespace vlkit
