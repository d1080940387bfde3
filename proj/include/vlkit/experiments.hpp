#pragma once

// Run configuration and the workflows behind the command-line tool:
// corpus generation, pretraining, fine-tuning, evaluation, the freeze grid,
// the initialization comparison and parameter reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vlkit/checkpoint.hpp"
#include "vlkit/config.hpp"
#include "vlkit/data.hpp"
#include "vlkit/engine.hpp"
#include "vlkit/models.hpp"
#include "vlkit/pretrain.hpp"
#include "vlkit/tasks.hpp"

namespace vlkit {

namespace fs = std::filesystem;

struct DataConfig {
    std::string root = "corpus";
    std::uint64_t seed = 0;
    SplitCounts pretrain_counts{{"train", 5000}, {"dev", 500}};
    SplitCounts task_counts{{"train", 3000}, {"dev", 600}};
    std::vector<std::string> tasks{"pretrain", "snli_ve", "nlvr2", "ref_res", "retrieval", "vqa"};
    std::string train_split = "train";
    std::string eval_split = "dev";
    std::size_t eval_limit = 0;  // 0 = the whole evaluation split
};

struct ExperimentConfig {
    std::vector<std::string> tasks{"snli_ve", "nlvr2", "ref_res"};
    // "bootstrap": initialize towers from bootstrapped single-modality checkpoints; "random": no sources.
    std::string tower_init = "bootstrap";
    std::size_t bootstrap_steps = 300;
    std::string text_source;    // existing text-encoder checkpoint, overrides bootstrapping
    std::string vision_source;  // existing vision-encoder checkpoint
    std::size_t retrieval_gallery = 50;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig pretrain;
    TrainConfig finetune;
    FreezeSpec freeze;
    InitSource init;
    DataConfig data;
    MlmSpec mlm;
    ItmSpec itm;
    ExperimentConfig experiment;
    std::string task = "snli_ve";
    std::string checkpoint;  // input checkpoint for finetune / evaluate
    std::string run_dir = "runs/default";

    /// Desk-scale defaults: small towers that train on one CPU core.
    static RunConfig desk() {
        RunConfig c;
        c.model.vocab_size = 0;  // taken from the corpus vocabulary
        c.model.max_text_len = 16;
        c.model.text = {64, 0, 128, 4, 2};
        c.model.vision = {64, 0, 128, 4, 2};
        c.model.cross = {0, 128, 4, 2};
        c.model.dropout = 0.0;
        c.pretrain.steps = 2000;
        c.pretrain.batch_size = 64;
        c.pretrain.peak_lr = 1e-3;
        c.pretrain.adamw.beta2 = 0.98;
        c.finetune.steps = 600;
        c.finetune.batch_size = 32;
        c.finetune.peak_lr = 5e-4;
        c.finetune.objectives = {};
        return c;
    }
};

inline void to_json(json& j, const MlmSpec& m) {
    j = json{{"mask_prob", m.mask_prob}, {"mask_token_frac", m.mask_token_frac},
             {"random_token_frac", m.random_token_frac}, {"keep_frac", m.keep_frac}};
}
inline void from_json(const json& j, MlmSpec& m) {
    StrictObject o(j, "mlm");
    o.get("mask_prob", m.mask_prob).get("mask_token_frac", m.mask_token_frac);
    o.get("random_token_frac", m.random_token_frac).get("keep_frac", m.keep_frac);
    o.finish();
}
inline void to_json(json& j, const ItmSpec& m) { j = json{{"negative_prob", m.negative_prob}}; }
inline void from_json(const json& j, ItmSpec& m) {
    StrictObject o(j, "itm");
    o.get("negative_prob", m.negative_prob);
    o.finish();
}
inline void to_json(json& j, const DataConfig& d) {
    j = json{{"root", d.root}, {"seed", d.seed}, {"pretrain_counts", d.pretrain_counts},
             {"task_counts", d.task_counts}, {"tasks", d.tasks}, {"train_split", d.train_split},
             {"eval_split", d.eval_split}, {"eval_limit", d.eval_limit}};
}
inline void from_json(const json& j, DataConfig& d) {
    StrictObject o(j, "data");
    o.get("root", d.root).get("seed", d.seed).get("pretrain_counts", d.pretrain_counts);
    o.get("task_counts", d.task_counts).get("tasks", d.tasks).get("train_split", d.train_split);
    o.get("eval_split", d.eval_split).get("eval_limit", d.eval_limit);
    o.finish();
}
inline void to_json(json& j, const ExperimentConfig& e) {
    j = json{{"tasks", e.tasks}, {"tower_init", e.tower_init}, {"bootstrap_steps", e.bootstrap_steps},
             {"text_source", e.text_source}, {"vision_source", e.vision_source},
             {"retrieval_gallery", e.retrieval_gallery}};
}
inline void from_json(const json& j, ExperimentConfig& e) {
    StrictObject o(j, "experiment");
    o.get("tasks", e.tasks).get("tower_init", e.tower_init).get("bootstrap_steps", e.bootstrap_steps);
    o.get("text_source", e.text_source).get("vision_source", e.vision_source);
    o.get("retrieval_gallery", e.retrieval_gallery);
    o.finish();
    if (e.tower_init != "bootstrap" && e.tower_init != "random") {
        throw ConfigError("experiment.tower_init must be 'bootstrap' or 'random'");
    }
}
inline void to_json(json& j, const RunConfig& c) {
    j = json{{"model", c.model},   {"pretrain", c.pretrain}, {"finetune", c.finetune},
             {"freeze", c.freeze}, {"init", c.init},         {"data", c.data},
             {"mlm", c.mlm},       {"itm", c.itm},           {"experiment", c.experiment},
             {"task", c.task},     {"checkpoint", c.checkpoint}, {"run_dir", c.run_dir}};
}
inline void from_json(const json& j, RunConfig& c) {
    StrictObject o(j, "");
    o.get("model", c.model).get("pretrain", c.pretrain).get("finetune", c.finetune).get("freeze", c.freeze);
    o.get("init", c.init).get("data", c.data).get("mlm", c.mlm).get("itm", c.itm).get("experiment", c.experiment);
    o.get("task", c.task).get("checkpoint", c.checkpoint).get("run_dir", c.run_dir);
    o.finish();
}

/// Applies one `path.to.field=value` override. The value is parsed as JSON
/// when possible and taken as a string otherwise.
inline void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form path=value");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty path segment");
        if (!node->is_object() || !node->contains(key)) {
            throw ConfigError("unknown field '" + path.substr(0, dot == std::string::npos ? path.size() : dot) +
                              "' in override");
        }
        node = &(*node)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    *node = value;
}

/// Desk defaults, patched by an optional JSON file, then by overrides.
inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    json doc = RunConfig::desk();
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot read config file '" + path + "'");
        json file = json::parse(is, nullptr, false);
        if (file.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
        // validate field names before merging so typos are reported against the file
        (void)file.get<RunConfig>();
        doc.merge_patch(file);
    }
    for (const auto& o : overrides) apply_override(doc, o);
    return doc.get<RunConfig>();
}

inline void write_json(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read " + path.string());
    return json::parse(is);
}

inline void echo_config(const fs::path& run_dir, const RunConfig& cfg) { write_json(run_dir / "config.json", cfg); }

// ---------------------------------------------------------------------------
// Reports

/// Left-aligned plain-text table with a header rule.
inline std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t c = 0; c < width.size(); ++c) {
            const std::string cell = c < cells.size() ? cells[c] : "";
            os << cell;
            if (c + 1 < width.size()) os << std::string(width[c] - cell.size() + 2, ' ');
        }
        os << '\n';
    };
    line(header);
    std::size_t total = 0;
    for (auto w : width) total += w;
    os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    for (const auto& row : rows) line(row);
    return os.str();
}

inline std::string fixed(double v, int digits = 3) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

inline std::string task_title(const std::string& task) {
    if (task == "snli_ve") return "SNLI-VE";
    if (task == "nlvr2") return "NLVR2";
    if (task == "ref_res") return "Ref. Res.";
    if (task == "vqa") return "VQA";
    if (task == "retrieval") return "Retrieval";
    return task;
}

/// Published dev accuracies, shown as static reference columns only.
struct PublishedReference {
    std::string row;
    std::map<std::string, double> values;
};

inline const std::vector<PublishedReference>& freeze_study_reference() {
    static const std::vector<PublishedReference> rows{
        {"Unfrozen/Unfrozen", {{"snli_ve", 0.741}, {"nlvr2", 0.672}, {"ref_res", 0.724}}},
        {"Frozen/Unfrozen", {{"snli_ve", 0.735}, {"nlvr2", 0.675}, {"ref_res", 0.702}}},
        {"Unfrozen/Frozen", {{"snli_ve", 0.741}, {"nlvr2", 0.672}, {"ref_res", 0.740}}},
        {"Frozen/Frozen", {{"snli_ve", 0.738}, {"nlvr2", 0.665}, {"ref_res", 0.721}}},
    };
    return rows;
}

inline const std::vector<PublishedReference>& init_study_reference() {
    static const std::vector<PublishedReference> rows{
        {"Random", {{"snli_ve", 0.699}, {"nlvr2", 0.551}, {"ref_res", 0.554}}},
        {"ViT", {{"snli_ve", 0.685}, {"nlvr2", 0.534}, {"ref_res", 0.522}}},
        {"BERT", {{"snli_ve", 0.692}, {"nlvr2", 0.545}, {"ref_res", 0.507}}},
    };
    return rows;
}

// ---------------------------------------------------------------------------
// Workflows

inline fs::path task_corpus(const RunConfig& cfg, const std::string& task) { return fs::path(cfg.data.root) / task; }

struct GenDataResult {
    std::map<std::string, CorpusInfo> corpora;
    std::uint64_t digest = 0;  // combined over tasks in order
};

inline GenDataResult run_gen_data(const RunConfig& cfg) {
    GenDataResult result;
    std::uint64_t h = fnv1a("");
    for (const auto& name : cfg.data.tasks) {
        const auto kind = task_from(name);
        const auto& counts = kind == TaskKind::pretrain ? cfg.data.pretrain_counts : cfg.data.task_counts;
        auto info = gen_synthetic(task_corpus(cfg, name), cfg.data.seed, counts, kind, cfg.model.image);
        h = fnv1a(name + ":" + std::to_string(info.digest), h);
        result.corpora.emplace(name, info);
    }
    result.digest = h;
    json summary{{"seed", cfg.data.seed}, {"digest", result.digest}};
    for (const auto& [name, info] : result.corpora) summary["tasks"][name] = {{"records", info.records}, {"digest", info.digest}};
    write_json(fs::path(cfg.data.root) / "digest.json", summary);
    return result;
}

inline Dataset load_task_data(const RunConfig& cfg, const std::string& task) {
    return load_dataset(task_corpus(cfg, task), cfg.model.image);
}

/// Model config with the vocabulary size resolved and the given heads.
inline ModelConfig resolve_model(const RunConfig& cfg, const Dataset& data, std::vector<HeadSpec> heads) {
    ModelConfig m = cfg.model;
    if (m.vocab_size == 0) m.vocab_size = data.vocab.size();
    if (m.vocab_size < data.vocab.size()) {
        throw ConfigError("model.vocab_size " + std::to_string(m.vocab_size) + " is smaller than the corpus vocabulary (" +
                          std::to_string(data.vocab.size()) + ")");
    }
    m.heads = std::move(heads);
    m.validate();
    return m;
}

inline Objectives objectives_from(const std::vector<std::string>& names) {
    Objectives o{false, false};
    for (const auto& n : names) {
        if (n == "mlm") o.mlm = true;
        else if (n == "itm") o.itm = true;
        else throw ConfigError("unknown pretraining objective '" + n + "'");
    }
    if (!o.mlm && !o.itm) throw ConfigError("pretrain.objectives must name mlm and/or itm");
    return o;
}

inline std::vector<HeadSpec> pretrain_heads(const Objectives& o) {
    std::vector<HeadSpec> heads;
    if (o.mlm) heads.push_back({kMlmHead, HeadKind::mlm, 0, 1, 1, {}});
    if (o.itm) heads.push_back({kItmHead, HeadKind::classifier, 2, 1, 1, {}});
    return heads;
}

struct PretrainEval {
    double itm_accuracy = -1;
    double mlm_loss = -1;
    std::size_t examples = 0;
};

/// ITM accuracy on clean captions and masked-token MLM loss on a held-out split.
template <typename T>
PretrainEval evaluate_pretraining(const VLModel<T>& model, const PretrainSampler& sampler, const Objectives& o,
                                  std::size_t limit, std::size_t chunk = 64) {
    NoRecordScope<T> no_record;
    ForwardContext ctx;
    PretrainEval ev;
    const std::size_t n = limit ? std::min(limit, sampler.pool_size()) : sampler.pool_size();
    std::size_t hits = 0, masked = 0;
    double mlm_sum = 0;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t end = std::min(n, start + chunk);
        if (o.itm) {
            auto clean = sampler.eval_batch(start, end, false);
            auto logits = itm_logits(model, model.encode(clean, ctx));
            for (std::size_t i = 0; i < clean.size; ++i) {
                const int pred = logits[i * 2 + 1] > logits[i * 2] ? 1 : 0;
                hits += pred == clean.labels[i];
            }
        }
        if (o.mlm) {
            auto batch = sampler.eval_batch(start, end);
            std::size_t count = 0;
            for (auto l : batch.mlm_labels) count += l != kIgnoreLabel;
            auto logits = mlm_logits(model, model.encode(batch, ctx));
            mlm_sum += static_cast<double>(cross_entropy_from_logits(logits, batch.mlm_labels).item()) *
                       static_cast<double>(count);
            masked += count;
        }
        ev.examples += end - start;
    }
    if (o.itm) ev.itm_accuracy = static_cast<double>(hits) / static_cast<double>(ev.examples);
    if (o.mlm) ev.mlm_loss = masked ? mlm_sum / static_cast<double>(masked) : 0.0;
    return ev;
}

struct PretrainResult {
    fs::path checkpoint;
    TrainSummary summary;
    PretrainEval eval;
    std::size_t total_params = 0;
    std::size_t trainable_params = 0;
    InitReport init;
};

/// Pretrains a fresh model on the pretraining corpus. The model is built from
/// cfg.model (plus MLM/ITM heads), initialized from cfg.init, frozen per cfg.freeze.
inline PretrainResult run_pretrain(const RunConfig& cfg, const fs::path& run_dir, const Dataset& data,
                                   bool with_images = true) {
    const auto objectives = objectives_from(cfg.pretrain.objectives);
    PretrainResult result;
    auto model = VLModel<float>::build(resolve_model(cfg, data, pretrain_heads(objectives)), cfg.init, &result.init);
    model.apply_freeze(cfg.freeze);
    result.total_params = model.params().total_count();
    result.trainable_params = model.params().trainable_count();
    fs::create_directories(run_dir);
    echo_config(run_dir, cfg);

    const std::size_t max_len = model.config().max_text_len;
    PretrainSampler train_sampler(data, cfg.data.train_split, max_len, cfg.mlm, cfg.itm, objectives, cfg.pretrain.seed,
                                  with_images);
    PretrainSampler eval_sampler(data, cfg.data.eval_split, max_len, cfg.mlm, cfg.itm, objectives,
                                 cfg.pretrain.seed + 1, with_images);
    StepFunction<float> step_fn = [&](std::size_t step, ForwardContext& ctx) {
        auto batch = train_sampler.batch(step, cfg.pretrain.batch_size);
        auto loss = pretrain_loss(model, batch, objectives, ctx);
        StepLoss<float> out{loss.total, {}};
        if (loss.mlm) out.components["mlm"] = loss.mlm->item();
        if (loss.itm) out.components["itm"] = loss.itm->item();
        return out;
    };
    EvalFunction eval_fn = [&](std::size_t) {
        result.eval = evaluate_pretraining(model, eval_sampler, objectives, cfg.data.eval_limit);
        std::map<std::string, double> fields;
        if (objectives.itm) fields["dev_itm_accuracy"] = result.eval.itm_accuracy;
        if (objectives.mlm) fields["dev_mlm_loss"] = result.eval.mlm_loss;
        return fields;
    };
    result.summary = train(model, cfg.pretrain, step_fn, TrainOutputs{run_dir, true}, eval_fn);
    result.checkpoint = run_dir / "final.ckpt";
    write_json(run_dir / "summary.json",
               json{{"steps", result.summary.steps},
                    {"final_loss", result.summary.final_loss},
                    {"final_components", result.summary.final_components},
                    {"dev_itm_accuracy", result.eval.itm_accuracy},
                    {"dev_mlm_loss", result.eval.mlm_loss},
                    {"total_params", result.total_params},
                    {"trainable_params", result.trainable_params},
                    {"optimizer_state", result.summary.optimizer_state},
                    {"ln_vocab", std::log(static_cast<double>(model.config().vocab_size))}});
    return result;
}

/// Prefix maps that carry every encoder module (everything except task heads)
/// from a pretrained checkpoint into a model of the same architecture.
inline std::vector<PrefixMap> encoder_prefixes(bool keep_itm_head) {
    std::vector<PrefixMap> maps;
    for (const char* p : {"text_embedding.", "text_encoder.", "vision_embedding.", "vision_encoder.", "encoder.",
                          "cross_modal.", "pooler."}) {
        maps.push_back({p, p});
    }
    if (keep_itm_head) maps.push_back({"head.itm.", "head.itm."});
    return maps;
}

struct TaskResult {
    std::string task;
    double accuracy = -1;  // classification tasks
    double recall_at_1 = -1;  // retrieval, text-to-image
    double recall_at_5 = -1;
    std::size_t examples = 0;
    double chance = 0;

    double headline() const { return accuracy >= 0 ? accuracy : recall_at_1; }
};

inline void to_json(json& j, const TaskResult& r) {
    j = json{{"task", r.task}, {"accuracy", r.accuracy}, {"recall_at_1", r.recall_at_1},
             {"recall_at_5", r.recall_at_5}, {"examples", r.examples}, {"chance", r.chance}};
}
inline void from_json(const json& j, TaskResult& r) {
    r.task = j.at("task").get<std::string>();
    r.accuracy = j.at("accuracy").get<double>();
    r.recall_at_1 = j.at("recall_at_1").get<double>();
    r.recall_at_5 = j.at("recall_at_5").get<double>();
    r.examples = j.at("examples").get<std::size_t>();
    r.chance = j.at("chance").get<double>();
}

inline double chance_level(const TaskSpec& task) {
    if (task.kind == TaskKind::vqa) return 0.5 * (1.0 / 6.0) + 0.5 * (1.0 / 4.0);  // informative baseline only
    return 1.0 / static_cast<double>(task.num_classes);
}

/// Evaluates a model on a task split and writes eval.json and predictions.jsonl.
template <typename T>
TaskResult evaluate_model(const VLModel<T>& model, const RunConfig& cfg, const TaskSpec& task, const Dataset& data,
                          const fs::path& out_dir) {
    auto indices = data.split_indices(cfg.data.eval_split);
    if (indices.empty()) throw DataError("evaluation split '" + cfg.data.eval_split + "' is empty");
    TaskResult r;
    r.task = to_string(task.kind);
    r.chance = chance_level(task);
    fs::create_directories(out_dir);
    std::ofstream dump(out_dir / "predictions.jsonl", std::ios::binary | std::ios::trunc);
    if (task.kind == TaskKind::retrieval) {
        const std::size_t n = std::min(indices.size(), cfg.experiment.retrieval_gallery);
        std::vector<const Example*> gallery;
        for (std::size_t i = 0; i < n; ++i) gallery.push_back(&data.examples[indices[i]]);
        auto scores = retrieval_scores(model, gallery, model.config().max_text_len);
        auto t2i = rank_retrieval(scores, RetrievalDirection::text_to_image);
        auto i2t = rank_retrieval(scores, RetrievalDirection::image_to_text);
        r.recall_at_1 = t2i.recall_at_1;
        r.recall_at_5 = t2i.recall_at_5;
        r.examples = n;
        r.chance = 1.0 / static_cast<double>(n);
        for (std::size_t q = 0; q < n; ++q) {
            dump << json{{"id", gallery[q]->id}, {"label", q}, {"prediction", t2i.rankings[q][0]},
                         {"scores", scores[q]}}.dump() << '\n';
        }
        write_json(out_dir / "eval.json", json{{"task", r.task}, {"split", cfg.data.eval_split},
                                               {"text_to_image", {{"recall_at_1", t2i.recall_at_1}, {"recall_at_5", t2i.recall_at_5}}},
                                               {"image_to_text", {{"recall_at_1", i2t.recall_at_1}, {"recall_at_5", i2t.recall_at_5}}},
                                               {"gallery", n}});
        return r;
    }
    if (cfg.data.eval_limit && indices.size() > cfg.data.eval_limit) indices.resize(cfg.data.eval_limit);
    auto ev = evaluate_task(model, task, data, indices, model.config().max_text_len);
    for (const auto& p : ev.predictions) dump << to_json_line(p).dump() << '\n';
    r.accuracy = ev.accuracy;
    r.examples = ev.examples;
    write_json(out_dir / "eval.json", json{{"task", r.task}, {"split", cfg.data.eval_split}, {"accuracy", r.accuracy},
                                           {"examples", r.examples}, {"correct", ev.correct}, {"chance", r.chance}});
    return r;
}

struct FinetuneResult {
    fs::path checkpoint;
    TrainSummary summary;
    TaskResult eval;
};

inline void check_finetune_freeze(const RunConfig& cfg, bool allow_frozen) {
    if (cfg.freeze.any() && !allow_frozen) {
        throw ConfigError("fine-tuning trains every module: the freeze spec freezes at least one module; "
                          "clear it or pass --allow-frozen-finetune");
    }
}

/// Fine-tunes a pretrained checkpoint on one task, then evaluates it.
inline FinetuneResult run_finetune(const RunConfig& cfg, const fs::path& run_dir, const Dataset& data,
                                   const TaskSpec& task, const fs::path& pretrained, bool allow_frozen = false) {
    check_finetune_freeze(cfg, allow_frozen);
    const auto source = read_checkpoint(pretrained);
    ModelConfig mc = source.model_config;
    mc.seed = cfg.model.seed;
    mc.heads = {task.head_spec()};
    if (mc.vocab_size < data.vocab.size()) throw ConfigError("checkpoint vocabulary is smaller than the task corpus vocabulary");
    InitSource init{{CheckpointSource{pretrained.string(), encoder_prefixes(task.kind == TaskKind::retrieval)}}};
    auto model = VLModel<float>::build(mc, init);
    model.apply_freeze(allow_frozen ? cfg.freeze : FreezeSpec{});
    fs::create_directories(run_dir);
    echo_config(run_dir, cfg);

    const std::size_t max_len = mc.max_text_len;
    const auto train_idx = data.split_indices(cfg.data.train_split);
    if (train_idx.empty()) throw DataError("training split '" + cfg.data.train_split + "' is empty");
    std::optional<PretrainSampler> itm_sampler;
    if (task.kind == TaskKind::retrieval) {
        itm_sampler.emplace(data, cfg.data.train_split, max_len, cfg.mlm, cfg.itm, Objectives{false, true},
                            cfg.finetune.seed);
    }
    StepFunction<float> step_fn = [&](std::size_t step, ForwardContext& ctx) {
        if (itm_sampler) {
            auto batch = itm_sampler->batch(step, cfg.finetune.batch_size);
            auto loss = cross_entropy_from_logits(itm_logits(model, model.encode(batch, ctx)), batch.labels);
            return StepLoss<float>{loss, {{"itm", loss.item()}}};
        }
        KeyedStream stream(cfg.finetune.seed, 0x66696e65ULL, step);
        std::vector<const Example*> ptrs;
        for (std::size_t i = 0; i < cfg.finetune.batch_size; ++i) ptrs.push_back(&data.examples[train_idx[stream.below(train_idx.size())]]);
        auto batch = collate(ptrs, max_len, data.geometry);
        auto loss = task_loss(model, task, batch, ctx);
        return StepLoss<float>{loss, {{to_string(task.kind), loss.item()}}};
    };
    FinetuneResult result;
    result.summary = train(model, cfg.finetune, step_fn, TrainOutputs{run_dir, true});
    result.checkpoint = run_dir / "final.ckpt";
    result.eval = evaluate_model(model, cfg, task, data, run_dir);
    return result;
}

/// Evaluates a stored checkpoint on cfg.task.
inline TaskResult run_evaluate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& out_dir) {
    const auto task = TaskSpec::standard(task_from(cfg.task));
    auto data = load_task_data(cfg, cfg.task);
    auto model = VLModel<float>::from_checkpoint(read_checkpoint(checkpoint));
    return evaluate_model(model, cfg, task, data, out_dir);
}

// ---------------------------------------------------------------------------
// Single-modality source checkpoints

/// Text-only MLM pretraining of a one-tower model with the given dims.
inline fs::path bootstrap_text_source(const RunConfig& cfg, const Dataset& data, const TowerDims& dims, const fs::path& dir) {
    const auto ckpt = dir / "final.ckpt";
    if (fs::exists(ckpt)) return ckpt;
    RunConfig c = cfg;
    c.model.model_type = ModelType::one_tower;
    c.model.text = dims;
    c.init = InitSource::random();
    c.freeze = {};
    c.pretrain.steps = cfg.experiment.bootstrap_steps;
    c.pretrain.objectives = {"mlm"};
    run_pretrain(c, dir, data, false);
    return ckpt;
}

/// Image-only pretraining of a one-tower model (empty captions) on object counting.
inline fs::path bootstrap_vision_source(const RunConfig& cfg, const Dataset& data, const TowerDims& dims, const fs::path& dir) {
    const auto ckpt = dir / "final.ckpt";
    if (fs::exists(ckpt)) return ckpt;
    RunConfig c = cfg;
    c.model.model_type = ModelType::one_tower;
    c.model.text = dims;
    HeadSpec count_head{"count", HeadKind::classifier, 4, 1, 1, {}};
    auto model = VLModel<float>::build(resolve_model(c, data, {count_head}));
    fs::create_directories(dir);
    echo_config(dir, c);
    const auto pool = data.split_indices(cfg.data.train_split);
    if (pool.empty()) throw DataError("bootstrap: empty training split");
    TrainConfig tc = cfg.pretrain;
    tc.steps = cfg.experiment.bootstrap_steps;
    StepFunction<float> step_fn = [&](std::size_t step, ForwardContext& ctx) {
        KeyedStream stream(tc.seed, 0x636f756eULL, step);
        std::vector<Example> owned;
        for (std::size_t i = 0; i < tc.batch_size; ++i) {
            Example ex = data.examples[pool[stream.below(pool.size())]];
            ex.tokens.clear();
            ex.label = static_cast<std::int32_t>(std::clamp<std::size_t>(ex.objects, 1, 4) - 1);
            owned.push_back(std::move(ex));
        }
        std::vector<const Example*> ptrs;
        for (const auto& e : owned) ptrs.push_back(&e);
        auto batch = collate(ptrs, c.model.max_text_len, data.geometry);
        auto loss = cross_entropy_from_logits(model.head("count")(model.encode(batch, ctx).pooled), batch.labels);
        return StepLoss<float>{loss, {{"count", loss.item()}}};
    };
    train(model, tc, step_fn, TrainOutputs{dir, true});
    return ckpt;
}

struct SourceCheckpoints {
    fs::path text;
    fs::path vision;
};

/// Existing source checkpoints from the config, or bootstrapped ones under `dir`.
inline SourceCheckpoints ensure_sources(const RunConfig& cfg, const Dataset& pretrain_data, const TowerDims& text_dims,
                                        const TowerDims& vision_dims, const fs::path& dir) {
    auto tag = [](const TowerDims& d) {
        return std::to_string(d.hidden) + "x" + std::to_string(d.layers) + "-e" + std::to_string(d.embedding_size()) + "-i" +
               std::to_string(d.intermediate) + "-h" + std::to_string(d.heads);
    };
    SourceCheckpoints s;
    s.text = cfg.experiment.text_source.empty()
                 ? bootstrap_text_source(cfg, pretrain_data, text_dims, dir / ("text-" + tag(text_dims)))
                 : fs::path(cfg.experiment.text_source);
    s.vision = cfg.experiment.vision_source.empty()
                   ? bootstrap_vision_source(cfg, pretrain_data, vision_dims, dir / ("vision-" + tag(vision_dims)))
                   : fs::path(cfg.experiment.vision_source);
    for (const auto& p : {s.text, s.vision}) {
        if (!fs::exists(p)) throw DataError("source checkpoint " + p.string() + " does not exist");
    }
    return s;
}

/// Checks that every parameter named in `report.copied` equals the value the
/// init source mapped into it. Returns the number of mismatching parameters.
template <typename T>
std::size_t count_mapping_mismatches(const VLModel<T>& model, const InitSource& init) {
    std::size_t mismatches = 0;
    for (const auto& source : init.checkpoints) {
        const auto ckpt = read_checkpoint(source.path);
        for (const auto& entry : ckpt.entries) {
            for (const auto& map : source.prefixes) {
                if (entry.name.rfind(map.from, 0) != 0) continue;
                const auto* p = model.params().find(map.to + entry.name.substr(map.from.size()));
                if (!p) break;
                auto src = ckpt.values(entry);
                for (std::size_t i = 0; i < src.size(); ++i) {
                    if (static_cast<float>(p->value[i]) != src[i]) {
                        ++mismatches;
                        break;
                    }
                }
                break;
            }
        }
    }
    return mismatches;
}

// ---------------------------------------------------------------------------
// Experiment grids

struct GridRow {
    std::string label;
    std::vector<std::string> key_cells;  // leading label columns
    std::size_t total_params = 0;
    std::size_t trainable_params = 0;
    std::size_t optimizer_state = 0;
    double itm_accuracy = -1;
    double mlm_loss = -1;
    std::map<std::string, TaskResult> tasks;
    json extra;
};

inline void to_json(json& j, const GridRow& r) {
    j = json{{"label", r.label},
             {"key_cells", r.key_cells},
             {"total_params", r.total_params},
             {"trainable_params", r.trainable_params},
             {"optimizer_state", r.optimizer_state},
             {"dev_itm_accuracy", r.itm_accuracy},
             {"dev_mlm_loss", r.mlm_loss},
             {"tasks", r.tasks},
             {"extra", r.extra}};
}
inline void from_json(const json& j, GridRow& r) {
    r.label = j.at("label").get<std::string>();
    r.key_cells = j.at("key_cells").get<std::vector<std::string>>();
    r.total_params = j.at("total_params").get<std::size_t>();
    r.trainable_params = j.at("trainable_params").get<std::size_t>();
    r.optimizer_state = j.at("optimizer_state").get<std::size_t>();
    r.itm_accuracy = j.at("dev_itm_accuracy").get<double>();
    r.mlm_loss = j.at("dev_mlm_loss").get<double>();
    r.tasks = j.at("tasks").get<std::map<std::string, TaskResult>>();
    r.extra = j.at("extra");
}

/// Pretrain (already done by the caller) then fine-tune and evaluate each task.
inline void finetune_tasks(const RunConfig& cfg, const fs::path& cell_dir, const fs::path& pretrained, GridRow& row) {
    RunConfig ft = cfg;
    ft.freeze = {};
    for (const auto& name : cfg.experiment.tasks) {
        const auto task = TaskSpec::standard(task_from(name));
        const auto data = load_task_data(cfg, name);
        auto r = run_finetune(ft, cell_dir / ("finetune-" + name), data, task, pretrained);
        row.tasks[name] = r.eval;
    }
}

struct GridReport {
    std::string text;
    std::vector<json> lines;
};

/// Renders grid rows with desk-scale columns first and the published values
/// as separately labeled reference columns.
inline GridReport render_grid(const std::vector<std::string>& key_header, const std::vector<GridRow>& rows,
                              const std::vector<PublishedReference>& reference, const std::vector<std::string>& tasks,
                              const std::string& title) {
    std::vector<std::string> header = key_header;
    header.insert(header.end(), {"total", "trainable", "opt.state", "ITM acc"});
    for (const auto& t : tasks) header.push_back(task_title(t) + " (desk)");
    for (const auto& t : tasks) header.push_back(task_title(t) + " (published)");
    std::vector<std::vector<std::string>> cells;
    GridReport report;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        std::vector<std::string> line = row.key_cells;
        line.push_back(std::to_string(row.total_params));
        line.push_back(std::to_string(row.trainable_params));
        line.push_back(std::to_string(row.optimizer_state));
        line.push_back(row.itm_accuracy >= 0 ? fixed(row.itm_accuracy) : "-");
        json record{{"row", row.label}, {"total_params", row.total_params}, {"trainable_params", row.trainable_params},
                    {"optimizer_state", row.optimizer_state}, {"dev_itm_accuracy", row.itm_accuracy}};
        for (const auto& t : tasks) {
            auto it = row.tasks.find(t);
            line.push_back(it == row.tasks.end() ? "-" : fixed(it->second.headline()));
            record["desk"][t] = it == row.tasks.end() ? json(nullptr) : json(it->second.headline());
        }
        for (const auto& t : tasks) {
            std::optional<double> ref;
            if (i < reference.size()) {
                auto it = reference[i].values.find(t);
                if (it != reference[i].values.end()) ref = it->second;
            }
            line.push_back(ref ? fixed(*ref) : "-");
            record["published_reference"][t] = ref ? json(*ref) : json(nullptr);
        }
        cells.push_back(std::move(line));
        report.lines.push_back(std::move(record));
    }
    report.text = title + "\n" + render_table(header, cells) +
                  "published columns: dev accuracies reported at full scale, shown for context only\n";
    return report;
}

inline void write_report(const fs::path& dir, const GridReport& report) {
    fs::create_directories(dir);
    std::ofstream(dir / "report.txt", std::ios::binary | std::ios::trunc) << report.text;
    std::ofstream lines(dir / "report.jsonl", std::ios::binary | std::ios::trunc);
    for (const auto& l : report.lines) lines << l.dump() << '\n';
}

struct FreezeCell {
    bool text;
    bool vision;
    std::string dir;
};

inline const std::vector<FreezeCell>& freeze_grid() {
    static const std::vector<FreezeCell> cells{{false, false, "text-unfrozen_vision-unfrozen"},
                                               {true, false, "text-frozen_vision-unfrozen"},
                                               {false, true, "text-unfrozen_vision-frozen"},
                                               {true, true, "text-frozen_vision-frozen"}};
    return cells;
}

/// Rebuilds the freeze-study report purely from the per-cell result files.
inline GridReport freeze_report_from_results(const fs::path& run_dir, const std::vector<std::string>& tasks) {
    std::vector<GridRow> rows;
    for (const auto& cell : freeze_grid()) {
        const auto path = run_dir / cell.dir / "result.json";
        if (!fs::exists(path)) throw DataError("missing grid result " + path.string());
        rows.push_back(read_json(path).get<GridRow>());
    }
    return render_grid({"Text Encoder", "Vision Encoder"}, rows, freeze_study_reference(), tasks,
                       "Freeze module study (two-tower, desk scale)");
}

/// The 2x2 freeze grid over the text and vision encoders: pretrain each
/// configuration, then fine-tune (unfrozen) and evaluate on every task.
/// Cells with a result file are reused, so an interrupted grid resumes.
inline GridReport run_ablate_freeze(const RunConfig& cfg, const fs::path& run_dir) {
    if (cfg.model.model_type != ModelType::two_tower) throw ConfigError("ablate-freeze needs a two_tower model");
    fs::create_directories(run_dir);
    echo_config(run_dir, cfg);
    std::optional<Dataset> pretrain_data;
    for (const auto& cell : freeze_grid()) {
        const auto cell_dir = run_dir / cell.dir;
        if (fs::exists(cell_dir / "result.json")) continue;
        if (!pretrain_data) pretrain_data = load_task_data(cfg, "pretrain");
        RunConfig c = cfg;
        c.freeze = FreezeSpec::towers(cell.text, cell.vision);
        if (cfg.experiment.tower_init == "bootstrap") {
            auto sources = ensure_sources(cfg, *pretrain_data, cfg.model.text, cfg.model.vision, run_dir / "sources");
            c.init = InitSource{{CheckpointSource{sources.text.string(), {{"text_embedding.", "text_embedding."}, {"encoder.", "text_encoder."}}},
                                 CheckpointSource{sources.vision.string(), {{"vision_embedding.", "vision_embedding."}, {"encoder.", "vision_encoder."}}}}};
        }
        auto pre = run_pretrain(c, cell_dir / "pretrain", *pretrain_data);
        GridRow row;
        row.label = std::string(cell.text ? "Frozen" : "Unfrozen") + "/" + (cell.vision ? "Frozen" : "Unfrozen");
        row.key_cells = {cell.text ? "Frozen" : "Unfrozen", cell.vision ? "Frozen" : "Unfrozen"};
        row.total_params = pre.total_params;
        row.trainable_params = pre.trainable_params;
        row.optimizer_state = pre.summary.optimizer_state;
        row.itm_accuracy = pre.eval.itm_accuracy;
        row.mlm_loss = pre.eval.mlm_loss;
        finetune_tasks(cfg, cell_dir, pre.checkpoint, row);
        write_json(cell_dir / "result.json", row);
    }
    auto report = freeze_report_from_results(run_dir, cfg.experiment.tasks);
    write_report(run_dir, report);
    return report;
}

struct InitRowSpec {
    std::string label;
    std::string dir;
};

inline const std::vector<InitRowSpec>& init_grid() {
    static const std::vector<InitRowSpec> rows{{"Random", "random"}, {"ViT", "vision-init"}, {"BERT", "text-init"}};
    return rows;
}

inline GridReport init_report_from_results(const fs::path& run_dir, const std::vector<std::string>& tasks) {
    std::vector<GridRow> rows;
    for (const auto& spec : init_grid()) {
        const auto path = run_dir / spec.dir / "result.json";
        if (!fs::exists(path)) throw DataError("missing grid result " + path.string());
        rows.push_back(read_json(path).get<GridRow>());
    }
    return render_grid({"Encoder init"}, rows, init_study_reference(), tasks,
                       "Text vs vision initialization study (one-tower, desk scale)");
}

/// Three one-tower models (random, vision-initialized, text-initialized),
/// each pretrained, fine-tuned and evaluated.
inline GridReport run_init_compare(const RunConfig& cfg, const fs::path& run_dir) {
    RunConfig base = cfg;
    base.model.model_type = ModelType::one_tower;
    base.freeze = {};
    fs::create_directories(run_dir);
    echo_config(run_dir, base);
    std::optional<Dataset> pretrain_data;
    for (const auto& spec : init_grid()) {
        const auto row_dir = run_dir / spec.dir;
        if (fs::exists(row_dir / "result.json")) continue;
        if (!pretrain_data) pretrain_data = load_task_data(cfg, "pretrain");
        RunConfig c = base;
        c.init = InitSource::random();
        if (spec.dir != "random") {
            auto sources = ensure_sources(base, *pretrain_data, base.model.text, base.model.text, run_dir / "sources");
            if (spec.dir == "vision-init") {
                c.init.checkpoints.push_back({sources.vision.string(), {{"vision_embedding.", "vision_embedding."}, {"encoder.", "encoder."}}});
            } else {
                c.init.checkpoints.push_back({sources.text.string(), {{"text_embedding.", "text_embedding."}, {"encoder.", "encoder."}}});
            }
        }
        GridRow row;
        row.label = spec.label;
        row.key_cells = {spec.label};
        if (!c.init.is_random()) {
            auto probe = VLModel<float>::build(resolve_model(c, *pretrain_data, pretrain_heads(objectives_from(c.pretrain.objectives))), c.init);
            row.extra["mapped_parameter_mismatches"] = count_mapping_mismatches(probe, c.init);
        }
        auto pre = run_pretrain(c, row_dir / "pretrain", *pretrain_data);
        row.extra["copied_parameters"] = pre.init.copied.size();
        row.total_params = pre.total_params;
        row.trainable_params = pre.trainable_params;
        row.optimizer_state = pre.summary.optimizer_state;
        row.itm_accuracy = pre.eval.itm_accuracy;
        row.mlm_loss = pre.eval.mlm_loss;
        finetune_tasks(base, row_dir, pre.checkpoint, row);
        write_json(row_dir / "result.json", row);
    }
    auto report = init_report_from_results(run_dir, cfg.experiment.tasks);
    write_report(run_dir, report);
    return report;
}

// ---------------------------------------------------------------------------
// Parameter report

struct ParamReport {
    std::vector<ModuleCount> modules;
    std::size_t total = 0;
    std::size_t trainable = 0;
    double fraction = 0;
    std::string text;
};

inline ParamReport run_param_report(const RunConfig& cfg) {
    ModelConfig mc = cfg.model;
    if (mc.vocab_size == 0) mc.vocab_size = synthetic_vocab().size();
    if (mc.heads.empty()) mc.heads = pretrain_heads(objectives_from(cfg.pretrain.objectives));
    auto model = VLModel<float>::build(mc);
    model.apply_freeze(cfg.freeze);
    ParamReport r;
    r.modules = model.param_report();
    r.total = model.params().total_count();
    r.trainable = model.params().trainable_count();
    r.fraction = trainable_fraction(model);
    std::vector<std::vector<std::string>> rows;
    for (const auto& m : r.modules) {
        rows.push_back({std::string(group_name(m.group)), std::to_string(m.total), std::to_string(m.trainable)});
    }
    rows.push_back({"all", std::to_string(r.total), std::to_string(r.trainable)});
    r.text = render_table({"module", "total", "trainable"}, rows) + "trainable fraction: " + fixed(r.fraction, 4) + "\n";
    return r;
}

} // namespace vlkit
