#pragma once

// Optimizer, learning-rate schedule, gradient clipping, the training loop,
// checkpointing and metrics logging.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vlkit/checkpoint.hpp"
#include "vlkit/config.hpp"
#include "vlkit/layers.hpp"
#include "vlkit/models.hpp"
#include "vlkit/params.hpp"

namespace vlkit {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// How AdamW treats a trainable parameter whose gradient was never populated.
enum class MissingGrad { error, skip };

/// Bias-corrected AdamW with decoupled weight decay. Moment buffers are
/// allocated only for parameters that are trainable when the optimizer is built.
template <typename T>
class AdamW {
public:
    AdamW(ParameterStore<T>& store, AdamWConfig config = {}) : config_(config) {
        for (auto& p : store.entries()) {
            if (!p.trainable()) continue;
            slots_.push_back({p.value, p.decay, std::vector<T>(p.value.numel(), T{0}),
                              std::vector<T>(p.value.numel(), T{0}), 0, p.name});
        }
    }

    /// Total number of moment elements held (first plus second moments).
    std::size_t state_size() const {
        std::size_t n = 0;
        for (const auto& s : slots_) n += s.m.size() + s.v.size();
        return n;
    }

    std::size_t tracked_parameters() const { return slots_.size(); }

    void step(double lr, MissingGrad missing = MissingGrad::error) {
        for (auto& s : slots_) {
            if (!s.param.has_grad()) {
                if (missing == MissingGrad::skip) continue;
                throw TrainingError("adamw: trainable parameter '" + s.name + "' has no gradient");
            }
            ++s.steps;
            const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(s.steps));
            const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(s.steps));
            const T b1 = T(config_.beta1), b2 = T(config_.beta2);
            const T step_size = T(lr / bc1);
            const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
            const T decay = s.decay ? T(1.0 - lr * config_.weight_decay) : T(1);
            const T eps = T(config_.eps);
            auto w = s.param.mutable_data();
            auto g = s.param.grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                s.m[i] = b1 * s.m[i] + (T(1) - b1) * g[i];
                s.v[i] = b2 * s.v[i] + (T(1) - b2) * g[i] * g[i];
                w[i] = w[i] * decay - step_size * s.m[i] / (std::sqrt(s.v[i]) * inv_sqrt_bc2 + eps);
            }
        }
    }

private:
    struct Slot {
        Tensor<T> param;
        bool decay;
        std::vector<T> m, v;
        std::uint64_t steps;
        std::string name;
    };
    AdamWConfig config_;
    std::vector<Slot> slots_;
};

/// Linear warmup from 0 to peak over floor(warmup_fraction * steps) steps,
/// then linear decay reaching 0 at `steps`.
inline double lr_schedule(std::size_t step, std::size_t steps, double peak, double warmup_fraction) {
    const auto warmup = static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(steps)));
    if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= steps) return 0.0;
    return peak * static_cast<double>(steps - step) / static_cast<double>(steps - warmup);
}

/// Scales gradients of trainable parameters so their global L2 norm is at
/// most max_norm. Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterStore<T>& store, double max_norm) {
    double sq = 0.0;
    for (const auto& p : store.entries()) {
        if (!p.trainable() || !p.value.has_grad()) continue;
        for (T g : p.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T factor = T(max_norm / (norm + 1e-12));
        for (auto& p : store.entries()) {
            if (!p.trainable() || !p.value.has_grad()) continue;
            for (auto& g : p.value.mutable_grad()) g *= factor;
        }
    }
    return norm;
}

struct TrainConfig {
    std::size_t steps = 200;
    std::size_t batch_size = 32;
    double peak_lr = 1e-3;
    double warmup_fraction = 0.1;
    double clip_norm = 1.0;
    AdamWConfig adamw;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;        // 0 = only at the end
    std::size_t checkpoint_every = 0;  // 0 = only the final checkpoint
    std::vector<std::string> objectives{"mlm", "itm"};

    void validate() const {
        if (steps < 1) throw ConfigError("train.steps must be >= 1");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("train.warmup_fraction must be in [0, 1)");
        if (peak_lr < 0.0) throw ConfigError("train.peak_lr must be nonnegative");
    }
};

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"steps", c.steps},
             {"batch_size", c.batch_size},
             {"peak_lr", c.peak_lr},
             {"warmup_fraction", c.warmup_fraction},
             {"clip_norm", c.clip_norm},
             {"beta1", c.adamw.beta1},
             {"beta2", c.adamw.beta2},
             {"eps", c.adamw.eps},
             {"weight_decay", c.adamw.weight_decay},
             {"seed", c.seed},
             {"eval_every", c.eval_every},
             {"checkpoint_every", c.checkpoint_every},
             {"objectives", c.objectives}};
}

inline void from_json(const json& j, TrainConfig& c) {
    StrictObject o(j, "train");
    o.get("steps", c.steps).get("batch_size", c.batch_size).get("peak_lr", c.peak_lr);
    o.get("warmup_fraction", c.warmup_fraction).get("clip_norm", c.clip_norm);
    o.get("beta1", c.adamw.beta1).get("beta2", c.adamw.beta2).get("eps", c.adamw.eps);
    o.get("weight_decay", c.adamw.weight_decay).get("seed", c.seed).get("eval_every", c.eval_every);
    o.get("checkpoint_every", c.checkpoint_every).get("objectives", c.objectives);
    o.finish();
}

/// Loss of one step plus named scalar components for the log.
template <typename T>
struct StepLoss {
    Tensor<T> total;
    std::map<std::string, double> components;
};

struct TrainOutputs {
    std::filesystem::path run_dir;  // empty: nothing written
    bool write_checkpoints = true;
};

struct TrainSummary {
    std::size_t steps = 0;
    double final_loss = 0;
    std::map<std::string, double> final_components;
    std::size_t optimizer_state = 0;
    std::size_t trainable = 0;
    std::vector<json> log;
};

/// Step-indexed loss producer; receives the step number and a forward
/// context already set to train mode and keyed to that step.
template <typename T>
using StepFunction = std::function<StepLoss<T>(std::size_t step, ForwardContext& ctx)>;

/// Periodic evaluation; returned fields are added to the metrics record.
using EvalFunction = std::function<std::map<std::string, double>(std::size_t step)>;

/// Runs `config.steps` optimizer steps. The freeze state of the parameters at
/// call time determines what is trained. Per step the metrics log records
/// step, lr, loss, its components and the pre-clip gradient norm; wall-clock
/// time goes to a separate timing log so the metrics log stays reproducible.
/// A non-finite loss aborts with TrainingError before any update, leaving the
/// last checkpoint on disk untouched.
template <typename T>
TrainSummary train(VLModel<T>& model, const TrainConfig& config, const StepFunction<T>& step_fn,
                   const TrainOutputs& outputs = {}, const EvalFunction& eval = nullptr) {
    config.validate();
    AdamW<T> optimizer(model.params(), config.adamw);
    TrainSummary summary;
    summary.optimizer_state = optimizer.state_size();
    summary.trainable = model.params().trainable_count();

    std::ofstream metrics, timing;
    if (!outputs.run_dir.empty()) {
        std::filesystem::create_directories(outputs.run_dir);
        metrics.open(outputs.run_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
        timing.open(outputs.run_dir / "timing.jsonl", std::ios::binary | std::ios::trunc);
        if (!metrics || !timing) throw TrainingError("cannot open logs in " + outputs.run_dir.string());
    }
    auto save = [&](const std::string& name, std::size_t step) {
        if (outputs.run_dir.empty() || !outputs.write_checkpoints) return;
        write_checkpoint(make_checkpoint(model.params(), model.config(), step), outputs.run_dir / name);
    };

    const auto start = std::chrono::steady_clock::now();
    for (std::size_t step = 0; step < config.steps; ++step) {
        const double lr = lr_schedule(step, config.steps, config.peak_lr, config.warmup_fraction);
        model.params().zero_grad();
        Tape<T> tape;
        StepLoss<T> loss;
        double grad_norm = 0.0;
        {
            RecordingScope<T> scope(tape);
            ForwardContext ctx{true, config.seed, step, 0, false};
            loss = step_fn(step, ctx);
            const double value = static_cast<double>(loss.total.item());
            if (!std::isfinite(value)) {
                throw TrainingError("non-finite loss " + std::to_string(value) + " at step " + std::to_string(step));
            }
            if (loss.total.node_id()) backward(loss.total);
            grad_norm = clip_grad_norm(model.params(), config.clip_norm);
        }
        optimizer.step(lr, MissingGrad::skip);

        json record{{"step", step}, {"lr", lr}, {"loss", static_cast<double>(loss.total.item())}, {"grad_norm", grad_norm}};
        for (const auto& [k, v] : loss.components) record[k] = v;
        const bool last = step + 1 == config.steps;
        if (eval && (last || (config.eval_every && (step + 1) % config.eval_every == 0))) {
            for (const auto& [k, v] : eval(step)) record[k] = v;
        }
        summary.final_loss = record["loss"].get<double>();
        summary.final_components = loss.components;
        summary.log.push_back(record);
        if (metrics.is_open()) {
            metrics << record.dump() << '\n';
            metrics.flush();
            const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            timing << json{{"step", step}, {"wall_clock_s", seconds}}.dump() << '\n';
        }
        if (config.checkpoint_every && (step + 1) % config.checkpoint_every == 0 && !last) save("last.ckpt", step + 1);
        summary.steps = step + 1;
    }
    save("final.ckpt", config.steps);
    return summary;
}

} // namespace vlkit
