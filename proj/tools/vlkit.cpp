#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vlkit/experiments.hpp"

using namespace vlkit;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kUsage = 2, kData = 3, kTraining = 4 };

struct CommonArgs {
    std::string config;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config, "JSON config file patched over the desk defaults");
    cmd->add_option("overrides", args.overrides, "path.to.field=value overrides");
}

void print_task_result(const TaskResult& r) {
    json line = r;
    std::cout << line.dump() << '\n';
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale vision-language encoder experiments"};
    app.require_subcommand(1);

    CommonArgs gen_args, pre_args, ft_args, ev_args, freeze_args, init_args, report_args;
    bool allow_frozen = false;
    std::string ft_checkpoint, ev_checkpoint;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpora");
    add_common(gen, gen_args);
    auto* pre = app.add_subcommand("pretrain", "pretrain with MLM and ITM");
    add_common(pre, pre_args);
    auto* ft = app.add_subcommand("finetune", "fine-tune a pretrained checkpoint on one task and evaluate it");
    add_common(ft, ft_args);
    ft->add_option("--checkpoint", ft_checkpoint, "pretrained checkpoint (default: config 'checkpoint')");
    ft->add_flag("--allow-frozen-finetune", allow_frozen, "keep the config's freeze spec during fine-tuning");
    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on the configured task");
    add_common(ev, ev_args);
    ev->add_option("--checkpoint", ev_checkpoint, "checkpoint to evaluate (default: config 'checkpoint')");
    auto* freeze = app.add_subcommand("ablate-freeze", "2x2 text/vision encoder freezing grid");
    add_common(freeze, freeze_args);
    auto* init = app.add_subcommand("init-compare", "random vs vision vs text encoder initialization");
    add_common(init, init_args);
    auto* report = app.add_subcommand("param-report", "per-module parameter counts");
    add_common(report, report_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (gen->parsed()) {
            auto cfg = load_run_config(gen_args.config, gen_args.overrides);
            auto result = run_gen_data(cfg);
            for (const auto& [name, info] : result.corpora) {
                std::cout << name << ": " << info.records << " records, digest " << info.digest << '\n';
            }
            std::cout << "corpus digest " << result.digest << '\n';
        } else if (pre->parsed()) {
            auto cfg = load_run_config(pre_args.config, pre_args.overrides);
            auto data = load_task_data(cfg, "pretrain");
            auto r = run_pretrain(cfg, cfg.run_dir, data);
            std::cout << "final loss " << r.summary.final_loss << ", dev ITM accuracy " << r.eval.itm_accuracy
                      << ", dev MLM loss " << r.eval.mlm_loss << ", trainable " << r.trainable_params << " of "
                      << r.total_params << ", optimizer state " << r.summary.optimizer_state << '\n';
            std::cout << "checkpoint " << r.checkpoint.string() << '\n';
        } else if (ft->parsed()) {
            auto cfg = load_run_config(ft_args.config, ft_args.overrides);
            check_finetune_freeze(cfg, allow_frozen);
            const std::string source = ft_checkpoint.empty() ? cfg.checkpoint : ft_checkpoint;
            if (source.empty()) throw ConfigError("finetune needs --checkpoint or checkpoint=<path>");
            auto data = load_task_data(cfg, cfg.task);
            auto r = run_finetune(cfg, cfg.run_dir, data, TaskSpec::standard(task_from(cfg.task)), source, allow_frozen);
            print_task_result(r.eval);
        } else if (ev->parsed()) {
            auto cfg = load_run_config(ev_args.config, ev_args.overrides);
            const std::string source = ev_checkpoint.empty() ? cfg.checkpoint : ev_checkpoint;
            if (source.empty()) throw ConfigError("evaluate needs --checkpoint or checkpoint=<path>");
            echo_config(cfg.run_dir, cfg);
            print_task_result(run_evaluate(cfg, source, cfg.run_dir));
        } else if (freeze->parsed()) {
            auto cfg = load_run_config(freeze_args.config, freeze_args.overrides);
            std::cout << run_ablate_freeze(cfg, cfg.run_dir).text;
        } else if (init->parsed()) {
            auto cfg = load_run_config(init_args.config, init_args.overrides);
            std::cout << run_init_compare(cfg, cfg.run_dir).text;
        } else if (report->parsed()) {
            auto cfg = load_run_config(report_args.config, report_args.overrides);
            std::cout << run_param_report(cfg).text;
        }
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return kData;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << '\n';
        return kTraining;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kOther;
    }
}
