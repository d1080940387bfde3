#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "test_support.hpp"
#include "vlkit/experiments.hpp"

using namespace vlkit;
using vlkit::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int exit_code;
    std::string output;
};

CliRun run_cli(const std::string& args, const fs::path& workdir) {
    const auto out = workdir / "cli_output.txt";
    const std::string command = "cd '" + workdir.string() + "' && '" VLKIT_CLI_PATH "' " + args + " > '" + out.string() + "' 2>&1";
    const int status = std::system(command.c_str());
    std::ifstream is(out);
    std::stringstream ss;
    ss << is.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string read_text(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::size_t count_lines(const fs::path& path) {
    std::ifstream is(path);
    std::size_t n = 0;
    for (std::string line; std::getline(is, line);) n += !line.empty();
    return n;
}

std::string config_path(const std::string& name) { return std::string(VLKIT_SOURCE_DIR) + "/configs/" + name; }

// Small corpora and short schedules shared by the workflow tests.
std::vector<std::string> tiny_overrides(const fs::path& root) {
    return {"data.root=" + (root / "corpus").string(),
            R"(data.pretrain_counts={"train":48,"dev":16})",
            R"(data.task_counts={"train":48,"dev":16})",
            "pretrain.steps=4",
            "pretrain.batch_size=8",
            "pretrain.eval_every=0",
            "finetune.steps=4",
            "finetune.batch_size=8",
            "experiment.bootstrap_steps=3",
            R"(experiment.tasks=["snli_ve","ref_res"])"};
}

std::string joined(const std::vector<std::string>& overrides) {
    std::string s;
    for (const auto& o : overrides) s += " '" + o + "'";
    return s;
}

} // namespace

TEST_CASE("overrides patch nested fields and reject unknown paths", "[cli][config]") {
    auto cfg = load_run_config("", {"model.text.layers=3", "pretrain.peak_lr=0.002", "task=nlvr2"});
    CHECK(cfg.model.text.layers == 3);
    CHECK(cfg.pretrain.peak_lr == 0.002);
    CHECK(cfg.task == "nlvr2");
    CHECK(cfg.model.vision.layers == RunConfig::desk().model.vision.layers);

    CHECK_THROWS_AS(load_run_config("", {"model.text.depth=3"}), ConfigError);
    CHECK_THROWS_AS(load_run_config("", {"bogus=1"}), ConfigError);
    CHECK_THROWS_AS(load_run_config("", {"model.text.layers"}), ConfigError);
    CHECK_THROWS_AS(load_run_config("", {"=3"}), ConfigError);
    CHECK_THROWS_AS(load_run_config("", {"model..layers=3"}), ConfigError);
    CHECK_THROWS_AS(load_run_config("", {"model.text.layers=\"three\""}), ConfigError);
    CHECK_THROWS_AS(load_run_config("", {"experiment.tower_init=pretrained"}), ConfigError);
    try {
        load_run_config("", {"model.text.depth=3"});
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("model.text.depth") != std::string::npos);
    }
}

TEST_CASE("config files are strict and echo back losslessly", "[cli][config]") {
    const auto dir = scratch_dir("cli_config");
    std::ofstream(dir / "typo.json") << R"({"model": {"text": {"layer": 2}}})";
    CHECK_THROWS_AS(load_run_config((dir / "typo.json").string(), {}), ConfigError);
    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK_THROWS_AS(load_run_config((dir / "broken.json").string(), {}), ConfigError);
    CHECK_THROWS_AS(load_run_config((dir / "absent.json").string(), {}), ConfigError);

    for (const auto* name : {"desk.json", "small-towers.json", "base-frozen.json"}) {
        auto cfg = load_run_config(config_path(name), {"pretrain.steps=7"});
        echo_config(dir, cfg);
        const auto first = read_text(dir / "config.json");
        auto again = load_run_config((dir / "config.json").string(), {});
        CHECK(again.pretrain.steps == 7);
        echo_config(dir, again);
        CHECK(read_text(dir / "config.json") == first);
    }
}

TEST_CASE("parameter report fractions", "[cli][params]") {
    auto unfrozen = run_param_report(load_run_config("", {}));
    CHECK(unfrozen.fraction == 1.0);
    CHECK(unfrozen.trainable == unfrozen.total);
    std::size_t sum = 0;
    for (const auto& m : unfrozen.modules) sum += m.total;
    CHECK(sum == unfrozen.total);

    auto frozen = run_param_report(load_run_config(
        "", {"freeze.text_encoder=true", "freeze.vision_encoder=true", "freeze.cross_modal=true", "freeze.head=true",
             "freeze.text_embedding=true", "freeze.vision_embedding=true"}));
    CHECK(frozen.trainable == 0);
    CHECK(frozen.fraction == 0.0);

    auto base = run_param_report(load_run_config(config_path("base-frozen.json"), {}));
    CHECK(base.total > 210'000'000);
    CHECK(base.fraction >= 0.10);
    CHECK(base.fraction <= 0.15);
    CHECK(base.text.find("trainable fraction: ") != std::string::npos);
}

TEST_CASE("fine-tuning refuses a frozen spec without the explicit override", "[cli][finetune]") {
    auto cfg = load_run_config("", {"freeze.text_encoder=true"});
    const auto dir = scratch_dir("cli_refuse");
    Dataset empty;
    try {
        run_finetune(cfg, dir / "run", empty, TaskSpec::standard(TaskKind::snli_ve), dir / "missing.ckpt");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("--allow-frozen-finetune") != std::string::npos);
    }
    CHECK_FALSE(fs::exists(dir / "run"));
}

TEST_CASE("default corpus digest is pinned", "[cli][data]") {
    const auto dir = scratch_dir("cli_default_corpus");
    auto cfg = load_run_config("", {"data.root=" + (dir / "corpus").string()});
    auto result = run_gen_data(cfg);
    CHECK(result.digest == 17628784605736503414ULL);
    CHECK(result.corpora.at("pretrain").records == 5500);
    CHECK(result.corpora.at("snli_ve").records == 3600);
    auto again = run_gen_data(cfg);
    CHECK(again.digest == result.digest);
    CHECK(read_json(dir / "corpus" / "digest.json").at("digest").get<std::uint64_t>() == result.digest);
}

TEST_CASE("cli exit codes", "[cli][process]") {
    const auto dir = scratch_dir("cli_exit");
    CHECK(run_cli("param-report", dir).exit_code == 0);
    auto report = run_cli("param-report -c '" + config_path("base-frozen.json") + "'", dir);
    CHECK(report.exit_code == 0);
    CHECK(report.output.find("trainable fraction: 0.13") != std::string::npos);

    CHECK(run_cli("", dir).exit_code == 2);
    CHECK(run_cli("no-such-command", dir).exit_code == 2);
    auto bad = run_cli("param-report model.text.depth=2", dir);
    CHECK(bad.exit_code == 2);
    CHECK(bad.output.find("model.text.depth") != std::string::npos);
    CHECK(run_cli("finetune", dir).exit_code == 2);
    CHECK(run_cli("pretrain data.root=" + (dir / "nowhere").string(), dir).exit_code == 3);
    CHECK(run_cli("evaluate --checkpoint '" + (dir / "nothing.ckpt").string() + "'", dir).exit_code == 3);
    auto refused = run_cli("finetune --checkpoint x.ckpt freeze.vision_encoder=true", dir);
    CHECK(refused.exit_code == 2);
    CHECK(refused.output.find("--allow-frozen-finetune") != std::string::npos);
}

TEST_CASE("gen-data, pretrain, finetune and evaluate end to end", "[cli][process]") {
    const auto dir = scratch_dir("cli_smoke");
    const auto common = joined(tiny_overrides(dir));
    auto gen = run_cli("gen-data" + common, dir);
    REQUIRE(gen.exit_code == 0);
    CHECK(gen.output.find("corpus digest") != std::string::npos);

    auto pre = run_cli("pretrain" + common + " run_dir=" + (dir / "pre").string(), dir);
    REQUIRE(pre.exit_code == 0);
    for (const auto* f : {"config.json", "metrics.jsonl", "timing.jsonl", "final.ckpt", "summary.json"}) {
        CHECK(fs::exists(dir / "pre" / f));
    }
    CHECK(count_lines(dir / "pre" / "metrics.jsonl") >= 4);

    const auto ckpt = (dir / "pre" / "final.ckpt").string();
    auto ft = run_cli("finetune" + common + " task=snli_ve run_dir=" + (dir / "ft").string() + " --checkpoint " + ckpt, dir);
    REQUIRE(ft.exit_code == 0);
    const auto ft_result = json::parse(ft.output.substr(0, ft.output.find('\n')));
    CHECK(ft_result.at("accuracy").get<double>() >= 0.0);
    CHECK(ft_result.at("accuracy").get<double>() <= 1.0);
    CHECK(ft_result.at("examples").get<std::size_t>() == 16);
    CHECK(count_lines(dir / "ft" / "predictions.jsonl") == 16);
    CHECK(fs::exists(dir / "ft" / "config.json"));

    const auto ft_ckpt = (dir / "ft" / "final.ckpt").string();
    auto ev = run_cli("evaluate" + common + " task=snli_ve run_dir=" + (dir / "ev").string() + " --checkpoint " + ft_ckpt, dir);
    REQUIRE(ev.exit_code == 0);
    const auto ev_json = read_json(dir / "ev" / "eval.json");
    CHECK(ev_json.at("accuracy").get<double>() == ft_result.at("accuracy").get<double>());
    CHECK(read_text(dir / "ev" / "predictions.jsonl") == read_text(dir / "ft" / "predictions.jsonl"));

    auto wrong = run_cli("evaluate" + common + " task=nlvr2 run_dir=" + (dir / "ev2").string() + " --checkpoint " + ft_ckpt, dir);
    CHECK(wrong.exit_code != 0);
}

TEST_CASE("freeze grid report structure and resume", "[cli][grid]") {
    const auto dir = scratch_dir("cli_freeze_grid");
    auto cfg = load_run_config("", tiny_overrides(dir));
    run_gen_data(cfg);
    auto report = run_ablate_freeze(cfg, dir / "grid");
    REQUIRE(report.lines.size() == 4);
    const std::vector<std::string> labels{"Unfrozen/Unfrozen", "Frozen/Unfrozen", "Unfrozen/Frozen", "Frozen/Frozen"};
    std::vector<std::size_t> trainable;
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& line = report.lines[i];
        CHECK(line.at("row") == labels[i]);
        trainable.push_back(line.at("trainable_params"));
        CHECK(line.at("optimizer_state").get<std::size_t>() == 2 * trainable.back());
        CHECK(line.at("total_params") == report.lines[0].at("total_params"));
        for (const auto* task : {"snli_ve", "ref_res"}) {
            const double desk = line.at("desk").at(task);
            CHECK(desk >= 0.0);
            CHECK(desk <= 1.0);
            CHECK(line.at("published_reference").at(task) == freeze_study_reference()[i].values.at(task));
        }
    }
    CHECK(trainable[0] == report.lines[0].at("total_params").get<std::size_t>());
    CHECK(trainable[1] < trainable[0]);
    CHECK(trainable[2] < trainable[0]);
    CHECK(trainable[3] < trainable[1]);
    CHECK(trainable[3] < trainable[2]);
    CHECK(trainable[0] - trainable[1] + trainable[0] - trainable[2] == trainable[0] - trainable[3]);
    CHECK(report.lines[2].at("published_reference").at("ref_res") == 0.740);
    CHECK(report.text.find("published columns") != std::string::npos);

    const auto text = read_text(dir / "grid" / "report.txt");
    CHECK(text == report.text);
    CHECK(freeze_report_from_results(dir / "grid", cfg.experiment.tasks).text == text);

    const auto stamp = fs::last_write_time(dir / "grid" / freeze_grid()[0].dir / "result.json");
    auto resumed = run_ablate_freeze(cfg, dir / "grid");
    CHECK(resumed.text == text);
    CHECK(fs::last_write_time(dir / "grid" / freeze_grid()[0].dir / "result.json") == stamp);

    fs::remove(dir / "grid" / freeze_grid()[3].dir / "result.json");
    auto partial = run_ablate_freeze(cfg, dir / "grid");
    CHECK(partial.text == text);
}

TEST_CASE("init comparison rows and mapping check", "[cli][grid]") {
    const auto dir = scratch_dir("cli_init_grid");
    auto cfg = load_run_config("", tiny_overrides(dir));
    run_gen_data(cfg);
    auto report = run_init_compare(cfg, dir / "grid");
    REQUIRE(report.lines.size() == 3);
    const std::vector<std::string> labels{"Random", "ViT", "BERT"};
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(report.lines[i].at("row") == labels[i]);
        CHECK(report.lines[i].at("trainable_params") == report.lines[i].at("total_params"));
        CHECK(report.lines[i].at("published_reference").at("snli_ve") == init_study_reference()[i].values.at("snli_ve"));
    }
    CHECK(report.lines[0].at("published_reference").at("ref_res") == 0.554);
    for (const auto& spec : init_grid()) {
        const auto row = read_json(dir / "grid" / spec.dir / "result.json").get<GridRow>();
        if (spec.dir == "random") {
            CHECK(row.extra.at("copied_parameters") == 0);
        } else {
            CHECK(row.extra.at("mapped_parameter_mismatches") == 0);
            CHECK(row.extra.at("copied_parameters").get<std::size_t>() > 0);
        }
    }
    CHECK(init_report_from_results(dir / "grid", cfg.experiment.tasks).text == read_text(dir / "grid" / "report.txt"));
}
