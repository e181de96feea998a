// Command-line entry points: train, eval, gradcheck, replay, curves.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "istar/config.hpp"
#include "istar/harness.hpp"
#include "istar/rng.hpp"
#include "istar/trainer.hpp"

using namespace istar;

namespace {

int cmd_train(const std::string& config_path, const std::vector<std::pair<std::string, std::string>>& overrides,
              const std::string& out_dir, const std::string& resume_dir, int iterations_override) {
    if (!resume_dir.empty()) {
        auto trainer = train::Trainer::resume(resume_dir, iterations_override);
        trainer.run();
        std::cout << "resumed run complete: " << trainer.run_dir() << '\n';
        return 0;
    }
    train::TrainConfig cfg;
    if (!config_path.empty()) cfg = train::TrainConfig::load_file(config_path);
    for (const auto& [key, value] : overrides) cfg.apply_kv(key, value);
    if (iterations_override >= 0) cfg.iterations = iterations_override;
    cfg.validate();
    train::Trainer trainer(cfg, out_dir);
    trainer.run();
    std::cout << "run complete: " << trainer.run_dir() << '\n';
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& env_override, int episodes,
             std::uint64_t seed, double temperature, bool greedy, const std::string& out_csv) {
    auto loaded = harness::load_policy_checkpoint(checkpoint);
    if (!env_override.empty() && env::env_kind_from_string(env_override) != loaded.kind) {
        throw std::invalid_argument("checkpoint was trained on '" + env::to_string(loaded.kind) +
                                    "', not '" + env_override + "'");
    }
    harness::EvalConfig cfg;
    cfg.episodes = episodes;
    cfg.seed = seed;
    cfg.temperature = temperature;
    cfg.greedy = greedy;
    auto report = harness::evaluate(loaded.net, loaded.kind, loaded.params, loaded.enc_cfg, cfg);
    if (!out_csv.empty()) harness::write_eval_report(out_csv, report);
    std::cout << harness::eval_summary(report);
    return 0;
}

int cmd_gradcheck(int instances, std::uint64_t seed) {
    auto rows = harness::gradcheck(instances, seed);
    bool all_pass = true;
    std::printf("%-18s %10s %16s %6s\n", "loss", "instances", "max_rel_error", "pass");
    for (const auto& row : rows) {
        std::printf("%-18s %10d %16.3e %6s\n", row.loss.c_str(), row.instances, row.max_rel_error,
                    row.pass ? "PASS" : "FAIL");
        all_pass = all_pass && row.pass;
    }
    return all_pass ? 0 : 2;
}

int cmd_replay(const std::string& run_dir, int iteration) {
    auto verdict = harness::replay_iteration(run_dir, iteration);
    if (verdict.pass) {
        std::cout << "PASS (" << verdict.records_checked << " records byte-identical)\n";
        return 0;
    }
    std::cout << "FAIL after " << verdict.records_checked << " records\n"
              << verdict.first_divergence << '\n';
    return 2;
}

int cmd_curves(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    auto result = harness::emit_curves(run_dirs, out_dir);
    if (result.range_warning)
        std::cerr << "warning: iteration ranges differ; curves aligned on their intersection\n";
    std::cout << "wrote curves.csv and per-series SVG plots to " << out_dir << " ("
              << result.iterations.size() << " aligned iterations, " << run_dirs.size()
              << " runs)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"implicit step rewards for multi-step agents: training laboratory"};
    app.require_subcommand(1);

    // train
    auto* train_cmd = app.add_subcommand("train", "run the training loop");
    std::string config_path, out_dir = "runs/run", resume_dir;
    std::string env_s, algo_s, istar_s, ablation_s;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int iterations = -1;
    train_cmd->add_option("--config", config_path, "config file (flat key = value)");
    train_cmd->add_option("--out", out_dir, "run directory to create");
    train_cmd->add_option("--resume", resume_dir, "existing run directory to continue");
    train_cmd->add_option("--env", env_s, "sokoban|corridor");
    train_cmd->add_option("--algo", algo_s, "grpo|rloo|reinforcepp");
    train_cmd->add_option("--istar", istar_s, "on|off");
    train_cmd->add_option("--ablation", ablation_s, "none|merged|token_level|gt_step");
    train_cmd->add_option("--seed", seed, "master seed")->each([&](const std::string&) {
        seed_set = true;
    });
    train_cmd->add_option("--iterations", iterations, "training iterations M");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a policy checkpoint");
    std::string ckpt_path, eval_env, eval_csv;
    int eval_episodes = 200;
    std::uint64_t eval_seed = 0;
    double eval_temperature = 0.4;
    bool eval_greedy = false;
    eval_cmd->add_option("checkpoint", ckpt_path, "policy checkpoint path")->required();
    eval_cmd->add_option("--env", eval_env, "expected environment (sanity check)");
    eval_cmd->add_option("--episodes", eval_episodes, "number of evaluation episodes");
    eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
    eval_cmd->add_option("--temperature", eval_temperature, "sampling temperature");
    eval_cmd->add_flag("--greedy", eval_greedy, "greedy decoding instead of sampling");
    eval_cmd->add_option("--out", eval_csv, "per-episode CSV output path");

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    int grad_instances = 20;
    std::uint64_t grad_seed = 7;
    grad_cmd->add_option("--instances", grad_instances, "instances per loss");
    grad_cmd->add_option("--seed", grad_seed, "randomization seed");

    // replay
    auto* replay_cmd = app.add_subcommand("replay", "verify a logged iteration byte-for-byte");
    std::string replay_dir;
    int replay_iter = 1;
    replay_cmd->add_option("run_dir", replay_dir, "run directory")->required();
    replay_cmd->add_option("--iteration", replay_iter, "iteration to replay");

    // curves
    auto* curves_cmd = app.add_subcommand("curves", "emit aligned per-iteration series");
    std::vector<std::string> curve_runs;
    std::string curves_out = "curves";
    curves_cmd->add_option("run_dirs", curve_runs, "run directories")->required();
    curves_cmd->add_option("--out", curves_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*train_cmd) {
            std::vector<std::pair<std::string, std::string>> overrides;
            if (!env_s.empty()) overrides.emplace_back("env", env_s);
            if (!algo_s.empty()) overrides.emplace_back("estimator", algo_s);
            if (!istar_s.empty()) overrides.emplace_back("istar", istar_s);
            if (!ablation_s.empty()) overrides.emplace_back("ablation", ablation_s);
            if (seed_set) overrides.emplace_back("seed", std::to_string(seed));
            return cmd_train(config_path, overrides, out_dir, resume_dir, iterations);
        }
        if (*eval_cmd)
            return cmd_eval(ckpt_path, eval_env, eval_episodes, eval_seed, eval_temperature,
                            eval_greedy, eval_csv);
        if (*grad_cmd) return cmd_gradcheck(grad_instances, grad_seed);
        if (*replay_cmd) return cmd_replay(replay_dir, replay_iter);
        if (*curves_cmd) return cmd_curves(curve_runs, curves_out);
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
