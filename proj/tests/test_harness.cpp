#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "istar/harness.hpp"
#include "istar/rng.hpp"
#include "istar/trainer.hpp"

using namespace istar;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "istar_harness_tests" / name;
    fs::remove_all(dir);
    return dir.string();
}

train::TrainConfig mini_config(std::uint64_t seed, env::EnvKind kind = env::EnvKind::Sokoban) {
    train::TrainConfig cfg;
    cfg.env_kind = kind;
    cfg.seed = seed;
    cfg.iterations = 2;
    cfg.groups_per_iter = 2;
    cfg.group_size = 4;
    cfg.embed_dim = 8;
    cfg.proj_dim = 8;
    cfg.hidden_dim = 16;
    cfg.eval_episodes = 8;
    return cfg;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is.good());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

int run_cli(const std::string& args) {
#ifdef ISTAR_BIN
    const std::string cmd = std::string(ISTAR_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
#else
    (void)args;
    return -1;
#endif
}

// Uniform-random token policy, the Monte-Carlo baseline for untrained nets.
double random_policy_success_rate(const env::EnvParams& params, int episodes, std::uint64_t seed) {
    auto environment = env::make_env(env::EnvKind::Sokoban, params);
    const auto& vocab = environment->vocab();
    int successes = 0;
    for (int ep = 0; ep < episodes; ++ep) {
        auto g = rng::make_stream(seed, rng::Stream::Eval, static_cast<std::uint64_t>(ep), 99);
        environment->reset(rng::derive(seed, rng::Stream::Eval, static_cast<std::uint64_t>(ep)));
        bool success = false;
        while (!environment->done()) {
            std::vector<int> tokens;
            for (int k = 0; k < environment->max_action_tokens(); ++k) {
                const int tok = (k == environment->max_action_tokens() - 1)
                                    ? vocab.end_id
                                    : rng::uniform_int(g, 0, vocab.size() - 1);
                tokens.push_back(tok);
                if (tok == vocab.end_id) break;
            }
            success = environment->step_tokens(tokens).info.success;
        }
        successes += success ? 1 : 0;
    }
    return static_cast<double>(successes) / episodes;
}

}  // namespace

TEST_CASE("evaluate: determinism, aggregates, empty report, random baseline") {
    auto cfg = mini_config(3);
    train::Trainer trainer(cfg, fresh_dir("eval_src"));

    harness::EvalConfig ecfg;
    ecfg.episodes = 200;
    ecfg.seed = 5;
    ecfg.temperature = 0.4;
    auto report1 = harness::evaluate(trainer.policy_net(), cfg.env_kind, cfg.env_params(),
                                     cfg.encoder_config(), ecfg);
    auto report2 = harness::evaluate(trainer.policy_net(), cfg.env_kind, cfg.env_params(),
                                     cfg.encoder_config(), ecfg);
    REQUIRE(report1.rows.size() == 200);
    for (std::size_t i = 0; i < report1.rows.size(); ++i) {
        CHECK(report1.rows[i].env_seed == report2.rows[i].env_seed);
        CHECK(report1.rows[i].success == report2.rows[i].success);
        CHECK(report1.rows[i].score == report2.rows[i].score);
    }

    // aggregates are exactly the row statistics
    int successes = 0;
    double score = 0.0, steps = 0.0;
    for (const auto& r : report1.rows) {
        successes += r.success ? 1 : 0;
        score += r.score;
        steps += r.steps;
    }
    CHECK(report1.success_rate == static_cast<double>(successes) / 200.0);
    CHECK(report1.mean_score == score / 200.0);
    CHECK(report1.mean_episode_length == steps / 200.0);

    // an untrained policy scores near the uniform-random baseline
    const double baseline = random_policy_success_rate(cfg.env_params(), 10000, 77);
    CHECK(std::fabs(report1.success_rate - baseline) < 0.06);

    ecfg.episodes = 0;
    auto empty = harness::evaluate(trainer.policy_net(), cfg.env_kind, cfg.env_params(),
                                   cfg.encoder_config(), ecfg);
    CHECK(empty.rows.empty());
    CHECK(empty.success_rate == 0.0);
}

TEST_CASE("policy checkpoints round-trip through the eval loader") {
    auto cfg = mini_config(7);
    cfg.iterations = 1;
    auto dir = fresh_dir("ckpt_rt");
    train::Trainer trainer(cfg, dir);
    trainer.run();

    auto loaded = harness::load_policy_checkpoint(dir + "/checkpoints/policy_final.ckpt");
    CHECK(loaded.kind == cfg.env_kind);
    CHECK(loaded.net.params().values_equal(trainer.policy_net().params()));

    harness::EvalConfig ecfg;
    ecfg.episodes = 16;
    ecfg.seed = 9;
    auto from_loaded = harness::evaluate(loaded.net, loaded.kind, loaded.params, loaded.enc_cfg, ecfg);
    auto from_live = harness::evaluate(trainer.policy_net(), cfg.env_kind, cfg.env_params(),
                                       cfg.encoder_config(), ecfg);
    CHECK(from_loaded.success_rate == from_live.success_rate);
    CHECK(from_loaded.mean_score == from_live.mean_score);

    CHECK_THROWS_AS((void)harness::load_policy_checkpoint(dir + "/metrics.csv"),
                    std::runtime_error);
}

TEST_CASE("replay: PASS on intact logs, FAIL with located divergence on tampering") {
    for (auto kind : {env::EnvKind::Sokoban, env::EnvKind::Corridor}) {
        auto cfg = mini_config(11, kind);
        auto dir = fresh_dir(kind == env::EnvKind::Sokoban ? "replay_sok" : "replay_cor");
        train::Trainer trainer(cfg, dir);
        trainer.run();

        for (int it = 1; it <= cfg.iterations; ++it) {
            auto verdict = harness::replay_iteration(dir, it);
            CHECK(verdict.pass);
            CHECK(verdict.records_checked > 0);
            CHECK(verdict.first_divergence.empty());
        }

        // tamper with one reward digit in the first iteration's log
        char name[48];
        std::snprintf(name, sizeof(name), "/trajectories/iter_%05d.jsonl", 1);
        const std::string path = dir + name;
        auto text = read_file(path);
        const auto pos = text.find("\"reward\":");
        REQUIRE(pos != std::string::npos);
        text[pos + 9] = (text[pos + 9] == '1') ? '2' : '1';
        std::ofstream(path) << text;
        auto verdict = harness::replay_iteration(dir, 1);
        CHECK_FALSE(verdict.pass);
        CHECK(verdict.first_divergence.find("line 1") != std::string::npos);
    }
}

TEST_CASE("emit_curves: aligned series equal an independent re-aggregation") {
    auto dir_a = fresh_dir("curves_a");
    auto dir_b = fresh_dir("curves_b");
    {
        auto cfg = mini_config(13);
        cfg.iterations = 3;
        train::Trainer(cfg, dir_a).run();
        cfg.seed = 14;
        cfg.iterations = 5;  // longer run: alignment must take the intersection
        train::Trainer(cfg, dir_b).run();
    }
    auto out = fresh_dir("curves_out");
    auto result = harness::emit_curves({dir_a, dir_b}, out);
    CHECK(result.range_warning);
    CHECK(result.iterations == std::vector<int>{1, 2, 3});
    CHECK(fs::exists(fs::path(out) / "curves.csv"));
    CHECK(fs::exists(fs::path(out) / "success_rate.svg"));

    // independent pass: parse metrics.csv by hand and compare a series
    auto text = read_file(dir_a + "/metrics.csv");
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);  // header
    std::vector<double> success;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        success.push_back(std::stod(fields[1]));
    }
    REQUIRE(success.size() == 3);
    for (int i = 0; i < 3; ++i)
        CHECK(result.series.at("success_rate")[0][static_cast<std::size_t>(i)] ==
              doctest::Approx(success[static_cast<std::size_t>(i)]).epsilon(1e-15));
}

TEST_CASE("gradcheck: all loss families pass; corrupted gradients are caught") {
    auto rows = harness::gradcheck(3, 99);
    REQUIRE(rows.size() == 3);
    for (const auto& row : rows) {
        CHECK(row.pass);
        CHECK(row.max_rel_error < 1e-4);
    }

    // negative control: a loss whose graph deliberately misreports its
    // gradient (detached second factor makes the analytic gradient p, the
    // true one 2p) must be flagged
    tensor::ParameterSet params;
    auto g = rng::make_stream(1, rng::Stream::GradCheck);
    auto p = params.add("p", tensor::uniform({4}, 0.5, 1.5, g));
    auto broken_loss = [&]() {
        auto detached = tensor::from_values(p->shape, p->values);
        return tensor::sum(tensor::mul(p, detached));
    };
    CHECK(tensor::finite_diff_check(params, broken_loss, {16, 1e-5, 3}) > 1e-1);
}

#ifdef ISTAR_BIN
TEST_CASE("cli: exit codes and flag validation") {
    // unknown environment: usage error
    CHECK(run_cli("train --env mars --out /tmp/istar_cli_junk") == 1);
    // conflicting flags: gt_step needs sokoban step rewards
    CHECK(run_cli("train --env corridor --ablation gt_step --out /tmp/istar_cli_junk2") == 1);
    // ablations are iStar variants
    CHECK(run_cli("train --istar off --ablation merged --out /tmp/istar_cli_junk3") == 1);
    // unknown config key rejected
    {
        const auto cfg_path = fs::temp_directory_path() / "istar_bad_cfg.cfg";
        std::ofstream(cfg_path) << "not_a_key = 3\n";
        CHECK(run_cli("train --config " + cfg_path.string()) == 1);
    }
    // gradcheck runs clean
    CHECK(run_cli("gradcheck --instances 2 --seed 3") == 0);

    // a tiny end-to-end train -> replay -> eval -> curves chain
    auto dir = fresh_dir("cli_run");
    std::string train_args =
        "train --env corridor --algo rloo --istar on --seed 5 --iterations 2 --out " + dir;
    // shrink the net via a config file so the CLI run stays fast
    const auto cfg_path = fs::temp_directory_path() / "istar_cli_cfg.cfg";
    std::ofstream(cfg_path) << "embed_dim = 8\nproj_dim = 8\nhidden_dim = 16\n"
                            << "groups_per_iter = 2\ngroup_size = 4\neval_episodes = 4\n";
    CHECK(run_cli(train_args + " --config " + cfg_path.string()) == 0);
    CHECK(run_cli("replay " + dir + " --iteration 2") == 0);
    CHECK(run_cli("eval " + dir + "/checkpoints/policy_final.ckpt --episodes 4 --seed 1") == 0);
    CHECK(run_cli("curves " + dir + " --out " + dir + "/curves") == 0);
    // vanilla baseline mapping
    auto dir2 = fresh_dir("cli_vanilla");
    CHECK(run_cli("train --env corridor --algo rloo --istar off --seed 5 --iterations 1 --out " +
                  dir2 + " --config " + cfg_path.string()) == 0);
}
#endif
