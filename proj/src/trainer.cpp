#include "istar/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "istar/harness.hpp"
#include "istar/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace istar::train {

namespace {

constexpr const char* kMetricsHeader =
    "iteration,success_rate,mean_score,mean_episode_length,mean_episode_reward,"
    "mean_step_reward,prm_loss,clip_fraction";
constexpr const char* kStepRewardHeader = "iteration,group,traj,step,r_phi";
constexpr const char* kAdvantageHeader = "iteration,group,traj,step,A_E,A_S,A";

std::string state_meta_name(int iteration) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "state_meta_%05d.json", iteration);
    return buf;
}
std::string state_policy_name(int iteration) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "state_policy_%05d.ckpt", iteration);
    return buf;
}
std::string state_prm_name(int iteration) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "state_prm_%05d.ckpt", iteration);
    return buf;
}
std::string traj_log_name(int iteration) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "iter_%05d.jsonl", iteration);
    return buf;
}
std::string traj_meta_name(int iteration) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "iter_%05d.meta.json", iteration);
    return buf;
}

std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xFFu;
        h *= 1099511628211ULL;
    }
    return h;
}

void append_line(const std::string& path, const std::string& line) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw std::runtime_error("cannot append to " + path);
    os << line << '\n';
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << text;
}

}  // namespace

std::uint64_t batch_identity_hash(const std::vector<env::RolloutGroup>& groups) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& g : groups) {
        h = fnv1a(h, g.task_seed);
        h = fnv1a(h, g.snapshot_version);
        for (const auto& traj : g.trajectories) {
            h = fnv1a(h, static_cast<std::uint64_t>(traj.steps.size()));
            for (const auto& step : traj.steps) {
                for (int tok : step.action_tokens) h = fnv1a(h, static_cast<std::uint64_t>(tok));
                h = fnv1a(h, std::bit_cast<std::uint64_t>(step.reward));
            }
        }
    }
    return h;
}

// --- objective --------------------------------------------------------------

tensor::Ptr policy_objective_node(const policy::PolicyNet& net,
                                  const std::vector<env::RolloutGroup>& groups,
                                  const std::vector<adv::AdvantageTable>& tables,
                                  double clip_eps, LossNorm norm, bool token_level,
                                  const policy::ContextEncoder& encoder,
                                  PolicyObjectiveStats* stats) {
    if (groups.size() != tables.size())
        throw std::invalid_argument("policy_objective: group/advantage table misalignment");

    std::vector<policy::PolicyNet::DecodeRow> rows;
    std::vector<int> seg_of_row;
    std::vector<double> old_lp, advantage, weight;
    std::vector<std::vector<double>> contexts;

    std::size_t total_steps = 0;
    int total_trajs = 0;
    for (const auto& g : groups) {
        total_trajs += static_cast<int>(g.trajectories.size());
        for (const auto& t : g.trajectories) total_steps += t.steps.size();
    }
    contexts.reserve(total_steps);

    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& group = groups[gi];
        const auto& table = tables[gi];
        if (table.combined.size() != group.trajectories.size())
            throw std::invalid_argument("policy_objective: table trajectory count misalignment");
        for (const auto& traj : group.trajectories)
            for (int t = 0; t < static_cast<int>(traj.steps.size()); ++t)
                contexts.push_back(encoder.context_at(traj, t));
    }

    // second pass builds rows against stable context storage
    std::size_t ctx_index = 0;
    int unit_count = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& group = groups[gi];
        const auto& table = tables[gi];
        for (std::size_t ti = 0; ti < group.trajectories.size(); ++ti) {
            const auto& traj = group.trajectories[ti];
            if (table.combined[ti].size() != traj.steps.size())
                throw std::invalid_argument("policy_objective: table step count misalignment");
            // per-trajectory unit count for the per-trajectory-mean norm
            int traj_units = 0;
            if (token_level) {
                for (const auto& s : traj.steps)
                    traj_units += net.scored_positions({s.action_tokens, {}});
            } else {
                traj_units = static_cast<int>(traj.steps.size());
            }
            for (std::size_t st = 0; st < traj.steps.size(); ++st, ++ctx_index) {
                const auto& step = traj.steps[st];
                const policy::ActionSequence action{step.action_tokens, {}};
                const int scored = net.scored_positions(action);
                if (token_level) {
                    if (table.combined[ti][st].size() != static_cast<std::size_t>(scored))
                        throw std::invalid_argument(
                            "policy_objective: token-level table unit misalignment");
                    for (int k = 0; k < scored; ++k) {
                        rows.push_back({&contexts[ctx_index],
                                        std::vector<int>(step.action_tokens.begin(),
                                                         step.action_tokens.begin() + k),
                                        k, step.action_tokens[static_cast<std::size_t>(k)]});
                        seg_of_row.push_back(unit_count);
                        old_lp.push_back(step.token_logprobs[static_cast<std::size_t>(k)]);
                        advantage.push_back(table.combined[ti][st][static_cast<std::size_t>(k)]);
                        weight.push_back(norm == LossNorm::TotalSteps
                                             ? 0.0  // filled below once unit total is known
                                             : 1.0 / (static_cast<double>(total_trajs) *
                                                      static_cast<double>(traj_units)));
                        ++unit_count;
                    }
                } else {
                    if (table.combined[ti][st].size() != 1)
                        throw std::invalid_argument("policy_objective: table unit misalignment");
                    double recorded = 0.0;
                    for (double lp : step.token_logprobs) recorded += lp;
                    for (int k = 0; k < scored; ++k) {
                        rows.push_back({&contexts[ctx_index],
                                        std::vector<int>(step.action_tokens.begin(),
                                                         step.action_tokens.begin() + k),
                                        k, step.action_tokens[static_cast<std::size_t>(k)]});
                        seg_of_row.push_back(unit_count);
                    }
                    old_lp.push_back(recorded);
                    advantage.push_back(table.combined[ti][st][0]);
                    weight.push_back(norm == LossNorm::TotalSteps
                                         ? 0.0
                                         : 1.0 / (static_cast<double>(total_trajs) *
                                                  static_cast<double>(traj_units)));
                    ++unit_count;
                }
            }
        }
    }
    if (unit_count == 0) throw std::invalid_argument("policy_objective: empty batch");
    if (norm == LossNorm::TotalSteps) {
        const double w = 1.0 / static_cast<double>(unit_count);
        std::fill(weight.begin(), weight.end(), w);
    }

    auto lp_rows = net.token_logprob_rows(rows);
    auto unit_lp = tensor::segment_sum(lp_rows, seg_of_row, unit_count);
    auto ratio = tensor::exp_op(
        tensor::sub(unit_lp, tensor::from_values({unit_count}, old_lp)));
    auto adv_const = tensor::from_values({unit_count}, advantage);
    auto term = tensor::minimum(
        tensor::mul(ratio, adv_const),
        tensor::mul(tensor::clamp_const(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv_const));
    auto objective = tensor::sum(tensor::mul(term, tensor::from_values({unit_count}, weight)));

    if (stats != nullptr) {
        stats->value = objective->values[0];
        stats->units = unit_count;
        int clipped = 0;
        double max_dev = 0.0;
        for (double r : ratio->values) {
            if (r < 1.0 - clip_eps || r > 1.0 + clip_eps) ++clipped;
            max_dev = std::max(max_dev, std::fabs(r - 1.0));
        }
        stats->clip_fraction = static_cast<double>(clipped) / static_cast<double>(unit_count);
        stats->max_ratio_deviation = max_dev;
    }
    return objective;
}

PolicyUpdateStats policy_update(policy::PolicyNet& net,
                                const std::vector<env::RolloutGroup>& groups,
                                const std::vector<adv::AdvantageTable>& tables,
                                const TrainConfig& cfg, const policy::ContextEncoder& encoder) {
    const bool token_level = cfg.ablation == Ablation::TokenLevel;
    PolicyUpdateStats out;
    for (int epoch = 0; epoch < cfg.policy_epochs; ++epoch) {
        PolicyObjectiveStats obj_stats;
        auto objective = policy_objective_node(net, groups, tables, cfg.clip_epsilon,
                                               cfg.loss_norm, token_level, encoder, &obj_stats);
        if (epoch == 0) {
            out.objective_before = obj_stats.value;
            out.units = obj_stats.units;
            // rollouts were produced by this parameter state: ratios start at 1
            if (obj_stats.max_ratio_deviation > 1e-10)
                throw std::logic_error("policy_update: importance ratios differ from 1 at the "
                                       "first gradient step (replay mismatch)");
        }
        net.params().zero_grad();
        tensor::backward(tensor::neg(objective));  // ascent via descent on the negation
        for (const auto& name : net.params().names()) {
            for (double g : net.params().at(name)->grad) {
                if (!std::isfinite(g))
                    throw std::runtime_error("policy_update: non-finite gradient in '" + name +
                                             "'; aborting iteration");
            }
        }
        tensor::adamw_step(net.params(), cfg.policy_adamw());
    }
    PolicyObjectiveStats post;
    {
        tensor::NoGradGuard guard;
        (void)policy_objective_node(net, groups, tables, cfg.clip_epsilon, cfg.loss_norm,
                                    token_level, encoder, &post);
    }
    out.objective_after = post.value;
    out.clip_fraction = post.clip_fraction;
    return out;
}

// --- trainer -------------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, std::string run_dir)
    : Trainer(std::move(cfg), std::move(run_dir), false) {}

Trainer::Trainer(TrainConfig cfg, std::string run_dir, bool resumed)
    : cfg_([&] {
          cfg.validate();
          return std::move(cfg);
      }()),
      run_dir_(std::move(run_dir)),
      encoder_(cfg_.encoder_config()),
      policy_([&] {
          auto g = rng::make_stream(cfg_.seed, rng::Stream::PolicyInit);
          return policy::PolicyNet::init(cfg_.policy_config(), g);
      }()),
      prm_(policy::PolicyNet::from_params(cfg_.policy_config(), policy_.params().clone())),
      snapshot_(policy::make_snapshot(policy_)) {
    if (!resumed) init_run_dir();
}

void Trainer::init_run_dir() {
    fs::create_directories(run_dir_);
    if (fs::exists(fs::path(run_dir_) / "metrics.csv"))
        throw std::invalid_argument("run directory '" + run_dir_ +
                                    "' already holds a run; resume it instead");
    fs::create_directories(fs::path(run_dir_) / "trajectories");
    fs::create_directories(fs::path(run_dir_) / "checkpoints");
    cfg_.save_file((fs::path(run_dir_) / "config.cfg").string());

    json manifest;
    manifest["artifact"] = "istar";
    manifest["format"] = 1;
    manifest["seed"] = cfg_.seed;
    manifest["env"] = env::to_string(cfg_.env_kind);
    manifest["estimator"] = to_string(cfg_.estimator);
    manifest["istar"] = cfg_.istar;
    manifest["ablation"] = to_string(cfg_.ablation);
    manifest["iterations"] = cfg_.iterations;
    manifest["config_file"] = "config.cfg";
    manifest["metrics_csv"] = "metrics.csv";
    manifest["step_rewards_csv"] = "step_rewards.csv";
    manifest["advantages_csv"] = "advantages.csv";
    manifest["trajectories_dir"] = "trajectories";
    manifest["checkpoints_dir"] = "checkpoints";
    manifest["metrics_columns"] = kMetricsHeader;
    write_text((fs::path(run_dir_) / "manifest.json").string(), manifest.dump(2) + "\n");

    write_text((fs::path(run_dir_) / "metrics.csv").string(), std::string(kMetricsHeader) + "\n");
    if (cfg_.log_tables) {
        write_text((fs::path(run_dir_) / "step_rewards.csv").string(),
                   std::string(kStepRewardHeader) + "\n");
        write_text((fs::path(run_dir_) / "advantages.csv").string(),
                   std::string(kAdvantageHeader) + "\n");
    }
}

std::vector<env::RolloutGroup> Trainer::collect_rollouts(int iteration) const {
    std::vector<env::RolloutGroup> groups(static_cast<std::size_t>(cfg_.groups_per_iter));
    const auto params = cfg_.env_params();
    for (int g = 0; g < cfg_.groups_per_iter; ++g) {
        auto& group = groups[static_cast<std::size_t>(g)];
        group.task_seed = rng::derive(cfg_.seed, rng::Stream::TaskSeed,
                                      static_cast<std::uint64_t>(iteration),
                                      static_cast<std::uint64_t>(g));
        group.snapshot_version = snapshot_.version;
        group.trajectories.reserve(static_cast<std::size_t>(cfg_.group_size));
        for (int i = 0; i < cfg_.group_size; ++i) {
            auto environment = env::make_env(cfg_.env_kind, params);
            auto stream = rng::make_stream(cfg_.seed, rng::Stream::Rollout,
                                           static_cast<std::uint64_t>(iteration),
                                           static_cast<std::uint64_t>(g),
                                           static_cast<std::uint64_t>(i));
            try {
                group.trajectories.push_back(policy::rollout_trajectory(
                    *environment, *snapshot_.net, encoder_, group.task_seed,
                    cfg_.rollout_temperature, stream, snapshot_.version));
            } catch (const std::exception& e) {
                throw std::runtime_error("rollout failed (task_seed=" +
                                         std::to_string(group.task_seed) + "): " + e.what());
            }
        }
    }
    return groups;
}

IterationStats Trainer::train_iteration(int iteration) {
    auto groups = collect_rollouts(iteration);
    const std::uint64_t rollout_hash = batch_identity_hash(groups);

    IterationStats stats;
    stats.iteration = iteration;
    {
        int episodes = 0, successes = 0;
        double score_sum = 0.0, length_sum = 0.0;
        for (const auto& g : groups) {
            for (const auto& t : g.trajectories) {
                ++episodes;
                successes += t.success ? 1 : 0;
                score_sum += t.outcome_score;
                length_sum += static_cast<double>(t.steps.size());
            }
        }
        stats.success_rate = static_cast<double>(successes) / episodes;
        stats.mean_score = score_sum / episodes;
        stats.mean_episode_reward = stats.mean_score;  // cumulative env reward
        stats.mean_episode_length = length_sum / episodes;
    }

    const bool uses_prm = cfg_.istar && cfg_.ablation != Ablation::GtStep;
    const bool token_level = cfg_.ablation == Ablation::TokenLevel;

    // preference pairs come from the very rollouts the policy will train on
    std::vector<prm::PreferencePair> pairs;
    if (uses_prm) {
        if (batch_identity_hash(groups) != rollout_hash)
            throw std::logic_error("train_iteration: rollout batch mutated before PRM step");
        for (int g = 0; g < static_cast<int>(groups.size()); ++g) {
            auto stream = rng::make_stream(cfg_.seed, rng::Stream::PairSubsample,
                                           static_cast<std::uint64_t>(iteration),
                                           static_cast<std::uint64_t>(g));
            auto group_pairs = prm::build_preference_pairs(
                groups[static_cast<std::size_t>(g)], cfg_.preference_threshold, cfg_.pair_cap,
                stream);
            pairs.insert(pairs.end(), group_pairs.begin(), group_pairs.end());
        }
    }

    auto run_prm_update = [&]() {
        prm::PrmUpdateConfig ucfg;
        ucfg.lr = cfg_.prm_lr;
        ucfg.beta = cfg_.beta;
        ucfg.epochs = cfg_.prm_epochs;
        ucfg.microbatch = cfg_.prm_microbatch;
        ucfg.adamw = cfg_.prm_adamw();
        ucfg.shuffle_seed = rng::derive(cfg_.seed, rng::Stream::PrmShuffle,
                                        static_cast<std::uint64_t>(iteration));
        auto prm_stats = prm::prm_update(prm_, snapshot_, pairs, ucfg, encoder_);
        stats.prm_loss = prm_stats.skipped ? 0.0 : prm_stats.loss_after;
        return prm_stats;
    };

    // implicit step rewards; the Eq-level timing switch decides whether the
    // PRM update happens before or after they are read off
    std::vector<prm::StepRewardTable> reward_tables;
    if (uses_prm) {
        if (cfg_.prm_reward_timing == RewardTiming::PostUpdate) run_prm_update();
        reward_tables.reserve(groups.size());
        for (const auto& group : groups) {
            if (group.snapshot_version != snapshot_.version)
                throw std::logic_error("train_iteration: snapshot changed mid-iteration");
            reward_tables.push_back(prm::compute_step_rewards(
                prm_, snapshot_, group, cfg_.beta, cfg_.token_agg, encoder_, token_level));
        }
        if (cfg_.prm_reward_timing == RewardTiming::PreUpdate) run_prm_update();

        double reward_sum = 0.0;
        std::size_t n = 0;
        for (const auto& table : reward_tables)
            for (const auto& traj : table.rewards)
                for (double r : traj) {
                    reward_sum += r;
                    ++n;
                }
        stats.mean_step_reward = n > 0 ? reward_sum / static_cast<double>(n) : 0.0;
    }

    // ground-truth ablation reads raw environment step rewards instead
    std::vector<std::vector<std::vector<double>>> env_reward_tables;
    if (cfg_.ablation == Ablation::GtStep) {
        env_reward_tables.reserve(groups.size());
        double reward_sum = 0.0;
        std::size_t n = 0;
        for (const auto& group : groups) {
            std::vector<std::vector<double>> per_traj;
            per_traj.reserve(group.trajectories.size());
            for (const auto& traj : group.trajectories) {
                std::vector<double> rewards;
                rewards.reserve(traj.steps.size());
                for (const auto& s : traj.steps) {
                    rewards.push_back(s.reward);
                    reward_sum += s.reward;
                    ++n;
                }
                per_traj.push_back(std::move(rewards));
            }
            env_reward_tables.push_back(std::move(per_traj));
        }
        stats.mean_step_reward = n > 0 ? reward_sum / static_cast<double>(n) : 0.0;
    }

    // episode-level advantages
    std::vector<std::vector<double>> outcomes(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (const auto& t : groups[g].trajectories)
            outcomes[g].push_back(t.outcome_score);

    std::vector<std::vector<double>> episode_adv(groups.size());
    const bool merged = cfg_.ablation == Ablation::Merged;
    auto merged_value = [&](std::size_t g, std::size_t i) {
        double sum = 0.0;
        for (double r : reward_tables[g].rewards[i]) sum += r;
        return outcomes[g][i] + sum;
    };
    if (cfg_.estimator == adv::Estimator::Reinforcepp) {
        std::vector<double> batch;
        for (std::size_t g = 0; g < groups.size(); ++g)
            for (std::size_t i = 0; i < outcomes[g].size(); ++i)
                batch.push_back(merged ? merged_value(g, i) : outcomes[g][i]);
        auto flat = adv::episode_adv_reinforcepp(batch, cfg_.rpp_std);
        std::size_t k = 0;
        for (std::size_t g = 0; g < groups.size(); ++g)
            for (std::size_t i = 0; i < outcomes[g].size(); ++i)
                episode_adv[g].push_back(flat[k++]);
    } else {
        for (std::size_t g = 0; g < groups.size(); ++g) {
            if (merged) {
                std::vector<double> sums(outcomes[g].size());
                for (std::size_t i = 0; i < sums.size(); ++i) sums[i] = merged_value(g, i) - outcomes[g][i];
                episode_adv[g] = adv::merged_outcome_adv(outcomes[g], sums, cfg_.estimator);
            } else {
                episode_adv[g] = cfg_.estimator == adv::Estimator::Grpo
                                     ? adv::episode_adv_grpo(outcomes[g])
                                     : adv::episode_adv_rloo(outcomes[g]);
            }
        }
    }

    // step-level advantages and combination
    std::vector<adv::AdvantageTable> adv_tables(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& group = groups[static_cast<std::size_t>(g)];
        std::vector<int> steps_per_traj;
        for (const auto& t : group.trajectories)
            steps_per_traj.push_back(static_cast<int>(t.steps.size()));

        if (!cfg_.istar || merged) {
            adv_tables[g] = adv::broadcast_episode_adv(episode_adv[g], steps_per_traj);
        } else if (cfg_.ablation == Ablation::GtStep) {
            auto z = adv::ground_truth_step_adv(env_reward_tables[g]);
            std::vector<std::vector<std::vector<double>>> units(z.size());
            for (std::size_t i = 0; i < z.size(); ++i)
                for (double v : z[i]) units[i].push_back({v});
            adv_tables[g] = adv::combine_adv(episode_adv[g], units, cfg_.alpha);
        } else if (token_level) {
            // normalize over the union of all token rewards in the group
            std::vector<std::vector<double>> flat(group.trajectories.size());
            for (std::size_t i = 0; i < group.trajectories.size(); ++i)
                for (const auto& toks : reward_tables[g].token_rewards[i])
                    flat[i].insert(flat[i].end(), toks.begin(), toks.end());
            auto z = adv::step_adv(flat);
            std::vector<std::vector<std::vector<double>>> units(group.trajectories.size());
            for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
                std::size_t k = 0;
                units[i].resize(reward_tables[g].token_rewards[i].size());
                for (std::size_t t = 0; t < reward_tables[g].token_rewards[i].size(); ++t)
                    for (std::size_t u = 0; u < reward_tables[g].token_rewards[i][t].size(); ++u)
                        units[i][t].push_back(z[i][k++]);
            }
            adv_tables[g] = adv::combine_adv(episode_adv[g], units, cfg_.alpha);
        } else {
            auto z = adv::step_adv(reward_tables[g].rewards);
            std::vector<std::vector<std::vector<double>>> units(z.size());
            for (std::size_t i = 0; i < z.size(); ++i)
                for (double v : z[i]) units[i].push_back({v});
            adv_tables[g] = adv::combine_adv(episode_adv[g], units, cfg_.alpha);
        }
    }

    // the policy trains on the same batch the PRM trained on
    if (batch_identity_hash(groups) != rollout_hash)
        throw std::logic_error("train_iteration: rollout batch mutated before policy step");
    auto update_stats = policy_update(policy_, groups, adv_tables, cfg_, encoder_);
    stats.clip_fraction = update_stats.clip_fraction;

    snapshot_ = policy::make_snapshot(policy_);

    if (cfg_.log_tables)
        log_tables(iteration, groups, reward_tables.empty() ? nullptr : reward_tables.data(),
                   reward_tables.size(), adv_tables);
    if (cfg_.log_trajectories) log_trajectories(iteration, groups);
    append_metrics(stats);
    next_iteration_ = iteration + 1;
    return stats;
}

void Trainer::append_metrics(const IterationStats& s) {
    std::ostringstream os;
    os << s.iteration << ',' << harness::format_double(s.success_rate) << ','
       << harness::format_double(s.mean_score) << ','
       << harness::format_double(s.mean_episode_length) << ','
       << harness::format_double(s.mean_episode_reward) << ','
       << harness::format_double(s.mean_step_reward) << ','
       << harness::format_double(s.prm_loss) << ','
       << harness::format_double(s.clip_fraction);
    append_line((fs::path(run_dir_) / "metrics.csv").string(), os.str());
}

void Trainer::log_tables(int iteration, const std::vector<env::RolloutGroup>& groups,
                         const prm::StepRewardTable* tables, std::size_t n_tables,
                         const std::vector<adv::AdvantageTable>& adv_tables) {
    std::ostringstream rewards_rows, adv_rows;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (tables != nullptr && g < n_tables) {
            for (std::size_t i = 0; i < tables[g].rewards.size(); ++i)
                for (std::size_t t = 0; t < tables[g].rewards[i].size(); ++t)
                    rewards_rows << iteration << ',' << g << ',' << i << ',' << t << ','
                                 << harness::format_double(tables[g].rewards[i][t]) << '\n';
        }
        const auto& table = adv_tables[g];
        for (std::size_t i = 0; i < table.combined.size(); ++i) {
            for (std::size_t t = 0; t < table.combined[i].size(); ++t) {
                for (std::size_t u = 0; u < table.combined[i][t].size(); ++u) {
                    adv_rows << iteration << ',' << g << ',' << i << ',' << t << ','
                             << harness::format_double(table.episode[i]) << ',';
                    // vanilla and merged paths have no step component at all
                    if (cfg_.istar && cfg_.ablation != Ablation::Merged)
                        adv_rows << harness::format_double(table.step_units[i][t][u]);
                    adv_rows << ',' << harness::format_double(table.combined[i][t][u]) << '\n';
                }
            }
        }
    }
    {
        std::ofstream os((fs::path(run_dir_) / "step_rewards.csv").string(), std::ios::app);
        os << rewards_rows.str();
    }
    {
        std::ofstream os((fs::path(run_dir_) / "advantages.csv").string(), std::ios::app);
        os << adv_rows.str();
    }
}

void Trainer::log_trajectories(int iteration, const std::vector<env::RolloutGroup>& groups) {
    const Vocab& vocab = cfg_.env_kind == env::EnvKind::Sokoban ? env::sokoban_vocab()
                                                                : env::corridor_vocab();
    std::ostringstream lines;
    json meta;
    meta["iteration"] = iteration;
    meta["snapshot_version"] = snapshot_.version;  // post-rotation version
    meta["groups"] = json::array();
    for (std::size_t g = 0; g < groups.size(); ++g) {
        json gm;
        gm["group"] = g;
        gm["task_seed"] = groups[g].task_seed;
        gm["snapshot_version"] = groups[g].snapshot_version;
        meta["groups"].push_back(gm);
        for (std::size_t i = 0; i < groups[g].trajectories.size(); ++i) {
            const int episode_id = static_cast<int>(g) * cfg_.group_size + static_cast<int>(i);
            const auto& traj = groups[g].trajectories[i];
            for (std::size_t t = 0; t < traj.steps.size(); ++t)
                lines << harness::step_record_line(episode_id, static_cast<int>(t),
                                                   traj.steps[t], vocab)
                      << '\n';
        }
    }
    const auto dir = fs::path(run_dir_) / "trajectories";
    write_text((dir / traj_log_name(iteration)).string(), lines.str());
    write_text((dir / traj_meta_name(iteration)).string(), meta.dump(2) + "\n");
}

std::map<std::string, std::string> Trainer::checkpoint_meta(int iteration) const {
    std::map<std::string, std::string> meta;
    meta["artifact"] = "istar";
    meta["env"] = env::to_string(cfg_.env_kind);
    meta["iteration"] = std::to_string(iteration);
    meta["snapshot_version"] = std::to_string(snapshot_.version);
    meta["vocab_size"] = std::to_string(cfg_.policy_config().vocab_size);
    meta["ctx_dim"] = std::to_string(cfg_.policy_config().ctx_dim);
    meta["max_tokens"] = std::to_string(cfg_.policy_config().max_tokens);
    meta["embed_dim"] = std::to_string(cfg_.embed_dim);
    meta["proj_dim"] = std::to_string(cfg_.proj_dim);
    meta["hidden_dim"] = std::to_string(cfg_.hidden_dim);
    meta["context_history"] = std::to_string(cfg_.context_history);
    meta["grid_side"] = std::to_string(cfg_.grid_side);
    meta["boxes"] = std::to_string(cfg_.boxes);
    meta["horizon"] = std::to_string(cfg_.effective_horizon());
    meta["wall_count"] = std::to_string(cfg_.wall_count);
    meta["pull_steps_min"] = std::to_string(cfg_.pull_steps_min);
    meta["pull_steps_max"] = std::to_string(cfg_.pull_steps_max);
    meta["corridor_length"] = std::to_string(cfg_.corridor_length);
    meta["corridor_horizon"] = std::to_string(cfg_.corridor_horizon);
    return meta;
}

void Trainer::save_state(int iteration) const {
    const auto dir = fs::path(run_dir_) / "checkpoints";
    auto meta = checkpoint_meta(iteration);
    tensor::save_checkpoint((dir / state_policy_name(iteration)).string(), policy_.params(), meta,
                            true);
    tensor::save_checkpoint((dir / state_prm_name(iteration)).string(), prm_.params(), meta, true);
    json j;
    j["iteration"] = iteration;
    j["snapshot_version"] = snapshot_.version;
    write_text((dir / state_meta_name(iteration)).string(), j.dump(2) + "\n");
}

void Trainer::load_state(const std::string& policy_path, const std::string& prm_path,
                         const std::string& meta_path) {
    std::ifstream is(meta_path);
    if (!is) throw std::runtime_error("resume: cannot open " + meta_path);
    json j = json::parse(is);
    const int iteration = j.at("iteration").get<int>();
    const std::uint64_t snapshot_version = j.at("snapshot_version").get<std::uint64_t>();

    auto policy_ckpt = tensor::load_checkpoint(policy_path);
    auto prm_ckpt = tensor::load_checkpoint(prm_path);
    policy_ = policy::PolicyNet::from_params(cfg_.policy_config(), std::move(policy_ckpt.params));
    prm_ = policy::PolicyNet::from_params(cfg_.policy_config(), std::move(prm_ckpt.params));
    // the snapshot is always the policy at the last rotation; rebuilding it
    // with the saved version keeps the version sequence identical
    policy_.set_version_counter(snapshot_version - 1);
    snapshot_ = policy::make_snapshot(policy_);
    next_iteration_ = iteration + 1;
}

Trainer Trainer::resume(const std::string& run_dir, int new_iterations) {
    auto cfg = TrainConfig::load_file((fs::path(run_dir) / "config.cfg").string());
    if (new_iterations > 0) cfg.iterations = new_iterations;
    Trainer trainer(cfg, run_dir, true);

    const auto dir = fs::path(run_dir) / "checkpoints";
    int best = -1;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (name.rfind("state_meta_", 0) == 0) {
            const int it = std::stoi(name.substr(11, 5));
            best = std::max(best, it);
        }
    }
    if (best < 0) throw std::invalid_argument("resume: no state checkpoints in " + run_dir);
    trainer.load_state((dir / state_policy_name(best)).string(),
                       (dir / state_prm_name(best)).string(),
                       (dir / state_meta_name(best)).string());
    if (new_iterations > 0) {
        trainer.cfg_.save_file((fs::path(run_dir) / "config.cfg").string());
    }
    return trainer;
}

void Trainer::final_artifacts() {
    const auto dir = fs::path(run_dir_) / "checkpoints";
    const int final_iter = cfg_.iterations;
    save_state(final_iter);
    auto meta = checkpoint_meta(final_iter);
    tensor::save_checkpoint((dir / "policy_final.ckpt").string(), policy_.params(), meta, false);
    tensor::save_checkpoint((dir / "prm_final.ckpt").string(), prm_.params(), meta, false);

    harness::EvalConfig ecfg;
    ecfg.episodes = cfg_.eval_episodes;
    ecfg.seed = rng::derive(cfg_.seed, rng::Stream::Eval);
    ecfg.temperature = cfg_.eval_temperature;
    auto report = harness::evaluate(policy_, cfg_.env_kind, cfg_.env_params(),
                                    cfg_.encoder_config(), ecfg);
    harness::write_eval_report((fs::path(run_dir_) / "eval_report.csv").string(), report);
    write_text((fs::path(run_dir_) / "report.txt").string(), harness::eval_summary(report));
}

void Trainer::run() {
    try {
        for (int it = next_iteration_; it <= cfg_.iterations; ++it) {
            train_iteration(it);
            if (cfg_.checkpoint_every > 0 && it % cfg_.checkpoint_every == 0) save_state(it);
        }
        final_artifacts();
    } catch (const std::exception& e) {
        json failure;
        failure["failed_at_iteration"] = next_iteration_;
        failure["error"] = e.what();
        write_text((fs::path(run_dir_) / "failure.json").string(), failure.dump(2) + "\n");
        throw;
    }
}

}  // namespace istar::train
