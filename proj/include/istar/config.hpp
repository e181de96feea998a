#pragma once

#include <cstdint>
#include <string>

#include "istar/advantage.hpp"
#include "istar/env.hpp"
#include "istar/policy.hpp"
#include "istar/prm.hpp"

namespace istar::train {

enum class Ablation { None, Merged, TokenLevel, GtStep };
enum class LossNorm { TotalSteps, PerTrajMean };
enum class RewardTiming { PreUpdate, PostUpdate };

Ablation ablation_from_string(const std::string& s);
std::string to_string(Ablation a);
adv::Estimator estimator_from_string(const std::string& s);
std::string to_string(adv::Estimator e);

// Every knob of a run. Serialized as flat `key = value` text; unknown keys
// are rejected so configs cannot silently rot.
struct TrainConfig {
    env::EnvKind env_kind = env::EnvKind::Sokoban;
    adv::Estimator estimator = adv::Estimator::Rloo;
    bool istar = true;
    Ablation ablation = Ablation::None;
    std::uint64_t seed = 1;
    int iterations = 200;
    int groups_per_iter = 8;   // G
    int group_size = 8;        // N

    double beta = 0.05;
    double alpha = 1.0;
    double clip_epsilon = 0.2;
    double policy_lr = 1e-3;
    double prm_lr = 2e-3;
    int policy_epochs = 1;
    int prm_epochs = 1;
    int prm_microbatch = 8;
    int pair_cap = 16;
    double preference_threshold = 0.0;
    double rollout_temperature = 1.0;
    double eval_temperature = 0.4;
    int eval_episodes = 200;

    prm::TokenAgg token_agg = prm::TokenAgg::Sum;
    RewardTiming prm_reward_timing = RewardTiming::PreUpdate;
    bool rpp_std = true;
    LossNorm loss_norm = LossNorm::TotalSteps;

    int grid_side = 5;
    int boxes = 1;
    int horizon = 0;  // 0: 20 up to side 5, 30 from side 6
    int wall_count = 0;
    int pull_steps_min = 0;  // 0: grid side
    int pull_steps_max = 0;  // 0: 3x grid side
    int corridor_length = 6;
    int corridor_horizon = 12;

    int context_history = 2;
    int embed_dim = 32;
    int proj_dim = 32;
    int hidden_dim = 128;

    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;

    int checkpoint_every = 0;  // 0: final state only
    bool log_trajectories = true;
    bool log_tables = true;

    static TrainConfig load_file(const std::string& path);
    void apply_kv(const std::string& key, const std::string& value);
    void validate() const;
    void save_file(const std::string& path) const;
    std::string serialize() const;

    env::EnvParams env_params() const;
    policy::EncoderConfig encoder_config() const;
    policy::PolicyConfig policy_config() const;
    tensor::AdamwConfig policy_adamw() const;
    tensor::AdamwConfig prm_adamw() const;
    int effective_horizon() const;
};

}  // namespace istar::train
