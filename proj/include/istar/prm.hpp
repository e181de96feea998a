#pragma once

// Implicit process reward model: a policy-shaped net trained on positive vs
// negative trajectory pairs with a trajectory-level DPO loss, then queried for
// per-step (or per-token) implicit rewards against the rollout snapshot.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "istar/env.hpp"
#include "istar/policy.hpp"
#include "istar/tensor.hpp"

namespace istar::prm {

enum class TokenAgg { Sum, Mean };

struct PreferencePair {
    const env::Trajectory* positive = nullptr;
    const env::Trajectory* negative = nullptr;
    std::uint64_t task_seed = 0;
};

// Positive = success signal above threshold. Emits every positive x negative
// cross pair, uniformly subsampled down to `cap` when there are more.
std::vector<PreferencePair> build_preference_pairs(const env::RolloutGroup& group,
                                                   double threshold, int cap,
                                                   std::mt19937_64& rng);

// log pi_prm(tau) - log pi_old(tau) over action tokens; graph flows through
// the PRM only, the snapshot side enters as a constant.
tensor::Ptr trajectory_log_ratio(const policy::PolicyNet& prm, const policy::Snapshot& snapshot,
                                 const env::Trajectory& traj,
                                 const policy::ContextEncoder& encoder);
double trajectory_log_ratio_value(const policy::PolicyNet& prm, const policy::Snapshot& snapshot,
                                  const env::Trajectory& traj,
                                  const policy::ContextEncoder& encoder);

// -log sigmoid(beta * (ratio_pos - ratio_neg))
double dpo_loss_from_ratios(double ratio_pos, double ratio_neg, double beta);
tensor::Ptr dpo_pair_loss(const policy::PolicyNet& prm, const policy::Snapshot& snapshot,
                          const PreferencePair& pair, double beta,
                          const policy::ContextEncoder& encoder);
double dpo_pair_loss_value(const policy::PolicyNet& prm, const policy::Snapshot& snapshot,
                           const PreferencePair& pair, double beta,
                           const policy::ContextEncoder& encoder);

struct PrmUpdateConfig {
    double lr = 2e-3;
    double beta = 0.05;
    int epochs = 1;
    int microbatch = 8;
    tensor::AdamwConfig adamw{};  // lr is overridden by `lr`
    std::uint64_t shuffle_seed = 0;
};

struct PrmUpdateStats {
    bool skipped = false;
    int pairs = 0;
    int steps = 0;
    double loss_before = 0.0;
    double loss_after = 0.0;
};

// One (or more) epochs of minibatch AdamW on the mean pair loss.
// An empty pair list is a logged no-op.
PrmUpdateStats prm_update(policy::PolicyNet& prm, const policy::Snapshot& snapshot,
                          std::span<const PreferencePair> pairs, const PrmUpdateConfig& cfg,
                          const policy::ContextEncoder& encoder);

// beta * (log pi_prm(a|ctx) - log pi_old(a|ctx)); evaluation only.
double step_reward(const policy::PolicyNet& prm, const policy::Snapshot& snapshot,
                   const std::vector<double>& ctx, const policy::ActionSequence& action,
                   double beta, TokenAgg agg);

// Per-token beta-scaled log ratios; they sum to step_reward under Sum.
std::vector<double> token_level_rewards(const policy::PolicyNet& prm,
                                        const policy::Snapshot& snapshot,
                                        const std::vector<double>& ctx,
                                        const policy::ActionSequence& action, double beta);

struct StepRewardTable {
    double beta = 0.0;
    TokenAgg agg = TokenAgg::Sum;
    std::uint64_t prm_version = 0;
    std::uint64_t snapshot_version = 0;
    std::vector<std::vector<double>> rewards;                       // [traj][step]
    std::vector<std::vector<std::vector<double>>> token_rewards;    // filled when requested
};

StepRewardTable compute_step_rewards(const policy::PolicyNet& prm,
                                     const policy::Snapshot& snapshot,
                                     const env::RolloutGroup& group, double beta, TokenAgg agg,
                                     const policy::ContextEncoder& encoder,
                                     bool with_token_rewards = false);

}  // namespace istar::prm
