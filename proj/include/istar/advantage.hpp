#pragma once

// Advantage estimators: episode-level (GRPO / RLOO / REINFORCE++), step-level
// from implicit step rewards, their weighted combination, and the merged- and
// ground-truth-reward ablation paths. All pure functions.

#include <vector>

namespace istar::adv {

enum class Estimator { Grpo, Rloo, Reinforcepp };

// (r - mean) / (population std + 1e-8); all-equal outcomes give all zeros.
std::vector<double> episode_adv_grpo(const std::vector<double>& outcomes);

// r_i minus the leave-one-out mean; renormalized to sum to exactly zero.
std::vector<double> episode_adv_rloo(const std::vector<double>& outcomes);

// Batch-level z-score (std optional, mean-only when use_std is false).
std::vector<double> episode_adv_reinforcepp(const std::vector<double>& outcomes_batch,
                                            bool use_std = true);

// Z-score over the union of every step of every trajectory in the group.
// No epsilon: the output is exactly invariant to a positive rescaling of the
// rewards (so Eq-level beta never leaks into advantages). Zero variance gives
// all zeros rather than a blow-up.
std::vector<std::vector<double>> step_adv(const std::vector<std::vector<double>>& step_rewards);

// Same normalization applied to raw environment step rewards.
std::vector<std::vector<double>> ground_truth_step_adv(
    const std::vector<std::vector<double>>& env_step_rewards);

struct AdvantageTable {
    double alpha = 0.0;
    bool token_level = false;
    std::vector<double> episode;                               // A^E per trajectory
    std::vector<std::vector<std::vector<double>>> step_units;  // A^S per [traj][step][unit]
    std::vector<std::vector<std::vector<double>>> combined;    // A   per [traj][step][unit]
};

// A(a_t) = A^E(tau) + alpha * A^S(a_t), episode advantage broadcast to every
// step (or token) of its trajectory.
AdvantageTable combine_adv(const std::vector<double>& episode_adv,
                           const std::vector<std::vector<std::vector<double>>>& step_adv_units,
                           double alpha);

// Episode advantage broadcast alone (vanilla path, and the merged ablation
// after folding step-reward sums into the outcomes).
AdvantageTable broadcast_episode_adv(const std::vector<double>& episode_adv,
                                     const std::vector<int>& steps_per_traj);

// outcomes' = outcomes + per-trajectory step-reward sums, then the chosen
// estimator. Operates on one group (Grpo/Rloo); Reinforcepp callers normalize
// across the batch themselves.
std::vector<double> merged_outcome_adv(const std::vector<double>& outcomes,
                                       const std::vector<double>& step_reward_sums,
                                       Estimator est);

}  // namespace istar::adv
