#pragma once

// Training orchestrator: grouped rollout collection, outcome scoring, PRM
// update, advantage computation, clipped policy update, snapshot rotation.
// Every source of randomness is derived from (seed, iteration, indices), so a
// run is reproducible and resumable from parameters alone.

#include <cstdint>
#include <string>
#include <vector>

#include "istar/advantage.hpp"
#include "istar/config.hpp"
#include "istar/env.hpp"
#include "istar/policy.hpp"
#include "istar/prm.hpp"

namespace istar::train {

struct PolicyObjectiveStats {
    double value = 0.0;
    double clip_fraction = 0.0;
    double max_ratio_deviation = 0.0;  // max |rho - 1| across units
    int units = 0;
};

// Clipped surrogate over every step (or token) of the batch. Importance
// ratios compare the live net against the recorded sampling log-probs of the
// snapshot that produced the rollouts; gradient flows through the net only.
tensor::Ptr policy_objective_node(const policy::PolicyNet& net,
                                  const std::vector<env::RolloutGroup>& groups,
                                  const std::vector<adv::AdvantageTable>& tables,
                                  double clip_eps, LossNorm norm, bool token_level,
                                  const policy::ContextEncoder& encoder,
                                  PolicyObjectiveStats* stats = nullptr);

struct PolicyUpdateStats {
    double objective_before = 0.0;
    double objective_after = 0.0;
    double clip_fraction = 0.0;  // fraction of units pushed outside the trust region
    int units = 0;
};

PolicyUpdateStats policy_update(policy::PolicyNet& net,
                                const std::vector<env::RolloutGroup>& groups,
                                const std::vector<adv::AdvantageTable>& tables,
                                const TrainConfig& cfg, const policy::ContextEncoder& encoder);

struct IterationStats {
    int iteration = 0;
    double success_rate = 0.0;
    double mean_score = 0.0;
    double mean_episode_length = 0.0;
    double mean_episode_reward = 0.0;
    double mean_step_reward = 0.0;
    double prm_loss = 0.0;
    double clip_fraction = 0.0;
};

std::uint64_t batch_identity_hash(const std::vector<env::RolloutGroup>& groups);

class Trainer {
public:
    Trainer(TrainConfig cfg, std::string run_dir);

    // Continues a checkpointed run in place, appending to its logs.
    static Trainer resume(const std::string& run_dir, int new_iterations = -1);

    void run();
    IterationStats train_iteration(int iteration);  // 1-based
    std::vector<env::RolloutGroup> collect_rollouts(int iteration) const;

    const TrainConfig& config() const { return cfg_; }
    const std::string& run_dir() const { return run_dir_; }
    policy::PolicyNet& policy_net() { return policy_; }
    policy::PolicyNet& prm_net() { return prm_; }
    const policy::Snapshot& snapshot() const { return snapshot_; }
    const policy::ContextEncoder& encoder() const { return encoder_; }
    int next_iteration() const { return next_iteration_; }

private:
    Trainer(TrainConfig cfg, std::string run_dir, bool resumed);

    void init_run_dir();
    void save_state(int iteration) const;
    void load_state(const std::string& policy_path, const std::string& prm_path,
                    const std::string& meta_path);
    void append_metrics(const IterationStats& stats);
    void log_tables(int iteration, const std::vector<env::RolloutGroup>& groups,
                    const prm::StepRewardTable* tables, std::size_t n_tables,
                    const std::vector<adv::AdvantageTable>& adv_tables);
    void log_trajectories(int iteration, const std::vector<env::RolloutGroup>& groups);
    void final_artifacts();
    std::map<std::string, std::string> checkpoint_meta(int iteration) const;

    TrainConfig cfg_;
    std::string run_dir_;
    policy::ContextEncoder encoder_;
    policy::PolicyNet policy_;
    policy::PolicyNet prm_;
    policy::Snapshot snapshot_;
    int next_iteration_ = 1;
};

}  // namespace istar::train
