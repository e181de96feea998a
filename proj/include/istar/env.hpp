#pragma once

// Deterministic seeded environments. Sokoban rooms are generated by reverse
// play (pull boxes off their targets), which guarantees a solution exists.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "istar/vocab.hpp"

namespace istar::env {

enum class EnvKind { Sokoban, Corridor };

EnvKind env_kind_from_string(const std::string& s);
std::string to_string(EnvKind kind);

struct Observation {
    std::vector<double> features;  // one-hot channel encoding, fixed length per env type
    std::string tag;               // human-readable rendering for logs
};

struct StepInfo {
    bool success = false;
    bool invalid_action = false;
    int boxes_on_target = 0;
};

struct StepOutcome {
    Observation observation;
    double reward = 0.0;
    bool done = false;
    StepInfo info;
};

struct EnvParams {
    // sokoban
    int grid_side = 5;
    int boxes = 1;
    int horizon = 20;
    int wall_count = 0;
    int pull_steps_min = 0;  // 0 = derive from grid side
    int pull_steps_max = 0;
    double step_penalty = 0.1;
    double invalid_penalty = 0.1;
    double solve_bonus = 10.0;
    // corridor
    int corridor_length = 6;
    int corridor_horizon = 12;

    void validate(EnvKind kind) const;
};

class Env {
public:
    virtual ~Env() = default;
    virtual EnvKind kind() const = 0;
    virtual const Vocab& vocab() const = 0;
    virtual int observation_dim() const = 0;
    virtual int max_action_tokens() const = 0;  // per-step token budget L, END included
    virtual int horizon() const = 0;
    virtual Observation reset(std::uint64_t seed) = 0;
    virtual StepOutcome step_tokens(const std::vector<int>& tokens) = 0;
    virtual bool done() const = 0;
    virtual int steps_taken() const = 0;
    virtual Observation observe() const = 0;
};

std::unique_ptr<Env> make_env(EnvKind kind, const EnvParams& params);

const Vocab& sokoban_vocab();
const Vocab& corridor_vocab();

// --- trajectories ---------------------------------------------------------

struct StepRecord {
    std::vector<double> observation;  // o_t, the observation the action was taken from
    std::string observation_tag;
    std::vector<int> action_tokens;
    std::vector<double> token_logprobs;  // sampling-time log-probs (temperature 1)
    double reward = 0.0;
    bool done = false;
    StepInfo info;
};

struct Trajectory {
    EnvKind kind = EnvKind::Sokoban;
    std::uint64_t env_seed = 0;
    std::uint64_t snapshot_version = 0;
    std::vector<StepRecord> steps;
    double outcome_score = 0.0;
    bool success = false;
    bool complete = false;
};

// N trajectories rolled out from one shared task/initial state; the unit over
// which preference pairs and group-relative advantages are formed.
struct RolloutGroup {
    std::uint64_t task_seed = 0;
    std::uint64_t snapshot_version = 0;
    std::vector<Trajectory> trajectories;
};

struct OutcomeReward {
    double score = 0.0;
    bool success = false;
};

// Score/success of a finished trajectory: score is the cumulative environment
// reward, success comes from the terminal step. Rejects incomplete input.
OutcomeReward outcome_reward(const Trajectory& traj);

}  // namespace istar::env
