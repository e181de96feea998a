#pragma once

// Small autoregressive action policy: encodes an observation context, emits an
// action as a short token sequence, and exposes exact log-probabilities for
// sampling, importance ratios and reward extraction.
//
// Sequence model: tokens decode autoregressively up to a budget of L tokens;
// the final position is forced to END, so probabilities over the set of
// terminated sequences sum to exactly one.

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "istar/env.hpp"
#include "istar/tensor.hpp"
#include "istar/vocab.hpp"

namespace istar::policy {

struct ActionSequence {
    std::vector<int> tokens;             // ends with END, token count >= 1
    std::vector<double> logprobs;        // temperature-1 log-probs; forced END logs 0
};

struct EncoderConfig {
    int obs_dim = 0;
    int history = 2;       // K most recent observations condition the policy
    int max_tokens = 3;    // per-step token budget L, END included
    int vocab_size = 0;
};

// Pure function of (observation history, previous action): fixed-length
// context features = K stacked observations + one-hot previous action tokens.
class ContextEncoder {
public:
    explicit ContextEncoder(EncoderConfig cfg);

    int ctx_dim() const { return cfg_.history * cfg_.obs_dim + cfg_.max_tokens * cfg_.vocab_size; }
    const EncoderConfig& config() const { return cfg_; }

    std::vector<double> encode(std::span<const std::vector<double>> obs_history,
                               const std::vector<int>& prev_action_tokens) const;
    std::vector<double> context_at(const env::Trajectory& traj, int step) const;

private:
    EncoderConfig cfg_;
};

struct PolicyConfig {
    int vocab_size = 0;
    int ctx_dim = 0;
    int max_tokens = 3;
    int embed_dim = 32;
    int proj_dim = 32;
    int hidden_dim = 128;
};

struct Snapshot;

class PolicyNet {
public:
    static PolicyNet init(const PolicyConfig& cfg, std::mt19937_64& rng);
    static PolicyNet from_params(const PolicyConfig& cfg, tensor::ParameterSet params);

    const PolicyConfig& config() const { return cfg_; }
    tensor::ParameterSet& params() { return params_; }
    const tensor::ParameterSet& params() const { return params_; }

    // One decode slot: distribution over the next token given context + prefix.
    struct DecodeRow {
        const std::vector<double>* ctx = nullptr;
        std::vector<int> prefix;
        int position = 0;
        int target = 0;  // token whose log-prob is extracted
    };

    // Log-probs of the target tokens, one graph node of shape [rows].
    tensor::Ptr token_logprob_rows(std::span<const DecodeRow> rows) const;

    // Raw next-token logits for one slot (no graph).
    std::vector<double> next_token_logits(const std::vector<double>& ctx,
                                          const std::vector<int>& prefix, int position) const;

    ActionSequence sample_action(const std::vector<double>& ctx, double temperature,
                                 std::mt19937_64& rng) const;
    ActionSequence greedy_action(const std::vector<double>& ctx) const;

    // Sum of scored-token log-probs of an action; differentiable w.r.t. params.
    tensor::Ptr action_log_prob(const std::vector<double>& ctx, const ActionSequence& action) const;
    double action_log_prob_value(const std::vector<double>& ctx, const ActionSequence& action) const;

    tensor::Ptr trajectory_log_prob(const env::Trajectory& traj, const ContextEncoder& encoder) const;
    double trajectory_log_prob_value(const env::Trajectory& traj, const ContextEncoder& encoder) const;

    // Positions of an action that carry probability mass (the forced final
    // END slot is excluded; its contribution is exactly zero).
    int scored_positions(const ActionSequence& action) const;

    std::uint64_t version_counter() const { return version_counter_; }
    void set_version_counter(std::uint64_t v) { version_counter_ = v; }

private:
    PolicyNet(PolicyConfig cfg, tensor::ParameterSet params);
    void check_action(const ActionSequence& action) const;

    PolicyConfig cfg_;
    tensor::ParameterSet params_;
    std::uint64_t version_counter_ = 0;

    friend Snapshot make_snapshot(PolicyNet& net);
};

// Frozen deep copy of a policy. Never mutated after creation.
struct Snapshot {
    std::shared_ptr<const PolicyNet> net;
    std::uint64_t version = 0;
};

Snapshot make_snapshot(PolicyNet& net);
PolicyNet restore(const Snapshot& snapshot);

// Roll one episode to completion under `net`. Records per-token sampling
// log-probs, rewards and outcome. temperature <= 0 selects greedy decoding.
env::Trajectory rollout_trajectory(env::Env& environment, const PolicyNet& net,
                                   const ContextEncoder& encoder, std::uint64_t env_seed,
                                   double temperature, std::mt19937_64& rng,
                                   std::uint64_t snapshot_version = 0);

}  // namespace istar::policy
