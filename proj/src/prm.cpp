#include "istar/prm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "istar/rng.hpp"

namespace istar::prm {

using policy::ActionSequence;
using policy::ContextEncoder;
using policy::PolicyNet;
using policy::Snapshot;
using tensor::Ptr;

namespace {

void check_beta(double beta) {
    if (!(beta > 0.0) || beta > 1.0)
        throw std::invalid_argument("beta must lie in (0, 1]");
}

double preference_signal(const env::Trajectory& traj) {
    return traj.success ? 1.0 : 0.0;
}

}  // namespace

std::vector<PreferencePair> build_preference_pairs(const env::RolloutGroup& group,
                                                   double threshold, int cap,
                                                   std::mt19937_64& rng) {
    std::vector<const env::Trajectory*> positives, negatives;
    for (const auto& traj : group.trajectories) {
        if (!traj.complete)
            throw std::invalid_argument("build_preference_pairs: incomplete trajectory in group");
        (preference_signal(traj) > threshold ? positives : negatives).push_back(&traj);
    }
    std::vector<PreferencePair> pairs;
    // all-positive or all-negative groups carry no preference signal
    if (positives.empty() || negatives.empty()) return pairs;
    pairs.reserve(positives.size() * negatives.size());
    for (const auto* pos : positives)
        for (const auto* neg : negatives)
            pairs.push_back({pos, neg, group.task_seed});
    if (cap > 0 && static_cast<int>(pairs.size()) > cap) {
        rng::shuffle(rng, pairs);
        pairs.resize(static_cast<std::size_t>(cap));
    }
    return pairs;
}

Ptr trajectory_log_ratio(const PolicyNet& prm, const Snapshot& snapshot,
                         const env::Trajectory& traj, const ContextEncoder& encoder) {
    double snap_lp;
    {
        tensor::NoGradGuard guard;
        snap_lp = snapshot.net->trajectory_log_prob(traj, encoder)->scalar();
    }
    return tensor::add_scalar(prm.trajectory_log_prob(traj, encoder), -snap_lp);
}

double trajectory_log_ratio_value(const PolicyNet& prm, const Snapshot& snapshot,
                                  const env::Trajectory& traj, const ContextEncoder& encoder) {
    tensor::NoGradGuard guard;
    return trajectory_log_ratio(prm, snapshot, traj, encoder)->scalar();
}

double dpo_loss_from_ratios(double ratio_pos, double ratio_neg, double beta) {
    const double margin = beta * (ratio_pos - ratio_neg);
    // -log sigmoid(m) = softplus(-m)
    return std::max(-margin, 0.0) + std::log1p(std::exp(-std::fabs(margin)));
}

Ptr dpo_pair_loss(const PolicyNet& prm, const Snapshot& snapshot, const PreferencePair& pair,
                  double beta, const ContextEncoder& encoder) {
    check_beta(beta);
    if (pair.positive == nullptr || pair.negative == nullptr)
        throw std::invalid_argument("dpo_pair_loss: empty pair");
    auto ratio_pos = trajectory_log_ratio(prm, snapshot, *pair.positive, encoder);
    auto ratio_neg = trajectory_log_ratio(prm, snapshot, *pair.negative, encoder);
    auto margin = tensor::scale(tensor::sub(ratio_pos, ratio_neg), beta);
    return tensor::softplus(tensor::neg(margin));
}

double dpo_pair_loss_value(const PolicyNet& prm, const Snapshot& snapshot,
                           const PreferencePair& pair, double beta,
                           const ContextEncoder& encoder) {
    tensor::NoGradGuard guard;
    return dpo_pair_loss(prm, snapshot, pair, beta, encoder)->scalar();
}

PrmUpdateStats prm_update(PolicyNet& prm, const Snapshot& snapshot,
                          std::span<const PreferencePair> pairs, const PrmUpdateConfig& cfg,
                          const ContextEncoder& encoder) {
    check_beta(cfg.beta);
    PrmUpdateStats stats;
    stats.pairs = static_cast<int>(pairs.size());
    if (pairs.empty()) {
        stats.skipped = true;
        return stats;
    }

    auto mean_loss = [&]() {
        tensor::NoGradGuard guard;
        double total = 0.0;
        for (const auto& pair : pairs)
            total += dpo_pair_loss(prm, snapshot, pair, cfg.beta, encoder)->scalar();
        return total / static_cast<double>(pairs.size());
    };
    stats.loss_before = mean_loss();

    tensor::AdamwConfig adamw = cfg.adamw;
    adamw.lr = cfg.lr;
    const int microbatch = std::max(1, cfg.microbatch);
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto shuffle_rng = rng::make_stream(cfg.shuffle_seed, rng::Stream::PrmShuffle);

    for (int epoch = 0; epoch < std::max(1, cfg.epochs); ++epoch) {
        rng::shuffle(shuffle_rng, order);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(microbatch)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(microbatch));
            prm.params().zero_grad();
            Ptr total;
            for (std::size_t i = start; i < stop; ++i) {
                Ptr loss = dpo_pair_loss(prm, snapshot, pairs[order[i]], cfg.beta, encoder);
                total = total ? tensor::add(total, loss) : loss;
            }
            tensor::backward(tensor::scale(total, 1.0 / static_cast<double>(stop - start)));
            tensor::adamw_step(prm.params(), adamw);
            stats.steps += 1;
        }
    }
    stats.loss_after = mean_loss();
    return stats;
}

double step_reward(const PolicyNet& prm, const Snapshot& snapshot, const std::vector<double>& ctx,
                   const ActionSequence& action, double beta, TokenAgg agg) {
    check_beta(beta);
    tensor::NoGradGuard guard;
    const double gap = prm.action_log_prob(ctx, action)->scalar() -
                       snapshot.net->action_log_prob(ctx, action)->scalar();
    const int scored = std::max(1, prm.scored_positions(action));
    return agg == TokenAgg::Sum ? beta * gap : beta * gap / static_cast<double>(scored);
}

std::vector<double> token_level_rewards(const PolicyNet& prm, const Snapshot& snapshot,
                                        const std::vector<double>& ctx,
                                        const ActionSequence& action, double beta) {
    check_beta(beta);
    tensor::NoGradGuard guard;
    const int scored = prm.scored_positions(action);
    std::vector<PolicyNet::DecodeRow> rows;
    rows.reserve(static_cast<std::size_t>(scored));
    for (int k = 0; k < scored; ++k) {
        rows.push_back({&ctx, std::vector<int>(action.tokens.begin(), action.tokens.begin() + k),
                        k, action.tokens[static_cast<std::size_t>(k)]});
    }
    std::vector<double> out(static_cast<std::size_t>(scored), 0.0);
    if (scored == 0) return out;
    auto lp_prm = prm.token_logprob_rows(rows);
    auto lp_old = snapshot.net->token_logprob_rows(rows);
    for (int k = 0; k < scored; ++k) {
        out[static_cast<std::size_t>(k)] =
            beta * (lp_prm->values[static_cast<std::size_t>(k)] -
                    lp_old->values[static_cast<std::size_t>(k)]);
    }
    return out;
}

StepRewardTable compute_step_rewards(const PolicyNet& prm, const Snapshot& snapshot,
                                     const env::RolloutGroup& group, double beta, TokenAgg agg,
                                     const ContextEncoder& encoder, bool with_token_rewards) {
    check_beta(beta);
    tensor::NoGradGuard guard;
    StepRewardTable table;
    table.beta = beta;
    table.agg = agg;
    table.prm_version = prm.version_counter();
    table.snapshot_version = snapshot.version;

    // one batched forward per net across every (trajectory, step, position)
    std::vector<PolicyNet::DecodeRow> rows;
    std::vector<int> segment_of_row;
    std::vector<std::vector<double>> contexts;
    std::vector<std::pair<int, int>> segments;  // (traj, step)
    std::vector<int> scored_per_segment;

    std::size_t ctx_count = 0;
    for (const auto& traj : group.trajectories) ctx_count += traj.steps.size();
    contexts.reserve(ctx_count);

    for (int i = 0; i < static_cast<int>(group.trajectories.size()); ++i) {
        const auto& traj = group.trajectories[static_cast<std::size_t>(i)];
        for (int t = 0; t < static_cast<int>(traj.steps.size()); ++t) {
            contexts.push_back(encoder.context_at(traj, t));
        }
    }
    std::size_t ctx_index = 0;
    for (int i = 0; i < static_cast<int>(group.trajectories.size()); ++i) {
        const auto& traj = group.trajectories[static_cast<std::size_t>(i)];
        for (int t = 0; t < static_cast<int>(traj.steps.size()); ++t, ++ctx_index) {
            const auto& tokens = traj.steps[static_cast<std::size_t>(t)].action_tokens;
            ActionSequence a{tokens, {}};
            const int scored = prm.scored_positions(a);
            const int seg = static_cast<int>(segments.size());
            segments.emplace_back(i, t);
            scored_per_segment.push_back(scored);
            for (int k = 0; k < scored; ++k) {
                rows.push_back({&contexts[ctx_index],
                                std::vector<int>(tokens.begin(), tokens.begin() + k), k,
                                tokens[static_cast<std::size_t>(k)]});
                segment_of_row.push_back(seg);
            }
        }
    }

    table.rewards.resize(group.trajectories.size());
    for (std::size_t i = 0; i < group.trajectories.size(); ++i)
        table.rewards[i].assign(group.trajectories[i].steps.size(), 0.0);
    if (with_token_rewards) {
        table.token_rewards.resize(group.trajectories.size());
        for (std::size_t i = 0; i < group.trajectories.size(); ++i)
            table.token_rewards[i].resize(group.trajectories[i].steps.size());
    }
    if (rows.empty()) return table;

    auto lp_prm = prm.token_logprob_rows(rows);
    auto lp_old = snapshot.net->token_logprob_rows(rows);

    std::vector<double> gap_per_segment(segments.size(), 0.0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const double diff = lp_prm->values[r] - lp_old->values[r];
        gap_per_segment[static_cast<std::size_t>(segment_of_row[r])] += diff;
        if (with_token_rewards) {
            const auto& [ti, st] = segments[static_cast<std::size_t>(segment_of_row[r])];
            table.token_rewards[static_cast<std::size_t>(ti)][static_cast<std::size_t>(st)]
                .push_back(beta * diff);
        }
    }
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto& [ti, st] = segments[s];
        double r = beta * gap_per_segment[s];
        if (agg == TokenAgg::Mean) r /= static_cast<double>(std::max(1, scored_per_segment[s]));
        table.rewards[static_cast<std::size_t>(ti)][static_cast<std::size_t>(st)] = r;
    }
    return table;
}

}  // namespace istar::prm
