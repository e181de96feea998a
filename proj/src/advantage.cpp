#include "istar/advantage.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace istar::adv {

namespace {

bool all_equal(const std::vector<double>& v) {
    for (double x : v)
        if (x != v[0]) return false;
    return true;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double population_std(const std::vector<double>& v, double m) {
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

// Floating-point sums of centered values carry a tiny residual. Rewriting the
// last entry as the exact negation of the accumulated rest makes the plain
// left-to-right total exactly zero (x + (-x) == 0 in IEEE arithmetic); the
// entry moves by at most a rounding-level amount.
void renormalize_zero_sum(std::vector<double>& v) {
    double partial = 0.0;
    for (std::size_t i = 0; i + 1 < v.size(); ++i) partial += v[i];
    v.back() = -partial;
}

}  // namespace

std::vector<double> episode_adv_grpo(const std::vector<double>& outcomes) {
    if (outcomes.size() < 2)
        throw std::invalid_argument("episode_adv_grpo: need at least 2 outcomes");
    if (all_equal(outcomes)) return std::vector<double>(outcomes.size(), 0.0);
    const double m = mean_of(outcomes);
    const double s = population_std(outcomes, m);
    if (s == 0.0) return std::vector<double>(outcomes.size(), 0.0);
    std::vector<double> out(outcomes.size());
    for (std::size_t i = 0; i < outcomes.size(); ++i) out[i] = (outcomes[i] - m) / (s + 1e-8);
    return out;
}

std::vector<double> episode_adv_rloo(const std::vector<double>& outcomes) {
    const std::size_t n = outcomes.size();
    if (n < 2) throw std::invalid_argument("episode_adv_rloo: need at least 2 outcomes");
    if (all_equal(outcomes)) return std::vector<double>(n, 0.0);
    double total = 0.0;
    for (double x : outcomes) total += x;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = outcomes[i] - (total - outcomes[i]) / static_cast<double>(n - 1);
    renormalize_zero_sum(out);
    return out;
}

std::vector<double> episode_adv_reinforcepp(const std::vector<double>& outcomes_batch,
                                            bool use_std) {
    if (outcomes_batch.size() < 2)
        throw std::invalid_argument("episode_adv_reinforcepp: need a batch of at least 2");
    if (all_equal(outcomes_batch)) return std::vector<double>(outcomes_batch.size(), 0.0);
    const double m = mean_of(outcomes_batch);
    std::vector<double> out(outcomes_batch.size());
    if (use_std) {
        const double s = population_std(outcomes_batch, m);
        if (s == 0.0) return std::vector<double>(outcomes_batch.size(), 0.0);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = (outcomes_batch[i] - m) / (s + 1e-8);
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = outcomes_batch[i] - m;
    }
    return out;
}

std::vector<std::vector<double>> step_adv(const std::vector<std::vector<double>>& step_rewards) {
    std::vector<double> pool;
    for (const auto& traj : step_rewards) pool.insert(pool.end(), traj.begin(), traj.end());

    std::vector<std::vector<double>> out(step_rewards.size());
    for (std::size_t i = 0; i < step_rewards.size(); ++i)
        out[i].assign(step_rewards[i].size(), 0.0);
    if (pool.empty() || all_equal(pool)) return out;

    const double m = mean_of(pool);
    const double s = population_std(pool, m);
    if (s == 0.0) return out;
    for (std::size_t i = 0; i < step_rewards.size(); ++i)
        for (std::size_t t = 0; t < step_rewards[i].size(); ++t)
            out[i][t] = (step_rewards[i][t] - m) / s;
    return out;
}

std::vector<std::vector<double>> ground_truth_step_adv(
    const std::vector<std::vector<double>>& env_step_rewards) {
    return step_adv(env_step_rewards);
}

AdvantageTable combine_adv(const std::vector<double>& episode_adv,
                           const std::vector<std::vector<std::vector<double>>>& step_adv_units,
                           double alpha) {
    if (alpha < 0.0) throw std::invalid_argument("combine_adv: alpha must be >= 0");
    if (episode_adv.size() != step_adv_units.size())
        throw std::invalid_argument("combine_adv: episode/step trajectory counts disagree");
    AdvantageTable table;
    table.alpha = alpha;
    table.episode = episode_adv;
    table.step_units = step_adv_units;
    table.combined.resize(step_adv_units.size());
    for (std::size_t i = 0; i < step_adv_units.size(); ++i) {
        table.combined[i].resize(step_adv_units[i].size());
        for (std::size_t t = 0; t < step_adv_units[i].size(); ++t) {
            table.combined[i][t].resize(step_adv_units[i][t].size());
            for (std::size_t u = 0; u < step_adv_units[i][t].size(); ++u)
                table.combined[i][t][u] = episode_adv[i] + alpha * step_adv_units[i][t][u];
        }
    }
    return table;
}

AdvantageTable broadcast_episode_adv(const std::vector<double>& episode_adv,
                                     const std::vector<int>& steps_per_traj) {
    if (episode_adv.size() != steps_per_traj.size())
        throw std::invalid_argument("broadcast_episode_adv: shape mismatch");
    AdvantageTable table;
    table.alpha = 0.0;
    table.episode = episode_adv;
    table.step_units.resize(episode_adv.size());
    table.combined.resize(episode_adv.size());
    for (std::size_t i = 0; i < episode_adv.size(); ++i) {
        table.step_units[i].assign(static_cast<std::size_t>(steps_per_traj[i]),
                                   std::vector<double>{0.0});
        table.combined[i].assign(static_cast<std::size_t>(steps_per_traj[i]),
                                 std::vector<double>{episode_adv[i]});
    }
    return table;
}

std::vector<double> merged_outcome_adv(const std::vector<double>& outcomes,
                                       const std::vector<double>& step_reward_sums,
                                       Estimator est) {
    if (outcomes.size() != step_reward_sums.size())
        throw std::invalid_argument("merged_outcome_adv: shape mismatch");
    std::vector<double> merged(outcomes.size());
    for (std::size_t i = 0; i < merged.size(); ++i) merged[i] = outcomes[i] + step_reward_sums[i];
    switch (est) {
        case Estimator::Grpo: return episode_adv_grpo(merged);
        case Estimator::Rloo: return episode_adv_rloo(merged);
        case Estimator::Reinforcepp: return episode_adv_reinforcepp(merged);
    }
    throw std::invalid_argument("merged_outcome_adv: unknown estimator");
}

}  // namespace istar::adv
