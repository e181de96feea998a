#include "istar/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace istar::train {

Ablation ablation_from_string(const std::string& s) {
    if (s == "none") return Ablation::None;
    if (s == "merged") return Ablation::Merged;
    if (s == "token_level") return Ablation::TokenLevel;
    if (s == "gt_step") return Ablation::GtStep;
    throw std::invalid_argument("unknown ablation '" + s +
                                "' (expected none|merged|token_level|gt_step)");
}

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::None: return "none";
        case Ablation::Merged: return "merged";
        case Ablation::TokenLevel: return "token_level";
        case Ablation::GtStep: return "gt_step";
    }
    return "none";
}

adv::Estimator estimator_from_string(const std::string& s) {
    if (s == "grpo") return adv::Estimator::Grpo;
    if (s == "rloo") return adv::Estimator::Rloo;
    if (s == "reinforcepp") return adv::Estimator::Reinforcepp;
    throw std::invalid_argument("unknown algorithm '" + s + "' (expected grpo|rloo|reinforcepp)");
}

std::string to_string(adv::Estimator e) {
    switch (e) {
        case adv::Estimator::Grpo: return "grpo";
        case adv::Estimator::Rloo: return "rloo";
        case adv::Estimator::Reinforcepp: return "reinforcepp";
    }
    return "rloo";
}

namespace {

bool bool_from(const std::string& v, const std::string& key) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw std::invalid_argument("config: key '" + key + "' expects on|off, got '" + v + "'");
}

std::string bool_str(bool b) { return b ? "on" : "off"; }

double double_from(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return d;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

int int_from(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long long d = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return static_cast<int>(d);
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

std::uint64_t u64_from(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const unsigned long long d = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return static_cast<std::uint64_t>(d);
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an unsigned integer, got '" +
                                    v + "'");
    }
}

std::string num_str(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

void TrainConfig::apply_kv(const std::string& key, const std::string& value) {
    if (key == "env") env_kind = env::env_kind_from_string(value);
    else if (key == "estimator") estimator = estimator_from_string(value);
    else if (key == "istar") istar = bool_from(value, key);
    else if (key == "ablation") ablation = ablation_from_string(value);
    else if (key == "seed") seed = u64_from(value, key);
    else if (key == "iterations") iterations = int_from(value, key);
    else if (key == "groups_per_iter") groups_per_iter = int_from(value, key);
    else if (key == "group_size") group_size = int_from(value, key);
    else if (key == "beta") beta = double_from(value, key);
    else if (key == "alpha") alpha = double_from(value, key);
    else if (key == "clip_epsilon") clip_epsilon = double_from(value, key);
    else if (key == "policy_lr") policy_lr = double_from(value, key);
    else if (key == "prm_lr") prm_lr = double_from(value, key);
    else if (key == "policy_epochs") policy_epochs = int_from(value, key);
    else if (key == "prm_epochs") prm_epochs = int_from(value, key);
    else if (key == "prm_microbatch") prm_microbatch = int_from(value, key);
    else if (key == "pair_cap") pair_cap = int_from(value, key);
    else if (key == "preference_threshold") preference_threshold = double_from(value, key);
    else if (key == "rollout_temperature") rollout_temperature = double_from(value, key);
    else if (key == "eval_temperature") eval_temperature = double_from(value, key);
    else if (key == "eval_episodes") eval_episodes = int_from(value, key);
    else if (key == "step_reward_token_agg") {
        if (value == "sum") token_agg = prm::TokenAgg::Sum;
        else if (value == "mean") token_agg = prm::TokenAgg::Mean;
        else throw std::invalid_argument("config: step_reward_token_agg expects sum|mean");
    } else if (key == "prm_reward_timing") {
        if (value == "pre_update") prm_reward_timing = RewardTiming::PreUpdate;
        else if (value == "post_update") prm_reward_timing = RewardTiming::PostUpdate;
        else throw std::invalid_argument("config: prm_reward_timing expects pre_update|post_update");
    } else if (key == "rpp_std") rpp_std = bool_from(value, key);
    else if (key == "loss_norm") {
        if (value == "total_steps") loss_norm = LossNorm::TotalSteps;
        else if (value == "per_traj_mean") loss_norm = LossNorm::PerTrajMean;
        else throw std::invalid_argument("config: loss_norm expects total_steps|per_traj_mean");
    } else if (key == "grid_side") grid_side = int_from(value, key);
    else if (key == "boxes") boxes = int_from(value, key);
    else if (key == "horizon") horizon = int_from(value, key);
    else if (key == "wall_count") wall_count = int_from(value, key);
    else if (key == "pull_steps_min") pull_steps_min = int_from(value, key);
    else if (key == "pull_steps_max") pull_steps_max = int_from(value, key);
    else if (key == "corridor_length") corridor_length = int_from(value, key);
    else if (key == "corridor_horizon") corridor_horizon = int_from(value, key);
    else if (key == "context_history") context_history = int_from(value, key);
    else if (key == "embed_dim") embed_dim = int_from(value, key);
    else if (key == "proj_dim") proj_dim = int_from(value, key);
    else if (key == "hidden_dim") hidden_dim = int_from(value, key);
    else if (key == "adam_beta1") adam_beta1 = double_from(value, key);
    else if (key == "adam_beta2") adam_beta2 = double_from(value, key);
    else if (key == "adam_eps") adam_eps = double_from(value, key);
    else if (key == "weight_decay") weight_decay = double_from(value, key);
    else if (key == "checkpoint_every") checkpoint_every = int_from(value, key);
    else if (key == "log_trajectories") log_trajectories = bool_from(value, key);
    else if (key == "log_tables") log_tables = bool_from(value, key);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

TrainConfig TrainConfig::load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path);
    TrainConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                        " is not 'key = value'");
        cfg.apply_kv(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
    if (!(beta > 0.0) || beta > 1.0) fail("beta must lie in (0, 1]");
    if (alpha < 0.0) fail("alpha must be >= 0");
    if (!(clip_epsilon > 0.0) || clip_epsilon >= 1.0) fail("clip_epsilon must lie in (0, 1)");
    if (!(policy_lr > 0.0) || !(prm_lr > 0.0)) fail("learning rates must be positive");
    if (iterations < 0) fail("iterations must be >= 0");
    if (groups_per_iter < 1) fail("groups_per_iter must be >= 1");
    if (group_size < 2) fail("group_size must be >= 2");
    if (policy_epochs < 1 || prm_epochs < 1) fail("epoch counts must be >= 1");
    if (prm_microbatch < 1) fail("prm_microbatch must be >= 1");
    if (pair_cap < 0) fail("pair_cap must be >= 0");
    if (!(rollout_temperature > 0.0)) fail("rollout_temperature must be > 0");
    if (!(eval_temperature > 0.0)) fail("eval_temperature must be > 0");
    if (eval_episodes < 0) fail("eval_episodes must be >= 0");
    if (context_history < 1) fail("context_history must be >= 1");
    if (embed_dim < 1 || proj_dim < 1 || hidden_dim < 1) fail("net dimensions must be >= 1");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
    env_params().validate(env_kind);
    if (!istar && ablation != Ablation::None)
        fail("ablation '" + to_string(ablation) + "' requires istar = on (the ablations are iStar variants)");
    if (ablation == Ablation::GtStep && env_kind == env::EnvKind::Corridor)
        fail("ablation 'gt_step' needs per-step environment rewards; the corridor task has none");
}

int TrainConfig::effective_horizon() const {
    if (env_kind == env::EnvKind::Corridor) return corridor_horizon;
    if (horizon > 0) return horizon;
    return grid_side >= 6 ? 30 : 20;
}

env::EnvParams TrainConfig::env_params() const {
    env::EnvParams p;
    p.grid_side = grid_side;
    p.boxes = boxes;
    p.horizon = effective_horizon();
    p.wall_count = wall_count;
    p.pull_steps_min = pull_steps_min;
    p.pull_steps_max = pull_steps_max;
    p.corridor_length = corridor_length;
    p.corridor_horizon = corridor_horizon;
    return p;
}

policy::EncoderConfig TrainConfig::encoder_config() const {
    auto probe = env::make_env(env_kind, env_params());
    return policy::EncoderConfig{probe->observation_dim(), context_history,
                                 probe->max_action_tokens(), probe->vocab().size()};
}

policy::PolicyConfig TrainConfig::policy_config() const {
    const auto enc = encoder_config();
    policy::PolicyConfig cfg;
    cfg.vocab_size = enc.vocab_size;
    cfg.ctx_dim = policy::ContextEncoder(enc).ctx_dim();
    cfg.max_tokens = enc.max_tokens;
    cfg.embed_dim = embed_dim;
    cfg.proj_dim = proj_dim;
    cfg.hidden_dim = hidden_dim;
    return cfg;
}

tensor::AdamwConfig TrainConfig::policy_adamw() const {
    return {policy_lr, adam_beta1, adam_beta2, adam_eps, weight_decay};
}

tensor::AdamwConfig TrainConfig::prm_adamw() const {
    return {prm_lr, adam_beta1, adam_beta2, adam_eps, weight_decay};
}

std::string TrainConfig::serialize() const {
    std::ostringstream os;
    os << "# istar run configuration (flat key = value; unknown keys rejected)\n";
    os << "env = " << env::to_string(env_kind) << '\n';
    os << "estimator = " << to_string(estimator) << '\n';
    os << "istar = " << bool_str(istar) << '\n';
    os << "ablation = " << to_string(ablation) << '\n';
    os << "seed = " << seed << '\n';
    os << "iterations = " << iterations << '\n';
    os << "groups_per_iter = " << groups_per_iter << '\n';
    os << "group_size = " << group_size << '\n';
    os << "beta = " << num_str(beta) << '\n';
    os << "alpha = " << num_str(alpha) << '\n';
    os << "clip_epsilon = " << num_str(clip_epsilon) << '\n';
    os << "policy_lr = " << num_str(policy_lr) << '\n';
    os << "prm_lr = " << num_str(prm_lr) << '\n';
    os << "policy_epochs = " << policy_epochs << '\n';
    os << "prm_epochs = " << prm_epochs << '\n';
    os << "prm_microbatch = " << prm_microbatch << '\n';
    os << "pair_cap = " << pair_cap << '\n';
    os << "preference_threshold = " << num_str(preference_threshold) << '\n';
    os << "rollout_temperature = " << num_str(rollout_temperature) << '\n';
    os << "eval_temperature = " << num_str(eval_temperature) << '\n';
    os << "eval_episodes = " << eval_episodes << '\n';
    os << "step_reward_token_agg = " << (token_agg == prm::TokenAgg::Sum ? "sum" : "mean") << '\n';
    os << "prm_reward_timing = "
       << (prm_reward_timing == RewardTiming::PreUpdate ? "pre_update" : "post_update") << '\n';
    os << "rpp_std = " << bool_str(rpp_std) << '\n';
    os << "loss_norm = " << (loss_norm == LossNorm::TotalSteps ? "total_steps" : "per_traj_mean")
       << '\n';
    os << "grid_side = " << grid_side << '\n';
    os << "boxes = " << boxes << '\n';
    os << "horizon = " << horizon << '\n';
    os << "wall_count = " << wall_count << '\n';
    os << "pull_steps_min = " << pull_steps_min << '\n';
    os << "pull_steps_max = " << pull_steps_max << '\n';
    os << "corridor_length = " << corridor_length << '\n';
    os << "corridor_horizon = " << corridor_horizon << '\n';
    os << "context_history = " << context_history << '\n';
    os << "embed_dim = " << embed_dim << '\n';
    os << "proj_dim = " << proj_dim << '\n';
    os << "hidden_dim = " << hidden_dim << '\n';
    os << "adam_beta1 = " << num_str(adam_beta1) << '\n';
    os << "adam_beta2 = " << num_str(adam_beta2) << '\n';
    os << "adam_eps = " << num_str(adam_eps) << '\n';
    os << "weight_decay = " << num_str(weight_decay) << '\n';
    os << "checkpoint_every = " << checkpoint_every << '\n';
    os << "log_trajectories = " << bool_str(log_trajectories) << '\n';
    os << "log_tables = " << bool_str(log_tables) << '\n';
    return os.str();
}

void TrainConfig::save_file(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("config: cannot write " + path);
    os << serialize();
    if (!os) throw std::runtime_error("config: write failed for " + path);
}

}  // namespace istar::train
