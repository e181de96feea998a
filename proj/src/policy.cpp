#include "istar/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "istar/rng.hpp"

namespace istar::policy {

using tensor::Ptr;

// --- context encoder ---------------------------------------------------------

ContextEncoder::ContextEncoder(EncoderConfig cfg) : cfg_(cfg) {
    if (cfg_.obs_dim <= 0 || cfg_.history <= 0 || cfg_.max_tokens < 2 || cfg_.vocab_size <= 0)
        throw std::invalid_argument("ContextEncoder: invalid configuration");
}

std::vector<double> ContextEncoder::encode(std::span<const std::vector<double>> obs_history,
                                           const std::vector<int>& prev_action_tokens) const {
    std::vector<double> ctx(static_cast<std::size_t>(ctx_dim()), 0.0);
    const int K = cfg_.history;
    const int take = std::min<int>(K, static_cast<int>(obs_history.size()));
    // most recent observation occupies the last slot; older slots zero-pad
    for (int i = 0; i < take; ++i) {
        const auto& obs = obs_history[obs_history.size() - static_cast<std::size_t>(take - i)];
        if (static_cast<int>(obs.size()) != cfg_.obs_dim)
            throw std::invalid_argument("ContextEncoder: observation dimension mismatch");
        std::copy(obs.begin(), obs.end(),
                  ctx.begin() + static_cast<std::ptrdiff_t>((K - take + i) * cfg_.obs_dim));
    }
    const std::size_t base = static_cast<std::size_t>(K * cfg_.obs_dim);
    for (std::size_t j = 0; j < prev_action_tokens.size(); ++j) {
        if (static_cast<int>(j) >= cfg_.max_tokens) break;
        const int tok = prev_action_tokens[j];
        if (tok < 0 || tok >= cfg_.vocab_size)
            throw std::invalid_argument("ContextEncoder: previous-action token out of vocabulary");
        ctx[base + j * static_cast<std::size_t>(cfg_.vocab_size) + static_cast<std::size_t>(tok)] = 1.0;
    }
    return ctx;
}

std::vector<double> ContextEncoder::context_at(const env::Trajectory& traj, int step) const {
    if (step < 0 || step >= static_cast<int>(traj.steps.size()))
        throw std::invalid_argument("ContextEncoder: step index out of range");
    const int first = std::max(0, step - cfg_.history + 1);
    std::vector<std::vector<double>> window;
    window.reserve(static_cast<std::size_t>(step - first + 1));
    for (int t = first; t <= step; ++t)
        window.push_back(traj.steps[static_cast<std::size_t>(t)].observation);
    const std::vector<int> prev =
        step > 0 ? traj.steps[static_cast<std::size_t>(step - 1)].action_tokens : std::vector<int>{};
    return encode(window, prev);
}

// --- policy net ----------------------------------------------------------------

PolicyNet::PolicyNet(PolicyConfig cfg, tensor::ParameterSet params)
    : cfg_(cfg), params_(std::move(params)) {}

PolicyNet PolicyNet::init(const PolicyConfig& cfg, std::mt19937_64& rng) {
    if (cfg.vocab_size < 2 || cfg.ctx_dim <= 0 || cfg.max_tokens < 2)
        throw std::invalid_argument("PolicyNet: invalid configuration");
    tensor::ParameterSet p;
    auto w_range = [](int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    p.add("embed", tensor::uniform({cfg.vocab_size, cfg.embed_dim}, -0.1, 0.1, rng));
    p.add("pos", tensor::uniform({cfg.max_tokens, cfg.embed_dim}, -0.1, 0.1, rng));
    p.add("ctx_w", tensor::uniform({cfg.ctx_dim, cfg.proj_dim}, -w_range(cfg.ctx_dim),
                                   w_range(cfg.ctx_dim), rng));
    p.add("ctx_b", tensor::zeros({cfg.proj_dim}));
    const int in_dim = cfg.proj_dim + cfg.embed_dim;
    p.add("l1_w", tensor::uniform({in_dim, cfg.hidden_dim}, -w_range(in_dim), w_range(in_dim), rng));
    p.add("l1_b", tensor::zeros({cfg.hidden_dim}));
    p.add("l2_w", tensor::uniform({cfg.hidden_dim, cfg.hidden_dim}, -w_range(cfg.hidden_dim),
                                  w_range(cfg.hidden_dim), rng));
    p.add("l2_b", tensor::zeros({cfg.hidden_dim}));
    p.add("head_w", tensor::uniform({cfg.hidden_dim, cfg.vocab_size}, -w_range(cfg.hidden_dim),
                                    w_range(cfg.hidden_dim), rng));
    p.add("head_b", tensor::zeros({cfg.vocab_size}));
    // direct position-conditional output bias: position-dependent token
    // structure (verb slot, direction slot) need not route through the MLP
    p.add("pos_head", tensor::zeros({cfg.max_tokens, cfg.vocab_size}));
    return PolicyNet(cfg, std::move(p));
}

PolicyNet PolicyNet::from_params(const PolicyConfig& cfg, tensor::ParameterSet params) {
    return PolicyNet(cfg, std::move(params));
}

Ptr PolicyNet::token_logprob_rows(std::span<const DecodeRow> rows) const {
    const int B = static_cast<int>(rows.size());
    if (B == 0) throw std::invalid_argument("PolicyNet: empty row batch");
    std::vector<double> ctx_data(static_cast<std::size_t>(B) * cfg_.ctx_dim);
    std::vector<std::vector<int>> prefixes(rows.size());
    std::vector<int> positions(rows.size());
    std::vector<int> targets(rows.size());
    for (int r = 0; r < B; ++r) {
        const auto& row = rows[static_cast<std::size_t>(r)];
        if (static_cast<int>(row.ctx->size()) != cfg_.ctx_dim)
            throw std::invalid_argument("PolicyNet: context dimension mismatch");
        std::copy(row.ctx->begin(), row.ctx->end(),
                  ctx_data.begin() + static_cast<std::ptrdiff_t>(r) * cfg_.ctx_dim);
        for (int tok : row.prefix) {
            if (tok < 0 || tok >= cfg_.vocab_size)
                throw std::invalid_argument("PolicyNet: token outside vocabulary");
        }
        if (row.target < 0 || row.target >= cfg_.vocab_size)
            throw std::invalid_argument("PolicyNet: token outside vocabulary");
        prefixes[static_cast<std::size_t>(r)] = row.prefix;
        positions[static_cast<std::size_t>(r)] = row.position;
        targets[static_cast<std::size_t>(r)] = row.target;
    }
    auto ctx_mat = tensor::from_values({B, cfg_.ctx_dim}, std::move(ctx_data));
    auto proj = tensor::affine(ctx_mat, params_.at("ctx_w"), params_.at("ctx_b"));
    auto pe = tensor::prefix_embed(params_.at("embed"), params_.at("pos"), prefixes, positions);
    auto h1 = tensor::tanh_op(tensor::affine(tensor::concat_cols(proj, pe),
                                             params_.at("l1_w"), params_.at("l1_b")));
    auto h2 = tensor::tanh_op(tensor::affine(h1, params_.at("l2_w"), params_.at("l2_b")));
    auto logits = tensor::add(tensor::affine(h2, params_.at("head_w"), params_.at("head_b")),
                              tensor::gather_rows(params_.at("pos_head"), positions));
    return tensor::pick(tensor::log_softmax(logits, 1), targets);
}

std::vector<double> PolicyNet::next_token_logits(const std::vector<double>& ctx,
                                                 const std::vector<int>& prefix,
                                                 int position) const {
    tensor::NoGradGuard guard;
    DecodeRow row{&ctx, prefix, position, 0};
    // reuse the batched path up to the logits; cheapest correct route is to
    // rebuild it here without pick/log_softmax
    std::vector<double> ctx_data(ctx);
    auto ctx_mat = tensor::from_values({1, cfg_.ctx_dim}, std::move(ctx_data));
    auto proj = tensor::affine(ctx_mat, params_.at("ctx_w"), params_.at("ctx_b"));
    auto pe = tensor::prefix_embed(params_.at("embed"), params_.at("pos"), {row.prefix},
                                   {row.position});
    auto h1 = tensor::tanh_op(tensor::affine(tensor::concat_cols(proj, pe),
                                             params_.at("l1_w"), params_.at("l1_b")));
    auto h2 = tensor::tanh_op(tensor::affine(h1, params_.at("l2_w"), params_.at("l2_b")));
    auto logits = tensor::add(tensor::affine(h2, params_.at("head_w"), params_.at("head_b")),
                              tensor::gather_rows(params_.at("pos_head"), {row.position}));
    return logits->values;
}

namespace {

std::vector<double> log_softmax_values(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double x : logits) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : logits) z += std::exp(x - mx);
    const double lz = mx + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
    return out;
}

}  // namespace

ActionSequence PolicyNet::sample_action(const std::vector<double>& ctx, double temperature,
                                        std::mt19937_64& rng) const {
    if (!(temperature > 0.0)) throw std::invalid_argument("sample_action: temperature must be > 0");
    ActionSequence action;
    const int end_tok = cfg_.vocab_size - 1;  // END is the last vocabulary entry
    for (int k = 0; k < cfg_.max_tokens; ++k) {
        if (k == cfg_.max_tokens - 1) {
            // token budget exhausted: END is forced with probability one
            action.tokens.push_back(end_tok);
            action.logprobs.push_back(0.0);
            break;
        }
        const auto logits = next_token_logits(ctx, action.tokens, k);
        const auto lsm = log_softmax_values(logits);
        int tok;
        if (temperature == 1.0) {
            std::vector<double> probs(lsm.size());
            for (std::size_t i = 0; i < lsm.size(); ++i) probs[i] = std::exp(lsm[i]);
            tok = rng::sample_categorical(rng, probs);
        } else {
            std::vector<double> scaled(logits.size());
            for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / temperature;
            const auto lsm_t = log_softmax_values(scaled);
            std::vector<double> probs(lsm_t.size());
            for (std::size_t i = 0; i < lsm_t.size(); ++i) probs[i] = std::exp(lsm_t[i]);
            tok = rng::sample_categorical(rng, probs);
        }
        // recorded log-probs are always those of the unscaled distribution
        action.tokens.push_back(tok);
        action.logprobs.push_back(lsm[static_cast<std::size_t>(tok)]);
        if (tok == end_tok) break;
    }
    return action;
}

ActionSequence PolicyNet::greedy_action(const std::vector<double>& ctx) const {
    ActionSequence action;
    const int end_tok = cfg_.vocab_size - 1;
    for (int k = 0; k < cfg_.max_tokens; ++k) {
        if (k == cfg_.max_tokens - 1) {
            action.tokens.push_back(end_tok);
            action.logprobs.push_back(0.0);
            break;
        }
        const auto logits = next_token_logits(ctx, action.tokens, k);
        const auto lsm = log_softmax_values(logits);
        const int tok = static_cast<int>(std::max_element(logits.begin(), logits.end()) -
                                         logits.begin());
        action.tokens.push_back(tok);
        action.logprobs.push_back(lsm[static_cast<std::size_t>(tok)]);
        if (tok == end_tok) break;
    }
    return action;
}

void PolicyNet::check_action(const ActionSequence& action) const {
    if (action.tokens.empty()) throw std::invalid_argument("action: empty token sequence");
    if (static_cast<int>(action.tokens.size()) > cfg_.max_tokens)
        throw std::invalid_argument("action: token budget exceeded");
    for (int tok : action.tokens)
        if (tok < 0 || tok >= cfg_.vocab_size)
            throw std::invalid_argument("action: token outside vocabulary");
}

int PolicyNet::scored_positions(const ActionSequence& action) const {
    check_action(action);
    return std::min<int>(static_cast<int>(action.tokens.size()), cfg_.max_tokens - 1);
}

Ptr PolicyNet::action_log_prob(const std::vector<double>& ctx, const ActionSequence& action) const {
    const int scored = scored_positions(action);
    std::vector<DecodeRow> rows;
    rows.reserve(static_cast<std::size_t>(scored));
    for (int k = 0; k < scored; ++k) {
        rows.push_back({&ctx,
                        std::vector<int>(action.tokens.begin(), action.tokens.begin() + k),
                        k, action.tokens[static_cast<std::size_t>(k)]});
    }
    return tensor::sum(token_logprob_rows(rows));
}

double PolicyNet::action_log_prob_value(const std::vector<double>& ctx,
                                        const ActionSequence& action) const {
    tensor::NoGradGuard guard;
    return action_log_prob(ctx, action)->scalar();
}

Ptr PolicyNet::trajectory_log_prob(const env::Trajectory& traj,
                                   const ContextEncoder& encoder) const {
    if (encoder.ctx_dim() != cfg_.ctx_dim)
        throw std::invalid_argument("trajectory_log_prob: encoder/policy context mismatch");
    if (traj.steps.empty()) throw std::invalid_argument("trajectory_log_prob: empty trajectory");
    std::vector<std::vector<double>> contexts;
    contexts.reserve(traj.steps.size());
    std::vector<DecodeRow> rows;
    for (int t = 0; t < static_cast<int>(traj.steps.size()); ++t) {
        contexts.push_back(encoder.context_at(traj, t));
    }
    for (int t = 0; t < static_cast<int>(traj.steps.size()); ++t) {
        const auto& step = traj.steps[static_cast<std::size_t>(t)];
        ActionSequence a{step.action_tokens, {}};
        const int scored = scored_positions(a);
        for (int k = 0; k < scored; ++k) {
            rows.push_back({&contexts[static_cast<std::size_t>(t)],
                            std::vector<int>(a.tokens.begin(), a.tokens.begin() + k),
                            k, a.tokens[static_cast<std::size_t>(k)]});
        }
    }
    return tensor::sum(token_logprob_rows(rows));
}

double PolicyNet::trajectory_log_prob_value(const env::Trajectory& traj,
                                            const ContextEncoder& encoder) const {
    tensor::NoGradGuard guard;
    return trajectory_log_prob(traj, encoder)->scalar();
}

// --- snapshots --------------------------------------------------------------------

Snapshot make_snapshot(PolicyNet& net) {
    net.version_counter_ += 1;
    auto copy = std::make_shared<PolicyNet>(
        PolicyNet::from_params(net.config(), net.params().clone()));
    copy->set_version_counter(net.version_counter_);
    return Snapshot{std::move(copy), net.version_counter_};
}

PolicyNet restore(const Snapshot& snapshot) {
    if (!snapshot.net) throw std::invalid_argument("restore: empty snapshot");
    PolicyNet net = PolicyNet::from_params(snapshot.net->config(), snapshot.net->params().clone());
    net.set_version_counter(snapshot.version);
    return net;
}

env::Trajectory rollout_trajectory(env::Env& environment, const PolicyNet& net,
                                   const ContextEncoder& encoder, std::uint64_t env_seed,
                                   double temperature, std::mt19937_64& rng,
                                   std::uint64_t snapshot_version) {
    env::Trajectory traj;
    traj.kind = environment.kind();
    traj.env_seed = env_seed;
    traj.snapshot_version = snapshot_version;

    auto obs = environment.reset(env_seed);
    std::vector<std::vector<double>> history{obs.features};
    std::vector<int> prev_action;
    const int K = encoder.config().history;

    while (!environment.done()) {
        const std::size_t first = history.size() > static_cast<std::size_t>(K)
                                      ? history.size() - static_cast<std::size_t>(K)
                                      : 0;
        const auto ctx = encoder.encode(
            std::span<const std::vector<double>>(history.data() + first, history.size() - first),
            prev_action);
        const ActionSequence action =
            temperature > 0.0 ? net.sample_action(ctx, temperature, rng) : net.greedy_action(ctx);
        const auto out = environment.step_tokens(action.tokens);

        env::StepRecord step;
        step.observation = obs.features;
        step.observation_tag = obs.tag;
        step.action_tokens = action.tokens;
        step.token_logprobs = action.logprobs;
        step.reward = out.reward;
        step.done = out.done;
        step.info = out.info;
        traj.steps.push_back(std::move(step));

        obs = out.observation;
        history.push_back(obs.features);
        prev_action = action.tokens;
    }
    traj.complete = true;
    const auto res = env::outcome_reward(traj);
    traj.outcome_score = res.score;
    traj.success = res.success;
    return traj;
}

}  // namespace istar::policy
