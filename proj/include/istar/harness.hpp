#pragma once

// Operational surface: evaluation, deterministic replay verification, curve
// emission, and the serialization helpers shared with the trainer's logs.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "istar/config.hpp"
#include "istar/env.hpp"
#include "istar/policy.hpp"

namespace istar::harness {

// --- log formats -------------------------------------------------------------

std::string format_double(double v);  // %.17g, used by every CSV writer

// One JSON Lines record per environment step:
// {episode_id, step, observation_tag, action_tokens, reward, done, info}
std::string step_record_line(int episode_id, int step_index, const env::StepRecord& record,
                             const Vocab& vocab);

// --- evaluation ---------------------------------------------------------------

struct EvalConfig {
    int episodes = 200;
    std::uint64_t seed = 0;
    double temperature = 0.4;
    bool greedy = false;
};

struct EvalEpisode {
    int episode = 0;
    std::uint64_t env_seed = 0;
    bool success = false;
    double score = 0.0;
    int steps = 0;
};

struct EvalReport {
    std::vector<EvalEpisode> rows;
    double success_rate = 0.0;
    double mean_score = 0.0;
    double mean_episode_length = 0.0;
};

EvalReport evaluate(const policy::PolicyNet& net, env::EnvKind kind,
                    const env::EnvParams& params, const policy::EncoderConfig& enc_cfg,
                    const EvalConfig& cfg);

void write_eval_report(const std::string& csv_path, const EvalReport& report);
std::string eval_summary(const EvalReport& report);

// Loads a policy checkpoint (parameters + architecture/env metadata).
struct LoadedPolicy {
    policy::PolicyNet net;
    env::EnvKind kind;
    env::EnvParams params;
    policy::EncoderConfig enc_cfg;
};
LoadedPolicy load_policy_checkpoint(const std::string& path);

// --- replay -------------------------------------------------------------------

struct ReplayVerdict {
    bool pass = false;
    int records_checked = 0;
    std::string first_divergence;  // empty on PASS
};

// Re-executes one iteration's episodes from the logged seeds and actions and
// byte-compares the regenerated records with the stored log.
ReplayVerdict replay_iteration(const std::string& run_dir, int iteration);

// --- curves ---------------------------------------------------------------------

// Reads each run's metrics.csv, aligns the iteration ranges on their
// intersection, and emits one combined CSV per series plus static SVG plots.
// Series: episode reward, mean implicit step reward, episode length, success.
struct CurveResult {
    std::vector<int> iterations;
    std::map<std::string, std::vector<std::vector<double>>> series;  // name -> [run][iter]
    bool range_warning = false;
};

CurveResult emit_curves(const std::vector<std::string>& run_dirs, const std::string& out_dir);

// --- gradcheck -----------------------------------------------------------------

struct GradCheckRow {
    std::string loss;
    int instances = 0;
    double max_rel_error = 0.0;
    bool pass = false;
};

// Finite-difference sweep over the three loss families used anywhere in the
// artifact: action NLL, the preference pair loss, and the clipped surrogate.
std::vector<GradCheckRow> gradcheck(int instances_per_loss, std::uint64_t seed,
                                    double tolerance = 1e-4);

}  // namespace istar::harness
