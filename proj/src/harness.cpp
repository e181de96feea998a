#include "istar/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "istar/rng.hpp"
#include "istar/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace istar::harness {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string step_record_line(int episode_id, int step_index, const env::StepRecord& record,
                             const Vocab& vocab) {
    json j;
    j["episode_id"] = episode_id;
    j["step"] = step_index;
    j["observation_tag"] = record.observation_tag;
    json tokens = json::array();
    for (int tok : record.action_tokens) tokens.push_back(vocab.name(tok));
    j["action_tokens"] = tokens;
    j["reward"] = record.reward;
    j["done"] = record.done;
    j["info"] = {{"success", record.info.success},
                 {"invalid_action", record.info.invalid_action},
                 {"boxes_on_target", record.info.boxes_on_target}};
    return j.dump();
}

// --- evaluation -----------------------------------------------------------------

EvalReport evaluate(const policy::PolicyNet& net, env::EnvKind kind,
                    const env::EnvParams& params, const policy::EncoderConfig& enc_cfg,
                    const EvalConfig& cfg) {
    policy::ContextEncoder encoder(enc_cfg);
    EvalReport report;
    report.rows.reserve(static_cast<std::size_t>(cfg.episodes));
    for (int ep = 0; ep < cfg.episodes; ++ep) {
        const std::uint64_t env_seed =
            rng::derive(cfg.seed, rng::Stream::Eval, static_cast<std::uint64_t>(ep), 0);
        auto stream = rng::make_stream(cfg.seed, rng::Stream::Eval,
                                       static_cast<std::uint64_t>(ep), 1);
        auto environment = env::make_env(kind, params);
        auto traj = policy::rollout_trajectory(*environment, net, encoder, env_seed,
                                               cfg.greedy ? 0.0 : cfg.temperature, stream);
        EvalEpisode row;
        row.episode = ep;
        row.env_seed = env_seed;
        row.success = traj.success;
        row.score = traj.outcome_score;
        row.steps = static_cast<int>(traj.steps.size());
        report.rows.push_back(row);
    }
    // aggregates are recomputed from the per-episode rows, nothing else
    if (!report.rows.empty()) {
        double score = 0.0, length = 0.0;
        int successes = 0;
        for (const auto& r : report.rows) {
            score += r.score;
            length += r.steps;
            successes += r.success ? 1 : 0;
        }
        const double n = static_cast<double>(report.rows.size());
        report.success_rate = static_cast<double>(successes) / n;
        report.mean_score = score / n;
        report.mean_episode_length = length / n;
    }
    return report;
}

void write_eval_report(const std::string& csv_path, const EvalReport& report) {
    std::ofstream os(csv_path);
    if (!os) throw std::runtime_error("cannot write " + csv_path);
    os << "episode,env_seed,success,score,steps\n";
    for (const auto& r : report.rows) {
        os << r.episode << ',' << r.env_seed << ',' << (r.success ? 1 : 0) << ','
           << format_double(r.score) << ',' << r.steps << '\n';
    }
}

std::string eval_summary(const EvalReport& report) {
    std::ostringstream os;
    os << "episodes: " << report.rows.size() << '\n'
       << "success_rate: " << format_double(report.success_rate) << '\n'
       << "mean_score: " << format_double(report.mean_score) << '\n'
       << "mean_episode_length: " << format_double(report.mean_episode_length) << '\n';
    return os.str();
}

LoadedPolicy load_policy_checkpoint(const std::string& path) {
    auto ckpt = tensor::load_checkpoint(path);
    const auto& meta = ckpt.meta;
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = meta.find(key);
        if (it == meta.end())
            throw std::runtime_error("checkpoint: missing metadata '" + key + "' in " + path);
        return it->second;
    };
    env::EnvKind kind = env::env_kind_from_string(need("env"));
    env::EnvParams params;
    params.grid_side = std::stoi(need("grid_side"));
    params.boxes = std::stoi(need("boxes"));
    params.horizon = std::stoi(need("horizon"));
    params.wall_count = std::stoi(need("wall_count"));
    params.pull_steps_min = std::stoi(need("pull_steps_min"));
    params.pull_steps_max = std::stoi(need("pull_steps_max"));
    params.corridor_length = std::stoi(need("corridor_length"));
    params.corridor_horizon = std::stoi(need("corridor_horizon"));

    policy::PolicyConfig pcfg;
    pcfg.vocab_size = std::stoi(need("vocab_size"));
    pcfg.ctx_dim = std::stoi(need("ctx_dim"));
    pcfg.max_tokens = std::stoi(need("max_tokens"));
    pcfg.embed_dim = std::stoi(need("embed_dim"));
    pcfg.proj_dim = std::stoi(need("proj_dim"));
    pcfg.hidden_dim = std::stoi(need("hidden_dim"));

    policy::EncoderConfig enc_cfg;
    enc_cfg.history = std::stoi(need("context_history"));
    enc_cfg.max_tokens = pcfg.max_tokens;
    enc_cfg.vocab_size = pcfg.vocab_size;
    {
        auto probe = env::make_env(kind, params);
        enc_cfg.obs_dim = probe->observation_dim();
    }
    if (policy::ContextEncoder(enc_cfg).ctx_dim() != pcfg.ctx_dim)
        throw std::runtime_error("checkpoint: architecture metadata does not match parameters in " +
                                 path);
    if (!ckpt.params.contains("ctx_w") ||
        ckpt.params.at("ctx_w")->shape != std::vector<int>{pcfg.ctx_dim, pcfg.proj_dim})
        throw std::runtime_error("checkpoint: parameter shapes disagree with metadata in " + path);

    return LoadedPolicy{policy::PolicyNet::from_params(pcfg, std::move(ckpt.params)), kind, params,
                        enc_cfg};
}

// --- replay ------------------------------------------------------------------------

ReplayVerdict replay_iteration(const std::string& run_dir, int iteration) {
    ReplayVerdict verdict;
    const auto cfg = train::TrainConfig::load_file((fs::path(run_dir) / "config.cfg").string());
    char log_name[48], meta_name[48];
    std::snprintf(log_name, sizeof(log_name), "iter_%05d.jsonl", iteration);
    std::snprintf(meta_name, sizeof(meta_name), "iter_%05d.meta.json", iteration);
    const auto log_path = fs::path(run_dir) / "trajectories" / log_name;
    const auto meta_path = fs::path(run_dir) / "trajectories" / meta_name;
    std::ifstream meta_is(meta_path);
    if (!meta_is) {
        verdict.first_divergence = "missing meta file " + meta_path.string();
        return verdict;
    }
    json meta = json::parse(meta_is);
    std::map<int, std::uint64_t> task_seed_of_group;
    for (const auto& g : meta.at("groups"))
        task_seed_of_group[g.at("group").get<int>()] = g.at("task_seed").get<std::uint64_t>();

    std::ifstream log_is(log_path);
    if (!log_is) {
        verdict.first_divergence = "missing log file " + log_path.string();
        return verdict;
    }

    const Vocab& vocab = cfg.env_kind == env::EnvKind::Sokoban ? env::sokoban_vocab()
                                                               : env::corridor_vocab();
    const auto params = cfg.env_params();

    std::unique_ptr<env::Env> environment;
    env::Observation current_obs;
    int current_episode = -1;
    std::string line;
    int line_no = 0;
    while (std::getline(log_is, line)) {
        ++line_no;
        if (line.empty()) continue;
        json logged = json::parse(line);
        const int episode_id = logged.at("episode_id").get<int>();
        const int step_index = logged.at("step").get<int>();
        if (episode_id != current_episode) {
            const int group = episode_id / cfg.group_size;
            auto seed_it = task_seed_of_group.find(group);
            if (seed_it == task_seed_of_group.end()) {
                verdict.first_divergence =
                    "line " + std::to_string(line_no) + ": no task seed for group " +
                    std::to_string(group);
                return verdict;
            }
            environment = env::make_env(cfg.env_kind, params);
            current_obs = environment->reset(seed_it->second);
            current_episode = episode_id;
        }
        std::vector<int> tokens;
        for (const auto& name : logged.at("action_tokens"))
            tokens.push_back(vocab.id(name.get<std::string>()));

        env::StepRecord record;
        record.observation_tag = current_obs.tag;
        record.action_tokens = tokens;
        const auto out = environment->step_tokens(tokens);
        record.reward = out.reward;
        record.done = out.done;
        record.info = out.info;
        current_obs = out.observation;

        const std::string regenerated = step_record_line(episode_id, step_index, record, vocab);
        ++verdict.records_checked;
        if (regenerated != line) {
            verdict.first_divergence = "line " + std::to_string(line_no) + ":\n  logged:     " +
                                       line + "\n  regenerated: " + regenerated;
            return verdict;
        }
    }
    verdict.pass = verdict.records_checked > 0;
    if (!verdict.pass) verdict.first_divergence = "log contains no records";
    return verdict;
}

// --- curves -------------------------------------------------------------------------

namespace {

struct MetricsFile {
    std::vector<int> iterations;
    std::map<std::string, std::vector<double>> columns;
};

MetricsFile read_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::string header;
    if (!std::getline(is, header)) throw std::runtime_error("empty metrics file " + path);
    std::vector<std::string> names;
    {
        std::istringstream hs(header);
        std::string field;
        while (std::getline(hs, field, ',')) names.push_back(field);
    }
    MetricsFile out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        std::size_t col = 0;
        while (std::getline(ls, field, ',')) {
            if (col == 0) out.iterations.push_back(std::stoi(field));
            else out.columns[names[col]].push_back(std::stod(field));
            ++col;
        }
    }
    return out;
}

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::vector<int>& iterations,
                    const std::vector<std::string>& labels,
                    const std::vector<std::vector<double>>& series) {
    const int W = 720, H = 420, ml = 60, mr = 16, mt = 32, mb = 40;
    double lo = 0.0, hi = 1.0;
    bool first = true;
    for (const auto& s : series)
        for (double v : s) {
            if (first) { lo = hi = v; first = false; }
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi - lo < 1e-12) hi = lo + 1.0;
    const double x0 = iterations.empty() ? 0 : iterations.front();
    const double x1 = iterations.empty() ? 1 : std::max<double>(iterations.back(), x0 + 1);
    auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - (y - lo) / (hi - lo) * (H - mt - mb); };

    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
       << "</text>\n";
    os << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
       << "' stroke='black'/>\n";
    os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
       << "' stroke='black'/>\n";
    os << "<text x='" << ml - 8 << "' y='" << py(lo) << "' text-anchor='end' font-size='10'>"
       << format_double(lo) << "</text>\n";
    os << "<text x='" << ml - 8 << "' y='" << py(hi) + 4 << "' text-anchor='end' font-size='10'>"
       << format_double(hi) << "</text>\n";
    os << "<text x='" << px(x0) << "' y='" << H - mb + 16 << "' font-size='10'>" << x0
       << "</text>\n";
    os << "<text x='" << px(x1) << "' y='" << H - mb + 16
       << "' text-anchor='end' font-size='10'>" << x1 << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        os << "<polyline fill='none' stroke='" << palette[s % 8] << "' stroke-width='1.5' points='";
        for (std::size_t i = 0; i < series[s].size() && i < iterations.size(); ++i)
            os << px(iterations[i]) << ',' << py(series[s][i]) << ' ';
        os << "'/>\n";
        os << "<text x='" << W - mr - 4 << "' y='" << mt + 14 * (s + 1)
           << "' text-anchor='end' font-size='11' fill='" << palette[s % 8] << "'>" << labels[s]
           << "</text>\n";
    }
    os << "</svg>\n";
    std::ofstream file(path);
    if (!file) throw std::runtime_error("cannot write " + path);
    file << os.str();
}

}  // namespace

CurveResult emit_curves(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    if (run_dirs.empty()) throw std::invalid_argument("emit_curves: no run directories");
    fs::create_directories(out_dir);

    static const char* kSeries[] = {"mean_episode_reward", "mean_step_reward",
                                    "mean_episode_length", "success_rate"};
    std::vector<MetricsFile> metrics;
    std::vector<std::string> labels;
    for (const auto& dir : run_dirs) {
        metrics.push_back(read_metrics((fs::path(dir) / "metrics.csv").string()));
        labels.push_back(fs::path(dir).filename().string());
    }

    // align on the intersection of iteration ranges
    int lo = metrics[0].iterations.empty() ? 0 : metrics[0].iterations.front();
    int hi = metrics[0].iterations.empty() ? -1 : metrics[0].iterations.back();
    CurveResult result;
    for (const auto& m : metrics) {
        if (m.iterations.empty()) throw std::runtime_error("emit_curves: a run has no metrics rows");
        lo = std::max(lo, m.iterations.front());
        hi = std::min(hi, m.iterations.back());
        if (m.iterations.front() != metrics[0].iterations.front() ||
            m.iterations.back() != metrics[0].iterations.back())
            result.range_warning = true;
    }
    if (hi < lo) throw std::runtime_error("emit_curves: iteration ranges do not intersect");
    for (int it = lo; it <= hi; ++it) result.iterations.push_back(it);

    for (const char* series : kSeries) {
        std::vector<std::vector<double>> per_run;
        for (const auto& m : metrics) {
            std::vector<double> values;
            const auto& col = m.columns.at(series);
            for (std::size_t i = 0; i < m.iterations.size(); ++i)
                if (m.iterations[i] >= lo && m.iterations[i] <= hi)
                    values.push_back(col[i]);
            per_run.push_back(std::move(values));
        }
        result.series[series] = per_run;
    }

    // combined CSV: iteration, then <series>.<run> columns
    std::ostringstream csv;
    csv << "iteration";
    for (const char* series : kSeries)
        for (const auto& label : labels) csv << ',' << series << '.' << label;
    csv << '\n';
    for (std::size_t i = 0; i < result.iterations.size(); ++i) {
        csv << result.iterations[i];
        for (const char* series : kSeries)
            for (std::size_t r = 0; r < labels.size(); ++r)
                csv << ',' << format_double(result.series[series][r][i]);
        csv << '\n';
    }
    {
        std::ofstream os((fs::path(out_dir) / "curves.csv").string());
        if (!os) throw std::runtime_error("cannot write curves.csv");
        os << csv.str();
    }
    for (const char* series : kSeries) {
        write_svg_plot((fs::path(out_dir) / (std::string(series) + ".svg")).string(), series,
                       result.iterations, labels, result.series[series]);
    }
    return result;
}

// --- gradcheck ------------------------------------------------------------------------

namespace {

policy::PolicyConfig gradcheck_policy_config() {
    policy::PolicyConfig cfg;
    cfg.vocab_size = 5;
    cfg.ctx_dim = 2 * 4 + 3 * 5;  // encoder: obs_dim 4, history 2, L 3, vocab 5
    cfg.max_tokens = 3;
    cfg.embed_dim = 5;
    cfg.proj_dim = 6;
    cfg.hidden_dim = 10;
    return cfg;
}

env::Trajectory synthetic_trajectory(const policy::PolicyNet& behavior,
                                     const policy::ContextEncoder& encoder, int steps,
                                     std::mt19937_64& g) {
    env::Trajectory traj;
    traj.kind = env::EnvKind::Corridor;  // tag only; contexts come from the records
    std::vector<std::vector<double>> history;
    std::vector<int> prev;
    for (int t = 0; t < steps; ++t) {
        env::StepRecord step;
        step.observation.resize(4);
        for (auto& x : step.observation) x = 2.0 * rng::uniform_real(g) - 1.0;
        history.push_back(step.observation);
        const std::size_t first = history.size() > 2 ? history.size() - 2 : 0;
        const auto ctx = encoder.encode(
            std::span<const std::vector<double>>(history.data() + first, history.size() - first),
            prev);
        auto action = behavior.sample_action(ctx, 1.0, g);
        step.action_tokens = action.tokens;
        step.token_logprobs = action.logprobs;
        step.reward = rng::uniform_real(g) - 0.5;
        step.done = (t + 1 == steps);
        traj.steps.push_back(step);
        prev = action.tokens;
    }
    traj.complete = true;
    traj.success = rng::uniform_real(g) < 0.5;
    traj.outcome_score = traj.success ? 1.0 : 0.0;
    return traj;
}

}  // namespace

std::vector<GradCheckRow> gradcheck(int instances_per_loss, std::uint64_t seed, double tolerance) {
    const policy::EncoderConfig enc_cfg{4, 2, 3, 5};
    policy::ContextEncoder encoder(enc_cfg);
    const auto pcfg = gradcheck_policy_config();

    std::vector<GradCheckRow> rows;

    // action NLL
    {
        GradCheckRow row{"nll", instances_per_loss, 0.0, false};
        for (int i = 0; i < instances_per_loss; ++i) {
            auto g = rng::make_stream(seed, rng::Stream::GradCheck, 1, static_cast<std::uint64_t>(i));
            auto net = policy::PolicyNet::init(pcfg, g);
            std::vector<double> ctx(static_cast<std::size_t>(pcfg.ctx_dim));
            for (auto& x : ctx) x = 2.0 * rng::uniform_real(g) - 1.0;
            auto action = net.sample_action(ctx, 1.0, g);
            auto loss_fn = [&]() { return tensor::neg(net.action_log_prob(ctx, action)); };
            row.max_rel_error = std::max(
                row.max_rel_error,
                tensor::finite_diff_check(net.params(), loss_fn,
                                          {32, 1e-5, seed + static_cast<std::uint64_t>(i)}));
        }
        row.pass = row.max_rel_error < tolerance;
        rows.push_back(row);
    }

    // preference pair loss
    {
        GradCheckRow row{"dpo_pair", instances_per_loss, 0.0, false};
        for (int i = 0; i < instances_per_loss; ++i) {
            auto g = rng::make_stream(seed, rng::Stream::GradCheck, 2, static_cast<std::uint64_t>(i));
            auto behavior = policy::PolicyNet::init(pcfg, g);
            auto snapshot = policy::make_snapshot(behavior);
            auto prm_net = policy::PolicyNet::init(pcfg, g);
            auto pos = synthetic_trajectory(behavior, encoder, 3, g);
            auto neg = synthetic_trajectory(behavior, encoder, 4, g);
            prm::PreferencePair pair{&pos, &neg, 0};
            auto loss_fn = [&]() {
                return prm::dpo_pair_loss(prm_net, snapshot, pair, 0.05, encoder);
            };
            row.max_rel_error = std::max(
                row.max_rel_error,
                tensor::finite_diff_check(prm_net.params(), loss_fn,
                                          {32, 1e-5, seed + static_cast<std::uint64_t>(i)}));
        }
        row.pass = row.max_rel_error < tolerance;
        rows.push_back(row);
    }

    // clipped surrogate
    {
        GradCheckRow row{"policy_surrogate", instances_per_loss, 0.0, false};
        for (int i = 0; i < instances_per_loss; ++i) {
            auto g = rng::make_stream(seed, rng::Stream::GradCheck, 3, static_cast<std::uint64_t>(i));
            auto behavior = policy::PolicyNet::init(pcfg, g);
            auto net = policy::PolicyNet::init(pcfg, g);  // evaluated net differs from behavior
            std::vector<env::RolloutGroup> groups(2);
            std::vector<adv::AdvantageTable> tables;
            for (auto& group : groups) {
                group.task_seed = g();
                for (int t = 0; t < 2; ++t)
                    group.trajectories.push_back(
                        synthetic_trajectory(behavior, encoder, 2 + static_cast<int>(g() % 3), g));
                std::vector<double> episode;
                std::vector<std::vector<std::vector<double>>> units(group.trajectories.size());
                for (std::size_t ti = 0; ti < group.trajectories.size(); ++ti) {
                    episode.push_back(2.0 * rng::uniform_real(g) - 1.0);
                    for (std::size_t st = 0; st < group.trajectories[ti].steps.size(); ++st)
                        units[ti].push_back({2.0 * rng::uniform_real(g) - 1.0});
                }
                tables.push_back(adv::combine_adv(episode, units, 1.0));
            }
            auto loss_fn = [&]() {
                return tensor::neg(policy_objective_node(net, groups, tables, 0.2,
                                                         train::LossNorm::TotalSteps, false,
                                                         encoder, nullptr));
            };
            row.max_rel_error = std::max(
                row.max_rel_error,
                tensor::finite_diff_check(net.params(), loss_fn,
                                          {32, 1e-5, seed + static_cast<std::uint64_t>(i)}));
        }
        row.pass = row.max_rel_error < tolerance;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace istar::harness
