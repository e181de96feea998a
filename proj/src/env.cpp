#include "istar/env.hpp"

#include <algorithm>
#include <stdexcept>

#include "istar/rng.hpp"

namespace istar::env {

EnvKind env_kind_from_string(const std::string& s) {
    if (s == "sokoban") return EnvKind::Sokoban;
    if (s == "corridor") return EnvKind::Corridor;
    throw std::invalid_argument("unknown environment '" + s + "' (expected sokoban|corridor)");
}

std::string to_string(EnvKind kind) {
    return kind == EnvKind::Sokoban ? "sokoban" : "corridor";
}

void EnvParams::validate(EnvKind kind) const {
    if (kind == EnvKind::Sokoban) {
        if (grid_side < 4) throw std::invalid_argument("sokoban: grid side must be >= 4");
        if (boxes < 1) throw std::invalid_argument("sokoban: boxes must be >= 1");
        if (horizon < 1) throw std::invalid_argument("sokoban: horizon must be >= 1");
        if (wall_count < 0) throw std::invalid_argument("sokoban: wall_count must be >= 0");
    } else {
        if (corridor_length < 3) throw std::invalid_argument("corridor: length must be >= 3");
        if (corridor_horizon < 1) throw std::invalid_argument("corridor: horizon must be >= 1");
    }
}

const Vocab& sokoban_vocab() {
    static const Vocab v{{"MOVE", "PUSH", "UP", "DOWN", "LEFT", "RIGHT", "END"}, 6};
    return v;
}

const Vocab& corridor_vocab() {
    static const Vocab v{{"LEFT", "RIGHT", "GRAB", "END"}, 3};
    return v;
}

// --- sokoban ---------------------------------------------------------------

namespace {

constexpr int kDirRow[4] = {-1, 1, 0, 0};  // UP DOWN LEFT RIGHT
constexpr int kDirCol[4] = {0, 0, -1, 1};

class SokobanEnv final : public Env {
public:
    explicit SokobanEnv(const EnvParams& params) : p_(params) {
        p_.validate(EnvKind::Sokoban);
        if (p_.pull_steps_min <= 0) p_.pull_steps_min = p_.grid_side;
        if (p_.pull_steps_max <= 0) p_.pull_steps_max = 3 * p_.grid_side;
        if (p_.pull_steps_max < p_.pull_steps_min) p_.pull_steps_max = p_.pull_steps_min;
    }

    EnvKind kind() const override { return EnvKind::Sokoban; }
    const Vocab& vocab() const override { return sokoban_vocab(); }
    // agent-centered window over {wall, floor, box, target, box-on-target};
    // width 2*side-1 so the whole board stays visible from any agent cell
    int observation_dim() const override {
        const int w = 2 * p_.grid_side - 1;
        return 5 * w * w;
    }
    int max_action_tokens() const override { return 3; }  // verb, direction, END
    int horizon() const override { return p_.horizon; }
    bool done() const override { return done_; }
    int steps_taken() const override { return steps_; }

    Observation reset(std::uint64_t seed) override {
        auto gen = rng::make_stream(seed, rng::Stream::EnvGen);
        for (int attempt = 0; attempt < 100; ++attempt) {
            if (try_generate(gen)) {
                steps_ = 0;
                done_ = false;
                success_ = false;
                return observe();
            }
        }
        throw std::runtime_error("sokoban: failed to generate a non-trivial solvable room (side=" +
                                 std::to_string(p_.grid_side) + ", boxes=" +
                                 std::to_string(p_.boxes) + ", seed=" + std::to_string(seed) + ")");
    }

    StepOutcome step_tokens(const std::vector<int>& tokens) override {
        if (done_) throw std::invalid_argument("sokoban: step after episode end");
        steps_ += 1;

        StepOutcome out;
        int verb = -1, dir = -1;
        const bool well_formed = parse_action(tokens, verb, dir);
        double reward = -p_.step_penalty;
        bool moved_ok = false;

        if (well_formed) {
            const int before = boxes_on_target();
            moved_ok = apply(verb, dir);
            if (moved_ok) {
                reward += static_cast<double>(boxes_on_target() - before);
            }
        }
        if (!well_formed || !moved_ok) {
            reward -= p_.invalid_penalty;
            out.info.invalid_action = true;
        }
        if (boxes_on_target() == p_.boxes) {
            reward += p_.solve_bonus;
            done_ = true;
            success_ = true;
        }
        if (steps_ >= p_.horizon) done_ = true;

        out.reward = reward;
        out.done = done_;
        out.info.success = success_;
        out.info.boxes_on_target = boxes_on_target();
        out.observation = observe();
        return out;
    }

    Observation observe() const override {
        const int side = p_.grid_side;
        const int w = 2 * side - 1;
        const int ar = agent_ / side, ac = agent_ % side;
        Observation obs;
        obs.features.assign(static_cast<std::size_t>(observation_dim()), 0.0);
        std::string tag;
        tag.reserve(static_cast<std::size_t>(side * (side + 1)));
        for (int r = 0; r < side; ++r) {
            for (int c = 0; c < side; ++c) {
                const int i = r * side + c;
                char glyph;
                if (wall_[i]) glyph = '#';
                else if (box_[i]) glyph = target_[i] ? '*' : '$';
                else if (i == agent_) glyph = target_[i] ? '+' : '@';
                else if (target_[i]) glyph = '.';
                else glyph = '_';
                tag.push_back(glyph);
            }
            if (r + 1 < side) tag.push_back('\n');
        }
        // feature window centered on the agent; off-board cells read as wall
        for (int wr = 0; wr < w; ++wr) {
            for (int wc = 0; wc < w; ++wc) {
                const int r = ar + wr - (side - 1);
                const int c = ac + wc - (side - 1);
                int channel;
                if (r < 0 || r >= side || c < 0 || c >= side) {
                    channel = 0;
                } else {
                    const int i = r * side + c;
                    if (wall_[i]) channel = 0;
                    else if (box_[i]) channel = target_[i] ? 4 : 2;
                    else if (target_[i]) channel = 3;
                    else channel = 1;
                }
                obs.features[static_cast<std::size_t>(channel * w * w + wr * w + wc)] = 1.0;
            }
        }
        obs.tag = std::move(tag);
        return obs;
    }

private:
    bool in_bounds(int r, int c) const {
        return r >= 0 && r < p_.grid_side && c >= 0 && c < p_.grid_side;
    }
    int at(int r, int c) const { return r * p_.grid_side + c; }

    int boxes_on_target() const {
        int n = 0;
        for (std::size_t i = 0; i < box_.size(); ++i)
            if (box_[i] && target_[i]) ++n;
        return n;
    }

    bool parse_action(const std::vector<int>& tokens, int& verb, int& dir) const {
        const Vocab& v = vocab();
        for (int t : tokens)
            if (!v.valid(t)) return false;  // out-of-alphabet counts as invalid
        if (tokens.size() != 3) return false;
        if (tokens[2] != v.end_id) return false;
        if (tokens[0] != 0 && tokens[0] != 1) return false;       // MOVE | PUSH
        if (tokens[1] < 2 || tokens[1] > 5) return false;         // UP..RIGHT
        verb = tokens[0];
        dir = tokens[1] - 2;
        return true;
    }

    // Applies a parsed action; returns false when blocked (state unchanged).
    bool apply(int verb, int dir) {
        const int side = p_.grid_side;
        const int ar = agent_ / side, ac = agent_ % side;
        const int nr = ar + kDirRow[dir], nc = ac + kDirCol[dir];
        if (!in_bounds(nr, nc)) return false;
        const int next = at(nr, nc);
        if (wall_[next]) return false;

        if (box_[next]) {
            if (verb != 1) return false;  // Move is blocked by a box
            const int br = nr + kDirRow[dir], bc = nc + kDirCol[dir];
            if (!in_bounds(br, bc)) return false;
            const int behind = at(br, bc);
            if (wall_[behind] || box_[behind]) return false;  // no chain pushing
            box_[next] = 0;
            box_[behind] = 1;
            agent_ = next;
            return true;
        }
        // Push with no adjacent box behaves like Move.
        agent_ = next;
        return true;
    }

    bool try_generate(std::mt19937_64& gen) {
        const int side = p_.grid_side;
        const int cells = side * side;
        wall_.assign(static_cast<std::size_t>(cells), 0);
        target_.assign(static_cast<std::size_t>(cells), 0);
        box_.assign(static_cast<std::size_t>(cells), 0);
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c)
                if (r == 0 || c == 0 || r == side - 1 || c == side - 1) wall_[at(r, c)] = 1;

        std::vector<int> interior;
        for (int i = 0; i < cells; ++i)
            if (!wall_[i]) interior.push_back(i);

        // Optional extra walls; keep enough floor for boxes + agent + slack.
        int placed_walls = 0;
        while (placed_walls < p_.wall_count &&
               static_cast<int>(interior.size()) > 3 * p_.boxes + 2) {
            const std::size_t pick = rng::uniform_u64(gen, interior.size());
            wall_[interior[pick]] = 1;
            interior.erase(interior.begin() + static_cast<std::ptrdiff_t>(pick));
            ++placed_walls;
        }
        if (static_cast<int>(interior.size()) < p_.boxes + 1) return false;

        // Solved placement: boxes sit on their targets, then get pulled away.
        std::vector<int> free_cells = interior;
        for (int b = 0; b < p_.boxes; ++b) {
            const std::size_t pick = rng::uniform_u64(gen, free_cells.size());
            const int cell = free_cells[pick];
            target_[cell] = 1;
            box_[cell] = 1;
            free_cells.erase(free_cells.begin() + static_cast<std::ptrdiff_t>(pick));
        }
        agent_ = free_cells[rng::uniform_u64(gen, free_cells.size())];

        const int pulls = rng::uniform_int(gen, p_.pull_steps_min, p_.pull_steps_max);
        for (int s = 0; s < pulls; ++s) {
            // Reverse moves: plain walk, or pull the box behind the agent.
            struct Rev { int dir; bool pull; };
            std::vector<Rev> legal;
            const int side_ = p_.grid_side;
            const int ar = agent_ / side_, ac = agent_ % side_;
            for (int d = 0; d < 4; ++d) {
                const int nr = ar + kDirRow[d], nc = ac + kDirCol[d];
                if (!in_bounds(nr, nc)) continue;
                const int dest = at(nr, nc);
                if (wall_[dest] || box_[dest]) continue;
                legal.push_back({d, false});
                const int br = ar - kDirRow[d], bc = ac - kDirCol[d];
                if (in_bounds(br, bc) && box_[at(br, bc)]) legal.push_back({d, true});
            }
            if (legal.empty()) break;
            const Rev choice = legal[rng::uniform_u64(gen, legal.size())];
            const int dest = at(ar + kDirRow[choice.dir], ac + kDirCol[choice.dir]);
            if (choice.pull) {
                const int from = at(ar - kDirRow[choice.dir], ac - kDirCol[choice.dir]);
                box_[from] = 0;
                box_[agent_] = 1;
            }
            agent_ = dest;
        }
        return boxes_on_target() != p_.boxes;  // reject rooms that start solved
    }

    EnvParams p_;
    std::vector<std::uint8_t> wall_, target_, box_;
    int agent_ = 0;
    int steps_ = 0;
    bool done_ = true;  // reset() required before stepping
    bool success_ = false;
};

// --- corridor ----------------------------------------------------------------

class CorridorEnv final : public Env {
public:
    explicit CorridorEnv(const EnvParams& params) : p_(params) {
        p_.validate(EnvKind::Corridor);
    }

    EnvKind kind() const override { return EnvKind::Corridor; }
    const Vocab& vocab() const override { return corridor_vocab(); }
    int observation_dim() const override { return 2 * p_.corridor_length + 1; }
    int max_action_tokens() const override { return 2; }  // action, END
    int horizon() const override { return p_.corridor_horizon; }
    bool done() const override { return done_; }
    int steps_taken() const override { return steps_; }

    Observation reset(std::uint64_t seed) override {
        auto gen = rng::make_stream(seed, rng::Stream::EnvGen);
        pos_ = 0;
        key_pos_ = rng::uniform_int(gen, 1, p_.corridor_length - 2);
        has_key_ = false;
        steps_ = 0;
        done_ = false;
        success_ = false;
        return observe();
    }

    StepOutcome step_tokens(const std::vector<int>& tokens) override {
        if (done_) throw std::invalid_argument("corridor: step after episode end");
        steps_ += 1;

        StepOutcome out;
        int action = -1;
        const bool well_formed = parse_action(tokens, action);
        if (!well_formed) {
            out.info.invalid_action = true;
        } else if (action == 0) {  // LEFT
            if (pos_ > 0) pos_ -= 1;
            else out.info.invalid_action = true;
        } else if (action == 1) {  // RIGHT
            if (pos_ < p_.corridor_length - 1) pos_ += 1;
            else out.info.invalid_action = true;
        } else {  // GRAB: succeeds only on the key cell
            if (pos_ == key_pos_) has_key_ = true;
        }

        double reward = 0.0;
        if (pos_ == p_.corridor_length - 1) {
            done_ = true;
            if (has_key_) {
                reward = 1.0;
                success_ = true;
            }
        }
        if (steps_ >= p_.corridor_horizon) done_ = true;

        out.reward = reward;
        out.done = done_;
        out.info.success = success_;
        out.observation = observe();
        return out;
    }

    Observation observe() const override {
        const int K = p_.corridor_length;
        Observation obs;
        obs.features.assign(static_cast<std::size_t>(observation_dim()), 0.0);
        obs.features[static_cast<std::size_t>(pos_)] = 1.0;
        if (!has_key_) obs.features[static_cast<std::size_t>(K + key_pos_)] = 1.0;
        obs.features[static_cast<std::size_t>(2 * K)] = has_key_ ? 1.0 : 0.0;

        std::string tag(static_cast<std::size_t>(K), '-');
        tag[static_cast<std::size_t>(K - 1)] = 'D';
        if (!has_key_) tag[static_cast<std::size_t>(key_pos_)] = 'k';
        tag[static_cast<std::size_t>(pos_)] = '@';
        if (has_key_) tag += " [key]";
        obs.tag = std::move(tag);
        return obs;
    }

private:
    bool parse_action(const std::vector<int>& tokens, int& action) const {
        const Vocab& v = vocab();
        for (int t : tokens)
            if (!v.valid(t)) return false;
        if (tokens.size() != 2) return false;
        if (tokens[1] != v.end_id) return false;
        if (tokens[0] < 0 || tokens[0] > 2) return false;
        action = tokens[0];
        return true;
    }

    EnvParams p_;
    int pos_ = 0, key_pos_ = 1;
    bool has_key_ = false;
    int steps_ = 0;
    bool done_ = true;
    bool success_ = false;
};

}  // namespace

std::unique_ptr<Env> make_env(EnvKind kind, const EnvParams& params) {
    params.validate(kind);
    if (kind == EnvKind::Sokoban) return std::make_unique<SokobanEnv>(params);
    return std::make_unique<CorridorEnv>(params);
}

OutcomeReward outcome_reward(const Trajectory& traj) {
    if (traj.steps.empty() || !traj.steps.back().done || !traj.complete) {
        throw std::invalid_argument("outcome_reward: trajectory is not complete");
    }
    OutcomeReward out;
    for (const auto& s : traj.steps) out.score += s.reward;
    out.success = traj.steps.back().info.success;
    return out;
}

}  // namespace istar::env
