#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "istar/env.hpp"
#include "istar/rng.hpp"
#include "oracles.hpp"

using namespace istar;
using env::EnvKind;
using env::EnvParams;

namespace {

std::vector<int> action_tokens(bool push, int dir) {
    return {push ? 1 : 0, 2 + dir, env::sokoban_vocab().end_id};
}

// Uniform random token sequences, including malformed ones.
std::vector<int> random_tokens(std::mt19937_64& g, const Vocab& v, int budget) {
    std::vector<int> toks;
    for (int k = 0; k < budget; ++k) {
        const int t = (k == budget - 1) ? v.end_id : rng::uniform_int(g, 0, v.size() - 1);
        toks.push_back(t);
        if (t == v.end_id) break;
    }
    return toks;
}

}  // namespace

TEST_CASE("sokoban: identical seeds produce identical rooms") {
    EnvParams p;
    auto e1 = env::make_env(EnvKind::Sokoban, p);
    auto e2 = env::make_env(EnvKind::Sokoban, p);
    for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xDEADBEEFULL}) {
        auto o1 = e1->reset(seed);
        auto o2 = e2->reset(seed);
        CHECK(o1.tag == o2.tag);
        CHECK(o1.features == o2.features);
    }
}

TEST_CASE("sokoban: construction invariants on 5x5 one-box rooms") {
    EnvParams p;
    auto e = env::make_env(EnvKind::Sokoban, p);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto obs = e->reset(seed);
        auto room = oracles::parse_sokoban_tag(obs.tag);
        CHECK(room.side == 5);
        CHECK(room.boxes.size() == 1);
        int targets = 0;
        for (bool t : room.target) targets += t ? 1 : 0;
        CHECK(targets == 1);
        CHECK(room.agent >= 0);
        CHECK_FALSE(room.wall[static_cast<std::size_t>(room.agent)]);
        CHECK_FALSE(room.wall[static_cast<std::size_t>(room.boxes[0])]);
        // never generated already solved
        CHECK_FALSE(room.target[static_cast<std::size_t>(room.boxes[0])]);
        // one-hot observation: exactly one active channel per window cell
        const int w = 2 * 5 - 1;
        REQUIRE(static_cast<int>(obs.features.size()) == 5 * w * w);
        for (int i = 0; i < w * w; ++i) {
            double s = 0;
            for (int ch = 0; ch < 5; ++ch)
                s += obs.features[static_cast<std::size_t>(ch * w * w + i)];
            CHECK(s == 1.0);
        }
        // the window is agent-centered: the center cell is never a wall
        CHECK(obs.features[static_cast<std::size_t>((w * w) / 2)] == 0.0);
    }
}

TEST_CASE("sokoban: 1000 generated rooms are all solvable (BFS oracle)") {
    for (auto [side, boxes] : {std::pair{5, 1}, std::pair{6, 1}, std::pair{6, 2}}) {
        EnvParams p;
        p.grid_side = side;
        p.boxes = boxes;
        p.horizon = 50;
        auto e = env::make_env(EnvKind::Sokoban, p);
        const int n = (side == 5 && boxes == 1) ? 1000 : 200;
        for (int seed = 0; seed < n; ++seed) {
            auto obs = e->reset(static_cast<std::uint64_t>(seed));
            auto solution = oracles::bfs_solve(oracles::parse_sokoban_tag(obs.tag));
            REQUIRE(solution.has_value());
            CHECK(!solution->empty());
        }
    }
}

TEST_CASE("sokoban: BFS solution replays to success with the documented rewards") {
    EnvParams p;
    p.grid_side = 6;
    p.boxes = 2;
    p.horizon = 60;
    auto e = env::make_env(EnvKind::Sokoban, p);
    int saw_intermediate_on_target = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        auto obs = e->reset(seed);
        auto solution = oracles::bfs_solve(oracles::parse_sokoban_tag(obs.tag));
        REQUIRE(solution.has_value());
        int prev_on_target = static_cast<int>(std::count(obs.tag.begin(), obs.tag.end(), '*'));
        for (std::size_t i = 0; i < solution->size(); ++i) {
            const auto mv = (*solution)[i];
            auto out = e->step_tokens(action_tokens(mv.push, mv.dir));
            CHECK_FALSE(out.info.invalid_action);
            const int delta = out.info.boxes_on_target - prev_on_target;
            prev_on_target = out.info.boxes_on_target;
            const bool final_step = i + 1 == solution->size();
            if (final_step) {
                CHECK(out.done);
                CHECK(out.info.success);
                CHECK(out.reward == doctest::Approx(10.0 + delta - 0.1).epsilon(1e-12));
            } else {
                CHECK(out.reward == doctest::Approx(delta - 0.1).epsilon(1e-12));
                if (delta == 1) {
                    ++saw_intermediate_on_target;
                    CHECK(out.reward == doctest::Approx(0.9).epsilon(1e-12));
                }
            }
        }
    }
    CHECK(saw_intermediate_on_target > 0);  // the +0.9 non-final push was exercised
}

TEST_CASE("sokoban: blocked and malformed actions leave state unchanged at -0.2") {
    EnvParams p;
    auto e = env::make_env(EnvKind::Sokoban, p);
    const int end = env::sokoban_vocab().end_id;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto obs = e->reset(seed);
        auto room = oracles::parse_sokoban_tag(obs.tag);
        // find a direction that is blocked by a wall
        const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
        int wall_dir = -1;
        for (int d = 0; d < 4; ++d) {
            const int nr = room.agent / 5 + dr[d], nc = room.agent % 5 + dc[d];
            if (room.wall[static_cast<std::size_t>(nr * 5 + nc)]) { wall_dir = d; break; }
        }
        if (wall_dir >= 0) {
            auto out = e->step_tokens(action_tokens(false, wall_dir));
            CHECK(out.info.invalid_action);
            CHECK(out.reward == doctest::Approx(-0.2).epsilon(1e-12));
            CHECK(out.observation.tag == obs.tag);
            obs = out.observation;
        }
        // malformed: missing direction / bare END / out-of-alphabet id
        for (const auto& bad : {std::vector<int>{0, end}, std::vector<int>{end},
                                std::vector<int>{0, 99, end}}) {
            auto out = e->step_tokens(bad);
            CHECK(out.info.invalid_action);
            CHECK(out.reward == doctest::Approx(-0.2).epsilon(1e-12));
            CHECK(out.observation.tag == obs.tag);
        }
    }
}

TEST_CASE("sokoban: step after done is a usage error") {
    EnvParams p;
    p.horizon = 1;
    auto e = env::make_env(EnvKind::Sokoban, p);
    e->reset(3);
    auto out = e->step_tokens(action_tokens(false, 0));
    CHECK(out.done);
    CHECK_THROWS_AS((void)e->step_tokens(action_tokens(false, 0)), std::invalid_argument);
}

TEST_CASE("sokoban: conservation and reward accounting over random play") {
    EnvParams p;
    p.grid_side = 6;
    p.boxes = 2;
    p.horizon = 40;
    auto e = env::make_env(EnvKind::Sokoban, p);
    auto g = rng::make_stream(99, rng::Stream::Rollout);
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        auto obs = e->reset(seed);
        int prev_bot = static_cast<int>(std::count(obs.tag.begin(), obs.tag.end(), '*'));
        double plus_minus_sum = 0.0;
        const int initial_bot = prev_bot;
        int final_bot = prev_bot;
        while (!e->done()) {
            auto toks = random_tokens(g, e->vocab(), 3);
            auto out = e->step_tokens(toks);
            auto room = oracles::parse_sokoban_tag(out.observation.tag);
            CHECK(static_cast<int>(room.boxes.size()) == 2);  // boxes conserved
            const int delta = out.info.boxes_on_target - prev_bot;
            // reward decomposes into step penalty, invalid penalty, box delta, solve bonus
            double expect = -0.1 + delta;
            if (out.info.invalid_action) expect -= 0.1;
            if (out.info.success && out.done && out.info.boxes_on_target == 2) {
                if (out.reward > 5.0) expect += 10.0;
            }
            CHECK(out.reward == doctest::Approx(expect).epsilon(1e-12));
            plus_minus_sum += delta;
            prev_bot = out.info.boxes_on_target;
            final_bot = out.info.boxes_on_target;
        }
        CHECK(plus_minus_sum == doctest::Approx(final_bot - initial_bot).epsilon(1e-12));
    }
}

TEST_CASE("sokoban: (seed, action sequence) fully determines outcomes") {
    EnvParams p;
    auto e1 = env::make_env(EnvKind::Sokoban, p);
    auto e2 = env::make_env(EnvKind::Sokoban, p);
    auto g = rng::make_stream(7, rng::Stream::Rollout);
    e1->reset(11);
    e2->reset(11);
    while (!e1->done()) {
        auto toks = random_tokens(g, e1->vocab(), 3);
        auto o1 = e1->step_tokens(toks);
        auto o2 = e2->step_tokens(toks);
        CHECK(o1.reward == o2.reward);
        CHECK(o1.observation.tag == o2.observation.tag);
        CHECK(o1.observation.features == o2.observation.features);
        CHECK(o1.done == o2.done);
    }
}

TEST_CASE("sokoban: unsatisfiable size params fail generation after bounded retries") {
    EnvParams p;
    p.grid_side = 4;  // 2x2 interior: no pull is ever possible
    auto e = env::make_env(EnvKind::Sokoban, p);
    CHECK_THROWS_AS((void)e->reset(0), std::runtime_error);

    EnvParams bad;
    bad.grid_side = 3;
    CHECK_THROWS_AS((void)env::make_env(EnvKind::Sokoban, bad), std::invalid_argument);
}

TEST_CASE("outcome_reward: reference sums and error paths") {
    // solved in 6 steps, one on-target push on the final step
    env::Trajectory traj;
    traj.kind = EnvKind::Sokoban;
    for (int i = 0; i < 5; ++i) {
        env::StepRecord s;
        s.reward = -0.1;
        traj.steps.push_back(s);
    }
    env::StepRecord last;
    last.reward = 10.0 + 1.0 - 0.1;
    last.done = true;
    last.info.success = true;
    traj.steps.push_back(last);
    traj.complete = true;
    auto res = env::outcome_reward(traj);
    CHECK(res.score == doctest::Approx(10.4).epsilon(1e-12));
    CHECK(res.success);

    traj.steps.back().done = false;
    traj.complete = false;
    CHECK_THROWS_AS((void)env::outcome_reward(traj), std::invalid_argument);
}

TEST_CASE("corridor: grab off the key cell does nothing; optimal run succeeds") {
    EnvParams p;
    auto e = env::make_env(EnvKind::Corridor, p);
    const auto& v = env::corridor_vocab();
    auto obs = e->reset(5);
    // key position from the tag
    int key_pos = -1;
    for (int i = 0; i < p.corridor_length; ++i)
        if (obs.tag[static_cast<std::size_t>(i)] == 'k') key_pos = i;
    REQUIRE(key_pos >= 1);

    auto out = e->step_tokens({v.id("GRAB"), v.end_id});  // off the key cell
    CHECK(out.reward == 0.0);
    CHECK(out.observation.features[static_cast<std::size_t>(2 * p.corridor_length)] == 0.0);

    e->reset(5);
    for (int i = 0; i < key_pos; ++i) e->step_tokens({v.id("RIGHT"), v.end_id});
    e->step_tokens({v.id("GRAB"), v.end_id});
    env::StepOutcome last;
    for (int i = key_pos; i < p.corridor_length - 1; ++i)
        last = e->step_tokens({v.id("RIGHT"), v.end_id});
    CHECK(last.done);
    CHECK(last.info.success);
    CHECK(last.reward == 1.0);
}

TEST_CASE("corridor: reaching the door without the key scores zero") {
    EnvParams p;
    auto e = env::make_env(EnvKind::Corridor, p);
    const auto& v = env::corridor_vocab();
    e->reset(5);
    env::Trajectory traj;
    traj.kind = EnvKind::Corridor;
    while (!e->done()) {
        env::StepRecord s;
        s.action_tokens = {v.id("RIGHT"), v.end_id};
        auto out = e->step_tokens(s.action_tokens);
        s.reward = out.reward;
        s.done = out.done;
        s.info = out.info;
        traj.steps.push_back(s);
    }
    traj.complete = true;
    auto res = env::outcome_reward(traj);
    CHECK(res.score == 0.0);
    CHECK_FALSE(res.success);
}

TEST_CASE("corridor: exhaustive enumeration matches the independent model (small instance)") {
    EnvParams p;
    p.corridor_length = 5;
    p.corridor_horizon = 8;
    auto e = env::make_env(EnvKind::Corridor, p);
    const auto& v = env::corridor_vocab();

    auto obs = e->reset(17);
    int key_pos = -1;
    for (int i = 0; i < p.corridor_length; ++i)
        if (obs.tag[static_cast<std::size_t>(i)] == 'k') key_pos = i;
    oracles::CorridorModel model{p.corridor_length, key_pos, p.corridor_horizon};

    int env_successes = 0, model_successes = 0;
    const int total = 6561;  // 3^8
    for (int code = 0; code < total; ++code) {
        std::vector<int> actions;
        int c = code;
        for (int i = 0; i < p.corridor_horizon; ++i) {
            actions.push_back(c % 3);
            c /= 3;
        }
        e->reset(17);
        double env_reward = 0.0;
        bool env_success = false;
        for (int a : actions) {
            auto out = e->step_tokens({a, v.end_id});
            env_reward += out.reward;
            env_success = out.info.success;
            if (out.done) break;
        }
        auto ref = model.run(actions);
        CHECK(env_reward == ref.total_reward);
        CHECK(env_success == ref.success);
        env_successes += env_success ? 1 : 0;
        model_successes += ref.success ? 1 : 0;
    }
    CHECK(env_successes == model_successes);
    CHECK(env_successes > 0);
}

TEST_CASE("corridor: step after done is a usage error") {
    EnvParams p;
    p.corridor_horizon = 1;
    auto e = env::make_env(EnvKind::Corridor, p);
    const auto& v = env::corridor_vocab();
    e->reset(0);
    e->step_tokens({v.id("LEFT"), v.end_id});
    CHECK_THROWS_AS((void)e->step_tokens({v.id("LEFT"), v.end_id}), std::invalid_argument);
}
