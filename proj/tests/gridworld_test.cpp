#include <gtest/gtest.h>

#include <map>
#include <queue>
#include <set>

#include "replay_engine/gridworld.hpp"

using namespace replay_engine;

namespace {

std::size_t at(const GridState& s, Cell c) { return static_cast<std::size_t>((c.row * s.size + c.col) * 3); }

// A layout with the agent directly north of the goal.
GridState one_step_from_goal(int step, int max_steps) {
  GridState s = reset(1, 8, max_steps);
  s.agent = {1, s.wall_col + 1};
  s.goal_pos = {2, s.wall_col + 1};
  s.agent_dir = SOUTH;
  s.step = step;
  return s;
}

GridState layout_with_wall_col_at_least(int min_col) {
  for (std::uint64_t seed = 0;; ++seed) {
    GridState s = reset(seed, 8);
    if (s.wall_col >= min_col) return s;
  }
}

// Breadth-first search keyed on the full observation plus the carry flag,
// driving the environment's own step function.
std::size_t bfs_length(const GridState& start) {
  using Key = std::pair<Observation, bool>;
  std::set<Key> seen;
  std::queue<std::pair<GridState, std::size_t>> q;
  GridState root = start;
  root.max_steps = 1 << 30;
  seen.insert({encode(root), root.carrying_key});
  q.push({root, 0});
  while (!q.empty()) {
    auto [cur, depth] = q.front();
    q.pop();
    for (int a = 0; a < kNumActions; ++a) {
      GridState next = cur;
      if (step_no_obs(next, static_cast<Action>(a)).terminated) return depth + 1;
      next.done = false;
      if (seen.insert({encode(next), next.carrying_key}).second) q.push({next, depth + 1});
    }
  }
  return 0;
}

}  // namespace

TEST(Grid, ResetIsDeterministic) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    EXPECT_EQ(reset(seed, 8), reset(seed, 8));
    EXPECT_EQ(encode(reset(seed, 8)), encode(reset(seed, 8)));
  }
  int differ = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) differ += !(reset(seed, 8) == reset(seed + 1, 8));
  EXPECT_GT(differ, 40);
}

TEST(Grid, ObservationShapeAndInitialDoor) {
  const GridState s = reset(7, 8);
  const Observation o = encode(s);
  ASSERT_EQ(o.size(), 8u * 8u * 3u);
  EXPECT_EQ(o[at(s, s.door_pos)], obj::kDoor);
  EXPECT_EQ(o[at(s, s.door_pos) + 2], static_cast<std::uint8_t>(DoorState::LOCKED));
  EXPECT_EQ(o[at(s, s.agent)], obj::kAgent);
  EXPECT_EQ(o[at(s, *s.key_pos)], obj::kKey);
  EXPECT_EQ(o[at(s, s.goal_pos)], obj::kGoal);
  EXPECT_EQ(s.max_steps, 640);
  EXPECT_FALSE(s.carrying_key);
}

TEST(Grid, LayoutInvariantsAcrossSeeds) {
  for (int size : {6, 8, 12, 16}) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const GridState s = reset(seed, size);
      ASSERT_GT(s.wall_col, 1);
      ASSERT_LT(s.wall_col, size - 2);
      ASSERT_LT(s.agent.col, s.wall_col);
      ASSERT_LT(s.key_pos->col, s.wall_col);
      ASSERT_GT(s.goal_pos.col, s.wall_col);
      ASSERT_FALSE(s.agent == *s.key_pos);
      ASSERT_FALSE(is_wall(s, s.agent));
      ASSERT_FALSE(is_wall(s, s.goal_pos));
    }
  }
}

TEST(Grid, ToggleWithoutKeyLeavesDoorLocked) {
  GridState s = reset(3, 8);
  s.agent = {s.door_pos.row, s.door_pos.col - 1};
  s.agent_dir = EAST;
  const auto r = step(s, Action::TOGGLE);
  EXPECT_EQ(s.door_state, DoorState::LOCKED);
  EXPECT_TRUE(r.events.distractor);
  EXPECT_FALSE(r.events.door_opened);
  EXPECT_EQ(r.reward, 0.0);
}

TEST(Grid, KeyThenDoorEvents) {
  GridState s = layout_with_wall_col_at_least(3);
  s.agent = {s.door_pos.row, s.door_pos.col - 1};
  s.agent_dir = EAST;
  s.key_pos = Cell{s.agent.row, s.agent.col - 1};
  step(s, Action::LEFT);
  step(s, Action::LEFT);
  EXPECT_TRUE(step(s, Action::PICKUP).events.key_picked_up);
  EXPECT_TRUE(s.carrying_key);
  EXPECT_FALSE(s.key_pos);
  step(s, Action::RIGHT);
  step(s, Action::RIGHT);
  EXPECT_TRUE(step(s, Action::TOGGLE).events.door_opened);
  EXPECT_EQ(s.door_state, DoorState::OPEN);
  step(s, Action::FORWARD);
  EXPECT_EQ(s.agent, s.door_pos);
}

TEST(Grid, GoalRewardFollowsStepCount) {
  EXPECT_DOUBLE_EQ(success_reward(100, 640), 0.859375);
  GridState s = one_step_from_goal(99, 640);
  const auto r = step(s, Action::FORWARD);
  ASSERT_TRUE(r.terminated);
  EXPECT_TRUE(r.events.goal_reached);
  EXPECT_DOUBLE_EQ(r.reward, 0.859375);
  EXPECT_THROW(step(s, Action::LEFT), EpisodeOver);
}

TEST(Grid, RewardBounds) {
  for (int t = 1; t <= 640; ++t) {
    const double r = success_reward(t, 640);
    ASSERT_GE(r, 0.1);
    ASSERT_LT(r, 1.0);
  }
  EXPECT_DOUBLE_EQ(success_reward(640, 640), 0.1);
}

TEST(Grid, TruncatesAtMaxSteps) {
  GridState s = reset(5, 6);
  StepResult r;
  for (int i = 0; i < s.max_steps; ++i) {
    ASSERT_FALSE(s.done);
    r = step(s, Action::LEFT);
  }
  EXPECT_TRUE(r.truncated);
  EXPECT_FALSE(r.terminated);
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_EQ(s.step, 360);
  EXPECT_THROW(step(s, Action::LEFT), EpisodeOver);
}

TEST(Grid, TurnOnlyChangesAgentCell) {
  GridState s = reset(9, 8);
  const Observation before = encode(s);
  const Observation after = step(s, Action::LEFT).obs;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (i == at(s, s.agent) + 2) continue;
    EXPECT_EQ(before[i], after[i]) << "byte " << i;
  }
  EXPECT_NE(before[at(s, s.agent) + 2], after[at(s, s.agent) + 2]);
}

TEST(Grid, BlockedMovesKeepPosition) {
  GridState s = reset(2, 8);
  s.agent = {1, 1};
  s.agent_dir = NORTH;
  step(s, Action::FORWARD);
  EXPECT_EQ(s.agent, (Cell{1, 1}));
  s.agent = {s.door_pos.row, s.door_pos.col - 1};
  s.agent_dir = EAST;
  step(s, Action::FORWARD);
  EXPECT_EQ(s.agent, (Cell{s.door_pos.row, s.door_pos.col - 1}));
}

TEST(Grid, InvalidSize) {
  EXPECT_THROW(reset(0, 7), InvalidSize);
  EXPECT_THROW(reset(0, 4), InvalidSize);
}

TEST(Solver, PlanReachesGoalWithOnePickup) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    GridState s = reset(seed, 8);
    const auto plan = solve_optimal(s);
    EXPECT_EQ(std::count(plan.begin(), plan.end(), Action::PICKUP), 1);
    EXPECT_GE(std::count(plan.begin(), plan.end(), Action::TOGGLE), 1);
    StepResult r;
    for (Action a : plan) r = step(s, a);
    EXPECT_TRUE(r.terminated);
    EXPECT_GT(r.reward, 0.0);
  }
}

TEST(Solver, MatchesIndependentSearch) {
  for (int size : {6, 8}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const GridState s = reset(seed, size);
      EXPECT_EQ(solve_optimal(s).size(), bfs_length(s)) << "size " << size << " seed " << seed;
    }
  }
}

TEST(Solver, EveryLayoutIsSolvable) {
  for (int size : {6, 8, 12, 16}) {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const GridState s = reset(seed, size);
      const auto plan = solve_optimal(s);
      ASSERT_LE(static_cast<int>(plan.size()), s.max_steps);
    }
  }
}

TEST(Layout, JsonRoundTrip) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    GridState s = reset(seed, 12);
    if (seed % 2 == 0) {
      s.key_pos.reset();
      s.carrying_key = true;
      s.door_state = DoorState::OPEN;
    }
    EXPECT_EQ(layout_from_json(layout_to_json(s)), s);
  }
  auto j = layout_to_json(reset(0, 8));
  j["size"] = 10;
  EXPECT_THROW(layout_from_json(j), InvalidSize);
}
