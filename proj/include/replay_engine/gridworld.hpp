#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "replay_engine/errors.hpp"
#include "replay_engine/frame.hpp"
#include "replay_engine/replay_buffer.hpp"
#include "replay_engine/rng.hpp"

namespace replay_engine {

enum class Action : int { LEFT = 0, RIGHT = 1, FORWARD = 2, PICKUP = 3, TOGGLE = 4 };

// Values double as the state channel of the door cell.
enum class DoorState : std::uint8_t { OPEN = 0, CLOSED_UNLOCKED = 1, LOCKED = 2 };

// Orientation, also the state channel of the agent cell: 0 east, 1 south,
// 2 west, 3 north.
enum Direction : int { EAST = 0, SOUTH = 1, WEST = 2, NORTH = 3 };

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

// Observation encoding tables. Empty floor is object 0.
namespace obj {
inline constexpr std::uint8_t kEmpty = 0;
inline constexpr std::uint8_t kWall = 2;
inline constexpr std::uint8_t kDoor = 4;
inline constexpr std::uint8_t kKey = 5;
inline constexpr std::uint8_t kGoal = 8;
inline constexpr std::uint8_t kAgent = 10;
}  // namespace obj
namespace color {
inline constexpr std::uint8_t kRed = 0;
inline constexpr std::uint8_t kGreen = 1;
inline constexpr std::uint8_t kYellow = 4;
inline constexpr std::uint8_t kGrey = 5;
}  // namespace color

struct GridState {
  int size = 8;
  int wall_col = 0;
  Cell agent;
  int agent_dir = EAST;
  std::optional<Cell> key_pos;
  Cell door_pos;
  DoorState door_state = DoorState::LOCKED;
  Cell goal_pos;
  bool carrying_key = false;
  int step = 0;
  int max_steps = 0;
  bool done = false;

  bool operator==(const GridState&) const = default;
};

struct StepResult {
  Observation obs;
  double reward = 0.0;
  bool terminated = false;
  bool truncated = false;
  EventTag events;
};

inline bool valid_grid_size(int size) {
  return size == 6 || size == 8 || size == 12 || size == 16;
}

inline int default_max_steps(int size) { return 10 * size * size; }

inline constexpr std::array<Cell, 4> kDirOffsets = {Cell{0, 1}, Cell{1, 0}, Cell{0, -1},
                                                    Cell{-1, 0}};

inline Cell front_cell(const GridState& s) {
  const Cell d = kDirOffsets[s.agent_dir];
  return {s.agent.row + d.row, s.agent.col + d.col};
}

inline bool is_wall(const GridState& s, Cell c) {
  if (c.row <= 0 || c.col <= 0 || c.row >= s.size - 1 || c.col >= s.size - 1) return true;
  return c.col == s.wall_col && !(c == s.door_pos);
}

inline Observation encode(const GridState& s) {
  const int n = s.size;
  Observation o(static_cast<std::size_t>(n * n * 3), 0);
  auto put = [&](Cell c, std::uint8_t id, std::uint8_t col, std::uint8_t st) {
    const std::size_t at = static_cast<std::size_t>((c.row * n + c.col) * 3);
    o[at] = id;
    o[at + 1] = col;
    o[at + 2] = st;
  };
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      if (is_wall(s, {r, c})) put({r, c}, obj::kWall, color::kGrey, 0);
    }
  }
  put(s.door_pos, obj::kDoor, color::kYellow, static_cast<std::uint8_t>(s.door_state));
  if (s.key_pos) put(*s.key_pos, obj::kKey, color::kYellow, 0);
  put(s.goal_pos, obj::kGoal, color::kGreen, 0);
  put(s.agent, obj::kAgent, color::kRed, static_cast<std::uint8_t>(s.agent_dir));
  return o;
}

// 64-bit FNV-1a over the encoding; the key of the tabular Q function.
inline std::uint64_t observation_key(const Observation& o) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : o) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

// Seeded DoorKey layout. The wall column is never on the border, the key and
// agent start left of it, the goal is right of it and the door is locked.
inline GridState reset(std::uint64_t seed, int size, int max_steps = 0) {
  if (!valid_grid_size(size)) throw InvalidSize(size);
  Rng rng(mix64(seed ^ 0xd00c'4e7ULL));
  GridState s;
  s.size = size;
  s.max_steps = max_steps > 0 ? max_steps : default_max_steps(size);
  s.wall_col = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - 4)));
  s.door_pos = {1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - 2))), s.wall_col};
  const auto left_cell = [&] {
    return Cell{1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - 2))),
                1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.wall_col - 1)))};
  };
  s.key_pos = left_cell();
  do {
    s.agent = left_cell();
  } while (s.agent == *s.key_pos);
  s.agent_dir = static_cast<int>(rng.below(4));
  const int right_width = size - 2 - s.wall_col;
  s.goal_pos = {1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - 2))),
                s.wall_col + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(right_width)))};
  return s;
}

// 1 - 0.9 * step / max_steps, evaluated as one rounded division so step == max_steps gives exactly 0.1.
inline double success_reward(int step, int max_steps) {
  const auto denom = 10 * static_cast<std::int64_t>(max_steps);
  return static_cast<double>(denom - 9 * static_cast<std::int64_t>(step)) / static_cast<double>(denom);
}

// Advances the state without building an observation.
inline StepResult step_no_obs(GridState& s, Action a) {
  if (s.done) throw EpisodeOver();
  StepResult out;
  ++s.step;
  const Cell front = front_cell(s);
  switch (a) {
    case Action::LEFT:
      s.agent_dir = (s.agent_dir + 3) % 4;
      break;
    case Action::RIGHT:
      s.agent_dir = (s.agent_dir + 1) % 4;
      break;
    case Action::FORWARD: {
      const bool blocked = is_wall(s, front) || (s.key_pos && *s.key_pos == front) ||
                           (front == s.door_pos && s.door_state != DoorState::OPEN);
      if (!blocked) {
        s.agent = front;
        if (front == s.goal_pos) {
          out.terminated = true;
          out.reward = success_reward(s.step, s.max_steps);
          out.events.goal_reached = true;
        }
      }
      break;
    }
    case Action::PICKUP:
      if (!s.carrying_key && s.key_pos && *s.key_pos == front) {
        s.carrying_key = true;
        s.key_pos.reset();
        out.events.key_picked_up = true;
      } else {
        out.events.distractor = true;
      }
      break;
    case Action::TOGGLE:
      if (front == s.door_pos) {
        if (s.door_state == DoorState::LOCKED) {
          if (s.carrying_key) {
            s.door_state = DoorState::OPEN;
            out.events.door_opened = true;
          } else {
            out.events.distractor = true;
          }
        } else if (s.door_state == DoorState::OPEN) {
          s.door_state = DoorState::CLOSED_UNLOCKED;
        } else {
          s.door_state = DoorState::OPEN;
          out.events.door_opened = true;
        }
      } else {
        out.events.distractor = true;
      }
      break;
  }
  if (!out.terminated && s.step >= s.max_steps) out.truncated = true;
  s.done = out.terminated || out.truncated;
  return out;
}

inline StepResult step(GridState& s, Action a) {
  StepResult r = step_no_obs(s, a);
  r.obs = encode(s);
  return r;
}

// Shortest action sequence to the goal, by breadth-first search over
// (pose, carrying, door state) from `start`. The step counter is ignored.
inline std::vector<Action> solve_optimal(const GridState& start) {
  GridState root = start;
  root.step = 0;
  root.done = false;
  root.max_steps = 1 << 30;
  const auto pack = [](const GridState& s) {
    return (static_cast<std::uint32_t>(s.agent.row) << 24) |
           (static_cast<std::uint32_t>(s.agent.col) << 16) |
           (static_cast<std::uint32_t>(s.agent_dir) << 8) |
           (static_cast<std::uint32_t>(s.carrying_key) << 4) |
           static_cast<std::uint32_t>(s.door_state);
  };
  struct Parent {
    std::uint32_t from;
    Action action;
  };
  std::unordered_map<std::uint32_t, Parent> parents;
  std::deque<GridState> frontier{root};
  parents.emplace(pack(root), Parent{pack(root), Action::LEFT});
  while (!frontier.empty()) {
    GridState cur = frontier.front();
    frontier.pop_front();
    const std::uint32_t cur_key = pack(cur);
    for (int ai = 0; ai < kNumActions; ++ai) {
      GridState next = cur;
      const StepResult r = step_no_obs(next, static_cast<Action>(ai));
      if (r.terminated) {
        std::vector<Action> plan{static_cast<Action>(ai)};
        for (std::uint32_t k = cur_key; k != pack(root);) {
          const Parent& p = parents.at(k);
          plan.push_back(p.action);
          k = p.from;
        }
        return {plan.rbegin(), plan.rend()};
      }
      next.done = false;
      const std::uint32_t key = pack(next);
      if (parents.contains(key)) continue;
      parents.emplace(key, Parent{cur_key, static_cast<Action>(ai)});
      frontier.push_back(next);
    }
  }
  throw Unsolvable();
}

inline nlohmann::json layout_to_json(const GridState& s) {
  nlohmann::json j = {{"size", s.size},
                      {"wall_col", s.wall_col},
                      {"agent", {{"row", s.agent.row}, {"col", s.agent.col}, {"dir", s.agent_dir}}},
                      {"door", {{"row", s.door_pos.row}, {"col", s.door_pos.col},
                                {"state", static_cast<int>(s.door_state)}}},
                      {"goal", {{"row", s.goal_pos.row}, {"col", s.goal_pos.col}}},
                      {"carrying_key", s.carrying_key},
                      {"step", s.step},
                      {"max_steps", s.max_steps}};
  if (s.key_pos) {
    j["key"] = {{"row", s.key_pos->row}, {"col", s.key_pos->col}};
  } else {
    j["key"] = nullptr;
  }
  return j;
}

inline GridState layout_from_json(const nlohmann::json& j) {
  GridState s;
  s.size = j.at("size").get<int>();
  if (!valid_grid_size(s.size)) throw InvalidSize(s.size);
  s.wall_col = j.at("wall_col").get<int>();
  s.agent = {j.at("agent").at("row").get<int>(), j.at("agent").at("col").get<int>()};
  s.agent_dir = j.at("agent").at("dir").get<int>();
  s.door_pos = {j.at("door").at("row").get<int>(), j.at("door").at("col").get<int>()};
  s.door_state = static_cast<DoorState>(j.at("door").at("state").get<int>());
  s.goal_pos = {j.at("goal").at("row").get<int>(), j.at("goal").at("col").get<int>()};
  if (!j.at("key").is_null()) {
    s.key_pos = Cell{j.at("key").at("row").get<int>(), j.at("key").at("col").get<int>()};
  }
  s.carrying_key = j.value("carrying_key", false);
  s.step = j.value("step", 0);
  s.max_steps = j.value("max_steps", default_max_steps(s.size));
  return s;
}

}  // namespace replay_engine
