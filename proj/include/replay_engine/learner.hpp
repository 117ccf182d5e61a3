#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "replay_engine/errors.hpp"
#include "replay_engine/replay_buffer.hpp"
#include "replay_engine/rng.hpp"

namespace replay_engine {

using ActionValues = std::array<double, kNumActions>;

// Tabular action values keyed by observation hash; unseen keys read as 0.
class QFunction {
 public:
  ActionValues row(std::uint64_t key) const {
    const auto it = table_.find(key);
    return it == table_.end() ? ActionValues{} : it->second;
  }
  double value(std::uint64_t key, int action) const { return row(key)[action]; }
  ActionValues& mutable_row(std::uint64_t key) { return table_[key]; }
  void set(std::uint64_t key, int action, double v) { table_[key][action] = v; }

  std::size_t size() const { return table_.size(); }
  const std::unordered_map<std::uint64_t, ActionValues>& table() const { return table_; }
  bool operator==(const QFunction&) const = default;

 private:
  std::unordered_map<std::uint64_t, ActionValues> table_;
};

// Greedy action; ties go to the lowest action id.
inline int argmax(const ActionValues& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct LearnerConfig {
  double gamma = 0.95;
  double learning_rate = 0.2;
  std::size_t batch_size = 16;
  std::int64_t target_sync_every = 1000;
  std::int64_t train_freq = 4;
  std::int64_t learning_starts = 500;
  double eps_start = 1.0;
  double eps_end = 0.05;
  double exploration_fraction = 0.5;
  bool double_q = true;
  // Behaviour policy breaks greedy ties at random (evaluation never does).
  bool random_ties = true;

  bool operator==(const LearnerConfig&) const = default;
};

inline double epsilon_at(const LearnerConfig& cfg, std::int64_t t, std::int64_t total_steps) {
  const double horizon = cfg.exploration_fraction * static_cast<double>(total_steps);
  if (horizon <= 0.0 || static_cast<double>(t) >= horizon) return cfg.eps_end;
  const double frac = static_cast<double>(std::max<std::int64_t>(t, 0)) / horizon;
  return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac;
}

// Epsilon-greedy: with probability eps a uniform action, else the greedy one
// (lowest action id among ties).
inline int act(const QFunction& q, std::uint64_t obs_key, double eps, Rng& rng) {
  if (eps > 0.0 && rng.uniform() < eps) return static_cast<int>(rng.below(kNumActions));
  return argmax(q.row(obs_key));
}

// Same as act() but greedy ties are broken uniformly at random, so untouched
// (all-zero) rows do not pin the agent to LEFT.
inline int act_random_ties(const QFunction& q, std::uint64_t obs_key, double eps, Rng& rng) {
  if (eps > 0.0 && rng.uniform() < eps) return static_cast<int>(rng.below(kNumActions));
  const ActionValues v = q.row(obs_key);
  const double best = *std::max_element(v.begin(), v.end());
  std::array<int, kNumActions> ties{};
  std::size_t n = 0;
  for (int a = 0; a < kNumActions; ++a) {
    if (v[a] == best) ties[n++] = a;
  }
  return n == 1 ? ties[0] : ties[rng.below(n)];
}

// Bootstrapped target. Time-limit truncation still bootstraps; only a
// terminal (goal) transition cuts it.
inline double td_target(const QFunction& q, const QFunction& q_target, const Transition& t,
                        double gamma, bool double_q) {
  if (t.terminated) return t.reward;
  const ActionValues next_target = q_target.row(t.next_state_key);
  const int a_star = double_q ? argmax(q.row(t.next_state_key)) : argmax(next_target);
  return t.reward + gamma * next_target[a_star];
}

// delta = Q(s, a) - y.
inline double td_error(const QFunction& q, const QFunction& q_target, const Transition& t,
                       double gamma, bool double_q) {
  return q.value(t.state_key, t.action) - td_target(q, q_target, t, gamma, double_q);
}

struct TrainStats {
  double mean_abs_td = 0.0;
  std::vector<double> deltas;         // online TD error per batch entry
  std::vector<double> target_deltas;  // Q_target(s, a) - y per batch entry
};

// Online and target tables plus the hard target sync.
class TabularLearner {
 public:
  explicit TabularLearner(LearnerConfig cfg) : cfg_(cfg) {}

  const LearnerConfig& config() const { return cfg_; }
  const QFunction& q() const { return q_; }
  const QFunction& q_target() const { return q_target_; }
  QFunction& mutable_q() { return q_; }
  QFunction& mutable_q_target() { return q_target_; }

  // Entries are updated in batch order, each against the current online
  // table and the frozen target table: Q(s,a) += lr * w * (-delta). Every
  // batch index gets its fresh |delta| written back to the buffer.
  TrainStats train_step(const SampleBatch& batch, ReplayBuffer& buffer) {
    TrainStats stats;
    stats.deltas.reserve(batch.size());
    stats.target_deltas.reserve(batch.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Transition& t = buffer.transition(batch.indices[i].slot);
      const double y = td_target(q_, q_target_, t, cfg_.gamma, cfg_.double_q);
      double& qsa = q_.mutable_row(t.state_key)[t.action];
      const double delta = qsa - y;
      qsa -= cfg_.learning_rate * batch.is_weights[i] * delta;
      stats.deltas.push_back(delta);
      stats.target_deltas.push_back(q_target_.value(t.state_key, t.action) - y);
      buffer.set_td_error(batch.indices[i], delta);
      sum += std::abs(delta);
    }
    stats.mean_abs_td = batch.size() > 0 ? sum / static_cast<double>(batch.size()) : 0.0;
    return stats;
  }

  // Hard copy of the online table when `step` hits the sync period.
  bool maybe_sync(std::int64_t step) {
    if (cfg_.target_sync_every <= 0 || step % cfg_.target_sync_every != 0) return false;
    q_target_ = q_;
    return true;
  }

  void sync() { q_target_ = q_; }

 private:
  LearnerConfig cfg_;
  QFunction q_;
  QFunction q_target_;
};

// Checkpoint format (little endian): "RQTB", u32 version, u32 actions,
// then for online and target tables: u64 count, count x (u64 key, f64[actions])
// sorted by key.
namespace checkpoint {

inline constexpr char kMagic[4] = {'R', 'Q', 'T', 'B'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {
template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("truncated checkpoint");
  return v;
}
inline void put_table(std::ostream& os, const QFunction& q) {
  std::vector<std::uint64_t> keys;
  keys.reserve(q.size());
  for (const auto& [k, _] : q.table()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  put<std::uint64_t>(os, keys.size());
  for (std::uint64_t k : keys) {
    put(os, k);
    for (double v : q.table().at(k)) put(os, v);
  }
}
inline QFunction get_table(std::istream& is) {
  QFunction q;
  const auto n = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto k = get<std::uint64_t>(is);
    auto& row = q.mutable_row(k);
    for (double& v : row) {
      v = get<double>(is);
      if (!std::isfinite(v)) throw CheckpointError("non-finite value in checkpoint");
    }
  }
  return q;
}
}  // namespace detail

inline void save(const std::string& path, const TabularLearner& learner) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path);
  os.write(kMagic, 4);
  detail::put(os, kVersion);
  detail::put<std::uint32_t>(os, kNumActions);
  detail::put_table(os, learner.q());
  detail::put_table(os, learner.q_target());
  if (!os) throw CheckpointError("write failed for " + path);
}

inline void load(const std::string& path, TabularLearner& learner) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
    throw CheckpointError("not a Q-table checkpoint");
  }
  if (detail::get<std::uint32_t>(is) != kVersion) throw CheckpointError("unsupported version");
  if (detail::get<std::uint32_t>(is) != kNumActions) throw CheckpointError("action count mismatch");
  learner.mutable_q() = detail::get_table(is);
  learner.mutable_q_target() = detail::get_table(is);
}

}  // namespace checkpoint

}  // namespace replay_engine
