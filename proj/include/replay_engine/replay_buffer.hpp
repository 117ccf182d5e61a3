#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <vector>

#include "replay_engine/errors.hpp"
#include "replay_engine/rng.hpp"
#include "replay_engine/sum_tree.hpp"

namespace replay_engine {

using Observation = std::vector<std::uint8_t>;

inline constexpr int kNumActions = 5;

// Floor added to TD magnitudes so every transition keeps non-zero PER mass.
inline constexpr double kPriorityEpsilon = 1e-6;

struct Transition {
  Observation state;
  int action = 0;
  double reward = 0.0;
  Observation next_state;
  bool terminated = false;
  bool truncated = false;
  std::int64_t episode_step = 0;
  std::int64_t insert_time = 0;
  // Hashes of state / next_state, filled by whoever builds the transition.
  std::uint64_t state_key = 0;
  std::uint64_t next_state_key = 0;
};

struct PriorityRecord {
  std::optional<double> semantic_score;  // {0, 1} once the scorer returned
  double td_abs = 0.0;
  bool is_default = true;
  // Priority supplied at insertion (CMA default for the semantic modes).
  double default_priority = 0.0;
  // Pass-through value for RELO_EXTERNAL.
  double external = 0.0;

  bool operator==(const PriorityRecord&) const = default;
};

enum class PriorityMode { VLM_ONLY, VLM_TD, PER, RELO_EXTERNAL };

inline const char* to_string(PriorityMode m) {
  switch (m) {
    case PriorityMode::VLM_ONLY: return "VLM_ONLY";
    case PriorityMode::VLM_TD: return "VLM_TD";
    case PriorityMode::PER: return "PER";
    case PriorityMode::RELO_EXTERNAL: return "RELO_EXTERNAL";
  }
  return "?";
}

// Priority of one record under `mode`. In VLM_TD an unscored record counts as
// `unset_td_score` (1 by default, so fresh data is not masked before scoring).
inline double combined_priority(const PriorityRecord& rec, PriorityMode mode,
                                double unset_td_score = 1.0) {
  switch (mode) {
    case PriorityMode::VLM_ONLY:
      return rec.semantic_score ? *rec.semantic_score : rec.default_priority;
    case PriorityMode::VLM_TD: {
      const double s = rec.semantic_score ? *rec.semantic_score : unset_td_score;
      return s * (rec.td_abs + kPriorityEpsilon);
    }
    case PriorityMode::PER:
      return rec.td_abs + kPriorityEpsilon;
    case PriorityMode::RELO_EXTERNAL:
      return rec.external;
  }
  return 0.0;
}

// Binary hard threshold: strictly greater than `threshold` maps to 1.
inline double threshold_score(double score, double threshold = 0.5) {
  return score > threshold ? 1.0 : 0.0;
}

// A buffer slot plus the generation it held when the reference was taken.
struct SlotRef {
  std::size_t slot = 0;
  std::uint64_t generation = 0;
  bool operator==(const SlotRef&) const = default;
};

enum class Branch : std::uint8_t { PRIORITIZED, UNIFORM };

struct SampleBatch {
  std::vector<SlotRef> indices;
  std::vector<double> probabilities;  // probability under the producing branch
  std::vector<double> is_weights;
  std::vector<Branch> branch;

  std::size_t size() const { return indices.size(); }

  void append(const SampleBatch& other) {
    indices.insert(indices.end(), other.indices.begin(), other.indices.end());
    probabilities.insert(probabilities.end(), other.probabilities.begin(),
                         other.probabilities.end());
    is_weights.insert(is_weights.end(), other.is_weights.begin(), other.is_weights.end());
    branch.insert(branch.end(), other.branch.begin(), other.branch.end());
  }
};

// IS correction w_i = (1 / (N * P(i)))^beta, max-normalized over the
// prioritized entries. Uniform-branch entries (and everything when disabled)
// get weight 1.
inline std::vector<double> importance_weights(const SampleBatch& batch, double beta,
                                              bool enabled, std::size_t buffer_size) {
  std::vector<double> w(batch.size(), 1.0);
  if (!enabled || buffer_size == 0) return w;
  double max_w = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch.branch[i] != Branch::PRIORITIZED) continue;
    w[i] = std::pow(1.0 / (static_cast<double>(buffer_size) * batch.probabilities[i]), beta);
    max_w = std::max(max_w, w[i]);
  }
  if (max_w > 0.0) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch.branch[i] == Branch::PRIORITIZED) w[i] /= max_w;
    }
  }
  return w;
}

struct BufferConfig {
  std::size_t capacity = 1 << 16;
  PriorityMode mode = PriorityMode::VLM_ONLY;
  double alpha = 1.0;
  double threshold = 0.5;
  double unset_td_score = 1.0;
};

// Ring-structured replay storage with a prioritized branch (sum tree over
// combined_priority^alpha) and a uniform branch over the live slots.
//
// Mutations and sampling are serialized through one mutex. The training
// thread is the only inserter; a score applier may call set_semantic_score
// from another thread.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(BufferConfig cfg)
      : cfg_(cfg),
        tree_(cfg.capacity),
        transitions_(cfg.capacity),
        records_(cfg.capacity),
        generations_(cfg.capacity, 0) {
    if (cfg.capacity == 0) throw std::invalid_argument("buffer capacity must be > 0");
    if (!(cfg.alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
  }

  ReplayBuffer(const ReplayBuffer&) = delete;
  ReplayBuffer& operator=(const ReplayBuffer&) = delete;

  const BufferConfig& config() const { return cfg_; }
  std::size_t capacity() const { return cfg_.capacity; }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return size_;
  }

  SlotRef insert(Transition t, double default_priority) {
    if (!(default_priority >= 0.0)) {
      throw std::invalid_argument("default priority must be >= 0");
    }
    std::lock_guard lock(mu_);
    const std::size_t slot = next_;
    next_ = (next_ + 1) % cfg_.capacity;
    if (size_ < cfg_.capacity) {
      ++size_;
    } else {
      forget_counts(records_[slot]);
    }
    transitions_[slot] = std::move(t);
    PriorityRecord rec;
    rec.td_abs = default_priority;
    rec.default_priority = cfg_.mode == PriorityMode::VLM_ONLY
                               ? std::clamp(default_priority, 0.0, 1.0)
                               : default_priority;
    rec.external = default_priority;
    records_[slot] = rec;
    ++generations_[slot];
    max_td_ = std::max(max_td_, default_priority);
    max_external_ = std::max(max_external_, default_priority);
    refresh_leaf(slot);
    ++inserted_;
    return SlotRef{slot, generations_[slot]};
  }

  // Applies a raw scorer output to one slot. Returns nullopt (and counts a
  // stale write) if the slot was overwritten since the reference was taken.
  std::optional<PriorityRecord> set_semantic_score(SlotRef ref, double score) {
    if (!(score >= 0.0 && score <= 1.0)) {
      throw std::invalid_argument("semantic score must lie in [0, 1]");
    }
    std::lock_guard lock(mu_);
    if (!live_locked(ref)) {
      ++stale_writes_;
      return std::nullopt;
    }
    PriorityRecord& rec = records_[ref.slot];
    forget_counts(rec);
    rec.semantic_score = threshold_score(score, cfg_.threshold);
    rec.is_default = false;
    ++scored_;
    if (*rec.semantic_score > 0.0) ++positive_;
    refresh_leaf(ref.slot);
    return rec;
  }

  std::optional<PriorityRecord> set_td_error(SlotRef ref, double delta) {
    std::lock_guard lock(mu_);
    if (!live_locked(ref)) {
      ++stale_writes_;
      return std::nullopt;
    }
    PriorityRecord& rec = records_[ref.slot];
    rec.td_abs = std::abs(delta);
    max_td_ = std::max(max_td_, rec.td_abs);
    refresh_leaf(ref.slot);
    return rec;
  }

  std::optional<PriorityRecord> set_external_priority(SlotRef ref, double priority) {
    if (!(priority >= 0.0)) throw std::invalid_argument("priority must be >= 0");
    std::lock_guard lock(mu_);
    if (!live_locked(ref)) {
      ++stale_writes_;
      return std::nullopt;
    }
    PriorityRecord& rec = records_[ref.slot];
    rec.external = priority;
    max_external_ = std::max(max_external_, priority);
    refresh_leaf(ref.slot);
    return rec;
  }

  // k proportional draws by stratified descent: [0, total) is cut into k
  // equal strata and one uniform point is drawn in each.
  SampleBatch sample_proportional(std::size_t k, Rng& rng) const {
    if (k == 0) throw std::invalid_argument("sample size must be >= 1");
    std::lock_guard lock(mu_);
    if (size_ == 0) throw EmptyBuffer();
    const double total = tree_.total();
    if (!(total > 0.0)) throw ZeroMass();
    SampleBatch batch;
    batch.indices.reserve(k);
    batch.probabilities.reserve(k);
    const double stratum = total / static_cast<double>(k);
    for (std::size_t j = 0; j < k; ++j) {
      const double u = (static_cast<double>(j) + rng.uniform()) * stratum;
      const std::size_t slot = tree_.find(u);
      batch.indices.push_back(SlotRef{slot, generations_[slot]});
      batch.probabilities.push_back(tree_.leaf(slot) / total);
    }
    batch.is_weights.assign(k, 1.0);
    batch.branch.assign(k, Branch::PRIORITIZED);
    return batch;
  }

  SampleBatch sample_uniform(std::size_t k, Rng& rng) const {
    std::lock_guard lock(mu_);
    if (size_ == 0) throw EmptyBuffer();
    SampleBatch batch;
    batch.indices.reserve(k);
    const double p = 1.0 / static_cast<double>(size_);
    for (std::size_t j = 0; j < k; ++j) {
      const auto slot = static_cast<std::size_t>(rng.below(size_));
      batch.indices.push_back(SlotRef{slot, generations_[slot]});
    }
    batch.probabilities.assign(k, p);
    batch.is_weights.assign(k, 1.0);
    batch.branch.assign(k, Branch::UNIFORM);
    return batch;
  }

  // Accessors below are for the training thread; transitions only change
  // through insert(), which that same thread owns.
  const Transition& transition(std::size_t slot) const { return transitions_[slot]; }

  PriorityRecord record(std::size_t slot) const {
    std::lock_guard lock(mu_);
    return records_[slot];
  }

  std::uint64_t generation(std::size_t slot) const {
    std::lock_guard lock(mu_);
    return generations_[slot];
  }

  bool is_live(SlotRef ref) const {
    std::lock_guard lock(mu_);
    return live_locked(ref);
  }

  double leaf_weight(std::size_t slot) const {
    std::lock_guard lock(mu_);
    return tree_.leaf(slot);
  }

  double total_mass() const {
    std::lock_guard lock(mu_);
    return tree_.total();
  }

  // Probability of `slot` under the prioritized branch.
  double prioritized_probability(std::size_t slot) const {
    std::lock_guard lock(mu_);
    const double total = tree_.total();
    return total > 0.0 ? tree_.leaf(slot) / total : 0.0;
  }

  // Largest priority seen so far (max-priority initialisation): external
  // priorities in RELO_EXTERNAL mode, TD magnitudes otherwise.
  double max_priority() const {
    std::lock_guard lock(mu_);
    return cfg_.mode == PriorityMode::RELO_EXTERNAL ? max_external_ : max_td_;
  }

  std::uint64_t stale_writes() const {
    std::lock_guard lock(mu_);
    return stale_writes_;
  }
  std::uint64_t inserted() const {
    std::lock_guard lock(mu_);
    return inserted_;
  }
  // Live entries that have received a score / a positive score.
  std::size_t scored_count() const {
    std::lock_guard lock(mu_);
    return scored_;
  }
  std::size_t positive_count() const {
    std::lock_guard lock(mu_);
    return positive_;
  }

  // Copy of the sum tree nodes, for consistency checks.
  std::vector<double> tree_snapshot() const {
    std::lock_guard lock(mu_);
    auto n = tree_.nodes();
    return {n.begin(), n.end()};
  }

 private:
  bool live_locked(SlotRef ref) const {
    return ref.slot < size_ && generations_[ref.slot] == ref.generation;
  }

  void forget_counts(const PriorityRecord& rec) {
    if (rec.is_default) return;
    --scored_;
    if (rec.semantic_score && *rec.semantic_score > 0.0) --positive_;
  }

  void refresh_leaf(std::size_t slot) {
    double p = combined_priority(records_[slot], cfg_.mode, cfg_.unset_td_score);
    if (cfg_.alpha != 1.0 && p > 0.0) p = std::pow(p, cfg_.alpha);
    tree_.set(slot, p);
  }

  BufferConfig cfg_;
  mutable std::mutex mu_;
  SumTree tree_;
  std::vector<Transition> transitions_;
  std::vector<PriorityRecord> records_;
  std::vector<std::uint64_t> generations_;
  std::size_t next_ = 0;
  std::size_t size_ = 0;
  std::size_t scored_ = 0;
  std::size_t positive_ = 0;
  std::uint64_t stale_writes_ = 0;
  std::uint64_t inserted_ = 0;
  double max_td_ = 1.0;
  double max_external_ = 1.0;
};

}  // namespace replay_engine
