#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>

#include "replay_engine/replay_buffer.hpp"

namespace replay_engine {

enum class ScheduleMode { LINEAR, NONE };

// Interpolation weight between the prioritized and uniform branches.
// NONE means pure prioritized sampling (lambda == 1 throughout).
struct MixtureSchedule {
  double lambda0 = 0.0;
  double lambda_max = 0.5;
  std::int64_t t_schedule = 500'000;
  ScheduleMode mode = ScheduleMode::LINEAR;

  bool operator==(const MixtureSchedule&) const = default;

  void validate() const {
    if (mode == ScheduleMode::NONE) return;
    if (!(lambda0 >= 0.0 && lambda0 <= 1.0 && lambda_max >= 0.0 && lambda_max <= 1.0)) {
      throw std::invalid_argument("lambda values must lie in [0, 1]");
    }
    if (lambda0 > lambda_max) throw std::invalid_argument("lambda0 must be <= lambda_max");
    if (t_schedule <= 0) throw std::invalid_argument("t_schedule must be > 0");
  }
};

inline double lambda_at(const MixtureSchedule& sched, std::int64_t t) {
  if (sched.mode == ScheduleMode::NONE) return 1.0;
  const double frac =
      std::min(1.0, static_cast<double>(std::max<std::int64_t>(t, 0)) /
                        static_cast<double>(sched.t_schedule));
  if (frac >= 1.0) return sched.lambda_max;
  return sched.lambda0 + (sched.lambda_max - sched.lambda0) * frac;
}

// Linear ramp from start to end over `horizon` steps, held at `end` after.
struct LinearAnneal {
  double start = 0.0;
  double end = 1.0;
  std::int64_t horizon = 1;

  double at(std::int64_t t) const {
    if (horizon <= 0 || t >= horizon) return end;
    if (t <= 0) return start;
    return start + (end - start) * (static_cast<double>(t) / static_cast<double>(horizon));
  }
};

// Exact per-batch split: round(lam * B) prioritized draws, half away from zero.
inline std::pair<std::size_t, std::size_t> split_batch(std::size_t batch_size, double lam) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  if (!(lam >= 0.0 && lam <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  const auto k_p = static_cast<std::size_t>(std::round(lam * static_cast<double>(batch_size)));
  return {k_p, batch_size - k_p};
}

struct MixtureStats {
  std::uint64_t fallbacks = 0;
};

// One batch from q_t = lam * q^P + (1 - lam) * q^U. If the prioritized
// branch has no mass the whole batch is drawn uniformly and counted.
inline SampleBatch draw_mixture(const ReplayBuffer& buffer, std::size_t batch_size, double lam,
                                double beta, bool is_enabled, Rng& rng,
                                MixtureStats* stats = nullptr) {
  const auto [k_p, k_u] = split_batch(batch_size, lam);
  if (buffer.size() == 0) throw EmptyBuffer();
  SampleBatch batch;
  if (k_p > 0) {
    if (!(buffer.total_mass() > 0.0)) {
      if (stats) ++stats->fallbacks;
      return buffer.sample_uniform(batch_size, rng);
    }
    batch = buffer.sample_proportional(k_p, rng);
  }
  if (k_u > 0) batch.append(buffer.sample_uniform(k_u, rng));
  batch.is_weights = importance_weights(batch, beta, is_enabled, buffer.size());
  return batch;
}

}  // namespace replay_engine
