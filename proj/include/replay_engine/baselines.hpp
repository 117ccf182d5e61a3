#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "replay_engine/replay_buffer.hpp"
#include "replay_engine/rng.hpp"
#include "replay_engine/sampler.hpp"

namespace replay_engine {

// ---------------------------------------------------------------------------
// ERO: learned rejection policy over uniformly drawn candidates.
// ---------------------------------------------------------------------------

using EroFeatures = std::array<double, 3>;  // (reward, |delta|, t / T_max)

// 3 -> 64 -> 64 -> 1 MLP, ReLU hidden units, sigmoid output. Gradients are
// derived by hand; the flat parameter layout is
//   W1[64x3] b1[64] W2[64x64] b2[64] w3[64] b3
class EroPolicy {
 public:
  static constexpr std::size_t kIn = 3;
  static constexpr std::size_t kHidden = 64;
  static constexpr std::size_t kParams =
      kHidden * kIn + kHidden + kHidden * kHidden + kHidden + kHidden + 1;

  explicit EroPolicy(std::uint64_t seed = 0, double learning_rate = 1e-3, double avg_decay = 0.9)
      : params_(kParams, 0.0), learning_rate_(learning_rate), avg_decay_(avg_decay) {
    Rng rng(mix64(seed ^ 0xe20ULL));
    // He initialisation for the ReLU layers, small output layer.
    for (std::size_t i = 0; i < kHidden * kIn; ++i) params_[w1(i)] = rng.normal() * std::sqrt(2.0 / kIn);
    for (std::size_t i = 0; i < kHidden * kHidden; ++i) {
      params_[w2(i)] = rng.normal() * std::sqrt(2.0 / kHidden);
    }
    for (std::size_t i = 0; i < kHidden; ++i) params_[w3(i)] = rng.normal() * 0.01;
  }

  double operator()(const EroFeatures& x) const { return forward(x).p; }

  // L = -r * sum_i log p_i over the selected batch.
  double loss(std::span<const EroFeatures> batch, double r_replay) const {
    double s = 0.0;
    for (const auto& x : batch) s += std::log(forward(x).p);
    return -r_replay * s;
  }

  std::vector<double> gradient(std::span<const EroFeatures> batch, double r_replay) const {
    std::vector<double> g(kParams, 0.0);
    for (const auto& x : batch) {
      const Activations a = forward(x);
      // d(-r log sigmoid(z))/dz = -r (1 - p)
      const double dz = -r_replay * (1.0 - a.p);
      std::array<double, kHidden> dh2{};
      for (std::size_t j = 0; j < kHidden; ++j) {
        g[w3(j)] += dz * a.h2[j];
        dh2[j] = a.h2[j] > 0.0 ? dz * params_[w3(j)] : 0.0;
      }
      g[b3()] += dz;
      std::array<double, kHidden> dh1{};
      for (std::size_t j = 0; j < kHidden; ++j) {
        if (dh2[j] == 0.0) continue;
        for (std::size_t k = 0; k < kHidden; ++k) {
          g[w2(j * kHidden + k)] += dh2[j] * a.h1[k];
          dh1[k] += dh2[j] * params_[w2(j * kHidden + k)];
        }
        g[b2(j)] += dh2[j];
      }
      for (std::size_t k = 0; k < kHidden; ++k) {
        if (a.h1[k] <= 0.0) continue;
        for (std::size_t i = 0; i < kIn; ++i) g[w1(k * kIn + i)] += dh1[k] * x[i];
        g[b1(k)] += dh1[k];
      }
    }
    return g;
  }

  // One gradient step on L; a zero reward leaves the parameters untouched.
  void update(std::span<const EroFeatures> batch, double r_replay) {
    if (r_replay == 0.0) return;
    const auto g = gradient(batch, r_replay);
    for (std::size_t i = 0; i < kParams; ++i) params_[i] -= learning_rate_ * g[i];
  }

  // Folds an evaluation return into the moving average and returns
  // r_replay = R_bar(current) - R_bar(previous).
  double observe_return(double eval_return) {
    const double prev = avg_return_;
    avg_return_ = avg_decay_ * avg_return_ + (1.0 - avg_decay_) * eval_return;
    return avg_return_ - prev;
  }

  double average_return() const { return avg_return_; }
  std::span<const double> params() const { return params_; }
  std::span<double> mutable_params() { return params_; }

 private:
  struct Activations {
    std::array<double, kHidden> h1{};
    std::array<double, kHidden> h2{};
    double p = 0.5;
  };

  static constexpr std::size_t w1(std::size_t i) { return i; }
  static constexpr std::size_t b1(std::size_t i) { return kHidden * kIn + i; }
  static constexpr std::size_t w2(std::size_t i) { return b1(kHidden) + i; }
  static constexpr std::size_t b2(std::size_t i) { return w2(kHidden * kHidden) + i; }
  static constexpr std::size_t w3(std::size_t i) { return b2(kHidden) + i; }
  static constexpr std::size_t b3() { return w3(kHidden); }

  Activations forward(const EroFeatures& x) const {
    Activations a;
    for (std::size_t k = 0; k < kHidden; ++k) {
      double z = params_[b1(k)];
      for (std::size_t i = 0; i < kIn; ++i) z += params_[w1(k * kIn + i)] * x[i];
      a.h1[k] = std::max(0.0, z);
    }
    double out = params_[b3()];
    for (std::size_t j = 0; j < kHidden; ++j) {
      double z = params_[b2(j)];
      for (std::size_t k = 0; k < kHidden; ++k) z += params_[w2(j * kHidden + k)] * a.h1[k];
      a.h2[j] = std::max(0.0, z);
      out += params_[w3(j)] * a.h2[j];
    }
    a.p = 1.0 / (1.0 + std::exp(-out));
    // Keep log p finite even when the logit saturates.
    a.p = std::clamp(a.p, 1e-12, 1.0 - 1e-12);
    return a;
  }

  std::vector<double> params_;
  double learning_rate_;
  double avg_decay_;
  double avg_return_ = 0.0;
};

inline EroFeatures ero_features(const Transition& t, const PriorityRecord& rec, int max_steps) {
  return {t.reward, rec.td_abs,
          static_cast<double>(t.episode_step) / static_cast<double>(std::max(max_steps, 1))};
}

struct EroSelection {
  SampleBatch batch;
  std::vector<EroFeatures> features;  // aligned with batch
  std::size_t candidates = 0;
  std::size_t accepted = 0;
};

// Draws 4B uniform candidates, keeps each with probability p_i, truncates to
// the first B accepted or tops up with the highest-p rejected ones. No IS.
inline EroSelection ero_select(const ReplayBuffer& buffer, const EroPolicy& policy,
                               std::size_t batch_size, int max_steps, Rng& rng) {
  const SampleBatch pool = buffer.sample_uniform(4 * batch_size, rng);
  EroSelection out;
  out.candidates = pool.size();
  std::vector<std::size_t> accepted;
  std::vector<std::size_t> rejected;
  std::vector<double> p(pool.size());
  std::vector<EroFeatures> feats(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const std::size_t slot = pool.indices[i].slot;
    feats[i] = ero_features(buffer.transition(slot), buffer.record(slot), max_steps);
    p[i] = policy(feats[i]);
    (rng.bernoulli(p[i]) ? accepted : rejected).push_back(i);
  }
  out.accepted = accepted.size();
  if (accepted.size() > batch_size) accepted.resize(batch_size);
  if (accepted.size() < batch_size) {
    std::stable_sort(rejected.begin(), rejected.end(),
                     [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    for (std::size_t i = 0; accepted.size() < batch_size; ++i) accepted.push_back(rejected[i]);
  }
  for (std::size_t i : accepted) {
    out.batch.indices.push_back(pool.indices[i]);
    out.batch.probabilities.push_back(pool.probabilities[i]);
    out.batch.is_weights.push_back(1.0);
    out.batch.branch.push_back(Branch::UNIFORM);
    out.features.push_back(feats[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ReLo: reducible-loss priority.
// ---------------------------------------------------------------------------

inline double relo_priority(double delta_online, double delta_target) {
  return std::max(0.0, std::abs(delta_online) - std::abs(delta_target)) + kPriorityEpsilon;
}

struct ReLoState {
  double alpha = 0.6;
  LinearAnneal beta{0.4, 1.0, 1};
  double epsilon = kPriorityEpsilon;

  static ReLoState for_run(std::int64_t total_steps) {
    ReLoState s;
    s.beta = LinearAnneal{0.4, 1.0, std::max<std::int64_t>(total_steps, 1)};
    return s;
  }
};

// ---------------------------------------------------------------------------
// AER: nearest neighbours of the current state in a frozen random embedding.
// ---------------------------------------------------------------------------

class AerEncoder {
 public:
  static constexpr std::size_t kDim = 32;
  using Embedding = std::array<float, kDim>;

  AerEncoder(std::size_t input_dim, std::uint64_t seed) : input_dim_(input_dim), weights_(input_dim * kDim) {
    Rng rng(mix64(seed ^ 0xae2ULL));
    const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(input_dim, 1)));
    for (auto& w : weights_) w = static_cast<float>(rng.normal() * scale);
  }

  std::size_t input_dim() const { return input_dim_; }

  Embedding embed(std::span<const std::uint8_t> obs) const {
    Embedding e{};
    const std::size_t n = std::min(obs.size(), input_dim_);
    for (std::size_t i = 0; i < n; ++i) {
      if (obs[i] == 0) continue;
      const float x = obs[i];
      const float* row = &weights_[i * kDim];
      for (std::size_t d = 0; d < kDim; ++d) e[d] += x * row[d];
    }
    return e;
  }

 private:
  std::size_t input_dim_;
  std::vector<float> weights_;
};

inline double squared_distance(const AerEncoder::Embedding& a, const AerEncoder::Embedding& b) {
  double s = 0.0;
  for (std::size_t d = 0; d < AerEncoder::kDim; ++d) {
    const double diff = static_cast<double>(a[d]) - static_cast<double>(b[d]);
    s += diff * diff;
  }
  return s;
}

// Pool multiplier decays linearly 4 -> 1 over the run.
inline std::size_t aer_pool_size(std::size_t batch_size, std::int64_t t, std::int64_t total_steps) {
  const double lam = LinearAnneal{4.0, 1.0, std::max<std::int64_t>(total_steps, 1)}.at(t);
  return static_cast<std::size_t>(std::floor(lam * static_cast<double>(batch_size)));
}

// Keeps the B candidates nearest to the current state (ties: lower slot).
inline std::vector<std::size_t> aer_nearest(std::span<const double> distances,
                                            std::span<const std::size_t> slots, std::size_t b) {
  std::vector<std::size_t> order(distances.size());
  std::iota(order.begin(), order.end(), 0);
  const auto less = [&](std::size_t x, std::size_t y) {
    if (distances[x] != distances[y]) return distances[x] < distances[y];
    if (slots[x] != slots[y]) return slots[x] < slots[y];
    return x < y;
  };
  b = std::min(b, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(b), order.end(), less);
  order.resize(b);
  return order;
}

// Frozen encoder plus a per-slot embedding cache (valid per generation).
class AerSelector {
 public:
  AerSelector(std::size_t input_dim, std::uint64_t seed, std::size_t capacity)
      : encoder_(input_dim, seed), cache_(capacity), cached_gen_(capacity, 0) {}

  const AerEncoder& encoder() const { return encoder_; }

  SampleBatch select(const ReplayBuffer& buffer, const Observation& current, std::size_t batch_size,
                     std::int64_t t, std::int64_t total_steps, Rng& rng) {
    const std::size_t pool_size = aer_pool_size(batch_size, t, total_steps);
    if (pool_size <= batch_size) return buffer.sample_uniform(batch_size, rng);
    const SampleBatch pool = buffer.sample_uniform(pool_size, rng);
    const auto here = encoder_.embed(current);
    std::vector<double> dist(pool.size());
    std::vector<std::size_t> slots(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
      slots[i] = pool.indices[i].slot;
      dist[i] = squared_distance(here, embedding(buffer, pool.indices[i]));
    }
    SampleBatch out;
    for (std::size_t i : aer_nearest(dist, slots, batch_size)) {
      out.indices.push_back(pool.indices[i]);
      out.probabilities.push_back(pool.probabilities[i]);
      out.is_weights.push_back(1.0);
      out.branch.push_back(Branch::UNIFORM);
    }
    return out;
  }

 private:
  const AerEncoder::Embedding& embedding(const ReplayBuffer& buffer, SlotRef ref) {
    if (cached_gen_[ref.slot] != ref.generation) {
      cache_[ref.slot] = encoder_.embed(buffer.transition(ref.slot).state);
      cached_gen_[ref.slot] = ref.generation;
    }
    return cache_[ref.slot];
  }

  AerEncoder encoder_;
  std::vector<AerEncoder::Embedding> cache_;
  std::vector<std::uint64_t> cached_gen_;
};

}  // namespace replay_engine
