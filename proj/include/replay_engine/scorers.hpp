#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>

#include "replay_engine/frame.hpp"
#include "replay_engine/rng.hpp"

namespace replay_engine {

// Scorer contract: maps a clip to a value in [0, 1]. Output depends only on
// (clip_id, frames) and the scorer's own seed, never on call order.
// Instances are owned by a single worker and need not be thread safe.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual double score(std::int64_t clip_id, std::span<const FramePayload> frames) = 0;
};

// 1 iff any frame in the clip carries a key, door or goal event.
inline double oracle_score(std::span<const FramePayload> frames) {
  for (const auto& f : frames) {
    if (decode_event_frame(f).any_event()) return 1.0;
  }
  return 0.0;
}

enum class CorruptionMode { STANDARD, MISLEADING, ABSTRACT };

inline const char* to_string(CorruptionMode m) {
  switch (m) {
    case CorruptionMode::STANDARD: return "STANDARD";
    case CorruptionMode::MISLEADING: return "MISLEADING";
    case CorruptionMode::ABSTRACT: return "ABSTRACT";
  }
  return "?";
}

// Per-clip fair coin derived from (seed, clip_id).
inline bool clip_coin(std::uint64_t seed, std::int64_t clip_id, std::uint64_t salt = 0) {
  return (hash_combine(hash_combine(seed, static_cast<std::uint64_t>(clip_id)), salt) >> 63) != 0;
}

// Uniform [0, 1) per (seed, clip_id, salt).
inline double clip_uniform(std::uint64_t seed, std::int64_t clip_id, std::uint64_t salt) {
  const std::uint64_t h =
      hash_combine(hash_combine(seed, static_cast<std::uint64_t>(clip_id)), salt);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// MISLEADING inverts event semantics: clips without any event but with at
// least one distractor step score 1, event clips score 0. ABSTRACT replaces
// the content with a seeded coin flip.
inline double corrupted_score(std::span<const FramePayload> frames, CorruptionMode mode,
                              std::uint64_t seed, std::int64_t clip_id) {
  switch (mode) {
    case CorruptionMode::STANDARD:
      return oracle_score(frames);
    case CorruptionMode::MISLEADING: {
      bool event = false;
      bool distractor = false;
      for (const auto& f : frames) {
        const EventTag e = decode_event_frame(f);
        event = event || e.any_event();
        distractor = distractor || e.distractor;
      }
      return (!event && distractor) ? 1.0 : 0.0;
    }
    case CorruptionMode::ABSTRACT:
      return clip_coin(seed, clip_id) ? 1.0 : 0.0;
  }
  return 0.0;
}

inline double noisy_score(std::span<const FramePayload> frames, double flip_prob,
                          std::uint64_t seed, std::int64_t clip_id) {
  const double base = oracle_score(frames);
  const bool flip = clip_uniform(seed, clip_id, 0x6e6f697379ULL) < flip_prob;
  return flip ? 1.0 - base : base;
}

class OracleScorer final : public Scorer {
 public:
  double score(std::int64_t, std::span<const FramePayload> frames) override {
    return oracle_score(frames);
  }
};

class CorruptedScorer final : public Scorer {
 public:
  CorruptedScorer(CorruptionMode mode, std::uint64_t seed) : mode_(mode), seed_(seed) {}
  double score(std::int64_t clip_id, std::span<const FramePayload> frames) override {
    return corrupted_score(frames, mode_, seed_, clip_id);
  }

 private:
  CorruptionMode mode_;
  std::uint64_t seed_;
};

class NoisyScorer final : public Scorer {
 public:
  NoisyScorer(double flip_prob, std::uint64_t seed) : flip_prob_(flip_prob), seed_(seed) {
    if (!(flip_prob >= 0.0 && flip_prob <= 0.5)) {
      throw std::invalid_argument("flip probability must lie in [0, 0.5]");
    }
  }
  double score(std::int64_t clip_id, std::span<const FramePayload> frames) override {
    return noisy_score(frames, flip_prob_, seed_, clip_id);
  }

 private:
  double flip_prob_;
  std::uint64_t seed_;
};

// Returns a fixed value without looking at the clip.
class ConstantScorer final : public Scorer {
 public:
  explicit ConstantScorer(double value) : value_(value) {}
  double score(std::int64_t, std::span<const FramePayload>) override { return value_; }

 private:
  double value_;
};

// Wraps another scorer and adds a fixed latency per clip.
class DelayedScorer final : public Scorer {
 public:
  DelayedScorer(std::unique_ptr<Scorer> inner, std::chrono::microseconds delay)
      : inner_(std::move(inner)), delay_(delay) {}
  double score(std::int64_t clip_id, std::span<const FramePayload> frames) override {
    std::this_thread::sleep_for(delay_);
    return inner_->score(clip_id, frames);
  }

 private:
  std::unique_ptr<Scorer> inner_;
  std::chrono::microseconds delay_;
};

}  // namespace replay_engine
