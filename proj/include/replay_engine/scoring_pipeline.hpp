#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <variant>
#include <vector>

#include "replay_engine/frame.hpp"
#include "replay_engine/replay_buffer.hpp"
#include "replay_engine/scorers.hpp"

namespace replay_engine {

struct ClipRequest {
  std::int64_t clip_id = 0;
  std::vector<SlotRef> indices;
  std::vector<FramePayload> frames;
};

struct ScoreResult {
  std::int64_t clip_id = 0;
  std::vector<SlotRef> indices;
  double score = 0.0;  // raw scorer output; thresholding happens in the buffer
};

struct ShutdownRequest {};

using WorkItem = std::variant<ClipRequest, ShutdownRequest>;

// Mutex/condvar queue with an optional bound. push() on a full queue drops
// the oldest element and hands it back to the caller.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t max_depth = 0) : max_depth_(max_depth) {}

  std::optional<T> push(T item) {
    std::optional<T> evicted;
    {
      std::lock_guard lock(mu_);
      if (max_depth_ > 0 && items_.size() >= max_depth_) {
        evicted = std::move(items_.front());
        items_.pop_front();
      }
      items_.push_back(std::move(item));
    }
    cv_.notify_one();
    return evicted;
  }

  // Ignores the bound (control messages must never be dropped).
  void push_unbounded(T item) {
    {
      std::lock_guard lock(mu_);
      items_.push_back(std::move(item));
    }
    cv_.notify_one();
  }

  std::optional<T> try_pop() {
    std::lock_guard lock(mu_);
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    return item;
  }

  T pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !items_.empty(); });
    T item = std::move(items_.front());
    items_.pop_front();
    return item;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }

 private:
  std::size_t max_depth_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> items_;
};

// Accumulates per-step frames into clips of at most `max_len` frames. A clip
// is emitted when full or when the episode ends.
class ClipBuffer {
 public:
  explicit ClipBuffer(std::size_t max_len = 32) : max_len_(max_len) {
    if (max_len == 0) throw std::invalid_argument("clip length must be >= 1");
  }

  std::optional<ClipRequest> push_frame(SlotRef idx, FramePayload frame, bool terminated,
                                        bool truncated) {
    pending_.indices.push_back(idx);
    pending_.frames.push_back(std::move(frame));
    if (pending_.indices.size() < max_len_ && !terminated && !truncated) return std::nullopt;
    ClipRequest out = std::move(pending_);
    out.clip_id = next_clip_id_++;
    pending_ = ClipRequest{};
    return out;
  }

  std::size_t pending() const { return pending_.indices.size(); }
  std::size_t max_len() const { return max_len_; }

 private:
  std::size_t max_len_;
  std::int64_t next_clip_id_ = 0;
  ClipRequest pending_;
};

// Cumulative moving average of raw scores; the default priority for
// insertions that have not been scored yet.
struct CmaState {
  double mean = 0.0;
  std::int64_t count = 0;
  bool operator==(const CmaState&) const = default;
};

inline CmaState cma_update(CmaState c, double score) {
  if (c.count == 0) return {score, 1};
  const double n = static_cast<double>(c.count);
  return {(c.mean * n + score) / (n + 1.0), c.count + 1};
}

struct PipelineCounters {
  std::atomic<std::uint64_t> enqueued{0};
  std::atomic<std::uint64_t> evicted{0};
  std::atomic<std::uint64_t> scored{0};
  std::atomic<std::uint64_t> retries{0};
  std::atomic<std::uint64_t> dropped{0};
  // Results whose clip had at least one live slot / only stale slots.
  std::atomic<std::uint64_t> applied_clips{0};
  std::atomic<std::uint64_t> stale_clips{0};
  std::atomic<std::uint64_t> applied_writes{0};
  std::atomic<std::uint64_t> stale_writes{0};

  // applied + stale + dropped + evicted == enqueued once everything is drained.
  bool conserved() const {
    return applied_clips + stale_clips + dropped + evicted == enqueued;
  }
};

using InQueue = BoundedQueue<WorkItem>;
using OutQueue = BoundedQueue<ScoreResult>;

// Scores one request, retrying once on failure. Returns nullopt when dropped.
inline std::optional<ScoreResult> score_request(const ClipRequest& req, Scorer& scorer,
                                                PipelineCounters& counters) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      const double s = scorer.score(req.clip_id, req.frames);
      if (s >= 0.0 && s <= 1.0) {
        ++counters.scored;
        return ScoreResult{req.clip_id, req.indices, s};
      }
    } catch (const std::exception&) {
    }
    if (attempt == 0) ++counters.retries;
  }
  ++counters.dropped;
  return std::nullopt;
}

// Worker body: FIFO over the input queue until a ShutdownRequest is popped.
// Requests queued ahead of the shutdown are all processed first.
inline void worker_loop(InQueue& in, OutQueue& out, Scorer& scorer, PipelineCounters& counters) {
  for (;;) {
    WorkItem item = in.pop();
    if (std::holds_alternative<ShutdownRequest>(item)) return;
    if (auto r = score_request(std::get<ClipRequest>(item), scorer, counters)) {
      out.push(std::move(*r));
    }
  }
}

// Applies every available result without blocking. Each clip score fans out
// to all member slots; the CMA is updated once per clip.
inline std::size_t drain_and_apply(OutQueue& out, ReplayBuffer& buffer, CmaState& cma,
                                   PipelineCounters* counters = nullptr) {
  std::size_t applied = 0;
  while (auto r = out.try_pop()) {
    std::size_t live = 0;
    for (const SlotRef& idx : r->indices) {
      if (buffer.set_semantic_score(idx, r->score)) {
        ++live;
      } else if (counters) {
        ++counters->stale_writes;
      }
    }
    if (counters) {
      counters->applied_writes += live;
      if (live > 0) {
        ++counters->applied_clips;
      } else {
        ++counters->stale_clips;
      }
    }
    applied += live;
    cma = cma_update(cma, std::clamp(r->score, 0.0, 1.0));
  }
  return applied;
}

struct PipelineConfig {
  std::size_t clip_length = 32;
  std::size_t queue_depth = 64;
  // Score inline during drain instead of on a worker thread.
  bool lockstep = true;
};

// Clip assembly, scorer worker and result application. In lockstep mode the
// worker body runs inline inside drain_and_apply so runs are reproducible.
class ScoringPipeline {
 public:
  ScoringPipeline(std::unique_ptr<Scorer> scorer, PipelineConfig cfg)
      : cfg_(cfg), scorer_(std::move(scorer)), clips_(cfg.clip_length), in_(cfg.queue_depth) {
    if (!cfg_.lockstep) {
      worker_ = std::thread([this] { worker_loop(in_, out_, *scorer_, counters_); });
    }
  }

  ~ScoringPipeline() { shutdown(); }

  ScoringPipeline(const ScoringPipeline&) = delete;
  ScoringPipeline& operator=(const ScoringPipeline&) = delete;

  // Adds one step's frame; enqueues the clip if this step completed one.
  bool push_frame(SlotRef idx, FramePayload frame, bool terminated, bool truncated) {
    auto clip = clips_.push_frame(idx, std::move(frame), terminated, truncated);
    if (!clip) return false;
    enqueue(std::move(*clip));
    return true;
  }

  void enqueue(ClipRequest req) {
    ++counters_.enqueued;
    if (in_.push(std::move(req))) ++counters_.evicted;
  }

  std::size_t drain_and_apply(ReplayBuffer& buffer) {
    if (cfg_.lockstep && !stopped_) {
      while (auto item = in_.try_pop()) {
        if (auto r = score_request(std::get<ClipRequest>(*item), *scorer_, counters_)) {
          out_.push(std::move(*r));
        }
      }
    }
    return replay_engine::drain_and_apply(out_, buffer, cma_, &counters_);
  }

  // Stops the worker after it has processed everything queued so far.
  void shutdown() {
    if (stopped_) return;
    stopped_ = true;
    if (worker_.joinable()) {
      in_.push_unbounded(ShutdownRequest{});
      worker_.join();
    } else {
      while (auto item = in_.try_pop()) {
        if (auto* req = std::get_if<ClipRequest>(&*item)) {
          if (auto r = score_request(*req, *scorer_, counters_)) out_.push(std::move(*r));
        }
      }
    }
  }

  // Insertion default for unscored data: the CMA of past scores.
  double default_priority() const { return std::clamp(cma_.mean, 0.0, 1.0); }
  const CmaState& cma() const { return cma_; }
  const PipelineCounters& counters() const { return counters_; }
  std::size_t queue_depth() const { return in_.size(); }
  const PipelineConfig& config() const { return cfg_; }

 private:
  PipelineConfig cfg_;
  std::unique_ptr<Scorer> scorer_;
  ClipBuffer clips_;
  InQueue in_;
  OutQueue out_;
  CmaState cma_;
  PipelineCounters counters_;
  std::thread worker_;
  bool stopped_ = false;
};

}  // namespace replay_engine
