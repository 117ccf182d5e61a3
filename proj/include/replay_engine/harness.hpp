#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "replay_engine/baselines.hpp"
#include "replay_engine/errors.hpp"
#include "replay_engine/external_scorer.hpp"
#include "replay_engine/gridworld.hpp"
#include "replay_engine/learner.hpp"
#include "replay_engine/replay_buffer.hpp"
#include "replay_engine/sampler.hpp"
#include "replay_engine/scorers.hpp"
#include "replay_engine/scoring_pipeline.hpp"

namespace replay_engine {

enum class SamplerKind { UER, PER, VLM_ONLY, VLM_TD, ERO, RELO, AER };
enum class ScorerKind { NONE, ORACLE, NOISY, MISLEADING, ABSTRACT, EXTERNAL };

inline const char* to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::UER: return "UER";
    case SamplerKind::PER: return "PER";
    case SamplerKind::VLM_ONLY: return "VLM_ONLY";
    case SamplerKind::VLM_TD: return "VLM_TD";
    case SamplerKind::ERO: return "ERO";
    case SamplerKind::RELO: return "RELO";
    case SamplerKind::AER: return "AER";
  }
  return "?";
}

inline const char* to_string(ScorerKind k) {
  switch (k) {
    case ScorerKind::NONE: return "NONE";
    case ScorerKind::ORACLE: return "ORACLE";
    case ScorerKind::NOISY: return "NOISY";
    case ScorerKind::MISLEADING: return "MISLEADING";
    case ScorerKind::ABSTRACT: return "ABSTRACT";
    case ScorerKind::EXTERNAL: return "EXTERNAL";
  }
  return "?";
}

struct EnvConfig {
  int size = 8;
  int max_steps = 0;  // 0 -> 10 * size^2
  // Training episodes draw their layout from seeds
  // layout_seed_base .. layout_seed_base + layout_pool - 1; evaluation uses the
  // first eval_episodes of the same range.
  int layout_pool = 40;
  std::uint64_t layout_seed_base = 1000;

  bool operator==(const EnvConfig&) const = default;
};

struct ScorerConfig {
  ScorerKind kind = ScorerKind::ORACLE;
  double flip_prob = 0.1;
  std::string address;  // "stdio:<command>" or "tcp:<host>:<port>"
  double timeout_s = 30.0;
  std::string prompt = kDefaultPrompt;
  std::int64_t delay_us = 0;  // artificial per-clip latency

  bool operator==(const ScorerConfig&) const = default;
};

struct ReplayConfig {
  std::size_t capacity = 50'000;
  // Negative alpha / beta and unset IS flag mean "use the sampler's default".
  double alpha = -1.0;
  double beta = -1.0;
  std::optional<bool> importance_sampling;
  std::string per_init = "max";  // "max" or "fixed"
  double per_fixed_priority = 1.0;
  std::size_t clip_length = 32;
  std::size_t queue_depth = 64;
  double threshold = 0.5;

  bool operator==(const ReplayConfig&) const = default;
};

struct ExperimentConfig {
  std::string name = "run";
  EnvConfig env;
  SamplerKind sampler = SamplerKind::VLM_ONLY;
  ScorerConfig scorer;
  // t_schedule <= 0 means "half of total_steps".
  MixtureSchedule schedule{0.0, 0.5, 0, ScheduleMode::LINEAR};
  LearnerConfig learner;
  ReplayConfig replay;
  std::int64_t total_steps = 300'000;
  std::int64_t eval_every = 5'000;
  int eval_episodes = 32;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool lockstep = true;
  int threads = 1;

  bool operator==(const ExperimentConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Config (de)serialization
// ---------------------------------------------------------------------------

namespace config_detail {

template <typename E, std::size_t N>
E parse_enum(const nlohmann::json& j, const std::string& path,
             const std::array<std::pair<const char*, E>, N>& table) {
  if (!j.is_string()) throw ConfigError(path, "expected a string");
  const auto s = j.get<std::string>();
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  throw ConfigError(path, "unknown value '" + s + "'");
}

inline constexpr std::array<std::pair<const char*, SamplerKind>, 7> kSamplers{{
    {"UER", SamplerKind::UER},
    {"PER", SamplerKind::PER},
    {"VLM_ONLY", SamplerKind::VLM_ONLY},
    {"VLM_TD", SamplerKind::VLM_TD},
    {"ERO", SamplerKind::ERO},
    {"RELO", SamplerKind::RELO},
    {"AER", SamplerKind::AER},
}};

inline constexpr std::array<std::pair<const char*, ScorerKind>, 6> kScorers{{
    {"NONE", ScorerKind::NONE},
    {"ORACLE", ScorerKind::ORACLE},
    {"NOISY", ScorerKind::NOISY},
    {"MISLEADING", ScorerKind::MISLEADING},
    {"ABSTRACT", ScorerKind::ABSTRACT},
    {"EXTERNAL", ScorerKind::EXTERNAL},
}};

// Reads an optional field into `out`, reporting type errors with the path.
template <typename T>
void read(const nlohmann::json& obj, const char* key, const std::string& path, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + "." + key, e.what());
  }
}

inline void require_object(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
}

inline void reject_unknown(const nlohmann::json& j, const std::string& path,
                           std::initializer_list<const char*> known) {
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; })) {
      throw ConfigError(path + "." + k, "unknown field");
    }
  }
}

}  // namespace config_detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["env"] = {{"size", c.env.size},
              {"max_steps", c.env.max_steps},
              {"layout_pool", c.env.layout_pool},
              {"layout_seed_base", c.env.layout_seed_base}};
  j["sampler"] = to_string(c.sampler);
  j["scorer"] = {{"kind", to_string(c.scorer.kind)},
                 {"flip_prob", c.scorer.flip_prob},
                 {"address", c.scorer.address},
                 {"timeout_s", c.scorer.timeout_s},
                 {"prompt", c.scorer.prompt},
                 {"delay_us", c.scorer.delay_us}};
  j["schedule"] = {{"mode", c.schedule.mode == ScheduleMode::LINEAR ? "LINEAR" : "NONE"},
                   {"lambda0", c.schedule.lambda0},
                   {"lambda_max", c.schedule.lambda_max},
                   {"t_schedule", c.schedule.t_schedule}};
  const auto& l = c.learner;
  j["learner"] = {{"gamma", l.gamma},
                  {"learning_rate", l.learning_rate},
                  {"batch_size", l.batch_size},
                  {"target_sync_every", l.target_sync_every},
                  {"train_freq", l.train_freq},
                  {"learning_starts", l.learning_starts},
                  {"eps_start", l.eps_start},
                  {"eps_end", l.eps_end},
                  {"exploration_fraction", l.exploration_fraction},
                  {"double", l.double_q},
                  {"random_ties", l.random_ties}};
  const auto& r = c.replay;
  j["replay"] = {{"capacity", r.capacity},
                 {"alpha", r.alpha},
                 {"beta", r.beta},
                 {"per_init", r.per_init},
                 {"per_fixed_priority", r.per_fixed_priority},
                 {"clip_length", r.clip_length},
                 {"queue_depth", r.queue_depth},
                 {"threshold", r.threshold}};
  j["replay"]["importance_sampling"] =
      r.importance_sampling ? nlohmann::json(*r.importance_sampling) : nlohmann::json(nullptr);
  j["total_steps"] = c.total_steps;
  j["eval_every"] = c.eval_every;
  j["eval_episodes"] = c.eval_episodes;
  j["seeds"] = c.seeds;
  j["lockstep"] = c.lockstep;
  j["threads"] = c.threads;
  return j;
}

inline void validate(const ExperimentConfig& c) {
  if (!valid_grid_size(c.env.size)) throw ConfigError("env.size", "must be one of 6, 8, 12, 16");
  if (c.env.max_steps < 0) throw ConfigError("env.max_steps", "must be >= 0");
  if (c.env.layout_pool < 1) throw ConfigError("env.layout_pool", "must be >= 1");
  if (c.total_steps < 0) throw ConfigError("total_steps", "must be >= 0");
  if (c.eval_every < 0) throw ConfigError("eval_every", "must be >= 0");
  if (c.eval_episodes < 1) throw ConfigError("eval_episodes", "must be >= 1");
  if (c.seeds.empty()) throw ConfigError("seeds", "need at least one seed");
  if (c.threads < 1) throw ConfigError("threads", "must be >= 1");
  const auto& l = c.learner;
  if (!(l.gamma > 0.0 && l.gamma <= 1.0)) throw ConfigError("learner.gamma", "must lie in (0, 1]");
  if (!(l.learning_rate > 0.0)) throw ConfigError("learner.learning_rate", "must be > 0");
  if (l.batch_size < 1) throw ConfigError("learner.batch_size", "must be >= 1");
  if (l.train_freq < 1) throw ConfigError("learner.train_freq", "must be >= 1");
  if (l.target_sync_every < 1) throw ConfigError("learner.target_sync_every", "must be >= 1");
  if (l.learning_starts < 0) throw ConfigError("learner.learning_starts", "must be >= 0");
  if (!(l.eps_end <= l.eps_start)) throw ConfigError("learner.eps_end", "must be <= eps_start");
  if (!(l.exploration_fraction > 0.0)) {
    throw ConfigError("learner.exploration_fraction", "must be > 0");
  }
  if (c.replay.capacity < 1) throw ConfigError("replay.capacity", "must be >= 1");
  if (c.replay.clip_length < 1) throw ConfigError("replay.clip_length", "must be >= 1");
  if (c.replay.per_init != "max" && c.replay.per_init != "fixed") {
    throw ConfigError("replay.per_init", "must be 'max' or 'fixed'");
  }
  if (c.schedule.mode == ScheduleMode::LINEAR) {
    if (!(c.schedule.lambda0 >= 0.0 && c.schedule.lambda0 <= c.schedule.lambda_max &&
          c.schedule.lambda_max <= 1.0)) {
      throw ConfigError("schedule", "need 0 <= lambda0 <= lambda_max <= 1");
    }
  }
  if (c.scorer.kind == ScorerKind::NOISY &&
      !(c.scorer.flip_prob >= 0.0 && c.scorer.flip_prob <= 0.5)) {
    throw ConfigError("scorer.flip_prob", "must lie in [0, 0.5]");
  }
  if (c.scorer.kind == ScorerKind::EXTERNAL && c.scorer.address.empty()) {
    throw ConfigError("scorer.address", "required for EXTERNAL scorers");
  }
  if ((c.sampler == SamplerKind::VLM_ONLY || c.sampler == SamplerKind::VLM_TD) &&
      c.scorer.kind == ScorerKind::NONE) {
    throw ConfigError("scorer.kind", "semantic samplers need a scorer");
  }
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using namespace config_detail;
  require_object(j, "$");
  reject_unknown(j, "$", {"name", "env", "sampler", "scorer", "schedule", "learner", "replay",
                          "total_steps", "eval_every", "eval_episodes", "seeds", "lockstep",
                          "threads"});
  ExperimentConfig c;
  read(j, "name", "$", c.name);
  if (j.contains("env")) {
    const auto& e = j["env"];
    require_object(e, "env");
    reject_unknown(e, "env", {"size", "max_steps", "layout_pool", "layout_seed_base"});
    read(e, "size", "env", c.env.size);
    read(e, "max_steps", "env", c.env.max_steps);
    read(e, "layout_pool", "env", c.env.layout_pool);
    read(e, "layout_seed_base", "env", c.env.layout_seed_base);
  }
  if (j.contains("sampler")) c.sampler = parse_enum(j["sampler"], "sampler", kSamplers);
  if (j.contains("scorer")) {
    const auto& s = j["scorer"];
    if (s.is_string()) {
      c.scorer.kind = parse_enum(s, "scorer", kScorers);
    } else {
      require_object(s, "scorer");
      reject_unknown(s, "scorer", {"kind", "flip_prob", "address", "timeout_s", "prompt", "delay_us"});
      if (s.contains("kind")) c.scorer.kind = parse_enum(s["kind"], "scorer.kind", kScorers);
      read(s, "flip_prob", "scorer", c.scorer.flip_prob);
      read(s, "address", "scorer", c.scorer.address);
      read(s, "timeout_s", "scorer", c.scorer.timeout_s);
      read(s, "prompt", "scorer", c.scorer.prompt);
      read(s, "delay_us", "scorer", c.scorer.delay_us);
    }
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    require_object(s, "schedule");
    reject_unknown(s, "schedule", {"mode", "lambda0", "lambda_max", "t_schedule"});
    if (s.contains("mode")) {
      static constexpr std::array<std::pair<const char*, ScheduleMode>, 2> modes{{
          {"LINEAR", ScheduleMode::LINEAR}, {"NONE", ScheduleMode::NONE}}};
      c.schedule.mode = parse_enum(s["mode"], "schedule.mode", modes);
    }
    read(s, "lambda0", "schedule", c.schedule.lambda0);
    read(s, "lambda_max", "schedule", c.schedule.lambda_max);
    read(s, "t_schedule", "schedule", c.schedule.t_schedule);
  }
  if (j.contains("learner")) {
    const auto& l = j["learner"];
    require_object(l, "learner");
    reject_unknown(l, "learner", {"gamma", "learning_rate", "batch_size", "target_sync_every",
                                  "train_freq", "learning_starts", "eps_start", "eps_end",
                                  "exploration_fraction", "double", "random_ties"});
    read(l, "gamma", "learner", c.learner.gamma);
    read(l, "learning_rate", "learner", c.learner.learning_rate);
    read(l, "batch_size", "learner", c.learner.batch_size);
    read(l, "target_sync_every", "learner", c.learner.target_sync_every);
    read(l, "train_freq", "learner", c.learner.train_freq);
    read(l, "learning_starts", "learner", c.learner.learning_starts);
    read(l, "eps_start", "learner", c.learner.eps_start);
    read(l, "eps_end", "learner", c.learner.eps_end);
    read(l, "exploration_fraction", "learner", c.learner.exploration_fraction);
    read(l, "double", "learner", c.learner.double_q);
    read(l, "random_ties", "learner", c.learner.random_ties);
  }
  if (j.contains("replay")) {
    const auto& r = j["replay"];
    require_object(r, "replay");
    reject_unknown(r, "replay", {"capacity", "alpha", "beta", "importance_sampling", "per_init",
                                 "per_fixed_priority", "clip_length", "queue_depth", "threshold"});
    read(r, "capacity", "replay", c.replay.capacity);
    read(r, "alpha", "replay", c.replay.alpha);
    read(r, "beta", "replay", c.replay.beta);
    if (r.contains("importance_sampling") && !r["importance_sampling"].is_null()) {
      bool v = false;
      read(r, "importance_sampling", "replay", v);
      c.replay.importance_sampling = v;
    }
    read(r, "per_init", "replay", c.replay.per_init);
    read(r, "per_fixed_priority", "replay", c.replay.per_fixed_priority);
    read(r, "clip_length", "replay", c.replay.clip_length);
    read(r, "queue_depth", "replay", c.replay.queue_depth);
    read(r, "threshold", "replay", c.replay.threshold);
  }
  read(j, "total_steps", "$", c.total_steps);
  read(j, "eval_every", "$", c.eval_every);
  read(j, "eval_episodes", "$", c.eval_episodes);
  read(j, "seeds", "$", c.seeds);
  read(j, "lockstep", "$", c.lockstep);
  read(j, "threads", "$", c.threads);
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("$", "cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("$", std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Per-sampler resolution of replay parameters
// ---------------------------------------------------------------------------

struct ResolvedReplay {
  PriorityMode mode = PriorityMode::VLM_ONLY;
  double alpha = 1.0;
  double beta_start = 1.0;
  double beta_end = 1.0;
  bool importance_sampling = false;
};

inline ResolvedReplay resolve_replay(const ExperimentConfig& c) {
  ResolvedReplay r;
  switch (c.sampler) {
    case SamplerKind::UER:
    case SamplerKind::VLM_ONLY:
      r = {PriorityMode::VLM_ONLY, 1.0, 1.0, 1.0, false};
      break;
    case SamplerKind::VLM_TD:
      r = {PriorityMode::VLM_TD, 1.0, 1.0, 1.0, false};
      break;
    case SamplerKind::PER:
      r = {PriorityMode::PER, 0.7, 1.0, 1.0, true};
      break;
    case SamplerKind::RELO:
      r = {PriorityMode::RELO_EXTERNAL, 0.6, 0.4, 1.0, true};
      break;
    case SamplerKind::ERO:
    case SamplerKind::AER:
      r = {PriorityMode::PER, 1.0, 1.0, 1.0, false};
      break;
  }
  if (c.replay.alpha >= 0.0) r.alpha = c.replay.alpha;
  if (c.replay.beta >= 0.0) r.beta_start = r.beta_end = c.replay.beta;
  if (c.replay.importance_sampling) r.importance_sampling = *c.replay.importance_sampling;
  return r;
}

inline MixtureSchedule resolve_schedule(const ExperimentConfig& c) {
  MixtureSchedule s = c.schedule;
  if (s.t_schedule <= 0) s.t_schedule = std::max<std::int64_t>(c.total_steps / 2, 1);
  return s;
}

inline std::unique_ptr<Scorer> make_scorer(const ScorerConfig& sc, std::uint64_t seed) {
  std::unique_ptr<Scorer> s;
  switch (sc.kind) {
    case ScorerKind::NONE: return nullptr;
    case ScorerKind::ORACLE: s = std::make_unique<OracleScorer>(); break;
    case ScorerKind::NOISY: s = std::make_unique<NoisyScorer>(sc.flip_prob, seed); break;
    case ScorerKind::MISLEADING:
      s = std::make_unique<CorruptedScorer>(CorruptionMode::MISLEADING, seed);
      break;
    case ScorerKind::ABSTRACT:
      s = std::make_unique<CorruptedScorer>(CorruptionMode::ABSTRACT, seed);
      break;
    case ScorerKind::EXTERNAL:
      s = std::make_unique<ExternalScorer>(
          open_transport(sc.address), sc.prompt,
          std::chrono::milliseconds(static_cast<std::int64_t>(sc.timeout_s * 1000.0)));
      break;
  }
  if (sc.delay_us > 0) {
    s = std::make_unique<DelayedScorer>(std::move(s), std::chrono::microseconds(sc.delay_us));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double success_rate = 0.0;
  double mean_return = 0.0;
  double mean_ep_len = 0.0;
};

using EnvFactory = std::function<GridState(std::uint64_t seed)>;

// Greedy rollouts on layouts seed_base .. seed_base + n - 1. A deterministic
// greedy policy that revisits a state is stuck for good, so such episodes
// are recorded as running to the step limit without simulating the rest.
template <typename Policy>
EvalResult evaluate_policy(Policy&& policy, const EnvFactory& env_factory, int n_episodes,
                           std::uint64_t seed_base) {
  EvalResult r;
  int successes = 0;
  std::unordered_set<std::uint64_t> seen;
  for (int e = 0; e < n_episodes; ++e) {
    GridState s = env_factory(seed_base + static_cast<std::uint64_t>(e));
    seen.clear();
    Observation obs = encode(s);
    double ret = 0.0;
    int len = 0;
    for (;;) {
      const std::uint64_t key = observation_key(obs);
      if (!seen.insert(key).second) {
        len = s.max_steps;
        break;
      }
      const StepResult sr = step(s, static_cast<Action>(policy(s, obs, key)));
      ret += sr.reward;
      len = s.step;
      if (sr.terminated) {
        ++successes;
        break;
      }
      if (sr.truncated) break;
      obs = sr.obs;
    }
    r.mean_return += ret;
    r.mean_ep_len += len;
  }
  r.success_rate = static_cast<double>(successes) / n_episodes;
  r.mean_return /= n_episodes;
  r.mean_ep_len /= n_episodes;
  return r;
}

inline EvalResult evaluate(const QFunction& q, const EnvFactory& env_factory, int n_episodes,
                           std::uint64_t seed_base) {
  return evaluate_policy(
      [&](const GridState&, const Observation&, std::uint64_t key) { return argmax(q.row(key)); },
      env_factory, n_episodes, seed_base);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double mean_ep_len = 0.0;
  double lambda_t = 0.0;
  double buffer_fill = 0.0;
  double scored_fraction = 0.0;
  double positive_score_fraction = 0.0;
  std::size_t queue_depth = 0;
  std::uint64_t fallback_count = 0;

  bool operator==(const MetricsRow&) const = default;
};

inline nlohmann::ordered_json metrics_to_json(const MetricsRow& m) {
  nlohmann::ordered_json j;
  j["seed"] = m.seed;
  j["step"] = m.step;
  j["success_rate"] = m.success_rate;
  j["mean_return"] = m.mean_return;
  j["mean_ep_len"] = m.mean_ep_len;
  j["lambda_t"] = m.lambda_t;
  j["buffer_fill"] = m.buffer_fill;
  j["scored_fraction"] = m.scored_fraction;
  j["positive_score_fraction"] = m.positive_score_fraction;
  j["queue_depth"] = m.queue_depth;
  j["fallback_count"] = m.fallback_count;
  return j;
}

inline MetricsRow metrics_from_json(const nlohmann::json& j) {
  MetricsRow m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.step = j.at("step").get<std::int64_t>();
  m.success_rate = j.at("success_rate").get<double>();
  m.mean_return = j.at("mean_return").get<double>();
  m.mean_ep_len = j.at("mean_ep_len").get<double>();
  m.lambda_t = j.at("lambda_t").get<double>();
  m.buffer_fill = j.at("buffer_fill").get<double>();
  m.scored_fraction = j.at("scored_fraction").get<double>();
  m.positive_score_fraction = j.at("positive_score_fraction").get<double>();
  m.queue_depth = j.at("queue_depth").get<std::size_t>();
  m.fallback_count = j.at("fallback_count").get<std::uint64_t>();
  return m;
}

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;
  double wall_seconds = 0.0;
  std::int64_t env_steps = 0;
  std::int64_t train_steps = 0;
  std::uint64_t clips_enqueued = 0;
  std::uint64_t clips_evicted = 0;
  std::uint64_t clips_dropped = 0;
  std::uint64_t clips_applied = 0;
  std::uint64_t clips_stale = 0;
  bool conserved = true;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct RunHooks {
  // Called with each metrics row as soon as it is produced.
  std::function<void(const MetricsRow&)> on_row;
  // Called after every train step with the batch just used.
  std::function<void(const SampleBatch&, const ReplayBuffer&)> on_batch;
};

// One seed of the experiment: act, step, insert, clip/score, drain, train,
// evaluate. Everything random flows from `seed`.
inline SeedRun run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunHooks& hooks = {}) {
  validate(cfg);
  const auto wall_start = std::chrono::steady_clock::now();
  const ResolvedReplay rr = resolve_replay(cfg);
  const MixtureSchedule sched = resolve_schedule(cfg);
  const LearnerConfig& lc = cfg.learner;
  const int max_steps = cfg.env.max_steps > 0 ? cfg.env.max_steps : default_max_steps(cfg.env.size);

  Rng rng(mix64(seed));
  ReplayBuffer buffer(BufferConfig{cfg.replay.capacity, rr.mode, rr.alpha, cfg.replay.threshold, 1.0});
  TabularLearner learner(lc);
  std::unique_ptr<ScoringPipeline> pipeline;
  if (cfg.scorer.kind != ScorerKind::NONE) {
    pipeline = std::make_unique<ScoringPipeline>(
        make_scorer(cfg.scorer, mix64(seed ^ 0x5c0eULL)),
        PipelineConfig{cfg.replay.clip_length, cfg.replay.queue_depth, cfg.lockstep});
  }
  std::optional<EroPolicy> ero;
  std::vector<EroFeatures> ero_last_features;
  if (cfg.sampler == SamplerKind::ERO) ero.emplace(mix64(seed ^ 0xe70ULL));
  std::optional<AerSelector> aer;
  if (cfg.sampler == SamplerKind::AER) {
    aer.emplace(static_cast<std::size_t>(cfg.env.size * cfg.env.size * 3), mix64(seed ^ 0xae7ULL),
                cfg.replay.capacity);
  }
  MixtureStats mix_stats;
  const LinearAnneal beta{rr.beta_start, rr.beta_end, std::max<std::int64_t>(cfg.total_steps, 1)};

  const EnvFactory factory = [&](std::uint64_t s) { return reset(s, cfg.env.size, max_steps); };
  const auto new_episode = [&] {
    const std::uint64_t layout =
        cfg.env.layout_seed_base + rng.below(static_cast<std::uint64_t>(cfg.env.layout_pool));
    return factory(layout);
  };

  SeedRun out;
  out.seed = seed;
  GridState state = new_episode();
  Observation obs = encode(state);
  std::uint64_t key = observation_key(obs);

  const auto insert_default = [&]() -> double {
    switch (cfg.sampler) {
      case SamplerKind::VLM_ONLY:
      case SamplerKind::UER:
        return pipeline ? pipeline->default_priority() : 0.0;
      case SamplerKind::PER:
      case SamplerKind::VLM_TD:
      case SamplerKind::RELO:
        return cfg.replay.per_init == "max" ? buffer.max_priority() : cfg.replay.per_fixed_priority;
      case SamplerKind::ERO:
      case SamplerKind::AER:
        return 1.0;
    }
    return 1.0;
  };

  const auto lambda_now = [&](std::int64_t t) -> double {
    switch (cfg.sampler) {
      case SamplerKind::VLM_ONLY:
      case SamplerKind::VLM_TD:
        return lambda_at(sched, t);
      case SamplerKind::PER:
      case SamplerKind::RELO:
        return 1.0;
      default:
        return 0.0;
    }
  };

  for (std::int64_t t = 1; t <= cfg.total_steps; ++t) {
    const double eps = epsilon_at(lc, t, cfg.total_steps);
    const int a = lc.random_ties ? act_random_ties(learner.q(), key, eps, rng)
                                 : act(learner.q(), key, eps, rng);
    StepResult sr = step(state, static_cast<Action>(a));
    const std::uint64_t next_key = observation_key(sr.obs);

    Transition tr;
    tr.action = a;
    tr.reward = sr.reward;
    tr.terminated = sr.terminated;
    tr.truncated = sr.truncated;
    tr.episode_step = state.step - 1;
    tr.insert_time = t;
    tr.state_key = key;
    tr.next_state_key = next_key;
    if (cfg.sampler == SamplerKind::AER) {
      tr.state = obs;
      tr.next_state = sr.obs;
    }
    const SlotRef ref = buffer.insert(std::move(tr), insert_default());
    if (pipeline) {
      pipeline->push_frame(ref, encode_event_frame(sr.events), sr.terminated, sr.truncated);
      pipeline->drain_and_apply(buffer);
    }

    if (state.done) {
      state = new_episode();
      obs = encode(state);
      key = observation_key(obs);
    } else {
      obs = std::move(sr.obs);
      key = next_key;
    }

    if (t > lc.learning_starts && t % lc.train_freq == 0) {
      SampleBatch batch;
      switch (cfg.sampler) {
        case SamplerKind::ERO: {
          auto sel = ero_select(buffer, *ero, lc.batch_size, max_steps, rng);
          batch = std::move(sel.batch);
          ero_last_features = std::move(sel.features);
          break;
        }
        case SamplerKind::AER:
          batch = aer->select(buffer, obs, lc.batch_size, t, cfg.total_steps, rng);
          break;
        default:
          batch = draw_mixture(buffer, lc.batch_size, lambda_now(t), beta.at(t),
                               rr.importance_sampling, rng, &mix_stats);
          break;
      }
      const TrainStats stats = learner.train_step(batch, buffer);
      if (cfg.sampler == SamplerKind::RELO) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
          buffer.set_external_priority(batch.indices[i],
                                       relo_priority(stats.deltas[i], stats.target_deltas[i]));
        }
      }
      if (hooks.on_batch) hooks.on_batch(batch, buffer);
      ++out.train_steps;
    }
    learner.maybe_sync(t);

    if (cfg.eval_every > 0 && t % cfg.eval_every == 0) {
      const EvalResult ev =
          evaluate(learner.q(), factory, cfg.eval_episodes, cfg.env.layout_seed_base);
      if (ero && !ero_last_features.empty()) {
        ero->update(ero_last_features, ero->observe_return(ev.mean_return));
      }
      MetricsRow row;
      row.seed = seed;
      row.step = t;
      row.success_rate = ev.success_rate;
      row.mean_return = ev.mean_return;
      row.mean_ep_len = ev.mean_ep_len;
      row.lambda_t = lambda_now(t);
      const std::size_t n = buffer.size();
      row.buffer_fill = static_cast<double>(n) / static_cast<double>(buffer.capacity());
      row.scored_fraction = n ? static_cast<double>(buffer.scored_count()) / n : 0.0;
      row.positive_score_fraction = n ? static_cast<double>(buffer.positive_count()) / n : 0.0;
      row.queue_depth = pipeline ? pipeline->queue_depth() : 0;
      row.fallback_count = mix_stats.fallbacks;
      out.rows.push_back(row);
      if (hooks.on_row) hooks.on_row(row);
    }
  }
  out.env_steps = cfg.total_steps;
  out.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  if (pipeline) {
    pipeline->shutdown();
    pipeline->drain_and_apply(buffer);
    const auto& c = pipeline->counters();
    out.clips_enqueued = c.enqueued;
    out.clips_evicted = c.evicted;
    out.clips_dropped = c.dropped;
    out.clips_applied = c.applied_clips;
    out.clips_stale = c.stale_clips;
    out.conserved = c.conserved();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

inline constexpr std::array<double, 2> kThresholds = {0.5, 0.9};

struct RunSummary {
  std::vector<std::int64_t> steps;
  std::vector<double> asr;
  std::vector<double> sem;
  double best_asr = 0.0;
  // Keyed by threshold; nullopt when the mean curve never gets there.
  std::map<double, std::optional<std::int64_t>> steps_to_threshold;
  // Same, per seed (in run order).
  std::map<double, std::vector<std::optional<std::int64_t>>> per_seed_steps_to_threshold;
  std::vector<double> per_seed_best;
  std::vector<double> per_seed_final;
};

inline std::optional<std::int64_t> first_step_reaching(const std::vector<std::int64_t>& steps,
                                                       const std::vector<double>& values,
                                                       double threshold) {
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (values[i] >= threshold) return steps[i];
  }
  return std::nullopt;
}

inline RunSummary aggregate(const std::vector<std::vector<MetricsRow>>& runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate needs at least one seed");
  RunSummary s;
  for (const auto& r : runs[0]) s.steps.push_back(r.step);
  for (const auto& run : runs) {
    if (run.size() != s.steps.size()) throw MisalignedSteps();
    for (std::size_t i = 0; i < run.size(); ++i) {
      if (run[i].step != s.steps[i]) throw MisalignedSteps();
    }
  }
  const double m = static_cast<double>(runs.size());
  for (std::size_t i = 0; i < s.steps.size(); ++i) {
    double mean = 0.0;
    for (const auto& run : runs) mean += run[i].success_rate;
    mean /= m;
    double var = 0.0;
    for (const auto& run : runs) var += (run[i].success_rate - mean) * (run[i].success_rate - mean);
    const double sd = runs.size() > 1 ? std::sqrt(var / (m - 1.0)) : 0.0;
    s.asr.push_back(mean);
    s.sem.push_back(sd / std::sqrt(m));
    s.best_asr = std::max(s.best_asr, mean);
  }
  for (double th : kThresholds) {
    s.steps_to_threshold[th] = first_step_reaching(s.steps, s.asr, th);
    auto& per = s.per_seed_steps_to_threshold[th];
    for (const auto& run : runs) {
      std::vector<double> v;
      for (const auto& r : run) v.push_back(r.success_rate);
      per.push_back(first_step_reaching(s.steps, v, th));
    }
  }
  for (const auto& run : runs) {
    double best = 0.0;
    for (const auto& r : run) best = std::max(best, r.success_rate);
    s.per_seed_best.push_back(best);
    s.per_seed_final.push_back(run.empty() ? 0.0 : run.back().success_rate);
  }
  return s;
}

// (steps_base - steps_ours) / steps_base; positive means fewer steps needed.
inline std::optional<double> relative_efficiency(std::optional<std::int64_t> steps_base,
                                                 std::optional<std::int64_t> steps_ours) {
  if (!steps_base || !steps_ours || *steps_base == 0) return std::nullopt;
  return static_cast<double>(*steps_base - *steps_ours) / static_cast<double>(*steps_base);
}

// Median where a missing value (never reached) counts as +infinity.
inline std::optional<double> median_steps(std::vector<std::optional<std::int64_t>> v) {
  if (v.empty()) return std::nullopt;
  std::vector<double> x;
  for (const auto& s : v) x.push_back(s ? static_cast<double>(*s) : INFINITY);
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();
  const double med = n % 2 ? x[n / 2] : 0.5 * (x[n / 2 - 1] + x[n / 2]);
  if (!std::isfinite(med)) return std::nullopt;
  return med;
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline std::string summary_csv(const RunSummary& s, const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "step,asr,sem,sampler,scorer\n";
  for (std::size_t i = 0; i < s.steps.size(); ++i) {
    os << s.steps[i] << ',' << nlohmann::json(s.asr[i]).dump() << ','
       << nlohmann::json(s.sem[i]).dump() << ',' << to_string(cfg.sampler) << ','
       << to_string(cfg.scorer.kind) << '\n';
  }
  return os.str();
}

inline nlohmann::json optional_json(const std::optional<std::int64_t>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json summary_to_json(const RunSummary& s, const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["sampler"] = to_string(cfg.sampler);
  j["scorer"] = to_string(cfg.scorer.kind);
  j["best_asr"] = s.best_asr;
  for (double th : kThresholds) {
    const std::string k = th == 0.5 ? "0.5" : "0.9";
    j["steps_to_threshold"][k] = optional_json(s.steps_to_threshold.at(th));
    nlohmann::json per = nlohmann::json::array();
    for (const auto& v : s.per_seed_steps_to_threshold.at(th)) per.push_back(optional_json(v));
    j["per_seed_steps_to_threshold"][k] = per;
  }
  j["per_seed_best"] = s.per_seed_best;
  j["per_seed_final"] = s.per_seed_final;
  return j;
}

struct RunResult {
  std::vector<SeedRun> seeds;
  RunSummary summary;
};

// Runs every seed (optionally on several threads), streaming rows to
// out_dir/metrics_seed<N>.ndjson, then writes summary.csv / summary.json.
// An empty out_dir skips file output.
inline RunResult run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir = {}) {
  validate(cfg);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "config.json") << config_to_json(cfg).dump(2) << '\n';
  }
  RunResult result;
  result.seeds.resize(cfg.seeds.size());
  const auto work = [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    std::ofstream ndjson;
    RunHooks hooks;
    if (!out_dir.empty()) {
      ndjson.open(out_dir / ("metrics_seed" + std::to_string(seed) + ".ndjson"));
      hooks.on_row = [&](const MetricsRow& r) { ndjson << metrics_to_json(r).dump() << '\n' << std::flush; };
    }
    result.seeds[i] = run_seed(cfg, seed, hooks);
  };
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), cfg.seeds.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mu;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < cfg.seeds.size();) {
          try {
            work(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
  }
  std::vector<std::vector<MetricsRow>> rows;
  for (const auto& s : result.seeds) rows.push_back(s.rows);
  result.summary = aggregate(rows);
  if (!out_dir.empty()) {
    std::ofstream(out_dir / "summary.csv") << summary_csv(result.summary, cfg);
    std::ofstream(out_dir / "summary.json") << summary_to_json(result.summary, cfg).dump(2) << '\n';
    nlohmann::json timing = nlohmann::json::array();
    for (const auto& s : result.seeds) {
      timing.push_back({{"seed", s.seed},
                        {"wall_seconds", s.wall_seconds},
                        {"env_steps", s.env_steps},
                        {"train_steps", s.train_steps},
                        {"seconds_per_step", s.env_steps ? s.wall_seconds / s.env_steps : 0.0},
                        {"clips_enqueued", s.clips_enqueued},
                        {"clips_evicted", s.clips_evicted},
                        {"clips_dropped", s.clips_dropped},
                        {"clips_applied", s.clips_applied},
                        {"clips_stale", s.clips_stale}});
    }
    std::ofstream(out_dir / "timing.json") << timing.dump(2) << '\n';
  }
  return result;
}

// ---------------------------------------------------------------------------
// Comparison of two summary.csv files
// ---------------------------------------------------------------------------

struct CurvePoint {
  std::int64_t step = 0;
  double asr = 0.0;
  double sem = 0.0;
};

struct SummaryCurve {
  std::string sampler;
  std::string scorer;
  std::vector<CurvePoint> points;
};

inline SummaryCurve read_summary_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "step,asr,sem,sampler,scorer") {
    throw std::runtime_error(path.string() + ": unexpected summary header");
  }
  SummaryCurve c;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string step, asr, sem;
    std::getline(ss, step, ',');
    std::getline(ss, asr, ',');
    std::getline(ss, sem, ',');
    std::getline(ss, c.sampler, ',');
    std::getline(ss, c.scorer, ',');
    c.points.push_back({std::stoll(step), std::stod(asr), std::stod(sem)});
  }
  return c;
}

struct ComparisonRow {
  double base_best = 0.0;
  double ours_best = 0.0;
  std::optional<double> perf_gain;            // (ours - base) / base
  std::optional<std::int64_t> base_steps;     // base reaching its own best
  std::optional<std::int64_t> ours_steps;     // ours reaching base's best
  std::optional<double> efficiency_gain;      // (base - ours) / base
};

inline ComparisonRow compare(const SummaryCurve& base, const SummaryCurve& ours) {
  ComparisonRow r;
  std::vector<std::int64_t> bs, os;
  std::vector<double> bv, ov;
  for (const auto& p : base.points) {
    bs.push_back(p.step);
    bv.push_back(p.asr);
    r.base_best = std::max(r.base_best, p.asr);
  }
  for (const auto& p : ours.points) {
    os.push_back(p.step);
    ov.push_back(p.asr);
    r.ours_best = std::max(r.ours_best, p.asr);
  }
  if (r.base_best > 0.0) r.perf_gain = (r.ours_best - r.base_best) / r.base_best;
  if (r.base_best > 0.0) {
    r.base_steps = first_step_reaching(bs, bv, r.base_best);
    r.ours_steps = first_step_reaching(os, ov, r.base_best);
    r.efficiency_gain = relative_efficiency(r.base_steps, r.ours_steps);
  }
  return r;
}

inline std::string format_comparison(const SummaryCurve& base, const SummaryCurve& ours,
                                     const ComparisonRow& r) {
  const auto pct = [](const std::optional<double>& v) {
    if (!v) return std::string("null");
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << (*v >= 0 ? "+" : "") << *v * 100.0 << "%";
    return os.str();
  };
  const auto steps = [](const std::optional<std::int64_t>& v) {
    return v ? std::to_string(*v) : std::string("null");
  };
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "base,ours,perf_gain,ours_best,base_best,sample_eff_gain,ours_steps,base_steps\n";
  os << base.sampler << '/' << base.scorer << ',' << ours.sampler << '/' << ours.scorer << ','
     << pct(r.perf_gain) << ',' << r.ours_best << ',' << r.base_best << ','
     << pct(r.efficiency_gain) << ',' << steps(r.ours_steps) << ',' << steps(r.base_steps) << '\n';
  return os.str();
}

}  // namespace replay_engine
