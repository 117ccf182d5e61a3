#pragma once

#include <stdexcept>
#include <string>

namespace replay_engine {

struct EmptyBuffer : std::runtime_error {
  EmptyBuffer() : std::runtime_error("replay buffer is empty") {}
};

// All prioritized mass is zero; callers fall back to the uniform branch.
struct ZeroMass : std::runtime_error {
  ZeroMass() : std::runtime_error("prioritized branch has zero total mass") {}
};

struct InvalidSize : std::invalid_argument {
  explicit InvalidSize(int size)
      : std::invalid_argument("unsupported grid size " + std::to_string(size)) {}
};

struct EpisodeOver : std::logic_error {
  EpisodeOver() : std::logic_error("step called after the episode ended") {}
};

struct Unsolvable : std::logic_error {
  Unsolvable() : std::logic_error("layout has no path to the goal") {}
};

struct MalformedPayload : std::invalid_argument {
  explicit MalformedPayload(const std::string& what) : std::invalid_argument(what) {}
};

struct ScorerTimeout : std::runtime_error {
  ScorerTimeout() : std::runtime_error("scorer did not respond before the deadline") {}
};

struct ProtocolViolation : std::runtime_error {
  explicit ProtocolViolation(const std::string& what)
      : std::runtime_error("protocol violation: " + what) {}
};

struct ConnectionLost : std::runtime_error {
  explicit ConnectionLost(const std::string& what) : std::runtime_error(what) {}
};

// Configuration error carrying the JSON path of the offending field.
struct ConfigError : std::runtime_error {
  ConfigError(std::string field_path, const std::string& what)
      : std::runtime_error(field_path + ": " + what), path(std::move(field_path)) {}
  std::string path;
};

struct MisalignedSteps : std::runtime_error {
  MisalignedSteps() : std::runtime_error("evaluation steps differ between seeds") {}
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace replay_engine
