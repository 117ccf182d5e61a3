#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "replay_engine/errors.hpp"

namespace replay_engine {

// Opaque per-step payload handed to scorers. The first byte tags the kind:
//   'E' event frame, followed by one flag byte (see EventFlags)
//   'P' encoded image (PNG bytes follow)
using FramePayload = std::vector<std::uint8_t>;

inline constexpr std::uint8_t kEventFrameTag = 'E';
inline constexpr std::uint8_t kImageFrameTag = 'P';

// Edge events for one environment step: each flag is set only on the step
// where the event happens.
struct EventTag {
  bool key_picked_up = false;
  bool door_opened = false;
  bool goal_reached = false;
  // An interaction attempt (pickup / toggle) that changed nothing.
  bool distractor = false;

  bool any_event() const { return key_picked_up || door_opened || goal_reached; }
  bool operator==(const EventTag&) const = default;
};

namespace event_bits {
inline constexpr std::uint8_t kKey = 1;
inline constexpr std::uint8_t kDoor = 2;
inline constexpr std::uint8_t kGoal = 4;
inline constexpr std::uint8_t kDistractor = 8;
}  // namespace event_bits

inline FramePayload encode_event_frame(const EventTag& e) {
  std::uint8_t flags = 0;
  if (e.key_picked_up) flags |= event_bits::kKey;
  if (e.door_opened) flags |= event_bits::kDoor;
  if (e.goal_reached) flags |= event_bits::kGoal;
  if (e.distractor) flags |= event_bits::kDistractor;
  return {kEventFrameTag, flags};
}

inline FramePayload encode_image_frame(std::span<const std::uint8_t> png) {
  FramePayload out;
  out.reserve(png.size() + 1);
  out.push_back(kImageFrameTag);
  out.insert(out.end(), png.begin(), png.end());
  return out;
}

inline bool is_event_frame(const FramePayload& f) {
  return f.size() == 2 && f[0] == kEventFrameTag;
}

inline bool is_image_frame(const FramePayload& f) {
  return !f.empty() && f[0] == kImageFrameTag;
}

inline EventTag decode_event_frame(const FramePayload& f) {
  if (!is_event_frame(f)) throw MalformedPayload("frame carries no event tags");
  const std::uint8_t b = f[1];
  if (b & ~0x0Fu) throw MalformedPayload("unknown event flag bits");
  return EventTag{(b & event_bits::kKey) != 0, (b & event_bits::kDoor) != 0,
                  (b & event_bits::kGoal) != 0, (b & event_bits::kDistractor) != 0};
}

inline std::string base64_encode(std::span<const std::uint8_t> in) {
  static constexpr char kAlphabet[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i + 1 == in.size()) {
    const std::uint32_t v = in[i] << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

}  // namespace replay_engine
