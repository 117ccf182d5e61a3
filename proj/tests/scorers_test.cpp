#include <gtest/gtest.h>

#include <algorithm>
#include <memory>
#include <vector>

#include "replay_engine/frame.hpp"
#include "replay_engine/rng.hpp"
#include "replay_engine/scorers.hpp"

using namespace replay_engine;

namespace {

using Clip = std::vector<FramePayload>;

FramePayload ev(bool key, bool door, bool goal, bool distractor = false) {
  return encode_event_frame(EventTag{key, door, goal, distractor});
}

FramePayload quiet() { return ev(false, false, false); }

// Random clips: mostly quiet frames with sparse events and distractors.
std::vector<Clip> corpus(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Clip> out;
  for (std::size_t i = 0; i < n; ++i) {
    Clip c(1 + rng.below(32));
    for (auto& f : c) {
      const double u = rng.uniform();
      f = ev(u < 0.01, u >= 0.01 && u < 0.02, u >= 0.02 && u < 0.025, u >= 0.5 && u < 0.55);
    }
    out.push_back(std::move(c));
  }
  return out;
}

// Reference definitions written directly from the frame flags.
bool any_event(const Clip& c) {
  return std::any_of(c.begin(), c.end(), [](const FramePayload& f) { return (f[1] & 7) != 0; });
}
bool any_distractor(const Clip& c) {
  return std::any_of(c.begin(), c.end(), [](const FramePayload& f) { return (f[1] & 8) != 0; });
}

std::vector<std::unique_ptr<Scorer>> all_scorers() {
  std::vector<std::unique_ptr<Scorer>> v;
  v.push_back(std::make_unique<OracleScorer>());
  v.push_back(std::make_unique<CorruptedScorer>(CorruptionMode::STANDARD, 1));
  v.push_back(std::make_unique<CorruptedScorer>(CorruptionMode::MISLEADING, 1));
  v.push_back(std::make_unique<CorruptedScorer>(CorruptionMode::ABSTRACT, 1));
  v.push_back(std::make_unique<NoisyScorer>(0.2, 1));
  v.push_back(std::make_unique<ConstantScorer>(0.3));
  return v;
}

}  // namespace

TEST(Frame, EventRoundTrip) {
  for (int bits = 0; bits < 16; ++bits) {
    const EventTag e{(bits & 1) != 0, (bits & 2) != 0, (bits & 4) != 0, (bits & 8) != 0};
    EXPECT_EQ(decode_event_frame(encode_event_frame(e)), e);
  }
}

TEST(Frame, MalformedPayloads) {
  EXPECT_THROW(decode_event_frame({}), MalformedPayload);
  EXPECT_THROW(decode_event_frame({'E'}), MalformedPayload);
  EXPECT_THROW(decode_event_frame({'E', 0x10}), MalformedPayload);
  const std::vector<std::uint8_t> png = {1, 2, 3};
  EXPECT_THROW(decode_event_frame(encode_image_frame(png)), MalformedPayload);
  const Clip clip = {encode_image_frame(png)};
  EXPECT_THROW(oracle_score(clip), MalformedPayload);
}

TEST(Frame, Base64KnownVectors) {
  const auto b64 = [](std::string s) {
    return base64_encode(std::vector<std::uint8_t>(s.begin(), s.end()));
  };
  EXPECT_EQ(b64(""), "");
  EXPECT_EQ(b64("f"), "Zg==");
  EXPECT_EQ(b64("fo"), "Zm8=");
  EXPECT_EQ(b64("foo"), "Zm9v");
  EXPECT_EQ(b64("foobar"), "Zm9vYmFy");
}

TEST(Oracle, Examples) {
  Clip door = {quiet(), ev(false, true, false), quiet()};
  Clip wander(20, quiet());
  Clip last_key(10, quiet());
  last_key.back() = ev(true, false, false);
  EXPECT_EQ(oracle_score(door), 1.0);
  EXPECT_EQ(oracle_score(wander), 0.0);
  EXPECT_EQ(oracle_score(last_key), 1.0);
}

TEST(Oracle, DistractorsAloneDoNotCount) {
  Clip c(5, ev(false, false, false, true));
  EXPECT_EQ(oracle_score(c), 0.0);
}

TEST(Oracle, InvariantUnderPermutation) {
  Rng rng(3);
  for (auto c : corpus(200, 5)) {
    const double s = oracle_score(c);
    for (std::size_t i = c.size(); i > 1; --i) std::swap(c[i - 1], c[rng.below(i)]);
    EXPECT_EQ(oracle_score(c), s);
  }
}

TEST(Corrupted, StandardIsTheOracle) {
  std::int64_t id = 0;
  for (const auto& c : corpus(500, 7)) {
    EXPECT_EQ(corrupted_score(c, CorruptionMode::STANDARD, 9, id++), oracle_score(c));
  }
}

TEST(Corrupted, MisleadingInversionTable) {
  int event_clips = 0;
  int distractor_only = 0;
  std::int64_t id = 0;
  for (const auto& c : corpus(50, 11)) {
    const double s = corrupted_score(c, CorruptionMode::MISLEADING, 0, id++);
    const bool expected = !any_event(c) && any_distractor(c);
    EXPECT_EQ(s, expected ? 1.0 : 0.0);
    if (oracle_score(c) == 1.0) {
      ++event_clips;
      EXPECT_EQ(s, 0.0);
    }
    distractor_only += expected;
  }
  EXPECT_GT(event_clips, 0);
  EXPECT_GT(distractor_only, 0);
}

TEST(Corrupted, AbstractIsAFairCoin) {
  const Clip c = {quiet()};
  double sum = 0.0;
  for (std::int64_t id = 0; id < 10'000; ++id) sum += corrupted_score(c, CorruptionMode::ABSTRACT, 42, id);
  EXPECT_NEAR(sum / 10'000, 0.5, 0.02);
}

TEST(Corrupted, AbstractIgnoresContent) {
  const Clip a = {ev(true, true, true)};
  const Clip b(7, quiet());
  for (std::int64_t id = 0; id < 100; ++id) {
    EXPECT_EQ(corrupted_score(a, CorruptionMode::ABSTRACT, 3, id),
              corrupted_score(b, CorruptionMode::ABSTRACT, 3, id));
  }
}

TEST(Noisy, ZeroFlipIsOracle) {
  std::int64_t id = 0;
  for (const auto& c : corpus(300, 13)) EXPECT_EQ(noisy_score(c, 0.0, 1, id++), oracle_score(c));
}

TEST(Noisy, HalfFlipAgreesHalfTheTime) {
  const auto clips = corpus(10'000, 17);
  int agree = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    agree += noisy_score(clips[i], 0.5, 99, static_cast<std::int64_t>(i)) == oracle_score(clips[i]);
  }
  EXPECT_NEAR(agree / 10'000.0, 0.5, 0.02);
}

TEST(Noisy, FlipRateMatchesProbability) {
  const auto clips = corpus(10'000, 19);
  int flips = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    flips += noisy_score(clips[i], 0.1, 5, static_cast<std::int64_t>(i)) != oracle_score(clips[i]);
  }
  EXPECT_NEAR(flips / 10'000.0, 0.1, 0.01);
}

TEST(Noisy, RejectsOutOfRangeProbability) {
  EXPECT_THROW(NoisyScorer(0.6, 1), std::invalid_argument);
  EXPECT_THROW(NoisyScorer(-0.1, 1), std::invalid_argument);
}

TEST(ScorerContract, RangeDeterminismAndTotality) {
  const auto clips = corpus(200, 23);
  for (auto& scorer : all_scorers()) {
    std::vector<double> first;
    for (std::size_t i = 0; i < clips.size(); ++i) {
      double s = 0.0;
      ASSERT_NO_THROW(s = scorer->score(static_cast<std::int64_t>(i), clips[i]));
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 1.0);
      first.push_back(s);
    }
    // Reverse call order must not change any answer.
    for (std::size_t i = clips.size(); i-- > 0;) {
      EXPECT_EQ(scorer->score(static_cast<std::int64_t>(i), clips[i]), first[i]);
    }
  }
}

TEST(ScorerContract, SameSeedSameAnswers) {
  const auto clips = corpus(200, 29);
  CorruptedScorer a(CorruptionMode::ABSTRACT, 77), b(CorruptionMode::ABSTRACT, 77);
  NoisyScorer n1(0.3, 77), n2(0.3, 77);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto id = static_cast<std::int64_t>(i);
    EXPECT_EQ(a.score(id, clips[i]), b.score(id, clips[i]));
    EXPECT_EQ(n1.score(id, clips[i]), n2.score(id, clips[i]));
  }
}

TEST(DelayedScorer, ForwardsInnerScore) {
  DelayedScorer d(std::make_unique<ConstantScorer>(0.8), std::chrono::microseconds(10));
  const Clip c = {quiet()};
  EXPECT_EQ(d.score(0, c), 0.8);
}
