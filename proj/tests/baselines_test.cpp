#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "replay_engine/baselines.hpp"

using namespace replay_engine;

namespace {

void fill(ReplayBuffer& buf, std::size_t n, Rng& rng) {
  for (std::size_t i = 0; i < n; ++i) {
    Transition t;
    t.reward = rng.uniform() < 0.1 ? rng.uniform() : 0.0;
    t.episode_step = static_cast<std::int64_t>(rng.below(640));
    t.state.resize(8 * 8 * 3);
    for (auto& b : t.state) b = static_cast<std::uint8_t>(rng.below(11));
    buf.insert(std::move(t), 1.0);
  }
}

void randomize(EroPolicy& policy, Rng& rng, double scale) {
  for (double& p : policy.mutable_params()) p = rng.normal() * scale;
}

// Sets the output layer so the policy returns sigmoid(bias) everywhere.
void constant_output(EroPolicy& policy, double bias) {
  auto p = policy.mutable_params();
  const std::size_t out = p.size() - 1 - EroPolicy::kHidden;
  for (std::size_t j = 0; j < EroPolicy::kHidden; ++j) p[out + j] = 0.0;
  p.back() = bias;
}

bool tree_consistent(const ReplayBuffer& buf) {
  const auto n = buf.tree_snapshot();
  const std::size_t cap = n.size() / 2;
  for (std::size_t i = 1; i < cap; ++i) {
    if (std::abs(n[i] - (n[2 * i] + n[2 * i + 1])) > 1e-9 * std::max(1.0, n[1])) return false;
  }
  return true;
}

}  // namespace

TEST(ReLo, ClippedDifferenceExamples) {
  EXPECT_EQ(relo_priority(0.5, 0.7), 1e-6);
  EXPECT_NEAR(relo_priority(0.7, 0.5), 0.200001, 1e-12);
  EXPECT_NEAR(relo_priority(-0.7, 0.5), 0.200001, 1e-12);
}

TEST(ReLo, MatchesClosedFormOnRandomPairs) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const double on = rng.normal() * 2.0;
    const double tg = rng.normal() * 2.0;
    const double expected = (std::abs(on) > std::abs(tg) ? std::abs(on) - std::abs(tg) : 0.0) + 1e-6;
    EXPECT_NEAR(relo_priority(on, tg), expected, 1e-12);
  }
}

TEST(ReLo, EqualTablesRevertToUniform) {
  ReplayBuffer buf(BufferConfig{50, PriorityMode::RELO_EXTERNAL, 0.6});
  Rng rng(2);
  fill(buf, 50, rng);
  for (std::size_t s = 0; s < 50; ++s) {
    const double d = rng.normal();
    buf.set_external_priority({s, buf.generation(s)}, relo_priority(d, d));
  }
  std::vector<double> freq(50, 0.0);
  const int draws = 100'000;
  for (int i = 0; i < draws / 100; ++i) {
    for (const auto& r : buf.sample_proportional(100, rng).indices) freq[r.slot] += 1.0 / draws;
  }
  double tv = 0.0;
  for (double f : freq) tv += 0.5 * std::abs(f - 0.02);
  EXPECT_LT(tv, 0.01);
}

TEST(ReLo, BetaAnnealsToOne) {
  const auto s = ReLoState::for_run(300'000);
  EXPECT_EQ(s.beta.at(0), 0.4);
  EXPECT_EQ(s.beta.at(300'000), 1.0);
  EXPECT_EQ(s.alpha, 0.6);
}

TEST(Ero, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int point = 0; point < 50; ++point) {
    EroPolicy policy(static_cast<std::uint64_t>(point));
    randomize(policy, rng, 0.3);
    std::vector<EroFeatures> batch(4);
    for (auto& x : batch) x = {rng.uniform(), rng.uniform() * 2.0, rng.uniform()};
    const double r = rng.normal();
    const auto g = policy.gradient(batch, r);
    // Central differences on a random subset of coordinates plus the output layer.
    std::vector<std::size_t> coords;
    for (int k = 0; k < 150; ++k) coords.push_back(rng.below(EroPolicy::kParams));
    for (std::size_t k = EroPolicy::kParams - EroPolicy::kHidden - 1; k < EroPolicy::kParams; ++k) {
      coords.push_back(k);
    }
    double diff2 = 0.0, norm2 = 0.0;
    const double h = 1e-6;
    for (std::size_t c : coords) {
      auto params = policy.mutable_params();
      const double saved = params[c];
      params[c] = saved + h;
      const double up = policy.loss(batch, r);
      params[c] = saved - h;
      const double down = policy.loss(batch, r);
      params[c] = saved;
      const double fd = (up - down) / (2.0 * h);
      diff2 += (fd - g[c]) * (fd - g[c]);
      norm2 += fd * fd;
    }
    ASSERT_GT(norm2, 0.0);
    EXPECT_LT(std::sqrt(diff2 / norm2), 1e-5) << "point " << point;
  }
}

TEST(Ero, ZeroRewardLeavesParametersUnchanged) {
  EroPolicy policy(4);
  const std::vector<double> before(policy.params().begin(), policy.params().end());
  const std::vector<EroFeatures> batch = {{1.0, 0.5, 0.1}};
  policy.update(batch, 0.0);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), policy.params().begin()));
  for (double g : policy.gradient(batch, 0.0)) ASSERT_EQ(g, 0.0);
}

TEST(Ero, RewardIsChangeInAverageReturn) {
  EroPolicy policy(0, 1e-3, 0.0);
  policy.observe_return(0.2);
  EXPECT_NEAR(policy.observe_return(0.5), 0.3, 1e-15);
}

TEST(Ero, BatchIsAlwaysExactlyB) {
  ReplayBuffer buf(BufferConfig{300, PriorityMode::PER, 1.0});
  Rng rng(5);
  fill(buf, 300, rng);
  EroPolicy policy(1);
  for (double bias : {-40.0, -2.0, 0.0, 2.0, 40.0}) {
    constant_output(policy, bias);
    for (std::size_t B : {1u, 16u, 128u}) {
      const auto sel = ero_select(buf, policy, B, 640, rng);
      EXPECT_EQ(sel.batch.size(), B);
      EXPECT_EQ(sel.features.size(), B);
      EXPECT_EQ(sel.candidates, 4 * B);
      for (double w : sel.batch.is_weights) EXPECT_EQ(w, 1.0);
    }
  }
}

TEST(Ero, AllAcceptedTakesFirstBCandidates) {
  ReplayBuffer buf(BufferConfig{100, PriorityMode::PER, 1.0});
  Rng rng(6);
  fill(buf, 100, rng);
  EroPolicy policy(2);
  constant_output(policy, 60.0);
  Rng a(11), b(11);
  const SampleBatch pool = buf.sample_uniform(4 * 16, a);
  const auto sel = ero_select(buf, policy, 16, 640, b);
  EXPECT_EQ(sel.accepted, 64u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(sel.batch.indices[i], pool.indices[i]);
}

TEST(Ero, NoneAcceptedTopsUpByHighestProbability) {
  ReplayBuffer buf(BufferConfig{100, PriorityMode::PER, 1.0});
  Rng rng(7);
  fill(buf, 100, rng);
  for (std::size_t s = 0; s < 100; ++s) buf.set_td_error({s, buf.generation(s)}, rng.uniform() * 3.0);
  EroPolicy policy(3);
  randomize(policy, rng, 0.5);
  auto params = policy.mutable_params();
  params.back() = -80.0;  // every p_i is astronomically small but still ordered
  Rng a(12), b(12);
  const SampleBatch pool = buf.sample_uniform(4 * 8, a);
  std::vector<double> pool_p;
  for (const auto& r : pool.indices) {
    pool_p.push_back(policy(ero_features(buf.transition(r.slot), buf.record(r.slot), 640)));
  }
  const auto sel = ero_select(buf, policy, 8, 640, b);
  EXPECT_EQ(sel.accepted, 0u);
  std::vector<double> chosen;
  for (const auto& f : sel.features) chosen.push_back(policy(f));
  std::sort(pool_p.rbegin(), pool_p.rend());
  std::sort(chosen.rbegin(), chosen.rend());
  pool_p.resize(8);
  EXPECT_EQ(chosen, pool_p);
}

TEST(Aer, PoolSizeDecaysFromFourToOne) {
  EXPECT_EQ(aer_pool_size(128, 0, 300'000), 512u);
  EXPECT_EQ(aer_pool_size(128, 150'000, 300'000), 320u);
  EXPECT_EQ(aer_pool_size(128, 300'000, 300'000), 128u);
}

TEST(Aer, NearestKeepsSmallestDistances) {
  const std::vector<double> d = {0.1, 0.5, 0.3};
  const std::vector<std::size_t> slots = {7, 8, 9};
  auto pick = aer_nearest(d, slots, 2);
  std::sort(pick.begin(), pick.end());
  EXPECT_EQ(pick, (std::vector<std::size_t>{0, 2}));
}

TEST(Aer, TiesGoToLowerSlot) {
  const std::vector<double> d = {0.2, 0.2, 0.2};
  const std::vector<std::size_t> slots = {30, 10, 20};
  EXPECT_EQ(aer_nearest(d, slots, 2), (std::vector<std::size_t>{1, 2}));
}

TEST(Aer, SelectionIsDeterministicAndFallsBackToUniform) {
  ReplayBuffer buf(BufferConfig{200, PriorityMode::PER, 1.0});
  Rng rng(8);
  fill(buf, 200, rng);
  const Observation here = buf.transition(5).state;
  AerSelector s1(192, 42, 200), s2(192, 42, 200);
  Rng a(3), b(3);
  const auto x = s1.select(buf, here, 16, 0, 1000, a);
  const auto y = s2.select(buf, here, 16, 0, 1000, b);
  EXPECT_EQ(x.indices, y.indices);
  EXPECT_EQ(x.size(), 16u);

  Rng c(4), d(4);
  const auto late = s1.select(buf, here, 16, 1000, 1000, c);
  EXPECT_EQ(late.indices, buf.sample_uniform(16, d).indices);
}

TEST(Aer, PicksTheNearestFromThePool) {
  ReplayBuffer buf(BufferConfig{200, PriorityMode::PER, 1.0});
  Rng rng(9);
  fill(buf, 200, rng);
  const Observation here = buf.transition(17).state;
  AerSelector sel(192, 1, 200);
  Rng a(5), b(5);
  const SampleBatch pool = buf.sample_uniform(64, a);
  const auto out = sel.select(buf, here, 16, 0, 1000, b);
  const auto e = sel.encoder().embed(here);
  std::vector<double> pool_d;
  for (const auto& r : pool.indices) pool_d.push_back(squared_distance(e, sel.encoder().embed(buf.transition(r.slot).state)));
  std::vector<double> out_d;
  for (const auto& r : out.indices) out_d.push_back(squared_distance(e, sel.encoder().embed(buf.transition(r.slot).state)));
  std::sort(pool_d.begin(), pool_d.end());
  std::sort(out_d.begin(), out_d.end());
  pool_d.resize(16);
  EXPECT_EQ(out_d, pool_d);
}

TEST(Baselines, MixedSamplersKeepTreeConsistent) {
  ReplayBuffer buf(BufferConfig{128, PriorityMode::RELO_EXTERNAL, 0.6});
  Rng rng(10);
  fill(buf, 128, rng);
  EroPolicy policy(0);
  AerSelector aer(192, 0, 128);
  for (int round = 0; round < 2000; ++round) {
    SampleBatch b;
    switch (round % 3) {
      case 0: b = draw_mixture(buf, 16, 1.0, 0.4, true, rng); break;
      case 1: b = ero_select(buf, policy, 16, 640, rng).batch; break;
      default: b = aer.select(buf, buf.transition(0).state, 16, round, 2000, rng); break;
    }
    for (const auto& r : b.indices) {
      buf.set_external_priority(r, relo_priority(rng.normal(), rng.normal()));
      buf.set_td_error(r, rng.normal());
    }
    if (round % 7 == 0) fill(buf, 3, rng);
  }
  EXPECT_TRUE(tree_consistent(buf));
}
