#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "replay_engine/rng.hpp"
#include "replay_engine/sum_tree.hpp"

using namespace replay_engine;

namespace {

// Linear scan over cumulative sums: the reference the tree descent must agree with.
std::size_t cumulative_find(const std::vector<double>& w, double value) {
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (value < acc && w[i] > 0.0) return i;
  }
  for (std::size_t i = w.size(); i-- > 0;) {
    if (w[i] > 0.0) return i;
  }
  return 0;
}

void expect_consistent(const SumTree& t) {
  const auto n = t.nodes();
  const double tol = 1e-9 * std::max(1.0, t.total());
  for (std::size_t i = 1; i < t.capacity(); ++i) {
    EXPECT_NEAR(n[i], n[2 * i] + n[2 * i + 1], tol) << "node " << i;
  }
  double leaves = 0.0;
  for (std::size_t i = 0; i < t.capacity(); ++i) leaves += t.leaf(i);
  EXPECT_NEAR(t.total(), leaves, tol);
}

}  // namespace

TEST(SumTree, CapacityRoundsUpToPowerOfTwo) {
  EXPECT_EQ(SumTree(1).capacity(), 1u);
  EXPECT_EQ(SumTree(5).capacity(), 8u);
  EXPECT_EQ(SumTree(64).capacity(), 64u);
  EXPECT_EQ(SumTree(65).capacity(), 128u);
}

TEST(SumTree, RejectsNegativeAndNonFiniteWeights) {
  SumTree t(4);
  EXPECT_THROW(t.set(0, -1.0), std::invalid_argument);
  EXPECT_THROW(t.set(0, NAN), std::invalid_argument);
  EXPECT_THROW(t.set(0, INFINITY), std::invalid_argument);
  EXPECT_THROW(t.set(4, 1.0), std::out_of_range);
}

TEST(SumTree, FindNeverReturnsZeroWeightLeaf) {
  SumTree t(8);
  t.set(0, 0.0);
  t.set(1, 1.0);
  t.set(2, 0.0);
  t.set(5, 2.0);
  for (double v : {0.0, 0.5, 0.999999, 1.0, 2.5, 2.9999999, 3.0, 10.0}) {
    const auto i = t.find(v);
    EXPECT_GT(t.leaf(i), 0.0) << "value " << v;
  }
  EXPECT_EQ(t.find(0.0), 1u);
  EXPECT_EQ(t.find(1.0), 5u);
}

TEST(SumTree, StaysConsistentUnderRandomUpdates) {
  SumTree t(1000);
  Rng rng(3);
  for (int i = 0; i < 100'000; ++i) {
    const auto slot = static_cast<std::size_t>(rng.below(1000));
    t.set(slot, rng.uniform() < 0.1 ? 0.0 : rng.uniform() * 10.0);
  }
  expect_consistent(t);
}

TEST(SumTree, DescentMatchesCumulativeScan) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    SumTree t(n);
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
      t.set(i, w[i]);
    }
    if (t.total() <= 0.0) continue;
    for (int k = 0; k < 200; ++k) {
      const double v = rng.uniform() * t.total();
      EXPECT_EQ(t.find(v), cumulative_find(w, v));
    }
  }
}

TEST(SumTree, ClearZeroesEverything) {
  SumTree t(4);
  t.set(2, 3.0);
  t.clear();
  EXPECT_EQ(t.total(), 0.0);
  EXPECT_EQ(t.leaf(2), 0.0);
}
