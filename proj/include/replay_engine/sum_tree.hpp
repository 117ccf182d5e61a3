#pragma once

#include <algorithm>
#include <bit>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace replay_engine {

// Binary sum tree over non-negative leaf weights. Node 1 is the root and
// leaves live at [capacity, 2 * capacity). Parents are recomputed from their
// children on every update rather than patched with a delta, so internal
// nodes stay exact sums of what is stored below them.
class SumTree {
 public:
  explicit SumTree(std::size_t min_capacity)
      : capacity_(std::bit_ceil(std::max<std::size_t>(min_capacity, 1))),
        nodes_(2 * capacity_, 0.0) {}

  std::size_t capacity() const { return capacity_; }
  double total() const { return nodes_[1]; }
  double leaf(std::size_t i) const { return nodes_[capacity_ + i]; }
  std::span<const double> nodes() const { return nodes_; }

  void set(std::size_t i, double weight) {
    if (i >= capacity_) throw std::out_of_range("sum tree leaf index");
    if (!(weight >= 0.0) || !std::isfinite(weight)) {
      throw std::invalid_argument("sum tree weight must be finite and >= 0");
    }
    std::size_t node = capacity_ + i;
    nodes_[node] = weight;
    for (node >>= 1; node >= 1; node >>= 1) {
      nodes_[node] = nodes_[2 * node] + nodes_[2 * node + 1];
    }
  }

  // Leaf whose cumulative interval contains `value`, for value in [0, total).
  // The descent keeps value strictly below the current subtree sum, so a
  // zero-weight leaf is never returned.
  std::size_t find(double value) const {
    assert(total() > 0.0);
    value = std::clamp(value, 0.0, std::nextafter(total(), 0.0));
    std::size_t node = 1;
    while (node < capacity_) {
      const double left = nodes_[2 * node];
      if (value < left) {
        node = 2 * node;
      } else {
        value -= left;
        node = 2 * node + 1;
        const double right = nodes_[node];
        if (value >= right) value = std::nextafter(right, 0.0);
      }
    }
    return node - capacity_;
  }

  void clear() { std::fill(nodes_.begin(), nodes_.end(), 0.0); }

 private:
  std::size_t capacity_;
  std::vector<double> nodes_;
};

}  // namespace replay_engine
