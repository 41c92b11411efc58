#pragma once

#include <cstdint>

#include "diffcast/tensor.hpp"

namespace diffcast {

// Deterministic xoshiro256++ stream with an explicit Box-Muller normal.
// Fully specified arithmetic, so sequences are bit-identical across runs and
// platforms; std::normal_distribution gives no such guarantee.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive range
  double normal();                        // standard normal
  bool bernoulli(double p);

  void fill_normal(Tensor& t);
  Tensor normal_tensor(Shape shape);

  // Independent child stream derived from this stream's seed and a tag;
  // insensitive to how much of the parent has been consumed.
  Rng fork(uint64_t tag) const;

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_ = 0;
  uint64_t s_[4] = {0, 0, 0, 0};
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace diffcast
