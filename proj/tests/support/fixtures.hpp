#pragma once

#include <cmath>
#include <random>

#include "d2dmoe/weights.hpp"

namespace d2dmoe::testkit {

inline Tensor normal_tensor(ad::Shape shape, std::mt19937_64& rng, float stddev = 1.0f) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> nd(0.0f, stddev);
  for (float& x : t.data()) x = nd(rng);
  return t;
}

// Fan-in scaled random FFN: unit-variance inputs give O(1) hidden and output values.
inline FfnWeights random_ffn(std::size_t d, std::size_t h, bool gated, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const float in_std = 1.0f / std::sqrt(static_cast<float>(d));
  const float out_std = 1.0f / std::sqrt(static_cast<float>(h));
  FfnWeights w{normal_tensor({d, h}, rng, in_std), normal_tensor({h}, rng, 0.1f), normal_tensor({h, d}, rng, out_std),
               normal_tensor({d}, rng, 0.1f), std::nullopt};
  if (gated) w.Wg = normal_tensor({d, h}, rng, in_std);
  return w;
}

}  // namespace d2dmoe::testkit
