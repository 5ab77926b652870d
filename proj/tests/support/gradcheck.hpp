#pragma once

// Central finite-difference oracle for the reverse-mode engine. Lives in test
// code only: it evaluates the function twice per perturbed element and never
// touches backward().

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "d2dmoe/autodiff.hpp"

namespace d2dmoe::testkit {

using TensorD = ad::Tensor<double>;
using VarD = ad::Var<double>;

// Builds the output from leaf inputs. Must be a pure function of the inputs.
using GraphFn = std::function<VarD(const std::vector<VarD>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
};

inline double weighted_sum(const TensorD& out, const TensorD& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * weights[i];
  return s;
}

// Compares analytic gradients of sum(out .* W) (W fixed random) with central
// differences. Relative error per input is ||analytic - numeric||_inf /
// max(||numeric||_inf, 1e-8); the worst over inputs is returned.
inline GradCheckResult check_gradients(const GraphFn& fn, const std::vector<TensorD>& inputs,
                                       std::uint64_t seed, double eps = 1e-4) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);

  ad::Tape<double> tape;
  std::vector<VarD> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  VarD out = fn(leaves);
  TensorD weights(out.shape());
  for (std::size_t i = 0; i < weights.numel(); ++i) weights[i] = out.value().numel() == 1 ? 1.0 : unif(rng);

  VarD loss = ad::sum(ad::mul(out, ad::constant(weights)));
  auto grads = ad::backward(tape, loss);

  auto eval = [&](const std::vector<TensorD>& xs) {
    ad::NoGradGuard guard;
    std::vector<VarD> vs;
    for (const auto& t : xs) vs.push_back(ad::constant(t));
    return weighted_sum(fn(vs).value(), weights);
  };

  GradCheckResult result;
  std::vector<TensorD> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const TensorD& analytic = grads[leaves[k]];
    double max_diff = 0.0;
    double max_num = 0.0;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + eps;
      const double fp = eval(work);
      work[k][i] = orig - eps;
      const double fm = eval(work);
      work[k][i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
      max_num = std::max(max_num, std::abs(numeric));
    }
    const double rel = max_diff / std::max(max_num, 1e-8);
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_input = k;
    }
  }
  return result;
}

// Uniform random tensor with |x| >= min_abs (keeps inputs off kinks).
inline TensorD random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                             double min_abs = 0.0) {
  std::uniform_real_distribution<double> unif(lo, hi);
  TensorD t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    double v = unif(rng);
    while (std::abs(v) < min_abs) v = unif(rng);
    t[i] = v;
  }
  return t;
}

}  // namespace d2dmoe::testkit
