#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "d2dmoe/autodiff.hpp"
#include "d2dmoe/data.hpp"
#include "d2dmoe/model.hpp"
#include "d2dmoe/train.hpp"

namespace d2dmoe {

// Rows whose largest magnitude is below this count as all-zero.
inline constexpr double kHoyerDegenerate = 1e-12;

template <class Real>
struct HoyerValue {
  ad::Var<Real> loss;           // scalar
  std::size_t degenerate = 0;   // all-zero rows that contributed 0
  std::size_t rows = 0;
};

// Squared Hoyer measure (sum|a|)^2 / sum a^2 of every row of a (tokens x m),
// averaged over rows. Degenerate rows contribute 0 but still count in the mean.
template <class Real>
HoyerValue<Real> hoyer_term(const ad::Var<Real>& a) {
  const ad::Tensor<Real>& v = a.value();
  if (v.rank() != 2) throw DimensionError("hoyer_term expects a rank-2 activation matrix");
  const std::size_t rows = v.dim(0), cols = v.dim(1);
  ad::Tensor<Real> keep({rows}, Real(1));
  ad::Tensor<Real> fix({rows});
  HoyerValue<Real> out;
  out.rows = rows;
  for (std::size_t r = 0; r < rows; ++r) {
    Real mx = 0;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, std::abs(v(r, c)));
    if (static_cast<double>(mx) < kHoyerDegenerate) {
      keep[r] = 0;
      fix[r] = 1;
      ++out.degenerate;
    }
  }
  const ad::Var<Real> l1 = ad::sum(ad::abs(a), ad::Axis::rows);
  const ad::Var<Real> l2 = ad::sum(ad::square(a), ad::Axis::rows);
  const ad::Var<Real> ratio = ad::div(ad::square(l1), ad::add(l2, ad::constant(std::move(fix))));
  out.loss = ad::sum(ad::mul(ratio, ad::constant(std::move(keep))), ad::Axis::all, 1.0 / static_cast<double>(rows));
  return out;
}

// Mean over layers of the per-layer row-averaged Hoyer terms.
template <class Real>
HoyerValue<Real> hoyer_loss(std::span<const ad::Var<Real>> layers) {
  if (layers.empty()) throw InputError("hoyer_loss needs at least one layer");
  HoyerValue<Real> out;
  ad::Var<Real> total;
  for (const auto& a : layers) {
    HoyerValue<Real> t = hoyer_term(a);
    out.degenerate += t.degenerate;
    out.rows += t.rows;
    total = total.valid() ? ad::add(total, t.loss) : t.loss;
  }
  out.loss = ad::sum(total, ad::Axis::all, 1.0 / static_cast<double>(layers.size()));
  return out;
}

// max(0, z - d), elementwise.
template <class Real>
ad::Var<Real> displaced_preactivation(const ad::Var<Real>& z, double d) {
  const ad::Tensor<Real>& v = z.value();
  const std::size_t cols = v.rank() == 2 ? v.dim(1) : v.numel();
  if (v.rank() == 2) return ad::relu(ad::add_bias(z, ad::constant(ad::Tensor<Real>({cols}, static_cast<Real>(-d)))));
  return ad::relu(ad::add(z, ad::constant(ad::Tensor<Real>(v.shape(), static_cast<Real>(-d)))));
}

struct SparsityConfig {
  double alpha = 0.0;
  bool ramp = true;            // linear 0 -> alpha over the run
  double displacement = -10.0; // gelu only
  double nonzero_threshold = 1e-6;
  bool include_mha = true;     // also penalize replaced attention MLPs
  TrainConfig train;

  void validate() const;
  // Weight at a 0-based step of a run of `steps` steps; the last step gets alpha.
  double alpha_at(std::int64_t step) const;
};
Json to_json(const SparsityConfig& c);
SparsityConfig sparsity_config_from_json(const Json& j, SparsityConfig defaults = {});

// The activations the penalty sees, one matrix per penalized site: FFN
// post-activations for relu (gate path when gated), displaced pre-activations
// for gelu, and relu hidden units of replaced attention projections.
std::vector<ad::Var<float>> sparsity_targets(const DenseModel& model, const ActivationTrace& trace, const SparsityConfig& cfg);
TraceFlags sparsity_trace_flags();

// Fraction of |post-activation| > threshold over the FFN sites of a trace.
double nonzero_fraction(const ActivationTrace& trace, double threshold);

// Task loss + alpha * hoyer. NumericError on divergence (model keeps the
// weights from before the failing step).
TrainResult sparsify_finetune(DenseModel& model, const Dataset& data, const SparsityConfig& cfg, std::uint64_t seed);

struct LayerActivationStats {
  std::vector<std::int64_t> histogram;  // index = non-zero count per token
  double mean = 0.0;
  double variance = 0.0;
  std::int64_t tokens = 0;
};

struct ActivationStats {
  double threshold = 0.0;
  std::vector<LayerActivationStats> layers;
};

// Per-layer distribution of |FFN post-activation| > threshold counts per
// token (gate path for gated FFNs).
ActivationStats activation_stats(const DenseModel& model, const Dataset& data, Split split, double threshold,
                                 std::size_t batch_size = 32, std::size_t max_sequences = 0);
void accumulate_counts(const Tensor& post_activation, double threshold, LayerActivationStats& stats);
void finalize_stats(LayerActivationStats& stats);

// Columns layer, bucket_lo, bucket_hi, count (buckets [lo, hi)).
std::string histogram_csv(const ActivationStats& s, int bucket_width = 1);
// Columns layer, mean, variance, tokens.
std::string summary_csv(const ActivationStats& s);

}  // namespace d2dmoe
