#pragma once

#include <cmath>

#include "d2dmoe/tensor.hpp"

// Tape-free tensor kernels shared by the autodiff engine and by the inference
// paths (MoE runtime, clustering) that never need gradients.
namespace d2dmoe::ad {

// C = A * B for rank-2 A (m x k) and B (k x n).
template <class Real>
Tensor<Real> mm(const Tensor<Real>& a, const Tensor<Real>& b);

// C (+)= A * B on raw row-major buffers.
template <class Real>
void gemm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);

// x[r, :] += bias for every row.
template <class Real>
void add_bias_rows(Tensor<Real>& x, const Tensor<Real>& bias);

template <class Real>
inline Real gelu_scalar(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x / std::sqrt(Real(2))));
}

template <class Real>
inline Real gelu_grad_scalar(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x / std::sqrt(Real(2))));
  const Real pdf = std::exp(Real(-0.5) * x * x) / std::sqrt(Real(2) * Real(M_PI));
  return cdf + x * pdf;
}

}  // namespace d2dmoe::ad
