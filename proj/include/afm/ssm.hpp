#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "afm/nn.hpp"

namespace afm {

/// ZOH input gain (exp(delta*a) - 1) / a, with the analytic limit `delta` for |a| < 1e-8.
template <typename T>
T zoh_input_gain(T delta, T a) {
  if (std::abs(a) < T(1e-8)) return delta;
  return std::expm1(delta * a) / a;
}

/// Zero-order-hold discretization of one diagonal state entry:
/// returns (A_bar, B_bar) = (exp(delta*a), zoh_input_gain(delta, a) * b).
template <typename T>
std::pair<T, T> discretize(T delta, T a, T b) {
  return {std::exp(delta * a), zoh_input_gain(delta, a) * b};
}

/// Inclusive scan of the first-order linear recurrence h_l = a_l * h_{l-1} + b_l
/// (h_{-1} = 0) as a work-efficient up-sweep/down-sweep over the associative
/// operator (a1, b1) . (a2, b2) = (a2*a1, a2*b1 + b2). Returns h.
template <typename T>
std::vector<T> associative_linear_scan(std::span<const T> a, std::span<const T> b) {
  const std::size_t n = a.size();
  std::size_t size = 1;
  while (size < n) size <<= 1;
  std::vector<T> sa(size, T(1)), sb(size, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    sa[i] = a[i];
    sb[i] = b[i];
  }
  // earlier (a1,b1) followed by later (a2,b2)
  auto combine = [](T a1, T b1, T a2, T b2) { return std::pair<T, T>{a2 * a1, a2 * b1 + b2}; };
  for (std::size_t stride = 1; stride < size; stride <<= 1) {
    for (std::size_t i = 2 * stride - 1; i < size; i += 2 * stride) {
      auto [na, nb] = combine(sa[i - stride], sb[i - stride], sa[i], sb[i]);
      sa[i] = na;
      sb[i] = nb;
    }
  }
  sa[size - 1] = T(1);
  sb[size - 1] = T(0);
  for (std::size_t stride = size >> 1; stride >= 1; stride >>= 1) {
    for (std::size_t i = 2 * stride - 1; i < size; i += 2 * stride) {
      const T left_a = sa[i - stride], left_b = sb[i - stride];
      sa[i - stride] = sa[i];
      sb[i - stride] = sb[i];
      auto [na, nb] = combine(sa[i], sb[i], left_a, left_b);
      sa[i] = na;
      sb[i] = nb;
    }
  }
  // exclusive prefix -> inclusive state
  std::vector<T> h(n);
  for (std::size_t i = 0; i < n; ++i) h[i] = a[i] * sb[i] + b[i];
  return h;
}

enum class ScanImpl { kSequential, kAssociative };

/// Selective state-space scan with diagonal A.
///   x, delta: [N,L,E]; A: [E,S]; B, C: [N,L,S]  ->  y: [N,L,E]
///   h_l[e,s] = exp(delta_l[e] A[e,s]) h_{l-1}[e,s] + zoh(delta_l[e], A[e,s]) B_l[s] x_l[e]
///   y_l[e]   = sum_s C_l[s] h_l[e,s]
/// Differentiable in all five inputs; both implementations share the backward.
template <typename T>
Var<T> selective_scan(const Var<T>& x, const Var<T>& delta, const Var<T>& A, const Var<T>& B, const Var<T>& C,
                      ScanImpl impl = ScanImpl::kSequential);

/// Per-mixer selective SSM parameters. A = -exp(a_log) keeps A strictly
/// negative; delta = softplus(x W_delta + b_delta) keeps it strictly positive.
template <typename T>
struct SsmParams {
  Var<T> a_log;        // [E,S]
  Var<T> w_delta;      // [E,E]
  Var<T> b_delta;      // [E]
  Var<T> w_b;          // [E,S]
  Var<T> w_c;          // [E,S]
  Var<T> d_skip;       // [E]
  std::size_t state_size = 0;

  SsmParams() = default;
  /// A initialised to -(1..S) per channel; b_delta so softplus(b_delta) is
  /// log-uniform in [1e-3, 1e-1].
  SsmParams(std::size_t channels, std::size_t state, Rng& rng);

  std::size_t channels() const { return d_skip.value().size(); }
  Var<T> A() const { return ops::neg(ops::exp(a_log)); }
  Var<T> delta(const Var<T>& x) const { return ops::softplus(ops::linear(x, w_delta, b_delta)); }

  /// Input-dependent projections, ZOH scan and the D skip term on x[N,L,E].
  Var<T> forward(const Var<T>& x, ScanImpl impl = ScanImpl::kSequential) const;

  void collect(ParamCollector<T>& c, const std::string& prefix);
};

extern template struct SsmParams<float>;
extern template struct SsmParams<double>;

}  // namespace afm
