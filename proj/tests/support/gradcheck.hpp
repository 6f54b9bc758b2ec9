#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "afm/ops.hpp"

namespace afm::testing {

using VarList = std::vector<Var<double>>;
using GradFn = std::function<Var<double>(const VarList&)>;

struct GradCheck {
  double rel_error = 0;  // worst over inputs of |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, 1e-4)
  std::size_t evaluations = 0;
};

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Keeps entries at least `gap` away from zero so kinked ops (relu, max) stay
// differentiable under a +-h perturbation.
inline Tensor<double> away_from_zero(Tensor<double> t, double gap = 1e-2) {
  for (auto& v : t.data()) {
    if (std::abs(v) < gap) v = v < 0 ? -gap : gap;
  }
  return t;
}

// Central differences of L = sum(f(x) * R) for a fixed random projection R.
inline GradCheck gradcheck(const GradFn& f, const std::vector<Tensor<double>>& inputs, std::uint64_t seed,
                           double h = 1e-5, const std::vector<bool>& differentiate = {}) {
  std::mt19937_64 rng(seed);
  VarList vars;
  for (const auto& t : inputs) vars.emplace_back(t, true);
  const Var<double> out = f(vars);
  const Tensor<double> proj = random_tensor(out.shape(), rng);
  const Var<double> loss = ops::sum_all(ops::mul(out, ops::constant(proj)));
  backward(loss);

  auto value_at = [&](const std::vector<Tensor<double>>& xs) {
    NoGradGuard guard;
    VarList vs;
    for (const auto& t : xs) vs.emplace_back(t, false);
    const Var<double> y = f(vs);
    double s = 0;
    for (std::size_t i = 0; i < y.value().size(); ++i) s += y.value()[i] * proj[i];
    return s;
  };

  GradCheck result;
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!differentiate.empty() && !differentiate[k]) continue;
    const Tensor<double> analytic = vars[k].has_grad() ? vars[k].grad() : Tensor<double>(inputs[k].shape(), 0.0);
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = work[k][i];
      work[k][i] = x0 + h;
      const double lp = value_at(work);
      work[k][i] = x0 - h;
      const double lm = value_at(work);
      work[k][i] = x0;
      result.evaluations += 2;
      const double numeric = (lp - lm) / (2 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double scale = std::max({std::sqrt(a2), std::sqrt(n2), 1e-4});
    result.rel_error = std::max(result.rel_error, std::sqrt(diff2) / scale);
  }
  return result;
}

}  // namespace afm::testing
