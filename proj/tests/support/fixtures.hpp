#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "afm/fusion.hpp"

namespace afm::testing {

// Drives both attention gates of a DAMF block to exactly 1 (sigmoid of a
// large bias with zero weights), leaving only its convolution branches.
template <typename T>
void neutralize_attention(DamfBlock<T>& block) {
  ParamCollector<T> c;
  block.collect_attention(c, "");
  zero_params(c);
  for (auto& p : c.params) {
    if (p.name == "channel_att.fc2.bias" || p.name == "spatial_att.conv.bias") p.var->mutable_value().fill(T(60));
  }
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return 1e300;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace afm::testing
