#pragma once

#include <optional>
#include <vector>

#include "afm/config.hpp"
#include "afm/fusion.hpp"
#include "afm/nn.hpp"

namespace afm {

/// Basic residual block: two 3x3 conv/BN layers plus an identity or
/// 1x1-projection shortcut, followed by relu.
template <typename T>
struct ResidualBlock {
  ConvBnAct<T> conv1;
  ConvBnAct<T> conv2;  // no activation
  std::optional<ConvBnAct<T>> shortcut;

  ResidualBlock() = default;
  ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng);

  Var<T> operator()(const Var<T>& x, bool training);
  void collect(ParamCollector<T>& c, const std::string& prefix);
  /// The two 3x3 convolutions (and their norms) on the residual path.
  void collect_residual(ParamCollector<T>& c, const std::string& prefix);
};

template <typename T>
struct CnnStageOutput {
  std::size_t stage_index;  // 1-based
  Var<T> feature;
};

/// ResNet-style branch: Conv+Pool stem, then one residual stage per configured
/// width. Stage 1 keeps the stem resolution, every later stage halves it.
template <typename T>
class CnnBranch {
 public:
  CnnBranch() = default;
  CnnBranch(const CnnConfig& config, Rng& rng);

  /// 7x7/2 conv, BN, relu, 3x3/2 max pool. Requires H, W divisible by 4.
  Var<T> stem(const Var<T>& image, bool training);
  /// Pre-normalization activation of the stem (the raw 7x7 convolution).
  Var<T> stem_conv(const Var<T>& image) const { return stem_conv_.conv(image); }
  Var<T> stage_forward(std::size_t stage, const Var<T>& x, bool training);

  /// Runs stem and stages; returns the tapped stage outputs, shallow to deep.
  std::vector<CnnStageOutput<T>> forward(const Var<T>& image, bool training);

  std::size_t num_stages() const { return stages_.size(); }
  std::size_t stage_width(std::size_t stage) const { return config_.widths.at(stage - 1); }
  std::vector<ResidualBlock<T>>& stage_blocks(std::size_t stage) { return stages_.at(stage - 1); }

  void collect(ParamCollector<T>& c, const std::string& prefix);

 private:
  CnnConfig config_;
  ConvBnAct<T> stem_conv_;
  std::vector<std::vector<ResidualBlock<T>>> stages_;
};

/// E1: 1x1 adaptation to the fusion width, then a DAMF block (skipped when the
/// enhancement is ablated).
template <typename T>
class CnnEnhancer {
 public:
  CnnEnhancer() = default;
  CnnEnhancer(std::size_t in_channels, const FusionConfig& fusion, bool enhance, Rng& rng);

  Var<T> forward(const Var<T>& stage_output, bool training);
  Var<T> adapt(const Var<T>& stage_output) const { return adapter_(stage_output); }

  Conv2d<T>& adapter() { return adapter_; }
  DamfBlock<T>* damf() { return damf_ ? &*damf_ : nullptr; }
  void collect(ParamCollector<T>& c, const std::string& prefix);

 private:
  Conv2d<T> adapter_;
  std::optional<DamfBlock<T>> damf_;
};

extern template struct ResidualBlock<float>;
extern template struct ResidualBlock<double>;
extern template class CnnBranch<float>;
extern template class CnnBranch<double>;
extern template class CnnEnhancer<float>;
extern template class CnnEnhancer<double>;

}  // namespace afm
