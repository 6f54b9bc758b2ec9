#pragma once

#include <vector>

#include "afm/config.hpp"
#include "afm/nn.hpp"

namespace afm {

// Dual Attention Multi-scale Fusion block.
//
// Three parallel branches (1x1-3x3-1x1 bottleneck at dilation 1, the same at
// dilation 2, and a plain 3x3), each producing F channels, are concatenated and
// reduced to F by a 1x1 convolution. The result is then refined by channel
// attention (shared two-layer map over avg- and max-pooled descriptors) and
// spatial attention (k x k convolution over channel-wise avg/max maps).
template <typename T>
class DamfBlock {
 public:
  struct Trace {
    Var<T> pre_attention;      // [N,F,H,W] after the 1x1 reduction
    Var<T> channel_attention;  // [N,F,1,1]
    Var<T> spatial_attention;  // [N,1,H,W]
    Var<T> out;
  };

  DamfBlock() = default;
  DamfBlock(std::size_t in_channels, const FusionConfig& config, Rng& rng);

  Var<T> forward(const Var<T>& x, bool training) { return forward_traced(x, training).out; }
  Trace forward_traced(const Var<T>& x, bool training);

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return width_; }

  void collect(ParamCollector<T>& c, const std::string& prefix);
  /// Parameters of the channel and spatial attention sub-networks only.
  void collect_attention(ParamCollector<T>& c, const std::string& prefix);

 private:
  std::size_t in_channels_ = 0;
  std::size_t width_ = 0;
  // bottleneck branches: reduce, 3x3 (dilated), expand
  std::vector<ConvBnAct<T>> dil1_;
  std::vector<ConvBnAct<T>> dil2_;
  ConvBnAct<T> plain_;
  ConvBnAct<T> reduce_;
  Linear<T> ca_fc1_;
  Linear<T> ca_fc2_;
  Conv2d<T> sa_conv_;
};

/// Dense multi-scale fusion core. Stage i (0 = coarsest) consumes
/// Concat(C'_i, M_i, Up(X_0,out), ..., Up(X_{i-1},out)) and applies its own
/// DAMF block. In concat mode the history is not used.
template <typename T>
class FusionCore {
 public:
  FusionCore() = default;
  FusionCore(const ModelConfig& config, Rng& rng);

  /// Either branch input may be undefined when its branch is ablated.
  /// Throws ContractError if dense mode and history.size() != stage.
  Var<T> fuse_stage(std::size_t stage, const Var<T>& cnn, const Var<T>& mamba, const std::vector<Var<T>>& history,
                    bool training, Var<T>* fused_input = nullptr);

  /// Runs every stage coarse to fine. `cnn` and `mamba` are indexed by fusion
  /// stage. Returns the per-stage outputs; `inputs` (optional) receives X_i,in.
  std::vector<Var<T>> forward(const std::vector<Var<T>>& cnn, const std::vector<Var<T>>& mamba, bool training,
                              std::vector<Var<T>>* inputs = nullptr);

  std::size_t stages() const { return blocks_.size(); }
  DamfBlock<T>& block(std::size_t i) { return blocks_.at(i); }
  FusionMode mode() const { return mode_; }

  void collect(ParamCollector<T>& c, const std::string& prefix);

 private:
  FusionMode mode_ = FusionMode::kDense;
  std::vector<DamfBlock<T>> blocks_;
};

/// Global average pool of each stage output, concatenated: [N, stages * F].
template <typename T>
Var<T> collect_final_vector(const std::vector<Var<T>>& stage_outputs);

extern template class DamfBlock<float>;
extern template class DamfBlock<double>;
extern template class FusionCore<float>;
extern template class FusionCore<double>;

}  // namespace afm
