#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "afm/cnn_branch.hpp"
#include "afm/config.hpp"
#include "afm/fusion.hpp"
#include "afm/mamba_branch.hpp"
#include "afm/moe_head.hpp"

namespace afm {

struct ForwardOptions {
  bool training = false;
  // Source of the per-block shuffle permutations; only consulted in training.
  Rng* rng = nullptr;
  // Fixed top-k selection for the MoE head.
  const Selection* forced_selection = nullptr;
  ScanImpl scan_impl = ScanImpl::kSequential;
};

template <typename T>
struct ForwardResult {
  Var<T> logits;
  std::optional<RoutingReport<T>> routing;
  Var<T> aux_loss;  // undefined without the MoE head

  std::vector<CnnStageOutput<T>> cnn_taps;        // raw stage outputs, shallow to deep
  std::vector<TokenSequence<T>> mamba_taps;       // shallow to deep
  std::vector<Var<T>> cnn_features;               // C'_i, indexed by fusion stage (coarse first)
  std::vector<Var<T>> mamba_features;             // M_i, indexed by fusion stage
  std::vector<Var<T>> fusion_inputs;              // X_i,in
  std::vector<Var<T>> fusion_outputs;             // X_i,out
  Var<T> features;                                // V_final [N, stages*F]
};

/// Dual-branch CNN/Mamba encoder, dense DAMF fusion and MoE (or MLP) head.
template <typename T>
class AfmNet {
 public:
  AfmNet(const ModelConfig& config, std::uint64_t seed);

  ForwardResult<T> forward(const Var<T>& images, const ForwardOptions& opt = {});
  Var<T> logits(const Var<T>& images, const ForwardOptions& opt = {}) { return forward(images, opt).logits; }

  const ModelConfig& config() const { return config_; }
  ParamCollector<T> parameters();

  CnnBranch<T>* cnn() { return cnn_ ? &*cnn_ : nullptr; }
  MambaBranch<T>* mamba() { return mamba_ ? &*mamba_ : nullptr; }
  CnnEnhancer<T>& cnn_enhancer(std::size_t i) { return cnn_enh_.at(i); }
  MambaEnhancer<T>& mamba_enhancer(std::size_t i) { return mamba_enh_.at(i); }
  FusionCore<T>& fusion() { return fusion_; }
  MoEHead<T>* moe() { return moe_ ? &*moe_ : nullptr; }
  MlpHead<T>* mlp() { return mlp_ ? &*mlp_ : nullptr; }

 private:
  ModelConfig config_;
  std::optional<CnnBranch<T>> cnn_;
  std::vector<CnnEnhancer<T>> cnn_enh_;  // one per CNN tap, shallow to deep
  std::optional<MambaBranch<T>> mamba_;
  std::vector<MambaEnhancer<T>> mamba_enh_;
  FusionCore<T> fusion_;
  std::optional<MoEHead<T>> moe_;
  std::optional<MlpHead<T>> mlp_;
};

extern template class AfmNet<float>;
extern template class AfmNet<double>;

}  // namespace afm
