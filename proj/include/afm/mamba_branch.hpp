#pragma once

#include <array>
#include <optional>
#include <vector>

#include "afm/config.hpp"
#include "afm/fusion.hpp"
#include "afm/nn.hpp"
#include "afm/ssm.hpp"

namespace afm {

template <typename T>
struct TokenSequence {
  Var<T> tokens;  // [N,L,D]
  bool has_cls = true;

  std::size_t length() const { return tokens.dim(1); }
};

struct MultiPathOptions {
  // Token order for the shuffle path; empty means identity.
  std::vector<std::size_t> permutation;
  // Replaces the learned gate with fixed (forward, reverse, shuffle) weights.
  std::optional<std::array<double, 3>> pinned_gate;
  ScanImpl impl = ScanImpl::kSequential;
};

/// Forward, reverse and shuffled scans through one shared selective SSM,
/// mixed per token by softmax(Linear(x)) over the three paths.
template <typename T>
class MultiPathScan {
 public:
  struct Trace {
    Var<T> forward_path;
    Var<T> reverse_path;
    Var<T> shuffle_path;
    Var<T> gate;  // [N,L,3]
    Var<T> out;
  };

  MultiPathScan() = default;
  MultiPathScan(std::size_t channels, std::size_t state, Rng& rng);

  Var<T> forward(const Var<T>& x, const MultiPathOptions& opt = {}) const { return forward_traced(x, opt).out; }
  Trace forward_traced(const Var<T>& x, const MultiPathOptions& opt = {}) const;

  SsmParams<T>& ssm() { return ssm_; }
  const SsmParams<T>& ssm() const { return ssm_; }
  Linear<T>& gate() { return gate_; }
  void collect(ParamCollector<T>& c, const std::string& prefix);

 private:
  SsmParams<T> ssm_;
  Linear<T> gate_;
};

/// Mamba Stage Block: LayerNorm, in-projection into (x, z), causal depthwise
/// conv + SiLU on x, multi-path scan, gating by SiLU(z), out-projection, residual.
template <typename T>
class MambaBlock {
 public:
  MambaBlock() = default;
  MambaBlock(std::size_t dim, const MambaConfig& config, Rng& rng);

  Var<T> forward(const Var<T>& tokens, const MultiPathOptions& opt = {}) const;

  MultiPathScan<T>& mixer() { return mixer_; }
  Linear<T>& out_proj() { return out_proj_; }
  void collect(ParamCollector<T>& c, const std::string& prefix);
  /// Every linear projection inside the block (in, delta/B/C, gate, out).
  void collect_projections(ParamCollector<T>& c, const std::string& prefix);

 private:
  std::size_t inner_ = 0;
  LayerNorm<T> norm_;
  Linear<T> in_proj_;
  Var<T> conv_weight_;  // [E,K]
  Var<T> conv_bias_;    // [E]
  MultiPathScan<T> mixer_;
  Linear<T> out_proj_;
};

/// Non-overlapping patch embedding with a prepended cls token and learnable
/// positional embedding.
template <typename T>
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(std::size_t image_size, std::size_t patch, std::size_t dim, Rng& rng);

  TokenSequence<T> forward(const Var<T>& image) const;

  Var<T>& position() { return pos_; }
  Var<T>& cls() { return cls_; }
  Conv2d<T>& proj() { return proj_; }
  void collect(ParamCollector<T>& c, const std::string& prefix);

 private:
  std::size_t patch_ = 16;
  Conv2d<T> proj_;
  Var<T> cls_;  // [1,1,D]
  Var<T> pos_;  // [1,L+1,D]
};

template <typename T>
class MambaBranch {
 public:
  MambaBranch() = default;
  MambaBranch(const ModelConfig& config, Rng& rng);

  /// Token sequences after each tapped block, shallow to deep.
  /// `rng` drives the shuffle permutations (one per block) when given;
  /// otherwise the shuffle path uses the identity order.
  std::vector<TokenSequence<T>> forward(const Var<T>& image, Rng* rng = nullptr,
                                        ScanImpl impl = ScanImpl::kSequential) const;

  PatchEmbed<T>& embed() { return embed_; }
  MambaBlock<T>& block(std::size_t i) { return blocks_.at(i); }
  std::size_t depth() const { return blocks_.size(); }
  void collect(ParamCollector<T>& c, const std::string& prefix);

 private:
  MambaConfig config_;
  PatchEmbed<T> embed_;
  std::vector<MambaBlock<T>> blocks_;
};

/// E2: drop cls, project D -> F, fold the tokens back into a square grid,
/// bilinearly resize to the paired CNN stage resolution, then DAMF (skipped
/// when the enhancement is ablated).
template <typename T>
class MambaEnhancer {
 public:
  MambaEnhancer() = default;
  MambaEnhancer(std::size_t dim, const FusionConfig& fusion, bool enhance, Rng& rng);

  /// Adaptation only: [N,L,D] -> [N,F,g,g] -> [N,F,H,W].
  Var<T> adapt(const TokenSequence<T>& tokens, std::size_t target_h, std::size_t target_w) const;
  Var<T> forward(const TokenSequence<T>& tokens, std::size_t target_h, std::size_t target_w, bool training);

  Linear<T>& projection() { return proj_; }
  DamfBlock<T>* damf() { return damf_ ? &*damf_ : nullptr; }
  void collect(ParamCollector<T>& c, const std::string& prefix);

 private:
  Linear<T> proj_;
  std::optional<DamfBlock<T>> damf_;
};

/// Uniformly random permutation of 0..n-1 drawn from rng.
std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng);

extern template class MultiPathScan<float>;
extern template class MultiPathScan<double>;
extern template class MambaBlock<float>;
extern template class MambaBlock<double>;
extern template class PatchEmbed<float>;
extern template class PatchEmbed<double>;
extern template class MambaBranch<float>;
extern template class MambaBranch<double>;
extern template class MambaEnhancer<float>;
extern template class MambaEnhancer<double>;

}  // namespace afm
