#include "afm/mamba_branch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "afm/errors.hpp"

namespace afm {

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

template <typename T>
MultiPathScan<T>::MultiPathScan(std::size_t channels, std::size_t state, Rng& rng)
    : ssm_(channels, state, rng), gate_(channels, 3, true, rng) {}

template <typename T>
typename MultiPathScan<T>::Trace MultiPathScan<T>::forward_traced(const Var<T>& x, const MultiPathOptions& opt) const {
  const std::size_t n = x.dim(0), len = x.dim(1);
  Trace t;
  t.forward_path = ssm_.forward(x, opt.impl);

  std::vector<std::size_t> reversed(len);
  for (std::size_t i = 0; i < len; ++i) reversed[i] = len - 1 - i;
  t.reverse_path = ops::index_select(ssm_.forward(ops::index_select(x, 1, reversed), opt.impl), 1, reversed);

  if (opt.permutation.empty()) {
    t.shuffle_path = ssm_.forward(x, opt.impl);
  } else {
    const auto& perm = opt.permutation;
    if (perm.size() != len) throw DimensionError("shuffle permutation length does not match token count");
    std::vector<std::size_t> inverse(len, len);
    for (std::size_t i = 0; i < len; ++i) {
      if (perm[i] >= len || inverse[perm[i]] != len) throw ContractError("shuffle order is not a permutation");
      inverse[perm[i]] = i;
    }
    t.shuffle_path = ops::index_select(ssm_.forward(ops::index_select(x, 1, perm), opt.impl), 1, inverse);
  }

  if (opt.pinned_gate) {
    Tensor<T> g(Shape{n, len, 3});
    for (std::size_t i = 0; i < n * len; ++i)
      for (std::size_t p = 0; p < 3; ++p) g[i * 3 + p] = static_cast<T>((*opt.pinned_gate)[p]);
    t.gate = ops::constant(std::move(g));
  } else {
    t.gate = ops::softmax(gate_(x), 2);
  }
  const std::array<Var<T>, 3> paths{t.forward_path, t.reverse_path, t.shuffle_path};
  for (std::size_t p = 0; p < 3; ++p) {
    auto term = ops::mul(paths[p], ops::slice(t.gate, 2, p, 1));
    t.out = p == 0 ? term : ops::add(t.out, term);
  }
  return t;
}

template <typename T>
void MultiPathScan<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  ssm_.collect(c, join_name(prefix, "ssm"));
  gate_.collect(c, join_name(prefix, "path_gate"));
}

template <typename T>
MambaBlock<T>::MambaBlock(std::size_t dim, const MambaConfig& config, Rng& rng)
    : inner_(dim * config.expand), norm_(dim), in_proj_(dim, 2 * dim * config.expand, false, rng) {
  conv_weight_ = make_param(kaiming_normal<T>(Shape{inner_, config.conv_kernel}, config.conv_kernel, rng));
  conv_bias_ = make_param(Tensor<T>(Shape{inner_}, T(0)));
  mixer_ = MultiPathScan<T>(inner_, config.state_size, rng);
  out_proj_ = Linear<T>(inner_, dim, false, rng);
}

template <typename T>
Var<T> MambaBlock<T>::forward(const Var<T>& tokens, const MultiPathOptions& opt) const {
  auto projected = in_proj_(norm_(tokens));
  auto x = ops::slice(projected, 2, 0, inner_);
  auto z = ops::slice(projected, 2, inner_, inner_);
  x = ops::silu(ops::add(ops::depthwise_conv1d(x, conv_weight_), conv_bias_));
  auto y = ops::mul(mixer_.forward(x, opt), ops::silu(z));
  return ops::add(tokens, out_proj_(y));
}

template <typename T>
void MambaBlock<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  norm_.collect(c, join_name(prefix, "norm"));
  in_proj_.collect(c, join_name(prefix, "in_proj"));
  c.param(join_name(prefix, "conv.weight"), conv_weight_);
  c.param(join_name(prefix, "conv.bias"), conv_bias_);
  mixer_.collect(c, join_name(prefix, "mixer"));
  out_proj_.collect(c, join_name(prefix, "out_proj"));
}

template <typename T>
void MambaBlock<T>::collect_projections(ParamCollector<T>& c, const std::string& prefix) {
  in_proj_.collect(c, join_name(prefix, "in_proj"));
  c.param(join_name(prefix, "w_delta"), mixer_.ssm().w_delta);
  c.param(join_name(prefix, "w_b"), mixer_.ssm().w_b);
  c.param(join_name(prefix, "w_c"), mixer_.ssm().w_c);
  mixer_.gate().collect(c, join_name(prefix, "path_gate"));
  out_proj_.collect(c, join_name(prefix, "out_proj"));
}

template <typename T>
PatchEmbed<T>::PatchEmbed(std::size_t image_size, std::size_t patch, std::size_t dim, Rng& rng)
    : patch_(patch), proj_(3, dim, patch, ops::Conv2dOptions{patch, 0, 1}, true, rng) {
  const std::size_t grid = image_size / patch;
  cls_ = make_param(normal_tensor<T>(Shape{1, 1, dim}, 0.02, rng));
  pos_ = make_param(normal_tensor<T>(Shape{1, grid * grid + 1, dim}, 0.02, rng));
}

template <typename T>
TokenSequence<T> PatchEmbed<T>::forward(const Var<T>& image) const {
  if (image.rank() != 4 || image.dim(1) != 3) throw DimensionError("patch embedding expects [N,3,H,W], got " + shape_str(image.shape()));
  if (image.dim(2) % patch_ != 0 || image.dim(3) % patch_ != 0) {
    throw ConfigError("image " + shape_str(image.shape()) + " is not divisible into " + std::to_string(patch_) + "x" +
                      std::to_string(patch_) + " patches");
  }
  const std::size_t n = image.dim(0);
  const std::size_t dim = proj_.out_channels();
  auto grid = proj_(image);  // [N,D,gh,gw]
  const std::size_t count = grid.dim(2) * grid.dim(3);
  if (count + 1 != pos_.dim(1)) {
    throw ConfigError("image " + shape_str(image.shape()) + " gives " + std::to_string(count) +
                      " patches but the positional embedding was built for " + std::to_string(pos_.dim(1) - 1));
  }
  auto patches = ops::permute(ops::reshape(grid, Shape{n, dim, count}), {0, 2, 1});
  auto cls = ops::add(ops::constant(Tensor<T>(Shape{n, 1, dim}, T(0))), cls_);
  return {ops::add(ops::concat<T>({cls, patches}, 1), pos_), true};
}

template <typename T>
void PatchEmbed<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  proj_.collect(c, join_name(prefix, "proj"));
  c.param(join_name(prefix, "cls"), cls_);
  c.param(join_name(prefix, "pos"), pos_);
}

template <typename T>
MambaBranch<T>::MambaBranch(const ModelConfig& config, Rng& rng)
    : config_(config.mamba), embed_(config.image_size, config.mamba.patch, config.mamba.embed_dim, rng) {
  for (std::size_t i = 0; i < config.mamba.depth; ++i) blocks_.emplace_back(config.mamba.embed_dim, config.mamba, rng);
}

template <typename T>
std::vector<TokenSequence<T>> MambaBranch<T>::forward(const Var<T>& image, Rng* rng, ScanImpl impl) const {
  auto seq = embed_.forward(image);
  std::vector<TokenSequence<T>> taps;
  const std::size_t deepest = config_.taps.back();
  for (std::size_t b = 1; b <= deepest; ++b) {
    MultiPathOptions opt;
    opt.impl = impl;
    if (rng) opt.permutation = random_permutation(seq.length(), *rng);
    seq.tokens = blocks_[b - 1].forward(seq.tokens, opt);
    if (std::find(config_.taps.begin(), config_.taps.end(), b) != config_.taps.end()) taps.push_back(seq);
  }
  return taps;
}

template <typename T>
void MambaBranch<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  embed_.collect(c, join_name(prefix, "embed"));
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(c, join_name(prefix, "block" + std::to_string(i)));
}

template <typename T>
MambaEnhancer<T>::MambaEnhancer(std::size_t dim, const FusionConfig& fusion, bool enhance, Rng& rng)
    : proj_(dim, fusion.width, true, rng) {
  if (enhance) damf_.emplace(fusion.width, fusion, rng);
}

template <typename T>
Var<T> MambaEnhancer<T>::adapt(const TokenSequence<T>& seq, std::size_t target_h, std::size_t target_w) const {
  Var<T> tokens = seq.tokens;
  std::size_t len = seq.length();
  if (seq.has_cls) {
    if (len < 2) throw ContractError("token sequence has no patch tokens after removing cls");
    tokens = ops::slice(tokens, 1, 1, len - 1);
    --len;
  }
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(len))));
  if (side * side != len) {
    throw ContractError("patch token count " + std::to_string(len) + " does not form a square grid");
  }
  const std::size_t n = tokens.dim(0);
  const std::size_t f = proj_.out_features();
  auto grid = ops::permute(ops::reshape(proj_(tokens), Shape{n, side, side, f}), {0, 3, 1, 2});
  if (side == target_h && side == target_w) return grid;
  return ops::interpolate(grid, target_h, target_w, ops::InterpMode::kBilinear);
}

template <typename T>
Var<T> MambaEnhancer<T>::forward(const TokenSequence<T>& seq, std::size_t target_h, std::size_t target_w, bool training) {
  auto adapted = adapt(seq, target_h, target_w);
  return damf_ ? damf_->forward(adapted, training) : adapted;
}

template <typename T>
void MambaEnhancer<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  proj_.collect(c, join_name(prefix, "proj"));
  if (damf_) damf_->collect(c, join_name(prefix, "damf"));
}

template class MultiPathScan<float>;
template class MultiPathScan<double>;
template class MambaBlock<float>;
template class MambaBlock<double>;
template class PatchEmbed<float>;
template class PatchEmbed<double>;
template class MambaBranch<float>;
template class MambaBranch<double>;
template class MambaEnhancer<float>;
template class MambaEnhancer<double>;

}  // namespace afm
