#include "afm/fusion.hpp"

#include "afm/errors.hpp"

namespace afm {

template <typename T>
DamfBlock<T>::DamfBlock(std::size_t in_channels, const FusionConfig& config, Rng& rng)
    : in_channels_(in_channels), width_(config.width) {
  const std::size_t f = config.width;
  const std::size_t mid = f / config.bottleneck_ratio;
  for (std::size_t d : {std::size_t{1}, std::size_t{2}}) {
    auto& branch = d == 1 ? dil1_ : dil2_;
    branch.emplace_back(in_channels, mid, 1, ops::Conv2dOptions{}, true, rng);
    branch.emplace_back(mid, mid, 3, ops::Conv2dOptions{1, d, d}, true, rng);
    branch.emplace_back(mid, f, 1, ops::Conv2dOptions{}, true, rng);
  }
  plain_ = ConvBnAct<T>(in_channels, f, 3, ops::Conv2dOptions{1, 1, 1}, true, rng);
  reduce_ = ConvBnAct<T>(3 * f, f, 1, ops::Conv2dOptions{}, true, rng);
  ca_fc1_ = Linear<T>(f, f / config.attention_ratio, true, rng);
  ca_fc2_ = Linear<T>(f / config.attention_ratio, f, true, rng);
  const std::size_t k = config.spatial_kernel;
  sa_conv_ = Conv2d<T>(2, 1, k, ops::Conv2dOptions{1, k / 2, 1}, true, rng);
}

template <typename T>
typename DamfBlock<T>::Trace DamfBlock<T>::forward_traced(const Var<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != in_channels_) {
    throw DimensionError("DAMF block expects " + std::to_string(in_channels_) + " input channels, got " +
                         shape_str(x.shape()));
  }
  auto run = [&](std::vector<ConvBnAct<T>>& branch) {
    Var<T> y = x;
    for (auto& unit : branch) y = unit(y, training);
    return y;
  };
  Trace t;
  t.pre_attention = reduce_(ops::concat<T>({run(dil1_), run(dil2_), plain_(x, training)}, 1), training);

  const std::size_t n = x.dim(0);
  auto descriptor = [&](const Var<T>& pooled) {
    return ca_fc2_(ops::relu(ca_fc1_(ops::reshape(pooled, Shape{n, width_}))));
  };
  auto ca = ops::sigmoid(ops::add(descriptor(ops::global_avg_pool(t.pre_attention)),
                                  descriptor(ops::global_max_pool(t.pre_attention))));
  t.channel_attention = ops::reshape(ca, Shape{n, width_, 1, 1});
  auto refined = ops::mul(t.pre_attention, t.channel_attention);

  auto maps = ops::concat<T>({ops::mean(refined, 1, true), ops::max(refined, 1, true)}, 1);
  t.spatial_attention = ops::sigmoid(sa_conv_(maps));
  t.out = ops::mul(refined, t.spatial_attention);
  return t;
}

template <typename T>
void DamfBlock<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  for (std::size_t i = 0; i < dil1_.size(); ++i) dil1_[i].collect(c, join_name(prefix, "dil1." + std::to_string(i)));
  for (std::size_t i = 0; i < dil2_.size(); ++i) dil2_[i].collect(c, join_name(prefix, "dil2." + std::to_string(i)));
  plain_.collect(c, join_name(prefix, "plain"));
  reduce_.collect(c, join_name(prefix, "reduce"));
  collect_attention(c, prefix);
}

template <typename T>
void DamfBlock<T>::collect_attention(ParamCollector<T>& c, const std::string& prefix) {
  ca_fc1_.collect(c, join_name(prefix, "channel_att.fc1"));
  ca_fc2_.collect(c, join_name(prefix, "channel_att.fc2"));
  sa_conv_.collect(c, join_name(prefix, "spatial_att.conv"));
}

template <typename T>
FusionCore<T>::FusionCore(const ModelConfig& config, Rng& rng) : mode_(config.fusion_mode) {
  for (std::size_t i = 0; i < config.num_fusion_stages(); ++i) {
    blocks_.emplace_back(config.fusion_input_width(i), config.fusion, rng);
  }
}

template <typename T>
Var<T> FusionCore<T>::fuse_stage(std::size_t stage, const Var<T>& cnn, const Var<T>& mamba,
                                 const std::vector<Var<T>>& history, bool training, Var<T>* fused_input) {
  if (stage >= blocks_.size()) throw ContractError("fusion stage index out of range");
  std::vector<Var<T>> parts;
  if (cnn.defined()) parts.push_back(cnn);
  if (mamba.defined()) parts.push_back(mamba);
  if (parts.empty()) throw ContractError("fusion stage needs at least one branch feature");
  const std::size_t h = parts[0].dim(2), w = parts[0].dim(3);
  if (mode_ == FusionMode::kDense) {
    if (history.size() != stage) {
      throw ContractError("dense fusion stage " + std::to_string(stage) + " expects " + std::to_string(stage) +
                          " history entries, got " + std::to_string(history.size()));
    }
    for (const auto& prev : history) {
      if (prev.dim(2) == h && prev.dim(3) == w) {
        parts.push_back(prev);
      } else {
        parts.push_back(ops::interpolate(prev, h, w, ops::InterpMode::kBilinear));
      }
    }
  }
  auto x_in = ops::concat(parts, 1);
  if (fused_input) *fused_input = x_in;
  return blocks_[stage].forward(x_in, training);
}

template <typename T>
std::vector<Var<T>> FusionCore<T>::forward(const std::vector<Var<T>>& cnn, const std::vector<Var<T>>& mamba,
                                           bool training, std::vector<Var<T>>* inputs) {
  std::vector<Var<T>> outputs;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Var<T> c = i < cnn.size() ? cnn[i] : Var<T>();
    const Var<T> m = i < mamba.size() ? mamba[i] : Var<T>();
    Var<T> x_in;
    const std::vector<Var<T>> none;
    outputs.push_back(fuse_stage(i, c, m, mode_ == FusionMode::kDense ? outputs : none, training, &x_in));
    if (inputs) inputs->push_back(x_in);
  }
  return outputs;
}

template <typename T>
void FusionCore<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(c, join_name(prefix, "stage" + std::to_string(i)));
}

template <typename T>
Var<T> collect_final_vector(const std::vector<Var<T>>& stage_outputs) {
  if (stage_outputs.empty()) throw ContractError("no fusion stage outputs to pool");
  std::vector<Var<T>> pooled;
  for (const auto& x : stage_outputs) {
    pooled.push_back(ops::reshape(ops::global_avg_pool(x), Shape{x.dim(0), x.dim(1)}));
  }
  return pooled.size() == 1 ? pooled[0] : ops::concat(pooled, 1);
}

template class DamfBlock<float>;
template class DamfBlock<double>;
template class FusionCore<float>;
template class FusionCore<double>;
template Var<float> collect_final_vector(const std::vector<Var<float>>&);
template Var<double> collect_final_vector(const std::vector<Var<double>>&);

}  // namespace afm
