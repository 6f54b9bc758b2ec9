#include "afm/cnn_branch.hpp"

#include "afm/errors.hpp"

namespace afm {

template <typename T>
ResidualBlock<T>::ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
    : conv1(in, out, 3, ops::Conv2dOptions{stride, 1, 1}, true, rng),
      conv2(out, out, 3, ops::Conv2dOptions{1, 1, 1}, false, rng) {
  if (in != out || stride != 1) shortcut.emplace(in, out, 1, ops::Conv2dOptions{stride, 0, 1}, false, rng);
}

template <typename T>
Var<T> ResidualBlock<T>::operator()(const Var<T>& x, bool training) {
  auto residual = conv2(conv1(x, training), training);
  auto skip = shortcut ? (*shortcut)(x, training) : x;
  return ops::relu(ops::add(residual, skip));
}

template <typename T>
void ResidualBlock<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  collect_residual(c, prefix);
  if (shortcut) shortcut->collect(c, join_name(prefix, "shortcut"));
}

template <typename T>
void ResidualBlock<T>::collect_residual(ParamCollector<T>& c, const std::string& prefix) {
  conv1.collect(c, join_name(prefix, "conv1"));
  conv2.collect(c, join_name(prefix, "conv2"));
}

template <typename T>
CnnBranch<T>::CnnBranch(const CnnConfig& config, Rng& rng) : config_(config) {
  stem_conv_ = ConvBnAct<T>(3, config.widths.at(0), 7, ops::Conv2dOptions{2, 3, 1}, true, rng);
  std::size_t in = config.widths[0];
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    std::vector<ResidualBlock<T>> blocks;
    const std::size_t out = config.widths[s];
    for (std::size_t b = 0; b < config.blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      blocks.emplace_back(b == 0 ? in : out, out, stride, rng);
    }
    stages_.push_back(std::move(blocks));
    in = out;
  }
}

template <typename T>
Var<T> CnnBranch<T>::stem(const Var<T>& image, bool training) {
  if (image.rank() != 4 || image.dim(1) != 3) throw DimensionError("CNN stem expects [N,3,H,W], got " + shape_str(image.shape()));
  if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0) {
    throw ConfigError("CNN stem needs H and W divisible by 4, got " + shape_str(image.shape()));
  }
  return ops::max_pool2d(stem_conv_(image, training), 3, 2, 1);
}

template <typename T>
Var<T> CnnBranch<T>::stage_forward(std::size_t stage, const Var<T>& x, bool training) {
  auto& blocks = stages_.at(stage - 1);
  const std::size_t expected = blocks.front().conv1.conv.in_channels();
  if (x.rank() != 4 || x.dim(1) != expected) {
    throw ConfigError("stage " + std::to_string(stage) + " expects " + std::to_string(expected) +
                      " input channels, got " + shape_str(x.shape()));
  }
  Var<T> y = x;
  for (auto& block : blocks) y = block(y, training);
  return y;
}

template <typename T>
std::vector<CnnStageOutput<T>> CnnBranch<T>::forward(const Var<T>& image, bool training) {
  std::vector<CnnStageOutput<T>> taps;
  Var<T> y = stem(image, training);
  const std::size_t deepest = config_.taps.empty() ? stages_.size() : config_.taps.back();
  for (std::size_t s = 1; s <= deepest; ++s) {
    y = stage_forward(s, y, training);
    for (auto t : config_.taps) {
      if (t == s) taps.push_back({s, y});
    }
  }
  return taps;
}

template <typename T>
void CnnBranch<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  stem_conv_.collect(c, join_name(prefix, "stem"));
  for (std::size_t s = 0; s < stages_.size(); ++s)
    for (std::size_t b = 0; b < stages_[s].size(); ++b)
      stages_[s][b].collect(c, join_name(prefix, "stage" + std::to_string(s + 1) + ".block" + std::to_string(b)));
}

template <typename T>
CnnEnhancer<T>::CnnEnhancer(std::size_t in_channels, const FusionConfig& fusion, bool enhance, Rng& rng)
    : adapter_(in_channels, fusion.width, 1, ops::Conv2dOptions{}, true, rng) {
  if (enhance) damf_.emplace(fusion.width, fusion, rng);
}

template <typename T>
Var<T> CnnEnhancer<T>::forward(const Var<T>& stage_output, bool training) {
  auto adapted = adapter_(stage_output);
  return damf_ ? damf_->forward(adapted, training) : adapted;
}

template <typename T>
void CnnEnhancer<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  adapter_.collect(c, join_name(prefix, "adapter"));
  if (damf_) damf_->collect(c, join_name(prefix, "damf"));
}

template struct ResidualBlock<float>;
template struct ResidualBlock<double>;
template class CnnBranch<float>;
template class CnnBranch<double>;
template class CnnEnhancer<float>;
template class CnnEnhancer<double>;

}  // namespace afm
