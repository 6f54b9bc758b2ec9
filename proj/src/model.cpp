#include "afm/model.hpp"

#include "afm/errors.hpp"

namespace afm {

template <typename T>
AfmNet<T>::AfmNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t taps = config_.num_fusion_stages();
  if (config_.cnn_enabled) {
    cnn_.emplace(config_.cnn, rng);
    for (std::size_t t = 0; t < taps; ++t) {
      cnn_enh_.emplace_back(config_.cnn.widths.at(config_.cnn.taps[t] - 1), config_.fusion, config_.e1_enabled, rng);
    }
  }
  if (config_.mamba_enabled) {
    mamba_.emplace(config_, rng);
    for (std::size_t t = 0; t < taps; ++t) {
      mamba_enh_.emplace_back(config_.mamba.embed_dim, config_.fusion, config_.e2_enabled, rng);
    }
  }
  fusion_ = FusionCore<T>(config_, rng);
  const std::size_t d = config_.feature_width();
  if (config_.head == HeadKind::kMoE) {
    moe_.emplace(d, config_.num_classes, config_.moe, rng);
  } else {
    mlp_.emplace(d, d * config_.moe.hidden_mult, config_.num_classes, rng);
  }
}

template <typename T>
ForwardResult<T> AfmNet<T>::forward(const Var<T>& images, const ForwardOptions& opt) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config_.image_size ||
      images.dim(3) != config_.image_size) {
    throw DimensionError("model built for [N,3," + std::to_string(config_.image_size) + "," +
                         std::to_string(config_.image_size) + "] input, got " + shape_str(images.shape()));
  }
  ForwardResult<T> r;
  const std::size_t n = config_.num_fusion_stages();
  r.cnn_features.resize(n);
  r.mamba_features.resize(n);

  if (cnn_) {
    r.cnn_taps = cnn_->forward(images, opt.training);
    for (std::size_t i = 0; i < n; ++i) {
      r.cnn_features[i] = cnn_enh_[n - 1 - i].forward(r.cnn_taps[n - 1 - i].feature, opt.training);
    }
  }
  if (mamba_) {
    Rng* perm_rng = opt.training ? opt.rng : nullptr;
    r.mamba_taps = mamba_->forward(images, perm_rng, opt.scan_impl);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t side = config_.fusion_resolution(i);
      r.mamba_features[i] = mamba_enh_[n - 1 - i].forward(r.mamba_taps[n - 1 - i], side, side, opt.training);
    }
  }
  r.fusion_outputs = fusion_.forward(r.cnn_features, r.mamba_features, opt.training, &r.fusion_inputs);
  r.features = collect_final_vector(r.fusion_outputs);

  if (moe_) {
    auto out = moe_->forward(r.features, opt.forced_selection);
    r.logits = out.logits;
    r.aux_loss = out.report.aux_loss;
    r.routing = std::move(out.report);
  } else {
    r.logits = (*mlp_)(r.features);
  }
  return r;
}

template <typename T>
ParamCollector<T> AfmNet<T>::parameters() {
  ParamCollector<T> c;
  if (cnn_) {
    cnn_->collect(c, "cnn");
    for (std::size_t i = 0; i < cnn_enh_.size(); ++i) cnn_enh_[i].collect(c, "e1." + std::to_string(i));
  }
  if (mamba_) {
    mamba_->collect(c, "mamba");
    for (std::size_t i = 0; i < mamba_enh_.size(); ++i) mamba_enh_[i].collect(c, "e2." + std::to_string(i));
  }
  fusion_.collect(c, "fusion");
  if (moe_) moe_->collect(c, "head");
  if (mlp_) mlp_->collect(c, "head");
  return c;
}

template class AfmNet<float>;
template class AfmNet<double>;

}  // namespace afm
