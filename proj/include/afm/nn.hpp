#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "afm/ops.hpp"

namespace afm {

using Rng = std::mt19937_64;

template <typename T>
struct ParamRef {
  std::string name;
  Var<T>* var;
};

template <typename T>
struct BufferRef {
  std::string name;
  Tensor<T>* tensor;
};

// Flat, ordered view of a module tree's parameters and buffers. Pointers stay
// valid as long as the module is not moved.
template <typename T>
class ParamCollector {
 public:
  void param(const std::string& name, Var<T>& v) { params.push_back({name, &v}); }
  void buffer(const std::string& name, Tensor<T>& t) { buffers.push_back({name, &t}); }
  std::size_t param_elements() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.var->value().size();
    return n;
  }

  std::vector<ParamRef<T>> params;
  std::vector<BufferRef<T>> buffers;
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
Var<T> make_param(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

/// Zero-mean normal with std sqrt(2 / fan_in).
template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct Conv2d {
  Var<T> weight;  // [out, in, k, k]
  Var<T> bias;    // [out] or undefined
  ops::Conv2dOptions opt;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, ops::Conv2dOptions options, bool with_bias, Rng& rng)
      : opt(options) {
    weight = make_param(kaiming_normal<T>(Shape{out, in, kernel, kernel}, in * kernel * kernel, rng));
    if (with_bias) bias = make_param(Tensor<T>(Shape{out}, T(0)));
  }

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }

  Var<T> operator()(const Var<T>& x) const {
    auto y = ops::conv2d(x, weight, opt);
    if (bias.defined()) y = ops::add(y, ops::reshape(bias, Shape{1, out_channels(), 1, 1}));
    return y;
  }

  void collect(ParamCollector<T>& c, const std::string& prefix) {
    c.param(join_name(prefix, "weight"), weight);
    if (bias.defined()) c.param(join_name(prefix, "bias"), bias);
  }
};

template <typename T>
struct BatchNorm2d {
  Var<T> gamma;
  Var<T> beta;
  ops::BatchNormBuffers<T> buffers;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels) {
    gamma = make_param(Tensor<T>(Shape{channels}, T(1)));
    beta = make_param(Tensor<T>(Shape{channels}, T(0)));
    buffers.running_mean = Tensor<T>(Shape{channels}, T(0));
    buffers.running_var = Tensor<T>(Shape{channels}, T(1));
  }

  Var<T> operator()(const Var<T>& x, bool training) { return ops::batch_norm2d(x, gamma, beta, buffers, training); }

  void collect(ParamCollector<T>& c, const std::string& prefix) {
    c.param(join_name(prefix, "gamma"), gamma);
    c.param(join_name(prefix, "beta"), beta);
    c.buffer(join_name(prefix, "running_mean"), buffers.running_mean);
    c.buffer(join_name(prefix, "running_var"), buffers.running_var);
  }
};

template <typename T>
struct Linear {
  Var<T> weight;  // [in, out]
  Var<T> bias;    // [out] or undefined

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    weight = make_param(kaiming_normal<T>(Shape{in, out}, in, rng));
    if (with_bias) bias = make_param(Tensor<T>(Shape{out}, T(0)));
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }

  void collect(ParamCollector<T>& c, const std::string& prefix) {
    c.param(join_name(prefix, "weight"), weight);
    if (bias.defined()) c.param(join_name(prefix, "bias"), bias);
  }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim) {
    gamma = make_param(Tensor<T>(Shape{dim}, T(1)));
    beta = make_param(Tensor<T>(Shape{dim}, T(0)));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma, beta); }

  void collect(ParamCollector<T>& c, const std::string& prefix) {
    c.param(join_name(prefix, "gamma"), gamma);
    c.param(join_name(prefix, "beta"), beta);
  }
};

/// Convolution (no bias) + batch norm + optional relu.
template <typename T>
struct ConvBnAct {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;
  bool act = true;

  ConvBnAct() = default;
  ConvBnAct(std::size_t in, std::size_t out, std::size_t kernel, ops::Conv2dOptions opt, bool relu, Rng& rng)
      : conv(in, out, kernel, opt, false, rng), bn(out), act(relu) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    auto y = bn(conv(x), training);
    return act ? ops::relu(y) : y;
  }

  void collect(ParamCollector<T>& c, const std::string& prefix) {
    conv.collect(c, join_name(prefix, "conv"));
    bn.collect(c, join_name(prefix, "bn"));
  }
};

/// Zeroes every parameter registered under the collector (test helper for
/// "all weights zero" identities).
template <typename T>
void zero_params(ParamCollector<T>& c) {
  for (auto& p : c.params) p.var->mutable_value().fill(T(0));
}

}  // namespace afm
