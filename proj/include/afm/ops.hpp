#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "afm/autodiff.hpp"

// Differentiable primitives. Every op here has a hand-written backward and is
// covered by the finite-difference gradient suite in tests/.
namespace afm::ops {

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

// Elementwise binary ops with numpy-style trailing-axis broadcasting.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c);
template <typename T>
Var<T> mul_scalar(const Var<T>& x, T c);
template <typename T>
Var<T> neg(const Var<T>& x);

template <typename T>
Var<T> exp(const Var<T>& x);
template <typename T>
Var<T> log(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> softplus(const Var<T>& x);
template <typename T>
Var<T> silu(const Var<T>& x);

template <typename T>
Var<T> sum(const Var<T>& x, std::size_t axis, bool keepdim = false);
template <typename T>
Var<T> mean(const Var<T>& x, std::size_t axis, bool keepdim = false);
/// Max along an axis; ties route the gradient to the first maximal element.
template <typename T>
Var<T> max(const Var<T>& x, std::size_t axis, bool keepdim = false);
template <typename T>
Var<T> sum_all(const Var<T>& x);
template <typename T>
Var<T> mean_all(const Var<T>& x);

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm);

/// out[..., j, ...] = x[..., indices[j], ...]
template <typename T>
Var<T> index_select(const Var<T>& x, std::size_t axis, const std::vector<std::size_t>& indices);
/// Zero tensor with `dim_size` entries along `axis`, plus src[..., j, ...] added at indices[j].
template <typename T>
Var<T> index_add(const Var<T>& src, std::size_t axis, const std::vector<std::size_t>& indices,
                 std::size_t dim_size);

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x[..., in] * w[in, out] (+ bias[out] when defined).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias = {});

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

std::size_t conv_output_size(std::size_t in, std::size_t kernel, const Conv2dOptions& opt);

/// x[N,C,H,W] with weights w[F,C,kh,kw], zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Conv2dOptions& opt = {});

/// Causal depthwise convolution over the token axis: x[N,L,C], w[C,K].
template <typename T>
Var<T> depthwise_conv1d(const Var<T>& x, const Var<T>& w);

template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding);

/// Mean over the spatial axes of [N,C,H,W], keeping them as size-1 axes.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);
template <typename T>
Var<T> global_max_pool(const Var<T>& x);

template <typename T>
struct BatchNormBuffers {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

/// Per-channel normalization of [N,C,H,W]. Training mode normalizes with batch
/// statistics and updates the running estimates; inference mode uses them.
template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormBuffers<T>& buffers,
                    bool training);

/// Normalization over the last axis.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

enum class InterpMode { kNearest, kBilinear };

/// Resize [N,C,H,W]. Bilinear sampling is corner-aligned; nearest uses floor(dst*in/out).
template <typename T>
Var<T> interpolate(const Var<T>& x, std::size_t out_h, std::size_t out_w, InterpMode mode);

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis);
template <typename T>
Var<T> log_softmax(const Var<T>& x, std::size_t axis);

/// Mean over the batch of -sum(target * log softmax(logits)), with
/// target = (1-eps)*onehot + eps/C. Throws DataError for out-of-range labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels, T smoothing = T(0));

}  // namespace afm::ops
