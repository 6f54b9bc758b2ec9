#include "afm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "afm/errors.hpp"

namespace afm::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct AxisSplit {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

void check_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
}

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out.push_back(1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> padded_strides(const Shape& shape, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - shape.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[i + offset] = shape[i] == 1 ? 0 : stride;
    stride *= shape[i];
  }
  return strides;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast p;
  p.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t db = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (da == db || db == 1) {
      p.out[i] = da;
    } else if (da == 1) {
      p.out[i] = db;
    } else {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  p.stride_a = padded_strides(a, p.out);
  p.stride_b = padded_strides(b, p.out);
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <class F>
void walk(const Broadcast& p, F&& f) {
  const std::size_t rank = p.out.size();
  const std::size_t total = numel(p.out);
  const std::size_t last = p.out[rank - 1];
  const std::size_t sa = p.stride_a[rank - 1];
  const std::size_t sb = p.stride_b[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < total; o += last) {
    for (std::size_t j = 0; j < last; ++j) f(o + j, ia + j * sa, ib + j * sb);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.stride_a[ax] * idx[ax];
      ib -= p.stride_b[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

template <typename T>
T* grad_of(Node<T>& node, std::size_t parent) {
  auto& p = *node.parents[parent];
  return p.requires_grad ? p.grad_buffer().ptr() : nullptr;
}

// Binary op skeleton; da/db return d(out)/d(a) and d(out)/d(b) at (a, b).
template <typename T, class Fwd, class Da, class Db>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* name, Fwd fwd, Da da, Db db) {
  auto plan = plan_broadcast(a.shape(), b.shape(), name);
  Tensor<T> out(plan.out);
  const T* av = a.value().ptr();
  const T* bv = b.value().ptr();
  T* ov = out.ptr();
  walk(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = fwd(av[i], bv[j]); });
  return make_result<T>(
      std::move(out), {a, b},
      [plan = std::move(plan), da, db](Node<T>& self) {
        const T* g = self.grad.ptr();
        const T* x = self.parents[0]->value.ptr();
        const T* y = self.parents[1]->value.ptr();
        T* ga = grad_of(self, 0);
        T* gb = grad_of(self, 1);
        walk(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
          if (ga) ga[i] += g[o] * da(x[i], y[j]);
          if (gb) gb[j] += g[o] * db(x[i], y[j]);
        });
      },
      name);
}

// Unary op skeleton; deriv(x, y) returns dy/dx given input and output.
template <typename T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor<T> out(x.shape());
  const T* xv = x.value().ptr();
  T* ov = out.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) ov[i] = fwd(xv[i]);
  return make_result<T>(
      std::move(out), {x},
      [deriv](Node<T>& self) {
        const T* g = self.grad.ptr();
        const T* xv = self.parents[0]->value.ptr();
        const T* yv = self.value.ptr();
        T* gx = self.parents[0]->grad_buffer().ptr();
        for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
      },
      name);
}

template <typename T>
T stable_softplus(T v) {
  return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary<T>(
      x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& x, T c) {
  return unary<T>(
      x, "mul_scalar", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> neg(const Var<T>& x) {
  return mul_scalar(x, T(-1));
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary<T>(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return unary<T>(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary<T>(
      x, "sigmoid", [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary<T>(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
  return unary<T>(
      x, "softplus", [](T v) { return stable_softplus(v); }, [](T v, T) { return stable_sigmoid(v); });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  return unary<T>(
      x, "silu", [](T v) { return v * stable_sigmoid(v); },
      [](T v, T) {
        const T s = stable_sigmoid(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& x, std::size_t axis, bool keepdim) {
  check_axis(x.shape(), axis, "sum");
  const auto s = split_at(x.shape(), axis);
  Tensor<T> out(reduced_shape(x.shape(), axis, keepdim), T(0));
  const T* xv = x.value().ptr();
  T* ov = out.ptr();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) ov[o * s.inner + i] += xv[(o * s.n + k) * s.inner + i];
  return make_result<T>(
      std::move(out), {x},
      [s](Node<T>& self) {
        const T* g = self.grad.ptr();
        T* gx = self.parents[0]->grad_buffer().ptr();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t k = 0; k < s.n; ++k)
            for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.n + k) * s.inner + i] += g[o * s.inner + i];
      },
      "sum");
}

template <typename T>
Var<T> mean(const Var<T>& x, std::size_t axis, bool keepdim) {
  check_axis(x.shape(), axis, "mean");
  return mul_scalar(sum(x, axis, keepdim), T(1) / static_cast<T>(x.dim(axis)));
}

template <typename T>
Var<T> max(const Var<T>& x, std::size_t axis, bool keepdim) {
  check_axis(x.shape(), axis, "max");
  const auto s = split_at(x.shape(), axis);
  Tensor<T> out(reduced_shape(x.shape(), axis, keepdim));
  std::vector<std::size_t> argmax(s.outer * s.inner);
  const T* xv = x.value().ptr();
  T* ov = out.ptr();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (o * s.n) * s.inner + i;
      for (std::size_t k = 1; k < s.n; ++k) {
        const std::size_t idx = (o * s.n + k) * s.inner + i;
        if (xv[idx] > xv[best]) best = idx;
      }
      argmax[o * s.inner + i] = best;
      ov[o * s.inner + i] = xv[best];
    }
  }
  return make_result<T>(
      std::move(out), {x},
      [argmax = std::move(argmax)](Node<T>& self) {
        const T* g = self.grad.ptr();
        T* gx = self.parents[0]->grad_buffer().ptr();
        for (std::size_t j = 0; j < argmax.size(); ++j) gx[argmax[j]] += g[j];
      },
      "max");
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  return sum(reshape(x, Shape{x.value().size()}), 0, false);
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.value().size()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  check_axis(first, axis, "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first));
    widths.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto so = split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].value().ptr();
    const std::size_t chunk = widths[p] * so.inner;
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(src + o * chunk, chunk, out.ptr() + (o * so.n + offset) * so.inner);
    }
    offset += widths[p];
  }
  return make_result<T>(
      std::move(out), parts,
      [widths, so](Node<T>& self) {
        const T* g = self.grad.ptr();
        std::size_t offset = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          const std::size_t chunk = widths[p] * so.inner;
          if (T* gp = grad_of(self, p)) {
            for (std::size_t o = 0; o < so.outer; ++o) {
              const T* src = g + (o * so.n + offset) * so.inner;
              T* dst = gp + o * chunk;
              for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
          }
          offset += widths[p];
        }
      },
      "concat");
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis(x.shape(), axis, "slice");
  if (length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                         shape_str(x.shape()));
  }
  const auto s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  const std::size_t chunk = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.value().ptr() + (o * s.n + start) * s.inner, chunk, out.ptr() + o * chunk);
  }
  return make_result<T>(
      std::move(out), {x},
      [s, start, chunk](Node<T>& self) {
        const T* g = self.grad.ptr();
        T* gx = self.parents[0]->grad_buffer().ptr();
        for (std::size_t o = 0; o < s.outer; ++o) {
          T* dst = gx + (o * s.n + start) * s.inner;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[o * chunk + i];
        }
      },
      "slice");
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(
      std::move(out), {x},
      [](Node<T>& self) {
        auto& parent = *self.parents[0];
        parent.accumulate(self.grad.reshaped(parent.value.shape()));
      },
      "reshape");
}

namespace {

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in[i + 1];
  Shape out_shape(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  Tensor<T> out(out_shape);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  const T* xv = x.ptr();
  T* ov = out.ptr();
  for (std::size_t o = 0; o < out.size(); ++o) {
    ov[o] = xv[src];
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= strides[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  std::vector<bool> seen(rank, false);
  if (perm.size() != rank) throw DimensionError("permute: order length does not match " + shape_str(x.shape()));
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw DimensionError("permute: invalid axis order for " + shape_str(x.shape()));
    seen[p] = true;
  }
  std::vector<std::size_t> inverse(rank);
  for (std::size_t i = 0; i < rank; ++i) inverse[perm[i]] = i;
  return make_result<T>(
      permute_tensor(x.value(), perm), {x},
      [inverse](Node<T>& self) { self.parents[0]->accumulate(permute_tensor(self.grad, inverse)); }, "permute");
}

template <typename T>
Var<T> index_select(const Var<T>& x, std::size_t axis, const std::vector<std::size_t>& indices) {
  check_axis(x.shape(), axis, "index_select");
  if (indices.empty()) throw DimensionError("index_select: empty index list");
  const auto s = split_at(x.shape(), axis);
  for (auto i : indices) {
    if (i >= s.n) throw DimensionError("index_select: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  Tensor<T> out(out_shape);
  const std::size_t m = indices.size();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < m; ++j)
      std::copy_n(x.value().ptr() + (o * s.n + indices[j]) * s.inner, s.inner, out.ptr() + (o * m + j) * s.inner);
  return make_result<T>(
      std::move(out), {x},
      [s, indices](Node<T>& self) {
        const T* g = self.grad.ptr();
        T* gx = self.parents[0]->grad_buffer().ptr();
        const std::size_t m = indices.size();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t j = 0; j < m; ++j) {
            T* dst = gx + (o * s.n + indices[j]) * s.inner;
            const T* src = g + (o * m + j) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
          }
      },
      "index_select");
}

template <typename T>
Var<T> index_add(const Var<T>& src, std::size_t axis, const std::vector<std::size_t>& indices,
                 std::size_t dim_size) {
  check_axis(src.shape(), axis, "index_add");
  if (indices.size() != src.dim(axis)) throw DimensionError("index_add: index count does not match source axis");
  for (auto i : indices) {
    if (i >= dim_size) throw DimensionError("index_add: index out of range");
  }
  const auto s = split_at(src.shape(), axis);
  Shape out_shape = src.shape();
  out_shape[axis] = dim_size;
  Tensor<T> out(out_shape, T(0));
  const std::size_t m = indices.size();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < m; ++j) {
      T* dst = out.ptr() + (o * dim_size + indices[j]) * s.inner;
      const T* sv = src.value().ptr() + (o * m + j) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += sv[i];
    }
  return make_result<T>(
      std::move(out), {src},
      [s, indices, dim_size](Node<T>& self) {
        const T* g = self.grad.ptr();
        T* gs = self.parents[0]->grad_buffer().ptr();
        const std::size_t m = indices.size();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t j = 0; j < m; ++j) {
            const T* from = g + (o * dim_size + indices[j]) * s.inner;
            T* dst = gs + (o * m + j) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += from[i];
          }
      },
      "index_add");
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  MatMap<T>(out.ptr(), m, n).noalias() = ConstMatMap<T>(a.value().ptr(), m, k) * ConstMatMap<T>(b.value().ptr(), k, n);
  return make_result<T>(
      std::move(out), {a, b},
      [m, k, n](Node<T>& self) {
        ConstMatMap<T> g(self.grad.ptr(), m, n);
        if (T* ga = grad_of(self, 0)) {
          MatMap<T>(ga, m, k).noalias() += g * ConstMatMap<T>(self.parents[1]->value.ptr(), k, n).transpose();
        }
        if (T* gb = grad_of(self, 1)) {
          MatMap<T>(gb, k, n).noalias() += ConstMatMap<T>(self.parents[0]->value.ptr(), m, k).transpose() * g;
        }
      },
      "matmul");
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  if (w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  const std::size_t rows = x.value().size() / in;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.value().size() != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Tensor<T> out(out_shape);
  MatMap<T> y(out.ptr(), rows, out_dim);
  y.noalias() = ConstMatMap<T>(x.value().ptr(), rows, in) * ConstMatMap<T>(w.value().ptr(), in, out_dim);
  if (has_bias) {
    const T* b = bias.value().ptr();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) y(r, c) += b[c];
  }
  std::vector<Var<T>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(
      std::move(out), std::move(parents),
      [rows, in, out_dim, has_bias](Node<T>& self) {
        ConstMatMap<T> g(self.grad.ptr(), rows, out_dim);
        if (T* gx = grad_of(self, 0)) {
          MatMap<T>(gx, rows, in).noalias() += g * ConstMatMap<T>(self.parents[1]->value.ptr(), in, out_dim).transpose();
        }
        if (T* gw = grad_of(self, 1)) {
          MatMap<T>(gw, in, out_dim).noalias() += ConstMatMap<T>(self.parents[0]->value.ptr(), rows, in).transpose() * g;
        }
        if (has_bias) {
          if (T* gb = grad_of(self, 2)) {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < out_dim; ++c) gb[c] += g(r, c);
          }
        }
      },
      "linear");
}

// ---------------------------------------------------------------------------
// Convolution and pooling

std::size_t conv_output_size(std::size_t in, std::size_t kernel, const Conv2dOptions& opt) {
  if (kernel == 0 || opt.stride == 0 || opt.dilation == 0) throw ConfigError("conv: kernel, stride and dilation must be >= 1");
  const long long span = static_cast<long long>(opt.dilation) * (static_cast<long long>(kernel) - 1) + 1;
  const long long numer = static_cast<long long>(in) + 2 * static_cast<long long>(opt.padding) - span;
  if (numer < 0) {
    throw ConfigError("conv: output size <= 0 for input " + std::to_string(in) + ", kernel " + std::to_string(kernel));
  }
  return static_cast<std::size_t>(numer / static_cast<long long>(opt.stride)) + 1;
}

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, f, kh, kw, ho, wo;
  Conv2dOptions opt;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return n * ho * wo; }
};

// col[(c,ki,kj), (n,oh,ow)]
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t plane = g.ho * g.wo;
  const std::size_t ncols = g.cols();
  const long long pad = static_cast<long long>(g.opt.padding);
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* xc = x + (n * g.c + c) * g.h * g.w;
          T* dst = row + n * plane;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long long ih = static_cast<long long>(oh * g.opt.stride + ki * g.opt.dilation) - pad;
            T* drow = dst + oh * g.wo;
            if (ih < 0 || ih >= static_cast<long long>(g.h)) {
              std::fill_n(drow, g.wo, T(0));
              continue;
            }
            const T* xrow = xc + static_cast<std::size_t>(ih) * g.w;
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              const long long iw = static_cast<long long>(ow * g.opt.stride + kj * g.opt.dilation) - pad;
              drow[ow] = (iw < 0 || iw >= static_cast<long long>(g.w)) ? T(0) : xrow[iw];
            }
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const std::size_t plane = g.ho * g.wo;
  const std::size_t ncols = g.cols();
  const long long pad = static_cast<long long>(g.opt.padding);
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* xc = x + (n * g.c + c) * g.h * g.w;
          const T* src = row + n * plane;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const long long ih = static_cast<long long>(oh * g.opt.stride + ki * g.opt.dilation) - pad;
            if (ih < 0 || ih >= static_cast<long long>(g.h)) continue;
            T* xrow = xc + static_cast<std::size_t>(ih) * g.w;
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              const long long iw = static_cast<long long>(ow * g.opt.stride + kj * g.opt.dilation) - pad;
              if (iw >= 0 && iw < static_cast<long long>(g.w)) xrow[iw] += src[oh * g.wo + ow];
            }
          }
        }
      }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Conv2dOptions& opt) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, opt};
  g.ho = conv_output_size(g.h, g.kh, opt);
  g.wo = conv_output_size(g.w, g.kw, opt);
  const std::size_t plane = g.ho * g.wo;

  std::vector<T> col(g.rows() * g.cols());
  im2col(x.value().ptr(), g, col.data());
  RowMat<T> y = ConstMatMap<T>(w.value().ptr(), g.f, g.rows()) * ConstMatMap<T>(col.data(), g.rows(), g.cols());
  Tensor<T> out(Shape{g.n, g.f, g.ho, g.wo});
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t f = 0; f < g.f; ++f) std::copy_n(y.data() + f * g.cols() + n * plane, plane, out.ptr() + (n * g.f + f) * plane);

  return make_result<T>(
      std::move(out), {x, w},
      [g](Node<T>& self) {
        const std::size_t plane = g.ho * g.wo;
        RowMat<T> gy(g.f, g.cols());
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t f = 0; f < g.f; ++f)
            std::copy_n(self.grad.ptr() + (n * g.f + f) * plane, plane, gy.data() + f * g.cols() + n * plane);
        T* gw = grad_of(self, 1);
        T* gx = grad_of(self, 0);
        if (gw) {
          std::vector<T> col(g.rows() * g.cols());
          im2col(self.parents[0]->value.ptr(), g, col.data());
          MatMap<T>(gw, g.f, g.rows()).noalias() += gy * ConstMatMap<T>(col.data(), g.rows(), g.cols()).transpose();
        }
        if (gx) {
          RowMat<T> gcol = ConstMatMap<T>(self.parents[1]->value.ptr(), g.f, g.rows()).transpose() * gy;
          col2im(gcol.data(), g, gx);
        }
      },
      "conv2d");
}

template <typename T>
Var<T> depthwise_conv1d(const Var<T>& x, const Var<T>& w) {
  if (x.rank() != 3 || w.rank() != 2 || x.dim(2) != w.dim(0)) {
    throw DimensionError("depthwise_conv1d: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), len = x.dim(1), ch = x.dim(2), k = w.dim(1);
  Tensor<T> out(x.shape(), T(0));
  const T* xv = x.value().ptr();
  const T* wv = w.value().ptr();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t j = 0; j < k; ++j) {
        // tap j reads position l - (k - 1) + j
        if (l + j + 1 < k) continue;
        const std::size_t src = l + j + 1 - k;
        const T* xr = xv + (b * len + src) * ch;
        T* orow = out.ptr() + (b * len + l) * ch;
        for (std::size_t c = 0; c < ch; ++c) orow[c] += wv[c * k + j] * xr[c];
      }
  return make_result<T>(
      std::move(out), {x, w},
      [n, len, ch, k](Node<T>& self) {
        const T* g = self.grad.ptr();
        const T* xv = self.parents[0]->value.ptr();
        const T* wv = self.parents[1]->value.ptr();
        T* gx = grad_of(self, 0);
        T* gw = grad_of(self, 1);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t j = 0; j < k; ++j) {
              if (l + j + 1 < k) continue;
              const std::size_t src = l + j + 1 - k;
              const T* grow = g + (b * len + l) * ch;
              for (std::size_t c = 0; c < ch; ++c) {
                if (gx) gx[(b * len + src) * ch + c] += wv[c * k + j] * grow[c];
                if (gw) gw[c * k + j] += xv[(b * len + src) * ch + c] * grow[c];
              }
            }
      },
      "depthwise_conv1d");
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4) throw DimensionError("max_pool2d expects [N,C,H,W], got " + shape_str(x.shape()));
  if (padding >= kernel) throw ConfigError("max_pool2d: padding must be smaller than the kernel");
  const Conv2dOptions opt{stride, padding, 1};
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = conv_output_size(h, kernel, opt), wo = conv_output_size(w, kernel, opt);
  Tensor<T> out(Shape{n, c, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  const T* xv = x.value().ptr();
  std::size_t o = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = xv + p * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const long long ih = static_cast<long long>(oh * stride + ki) - static_cast<long long>(padding);
          if (ih < 0 || ih >= static_cast<long long>(h)) continue;
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const long long iw = static_cast<long long>(ow * stride + kj) - static_cast<long long>(padding);
            if (iw < 0 || iw >= static_cast<long long>(w)) continue;
            const std::size_t idx = static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw);
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        }
        out[o] = best;
        argmax[o] = p * h * w + best_idx;
      }
  }
  return make_result<T>(
      std::move(out), {x},
      [argmax = std::move(argmax)](Node<T>& self) {
        const T* g = self.grad.ptr();
        T* gx = self.parents[0]->grad_buffer().ptr();
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
      },
      "max_pool2d");
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool expects [N,C,H,W], got " + shape_str(x.shape()));
  return mean(mean(x, 3, true), 2, true);
}

template <typename T>
Var<T> global_max_pool(const Var<T>& x) {
  if (x.rank() != 4) throw DimensionError("global_max_pool expects [N,C,H,W], got " + shape_str(x.shape()));
  return max(max(x, 3, true), 2, true);
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormBuffers<T>& buffers,
                    bool training) {
  if (x.rank() != 4) throw DimensionError("batch_norm2d expects [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw DimensionError("batch_norm2d: affine parameters do not match channels of " + shape_str(x.shape()));
  }
  if (buffers.running_mean.empty()) buffers.running_mean = Tensor<T>(Shape{c}, T(0));
  if (buffers.running_var.empty()) buffers.running_var = Tensor<T>(Shape{c}, T(1));
  const std::size_t count = n * hw;
  const T* xv = x.value().ptr();
  const T* gv = gamma.value().ptr();
  const T* bv = beta.value().ptr();

  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      T acc = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) acc += xv[(b * c + ch) * hw + i];
      mu = acc / static_cast<T>(count);
      T sq = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = xv[(b * c + ch) * hw + i] - mu;
          sq += d * d;
        }
      var = sq / static_cast<T>(count);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      const T m = buffers.momentum;
      buffers.running_mean[ch] = (T(1) - m) * buffers.running_mean[ch] + m * mu;
      buffers.running_var[ch] = (T(1) - m) * buffers.running_var[ch] + m * unbiased;
    } else {
      mu = buffers.running_mean[ch];
      var = buffers.running_var[ch];
    }
    inv_std[ch] = T(1) / std::sqrt(var + buffers.eps);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        xhat[idx] = (xv[idx] - mu) * inv_std[ch];
      }
  }
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        out[idx] = gv[ch] * xhat[idx] + bv[ch];
      }
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, count, training](Node<T>& self) {
        const T* g = self.grad.ptr();
        const T* gv = self.parents[1]->value.ptr();
        T* gx = grad_of(self, 0);
        T* ggamma = grad_of(self, 1);
        T* gbeta = grad_of(self, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_g = 0, sum_gx = 0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * c + ch) * hw + i;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (ggamma) ggamma[ch] += sum_gx;
          if (gbeta) gbeta[ch] += sum_g;
          if (!gx) continue;
          const T scale = gv[ch] * inv_std[ch];
          const T cnt = static_cast<T>(count);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * c + ch) * hw + i;
              gx[idx] += training ? scale * (g[idx] - sum_g / cnt - xhat[idx] * sum_gx / cnt) : scale * g[idx];
            }
        }
      },
      "batch_norm2d");
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw DimensionError("layer_norm: affine parameters do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.value().size() / d;
  const T* xv = x.value().ptr();
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) xhat[r * d + i] = (row[i] - mu) * inv_std[r];
  }
  Tensor<T> out(x.shape());
  const T* gv = gamma.value().ptr();
  const T* bv = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = gv[i] * xhat[r * d + i] + bv[i];
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](Node<T>& self) {
        const T* g = self.grad.ptr();
        const T* gv = self.parents[1]->value.ptr();
        T* gx = grad_of(self, 0);
        T* ggamma = grad_of(self, 1);
        T* gbeta = grad_of(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* grow = g + r * d;
          const T* hrow = xhat.ptr() + r * d;
          T sum_gh = 0, sum_ghx = 0;
          for (std::size_t i = 0; i < d; ++i) {
            const T gh = grow[i] * gv[i];
            sum_gh += gh;
            sum_ghx += gh * hrow[i];
            if (ggamma) ggamma[i] += grow[i] * hrow[i];
            if (gbeta) gbeta[i] += grow[i];
          }
          if (!gx) continue;
          const T dd = static_cast<T>(d);
          for (std::size_t i = 0; i < d; ++i) {
            gx[r * d + i] += inv_std[r] / dd * (dd * grow[i] * gv[i] - sum_gh - hrow[i] * sum_ghx);
          }
        }
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

struct Tap2 {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap2> axis_taps(std::size_t in, std::size_t out, InterpMode mode) {
  std::vector<Tap2> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    if (mode == InterpMode::kNearest) {
      const std::size_t src = std::min(o * in / out, in - 1);
      taps[o] = {src, src, 0.0};
    } else {
      const double pos = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
      const auto i0 = std::min(static_cast<std::size_t>(std::floor(pos)), in - 1);
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      taps[o] = {i0, i1, pos - static_cast<double>(i0)};
    }
  }
  return taps;
}

}  // namespace

template <typename T>
Var<T> interpolate(const Var<T>& x, std::size_t out_h, std::size_t out_w, InterpMode mode) {
  if (x.rank() != 4) throw DimensionError("interpolate expects [N,C,H,W], got " + shape_str(x.shape()));
  if (out_h == 0 || out_w == 0) throw ConfigError("interpolate: target size must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ty = axis_taps(h, out_h, mode);
  auto tx = axis_taps(w, out_w, mode);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), out_h, out_w});
  const T* xv = x.value().ptr();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv + p * h * w;
    T* dst = out.ptr() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T wy = static_cast<T>(ty[oy].w1);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T wx = static_cast<T>(tx[ox].w1);
        const T top = (T(1) - wx) * src[ty[oy].i0 * w + tx[ox].i0] + wx * src[ty[oy].i0 * w + tx[ox].i1];
        const T bot = (T(1) - wx) * src[ty[oy].i1 * w + tx[ox].i0] + wx * src[ty[oy].i1 * w + tx[ox].i1];
        dst[oy * out_w + ox] = (T(1) - wy) * top + wy * bot;
      }
    }
  }
  return make_result<T>(
      std::move(out), {x},
      [ty = std::move(ty), tx = std::move(tx), planes, h, w, out_h, out_w](Node<T>& self) {
        T* gx = self.parents[0]->grad_buffer().ptr();
        for (std::size_t p = 0; p < planes; ++p) {
          const T* g = self.grad.ptr() + p * out_h * out_w;
          T* dst = gx + p * h * w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T wy = static_cast<T>(ty[oy].w1);
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const T wx = static_cast<T>(tx[ox].w1);
              const T gv = g[oy * out_w + ox];
              dst[ty[oy].i0 * w + tx[ox].i0] += (T(1) - wy) * (T(1) - wx) * gv;
              dst[ty[oy].i0 * w + tx[ox].i1] += (T(1) - wy) * wx * gv;
              dst[ty[oy].i1 * w + tx[ox].i0] += wy * (T(1) - wx) * gv;
              dst[ty[oy].i1 * w + tx[ox].i1] += wy * wx * gv;
            }
          }
        }
      },
      "interpolate");
}

// ---------------------------------------------------------------------------
// Softmax family

namespace {

template <typename T>
Tensor<T> softmax_values(const Tensor<T>& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis);
  Tensor<T> out(x.shape());
  const T* xv = x.ptr();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mx = xv[base];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const T e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] /= total;
    }
  return out;
}

}  // namespace

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  check_axis(x.shape(), axis, "softmax");
  const auto s = split_at(x.shape(), axis);
  return make_result<T>(
      softmax_values(x.value(), axis), {x},
      [s](Node<T>& self) {
        const T* g = self.grad.ptr();
        const T* y = self.value.ptr();
        T* gx = self.parents[0]->grad_buffer().ptr();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.n * s.inner + i;
            T dot = 0;
            for (std::size_t k = 0; k < s.n; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
            for (std::size_t k = 0; k < s.n; ++k) {
              const std::size_t idx = base + k * s.inner;
              gx[idx] += y[idx] * (g[idx] - dot);
            }
          }
      },
      "softmax");
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, std::size_t axis) {
  check_axis(x.shape(), axis, "log_softmax");
  const auto s = split_at(x.shape(), axis);
  Tensor<T> p = softmax_values(x.value(), axis);
  Tensor<T> out(x.shape());
  const T* xv = x.value().ptr();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mx = xv[base];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T total = 0;
      for (std::size_t k = 0; k < s.n; ++k) total += std::exp(xv[base + k * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] = xv[base + k * s.inner] - lse;
    }
  return make_result<T>(
      std::move(out), {x},
      [s, p = std::move(p)](Node<T>& self) {
        const T* g = self.grad.ptr();
        T* gx = self.parents[0]->grad_buffer().ptr();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.n * s.inner + i;
            T total = 0;
            for (std::size_t k = 0; k < s.n; ++k) total += g[base + k * s.inner];
            for (std::size_t k = 0; k < s.n; ++k) {
              const std::size_t idx = base + k * s.inner;
              gx[idx] += g[idx] - p[idx] * total;
            }
          }
      },
      "log_softmax");
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels, T smoothing) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [B,C] logits, got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
  }
  if (!(smoothing >= T(0) && smoothing < T(1))) throw ConfigError("label smoothing must lie in [0, 1)");
  Tensor<T> target(logits.shape(), smoothing / static_cast<T>(classes));
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw DataError("label " + std::to_string(labels[b]) + " out of range [0, " + std::to_string(classes) + ")");
    }
    target[b * classes + static_cast<std::size_t>(labels[b])] += T(1) - smoothing;
  }
  Tensor<T> p = softmax_values(logits.value(), 1);
  const T* xv = logits.value().ptr();
  T loss = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = xv + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) loss -= target[b * classes + c] * (row[c] - lse);
  }
  loss /= static_cast<T>(batch);
  return make_result<T>(
      Tensor<T>::scalar(loss), {logits},
      [p = std::move(p), target = std::move(target), batch](Node<T>& self) {
        const T scale = self.grad[0] / static_cast<T>(batch);
        T* gx = self.parents[0]->grad_buffer().ptr();
        for (std::size_t i = 0; i < p.size(); ++i) gx[i] += scale * (p[i] - target[i]);
      },
      "cross_entropy");
}

// ---------------------------------------------------------------------------

#define AFM_INSTANTIATE_OPS(T)                                                                               \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> div(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> add_scalar(const Var<T>&, T);                                                              \
  template Var<T> mul_scalar(const Var<T>&, T);                                                              \
  template Var<T> neg(const Var<T>&);                                                                        \
  template Var<T> exp(const Var<T>&);                                                                        \
  template Var<T> log(const Var<T>&);                                                                        \
  template Var<T> sigmoid(const Var<T>&);                                                                    \
  template Var<T> relu(const Var<T>&);                                                                       \
  template Var<T> softplus(const Var<T>&);                                                                   \
  template Var<T> silu(const Var<T>&);                                                                       \
  template Var<T> sum(const Var<T>&, std::size_t, bool);                                                     \
  template Var<T> mean(const Var<T>&, std::size_t, bool);                                                    \
  template Var<T> max(const Var<T>&, std::size_t, bool);                                                     \
  template Var<T> sum_all(const Var<T>&);                                                                    \
  template Var<T> mean_all(const Var<T>&);                                                                   \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                           \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                               \
  template Var<T> reshape(const Var<T>&, Shape);                                                             \
  template Var<T> permute(const Var<T>&, const std::vector<std::size_t>&);                                   \
  template Var<T> index_select(const Var<T>&, std::size_t, const std::vector<std::size_t>&);                 \
  template Var<T> index_add(const Var<T>&, std::size_t, const std::vector<std::size_t>&, std::size_t);       \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                       \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Conv2dOptions&);                                \
  template Var<T> depthwise_conv1d(const Var<T>&, const Var<T>&);                                            \
  template Var<T> max_pool2d(const Var<T>&, std::size_t, std::size_t, std::size_t);                          \
  template Var<T> global_avg_pool(const Var<T>&);                                                            \
  template Var<T> global_max_pool(const Var<T>&);                                                            \
  template Var<T> batch_norm2d(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormBuffers<T>&, bool);     \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                                \
  template Var<T> interpolate(const Var<T>&, std::size_t, std::size_t, InterpMode);                          \
  template Var<T> softmax(const Var<T>&, std::size_t);                                                       \
  template Var<T> log_softmax(const Var<T>&, std::size_t);                                                   \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>, T);

AFM_INSTANTIATE_OPS(float)
AFM_INSTANTIATE_OPS(double)

}  // namespace afm::ops
