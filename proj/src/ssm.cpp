#include "afm/ssm.hpp"

#include <Eigen/Dense>

#include "afm/errors.hpp"

namespace afm {

namespace {

template <typename T>
using Grid = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using GridMap = Eigen::Map<Grid<T>>;
template <typename T>
using ConstGridMap = Eigen::Map<const Grid<T>>;
template <typename T>
using ColMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using RowMap = Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>;

constexpr double kTinyA = 1e-8;

// d/dA of zoh_input_gain(delta, A) = (z e^z - expm1(z)) / A^2 with z = delta*A,
// evaluated over an [E,S] block. Near z = 0 the series
// delta^2 * sum_{m>=2} (m-1)/m! z^(m-2) avoids cancellation.
template <typename T>
Grid<T> zoh_gain_dA(const Grid<T>& dt, const ConstGridMap<T>& a, const Grid<T>& z, const GridMap<T>& abar,
                    const GridMap<T>& gain) {
  const Grid<T> dt2 = dt * dt;
  const Grid<T> series =
      dt2 * (T(1) / T(2) +
             z * (T(1) / T(3) +
                  z * (T(1) / T(8) +
                       z * (T(1) / T(30) +
                            z * (T(1) / T(144) +
                                 z * (T(1) / T(840) + z * (T(1) / T(5760) + z * (T(1) / T(45360) + z / T(403200)))))))));
  const Grid<T> exact = (z * abar - gain * a) / (a * a);
  return (a.abs() < T(kTinyA)).select(dt2 / T(2), (z.abs() < T(0.1)).select(series, exact));
}

// expm1(z) / a over an [E,S] block: (e^z - 1) / a away from zero, Taylor
// series delta * sum_{m>=1} z^(m-1)/m! for |z| < 0.1, delta itself for |a| < 1e-8.
template <typename T>
Grid<T> zoh_gain(const Grid<T>& dt, const ConstGridMap<T>& a, const Grid<T>& z, const Grid<T>& abar,
                 const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& tiny) {
  const Grid<T> series =
      dt * (T(1) +
            z * (T(1) / T(2) +
                 z * (T(1) / T(6) +
                      z * (T(1) / T(24) +
                           z * (T(1) / T(120) +
                                z * (T(1) / T(720) + z * (T(1) / T(5040) + z * (T(1) / T(40320) + z / T(362880)))))))));
  return tiny.select(dt, (z.abs() < T(0.1)).select(series, (abar - T(1)) / a));
}

struct ScanDims {
  std::size_t n, len, e, s;
};

}  // namespace

template <typename T>
Var<T> selective_scan(const Var<T>& x, const Var<T>& delta, const Var<T>& A, const Var<T>& B, const Var<T>& C,
                      ScanImpl impl) {
  if (x.rank() != 3 || delta.shape() != x.shape()) {
    throw DimensionError("selective_scan: x " + shape_str(x.shape()) + " and delta " + shape_str(delta.shape()) +
                         " must both be [N,L,E]");
  }
  const ScanDims d{x.dim(0), x.dim(1), x.dim(2), A.rank() == 2 ? A.dim(1) : 0};
  if (A.rank() != 2 || A.dim(0) != d.e) throw DimensionError("selective_scan: A must be [E,S], got " + shape_str(A.shape()));
  const Shape bc{d.n, d.len, d.s};
  if (B.shape() != bc || C.shape() != bc) {
    throw DimensionError("selective_scan: B " + shape_str(B.shape()) + " and C " + shape_str(C.shape()) +
                         " must be " + shape_str(bc));
  }
  const T* xv = x.value().ptr();
  const T* dv = delta.value().ptr();
  const T* bv = B.value().ptr();
  const T* cv = C.value().ptr();
  const ConstGridMap<T> a(A.value().ptr(), d.e, d.s);
  const auto tiny = (a.abs() < T(kTinyA)).eval();
  const std::size_t block = d.e * d.s;

  // Per (b,l) blocks of [E,S], laid out [N,L,E,S]: discretized A, ZOH gain, state.
  const Shape hs{d.n, d.len, d.e, d.s};
  Tensor<T> abar_t(hs), gain_t(hs), h(hs);
  for (std::size_t b = 0; b < d.n; ++b)
    for (std::size_t l = 0; l < d.len; ++l) {
      const std::size_t tok = b * d.len + l;
      const ColMap<T> dt(dv + tok * d.e, d.e);
      const ColMap<T> xin(xv + tok * d.e, d.e);
      const RowMap<T> bl(bv + tok * d.s, d.s);
      GridMap<T> abar(abar_t.ptr() + tok * block, d.e, d.s);
      GridMap<T> gain(gain_t.ptr() + tok * block, d.e, d.s);
      GridMap<T> hl(h.ptr() + tok * block, d.e, d.s);
      const Grid<T> dtg = dt.replicate(1, d.s);
      const Grid<T> z = dtg * a;
      abar = z.exp();
      gain = zoh_gain<T>(dtg, a, z, abar, tiny);
      hl = gain * (xin.matrix() * bl.matrix()).array();
      if (impl == ScanImpl::kSequential && l > 0) hl += abar * GridMap<T>(h.ptr() + (tok - 1) * block, d.e, d.s);
    }
  if (impl == ScanImpl::kAssociative) {
    std::vector<T> seq_a(d.len), seq_b(d.len);
    for (std::size_t b = 0; b < d.n; ++b)
      for (std::size_t k = 0; k < block; ++k) {
        for (std::size_t l = 0; l < d.len; ++l) {
          const std::size_t at = (b * d.len + l) * block + k;
          seq_a[l] = abar_t[at];
          seq_b[l] = h[at];
        }
        const auto states = associative_linear_scan<T>(seq_a, seq_b);
        for (std::size_t l = 0; l < d.len; ++l) h[(b * d.len + l) * block + k] = states[l];
      }
  }

  Tensor<T> y(x.shape(), T(0));
  for (std::size_t tok = 0; tok < d.n * d.len; ++tok) {
    const ConstGridMap<T> hl(h.ptr() + tok * block, d.e, d.s);
    const RowMap<T> cl(cv + tok * d.s, d.s);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(y.ptr() + tok * d.e, d.e) = hl.matrix() * cl.matrix().transpose();
  }

  return make_result<T>(
      std::move(y), {x, delta, A, B, C},
      [d, h = std::move(h), abar_t = std::move(abar_t), gain_t = std::move(gain_t)](Node<T>& self) mutable {
        const T* g = self.grad.ptr();
        const T* xv = self.parents[0]->value.ptr();
        const T* dv = self.parents[1]->value.ptr();
        const T* bv = self.parents[3]->value.ptr();
        const T* cv = self.parents[4]->value.ptr();
        const ConstGridMap<T> a(self.parents[2]->value.ptr(), d.e, d.s);
        auto grad = [&self](std::size_t i) {
          auto& p = *self.parents[i];
          return p.requires_grad ? p.grad_buffer().ptr() : static_cast<T*>(nullptr);
        };
        T* gx = grad(0);
        T* gd = grad(1);
        T* ga = grad(2);
        T* gb = grad(3);
        T* gc = grad(4);
        const std::size_t block = d.e * d.s;
        Grid<T> carry(d.e, d.s), ga_acc = Grid<T>::Zero(d.e, d.s);
        const Grid<T> zero = Grid<T>::Zero(d.e, d.s);
        for (std::size_t b = 0; b < d.n; ++b) {
          carry.setZero();
          for (std::size_t l = d.len; l-- > 0;) {
            const std::size_t tok = b * d.len + l;
            const auto gy = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(g + tok * d.e, d.e);
            const ColMap<T> dt(dv + tok * d.e, d.e);
            const ColMap<T> xin(xv + tok * d.e, d.e);
            const RowMap<T> bl(bv + tok * d.s, d.s);
            const RowMap<T> cl(cv + tok * d.s, d.s);
            const GridMap<T> abar(abar_t.ptr() + tok * block, d.e, d.s);
            const GridMap<T> gain(gain_t.ptr() + tok * block, d.e, d.s);
            const GridMap<T> hl(h.ptr() + tok * block, d.e, d.s);
            const Grid<T> hprev = l == 0 ? zero : Grid<T>(GridMap<T>(h.ptr() + (tok - 1) * block, d.e, d.s));

            if (gc) {
              Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gc + tok * d.s, d.s) += gy.transpose() * hl.matrix();
            }
            // h = abar * hprev + gain * (x outer B)
            const Grid<T> dh = (gy * cl.matrix()).array() + carry;
            const Grid<T> dh_gain = dh * gain;
            if (gx) {
              Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gx + tok * d.e, d.e) +=
                  dh_gain.matrix() * bl.matrix().transpose();
            }
            if (gb) {
              Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb + tok * d.s, d.s) +=
                  xin.matrix().transpose() * dh_gain.matrix();
            }
            if (gd || ga) {
              const Grid<T> g_abar = dh * hprev;
              const Grid<T> g_gain = dh * (xin.matrix() * bl.matrix()).array();
              if (gd) {
                Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(gd + tok * d.e, d.e) +=
                    (abar * (g_abar * a + g_gain)).rowwise().sum();
              }
              if (ga) {
                const Grid<T> dtg = dt.replicate(1, d.s);
                const Grid<T> z = dtg * a;
                ga_acc += g_abar * abar * dtg + g_gain * zoh_gain_dA<T>(dtg, a, z, abar, gain);
              }
            }
            carry = dh * abar;
          }
        }
        if (ga) GridMap<T>(ga, d.e, d.s) += ga_acc;
      },
      "selective_scan");
}

template <typename T>
SsmParams<T>::SsmParams(std::size_t channels, std::size_t state, Rng& rng) : state_size(state) {
  Tensor<T> a(Shape{channels, state});
  for (std::size_t e = 0; e < channels; ++e)
    for (std::size_t s = 0; s < state; ++s) a[e * state + s] = static_cast<T>(std::log(static_cast<double>(s + 1)));
  a_log = make_param(std::move(a));
  w_delta = make_param(kaiming_normal<T>(Shape{channels, channels}, channels, rng));
  Tensor<T> bias(Shape{channels});
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  for (auto& v : bias.data()) {
    const double dt = std::exp(u(rng));
    v = static_cast<T>(dt + std::log(-std::expm1(-dt)));  // softplus^-1(dt)
  }
  b_delta = make_param(std::move(bias));
  w_b = make_param(kaiming_normal<T>(Shape{channels, state}, channels, rng));
  w_c = make_param(kaiming_normal<T>(Shape{channels, state}, channels, rng));
  d_skip = make_param(Tensor<T>(Shape{channels}, T(1)));
}

template <typename T>
Var<T> SsmParams<T>::forward(const Var<T>& x, ScanImpl impl) const {
  auto y = selective_scan(x, delta(x), A(), ops::linear(x, w_b), ops::linear(x, w_c), impl);
  return ops::add(y, ops::mul(x, d_skip));
}

template <typename T>
void SsmParams<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  c.param(join_name(prefix, "a_log"), a_log);
  c.param(join_name(prefix, "w_delta"), w_delta);
  c.param(join_name(prefix, "b_delta"), b_delta);
  c.param(join_name(prefix, "w_b"), w_b);
  c.param(join_name(prefix, "w_c"), w_c);
  c.param(join_name(prefix, "d_skip"), d_skip);
}

template Var<float> selective_scan(const Var<float>&, const Var<float>&, const Var<float>&, const Var<float>&,
                                   const Var<float>&, ScanImpl);
template Var<double> selective_scan(const Var<double>&, const Var<double>&, const Var<double>&, const Var<double>&,
                                    const Var<double>&, ScanImpl);
template struct SsmParams<float>;
template struct SsmParams<double>;

}  // namespace afm
