#include "gradient_suite.hpp"

#include <algorithm>
#include <numeric>

#include "afm/model.hpp"
#include "afm/moe_head.hpp"
#include "afm/ssm.hpp"

namespace afm::testing {

namespace {

using Rng64 = std::mt19937_64;

std::size_t pick(Rng64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Shape random_shape(Rng64& rng, std::size_t min_rank = 1, std::size_t max_rank = 4, std::size_t max_dim = 4) {
  Shape s(pick(rng, min_rank, max_rank));
  for (auto& d : s) d = pick(rng, 1, max_dim);
  return s;
}

// A shape that broadcasts against `s`: some leading axes dropped, some axes set to 1.
Shape broadcast_partner(const Shape& s, Rng64& rng) {
  const std::size_t drop = pick(rng, 0, s.size() - 1);
  Shape b(s.begin() + static_cast<std::ptrdiff_t>(drop), s.end());
  for (auto& d : b)
    if (pick(rng, 0, 2) == 0) d = 1;
  return b;
}

Tensor<double> nonzero_tensor(const Shape& s, Rng64& rng) {
  auto t = random_tensor(s, rng, 0.5, 1.5);
  for (auto& v : t.data())
    if (pick(rng, 0, 1)) v = -v;
  return t;
}

struct Instance {
  std::vector<Tensor<double>> inputs;
  GradFn fn;
  std::vector<bool> differentiate;
};

using Maker = std::function<Instance(Rng64&)>;

Instance unary(Rng64& rng, Var<double> (*op)(const Var<double>&), double lo = -2, double hi = 2, bool kinked = false) {
  auto x = random_tensor(random_shape(rng), rng, lo, hi);
  if (kinked) x = away_from_zero(std::move(x));
  return {{x}, [op](const VarList& v) { return op(v[0]); }, {}};
}

Instance binary(Rng64& rng, Var<double> (*op)(const Var<double>&, const Var<double>&), bool nonzero_rhs = false) {
  const Shape sa = random_shape(rng);
  Shape sb = broadcast_partner(sa, rng);
  Shape s1 = sa, s2 = sb;
  if (pick(rng, 0, 1) && !nonzero_rhs) std::swap(s1, s2);
  auto a = random_tensor(s1, rng);
  auto b = nonzero_rhs ? nonzero_tensor(s2, rng) : random_tensor(s2, rng);
  return {{a, b}, [op](const VarList& v) { return op(v[0], v[1]); }, {}};
}

std::vector<std::pair<std::string, Maker>> op_cases() {
  using namespace ops;
  std::vector<std::pair<std::string, Maker>> cases;
  auto add_case = [&cases](std::string name, Maker m) { cases.emplace_back(std::move(name), std::move(m)); };

  add_case("add", [](Rng64& r) { return binary(r, &ops::add<double>); });
  add_case("sub", [](Rng64& r) { return binary(r, &ops::sub<double>); });
  add_case("mul", [](Rng64& r) { return binary(r, &ops::mul<double>); });
  add_case("div", [](Rng64& r) { return binary(r, &ops::div<double>, true); });
  add_case("add_scalar", [](Rng64& r) {
    const double c = random_tensor({1}, r)[0];
    auto x = random_tensor(random_shape(r), r);
    return Instance{{x}, [c](const VarList& v) { return add_scalar(v[0], c); }, {}};
  });
  add_case("mul_scalar", [](Rng64& r) {
    const double c = random_tensor({1}, r, -3, 3)[0];
    auto x = random_tensor(random_shape(r), r);
    return Instance{{x}, [c](const VarList& v) { return mul_scalar(v[0], c); }, {}};
  });
  add_case("neg", [](Rng64& r) { return unary(r, &ops::neg<double>); });
  add_case("exp", [](Rng64& r) { return unary(r, &ops::exp<double>); });
  add_case("log", [](Rng64& r) { return unary(r, &ops::log<double>, 0.3, 3.0); });
  add_case("sigmoid", [](Rng64& r) { return unary(r, &ops::sigmoid<double>, -4, 4); });
  add_case("relu", [](Rng64& r) { return unary(r, &ops::relu<double>, -2, 2, true); });
  add_case("softplus", [](Rng64& r) { return unary(r, &ops::softplus<double>, -4, 4); });
  add_case("silu", [](Rng64& r) { return unary(r, &ops::silu<double>, -4, 4); });

  for (const char* red : {"sum", "mean", "max"}) {
    const std::string name = red;
    add_case(name, [name](Rng64& r) {
      auto x = random_tensor(random_shape(r), r);
      const std::size_t axis = pick(r, 0, x.rank() - 1);
      const bool keep = pick(r, 0, 1);
      return Instance{{x},
                      [name, axis, keep](const VarList& v) {
                        if (name == "sum") return sum(v[0], axis, keep);
                        if (name == "mean") return mean(v[0], axis, keep);
                        return max(v[0], axis, keep);
                      },
                      {}};
    });
  }
  add_case("sum_all", [](Rng64& r) { return unary(r, &ops::sum_all<double>); });
  add_case("mean_all", [](Rng64& r) { return unary(r, &ops::mean_all<double>); });

  add_case("concat", [](Rng64& r) {
    const Shape base = random_shape(r);
    const std::size_t axis = pick(r, 0, base.size() - 1);
    const std::size_t parts = pick(r, 2, 3);
    std::vector<Tensor<double>> xs;
    for (std::size_t i = 0; i < parts; ++i) {
      Shape s = base;
      s[axis] = pick(r, 1, 3);
      xs.push_back(random_tensor(s, r));
    }
    return Instance{xs, [axis](const VarList& v) { return concat(v, axis); }, {}};
  });
  add_case("slice", [](Rng64& r) {
    Shape s = random_shape(r);
    const std::size_t axis = pick(r, 0, s.size() - 1);
    s[axis] = pick(r, 2, 5);
    const std::size_t start = pick(r, 0, s[axis] - 1);
    const std::size_t len = pick(r, 1, s[axis] - start);
    return Instance{{random_tensor(s, r)}, [=](const VarList& v) { return slice(v[0], axis, start, len); }, {}};
  });
  add_case("reshape", [](Rng64& r) {
    const Shape s = random_shape(r);
    Shape t{numel(s)};
    if (numel(s) % 2 == 0) t = {2, numel(s) / 2};
    return Instance{{random_tensor(s, r)}, [t](const VarList& v) { return reshape(v[0], t); }, {}};
  });
  add_case("permute", [](Rng64& r) {
    const Shape s = random_shape(r, 2, 4);
    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), r);
    return Instance{{random_tensor(s, r)}, [perm](const VarList& v) { return permute(v[0], perm); }, {}};
  });
  add_case("index_select", [](Rng64& r) {
    const Shape s = random_shape(r);
    const std::size_t axis = pick(r, 0, s.size() - 1);
    std::vector<std::size_t> idx(pick(r, 1, 5));
    for (auto& i : idx) i = pick(r, 0, s[axis] - 1);
    return Instance{{random_tensor(s, r)}, [=](const VarList& v) { return index_select(v[0], axis, idx); }, {}};
  });
  add_case("index_add", [](Rng64& r) {
    const Shape s = random_shape(r);
    const std::size_t axis = pick(r, 0, s.size() - 1);
    const std::size_t dim = pick(r, 1, 4);
    std::vector<std::size_t> idx(s[axis]);
    for (auto& i : idx) i = pick(r, 0, dim - 1);
    return Instance{{random_tensor(s, r)}, [=](const VarList& v) { return index_add(v[0], axis, idx, dim); }, {}};
  });

  add_case("matmul", [](Rng64& r) {
    const std::size_t m = pick(r, 1, 5), k = pick(r, 1, 5), n = pick(r, 1, 5);
    return Instance{{random_tensor({m, k}, r), random_tensor({k, n}, r)},
                    [](const VarList& v) { return matmul(v[0], v[1]); },
                    {}};
  });
  add_case("linear", [](Rng64& r) {
    Shape xs = random_shape(r, 1, 3);
    const std::size_t in = xs.back(), out = pick(r, 1, 4);
    const bool bias = pick(r, 0, 1);
    std::vector<Tensor<double>> inputs{random_tensor(xs, r), random_tensor({in, out}, r)};
    if (bias) inputs.push_back(random_tensor({out}, r));
    return Instance{inputs, [bias](const VarList& v) { return linear(v[0], v[1], bias ? v[2] : Var<double>()); }, {}};
  });
  add_case("conv2d", [](Rng64& r) {
    Conv2dOptions opt{pick(r, 1, 2), pick(r, 0, 2), pick(r, 1, 2)};
    const std::size_t k = pick(r, 1, 3), c = pick(r, 1, 3), f = pick(r, 1, 3), n = pick(r, 1, 2);
    const std::size_t extent = opt.dilation * (k - 1) + 1;
    const std::size_t h = pick(r, std::max<std::size_t>(extent, 3), 6), w = pick(r, std::max<std::size_t>(extent, 3), 6);
    return Instance{{random_tensor({n, c, h, w}, r), random_tensor({f, c, k, k}, r)},
                    [opt](const VarList& v) { return conv2d(v[0], v[1], opt); },
                    {}};
  });
  add_case("depthwise_conv1d", [](Rng64& r) {
    const std::size_t n = pick(r, 1, 2), l = pick(r, 1, 7), c = pick(r, 1, 4), k = pick(r, 1, 4);
    return Instance{{random_tensor({n, l, c}, r), random_tensor({c, k}, r)},
                    [](const VarList& v) { return depthwise_conv1d(v[0], v[1]); },
                    {}};
  });
  add_case("max_pool2d", [](Rng64& r) {
    const std::size_t k = pick(r, 2, 3), stride = pick(r, 1, 2), pad = pick(r, 0, k - 1);
    const std::size_t h = pick(r, k, 6), w = pick(r, k, 6);
    return Instance{{random_tensor({pick(r, 1, 2), pick(r, 1, 3), h, w}, r)},
                    [=](const VarList& v) { return max_pool2d(v[0], k, stride, pad); },
                    {}};
  });
  add_case("global_avg_pool", [](Rng64& r) {
    return Instance{{random_tensor({pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)}, r)},
                    [](const VarList& v) { return global_avg_pool(v[0]); },
                    {}};
  });
  add_case("global_max_pool", [](Rng64& r) {
    return Instance{{random_tensor({pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)}, r)},
                    [](const VarList& v) { return global_max_pool(v[0]); },
                    {}};
  });
  for (bool training : {true, false}) {
    add_case(training ? "batch_norm2d(train)" : "batch_norm2d(eval)", [training](Rng64& r) {
      const std::size_t c = pick(r, 1, 3);
      Shape s{pick(r, 1, 3), c, pick(r, 1, 3), pick(r, 1, 3)};
      if (training && s[0] * s[2] * s[3] < 2) s[0] = 2;
      auto buffers = std::make_shared<BatchNormBuffers<double>>();
      buffers->running_mean = random_tensor({c}, r);
      buffers->running_var = random_tensor({c}, r, 0.5, 2.0);
      return Instance{{random_tensor(s, r, -2, 2), random_tensor({c}, r, 0.5, 1.5), random_tensor({c}, r)},
                      [buffers, training](const VarList& v) { return batch_norm2d(v[0], v[1], v[2], *buffers, training); },
                      {}};
    });
  }
  add_case("layer_norm", [](Rng64& r) {
    Shape s = random_shape(r, 1, 3);
    s.back() = pick(r, 2, 5);
    const std::size_t d = s.back();
    return Instance{{random_tensor(s, r, -2, 2), random_tensor({d}, r, 0.5, 1.5), random_tensor({d}, r)},
                    [](const VarList& v) { return layer_norm(v[0], v[1], v[2]); },
                    {}};
  });
  for (auto mode : {InterpMode::kNearest, InterpMode::kBilinear}) {
    add_case(mode == InterpMode::kNearest ? "interpolate(nearest)" : "interpolate(bilinear)", [mode](Rng64& r) {
      const std::size_t oh = pick(r, 1, 7), ow = pick(r, 1, 7);
      return Instance{{random_tensor({pick(r, 1, 2), pick(r, 1, 2), pick(r, 1, 4), pick(r, 1, 4)}, r)},
                      [=](const VarList& v) { return interpolate(v[0], oh, ow, mode); },
                      {}};
    });
  }
  add_case("softmax", [](Rng64& r) {
    auto x = random_tensor(random_shape(r), r, -3, 3);
    const std::size_t axis = pick(r, 0, x.rank() - 1);
    return Instance{{x}, [axis](const VarList& v) { return softmax(v[0], axis); }, {}};
  });
  add_case("log_softmax", [](Rng64& r) {
    auto x = random_tensor(random_shape(r), r, -3, 3);
    const std::size_t axis = pick(r, 0, x.rank() - 1);
    return Instance{{x}, [axis](const VarList& v) { return log_softmax(v[0], axis); }, {}};
  });
  add_case("cross_entropy", [](Rng64& r) {
    const std::size_t b = pick(r, 1, 4), c = pick(r, 2, 5);
    std::vector<int> labels(b);
    for (auto& l : labels) l = static_cast<int>(pick(r, 0, c - 1));
    const double eps = pick(r, 0, 1) ? 0.1 : 0.0;
    return Instance{{random_tensor({b, c}, r, -3, 3)},
                    [labels, eps](const VarList& v) { return cross_entropy<double>(v[0], labels, eps); },
                    {}};
  });
  for (auto impl : {ScanImpl::kSequential, ScanImpl::kAssociative}) {
    add_case(impl == ScanImpl::kSequential ? "selective_scan(sequential)" : "selective_scan(associative)",
             [impl](Rng64& r) {
               const std::size_t n = pick(r, 1, 2), l = pick(r, 1, 6), e = pick(r, 1, 3), s = pick(r, 1, 3);
               return Instance{{random_tensor({n, l, e}, r), random_tensor({n, l, e}, r, 0.05, 1.0),
                                random_tensor({e, s}, r, -2.0, -0.1), random_tensor({n, l, s}, r),
                                random_tensor({n, l, s}, r)},
                               [impl](const VarList& v) { return selective_scan(v[0], v[1], v[2], v[3], v[4], impl); },
                               {}};
             });
  }
  add_case("load_balance_loss", [](Rng64& r) {
    const std::size_t b = pick(r, 1, 5), m = pick(r, 2, 5), k = pick(r, 1, m);
    auto logits = random_tensor({b, m}, r, -2, 2);
    Selection sel;
    {
      NoGradGuard g;
      sel = top_k(softmax(Var<double>(logits), 1).value(), k);
    }
    return Instance{{logits},
                    [sel](const VarList& v) { return load_balance_loss(softmax(v[0], 1), sel, 0.37); },
                    {}};
  });
  add_case("moe_head", [](Rng64& r) {
    const std::size_t b = pick(r, 1, 3), d = pick(r, 2, 4);
    MoEConfig cfg;
    cfg.num_experts = pick(r, 2, 4);
    cfg.top_k = pick(r, 1, cfg.num_experts);
    cfg.num_shared = pick(r, 0, 2);
    cfg.hidden_mult = 2;
    Rng init(r());
    auto head = std::make_shared<MoEHead<double>>(d, 3, cfg, init);
    auto v = random_tensor({b, d}, r);
    Selection sel;
    {
      NoGradGuard g;
      sel = head->forward(Var<double>(v)).report.selected;
    }
    return Instance{{v},
                    [head, sel](const VarList& x) {
                      auto out = head->forward(x[0], &sel);
                      return ops::add(ops::sum_all(out.logits), out.report.aux_loss);
                    },
                    {}};
  });
  return cases;
}

}  // namespace

std::vector<OpGradResult> run_op_gradients(std::size_t instances, std::uint64_t seed) {
  std::vector<OpGradResult> out;
  Rng64 rng(seed);
  for (const auto& [name, make] : op_cases()) {
    OpGradResult res{name, 0, 0};
    for (std::size_t i = 0; i < instances; ++i) {
      Instance inst = make(rng);
      const auto check = gradcheck(inst.fn, inst.inputs, rng(), 1e-5, inst.differentiate);
      res.worst = std::max(res.worst, check.rel_error);
      ++res.instances;
    }
    out.push_back(res);
  }
  return out;
}

ModelConfig tiny_gradcheck_config() {
  ModelConfig c;
  c.image_size = 32;
  c.num_classes = 3;
  c.cnn.widths = {4, 4, 8, 8};
  c.cnn.blocks = {1, 1, 1, 1};
  c.cnn.taps = {2, 3, 4};
  c.mamba.patch = 8;
  c.mamba.embed_dim = 8;
  c.mamba.depth = 3;
  c.mamba.state_size = 2;
  c.mamba.expand = 2;
  c.mamba.conv_kernel = 2;
  c.mamba.taps = {1, 2, 3};
  c.fusion.width = 4;
  c.fusion.bottleneck_ratio = 2;
  c.fusion.attention_ratio = 2;
  c.fusion.spatial_kernel = 3;
  c.moe.num_experts = 3;
  c.moe.top_k = 2;
  c.moe.num_shared = 1;
  c.moe.hidden_mult = 1;
  return c;
}

ModelGradResult run_model_gradient(std::uint64_t seed) {
  const ModelConfig config = tiny_gradcheck_config();
  AfmNet<double> model(config, seed);
  Rng64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  Var<double> images(random_tensor({2, 3, config.image_size, config.image_size}, rng, 0, 1), true);
  const std::vector<int> labels{0, 2};

  // Dead channels feed exact zeros through bias-free convs; with a zero BN
  // shift those land on the ReLU kink, so move every shift off zero first.
  auto params = model.parameters();
  for (auto& p : params.params) {
    const auto& n = p.name;
    if (n.size() < 5 || n.compare(n.size() - 5, 5, ".beta") != 0) continue;
    auto shift = random_tensor(p.var->shape(), rng, -0.2, 0.2);
    p.var->mutable_value() = away_from_zero(std::move(shift), 0.05);
  }

  Selection frozen;
  {
    NoGradGuard g;
    frozen = model.forward(images).routing->selected;
  }
  ForwardOptions opt;
  opt.forced_selection = &frozen;
  auto loss_of = [&](const Var<double>& x) {
    auto r = model.forward(x, opt);
    return ops::add(ops::cross_entropy<double>(r.logits, labels, 0.1), r.aux_loss);
  };

  for (auto& p : params.params) p.var->zero_grad();
  const Var<double> loss = loss_of(images);
  backward(loss);

  const double h = 1e-5;
  auto value = [&]() {
    NoGradGuard g;
    return loss_of(Var<double>(images.value())).item();
  };
  double diff2 = 0, a2 = 0, n2 = 0;
  std::size_t checked = 0;
  auto probe = [&](Tensor<double>& t, const Tensor<double>& grad) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x0 = t[i];
      t[i] = x0 + h;
      const double lp = value();
      t[i] = x0 - h;
      const double lm = value();
      t[i] = x0;
      const double numeric = (lp - lm) / (2 * h);
      const double analytic = grad.empty() ? 0.0 : grad[i];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
      ++checked;
    }
  };
  probe(images.mutable_value(), images.grad());
  for (auto& p : params.params) probe(p.var->mutable_value(), p.var->grad());
  const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
  return {scale > 0 ? std::sqrt(diff2) / scale : 0.0, checked};
}

}  // namespace afm::testing
