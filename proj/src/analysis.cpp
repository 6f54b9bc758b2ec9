#include "afm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "afm/errors.hpp"

namespace afm {

namespace fs = std::filesystem;

namespace {

template <typename T>
Tensor<T> max_normalize(Tensor<T> map) {
  T peak = 0;
  for (auto v : map.data()) peak = std::max(peak, v);
  if (peak > T(0)) {
    for (auto& v : map.data()) v /= peak;
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> erf_map(const TapFn<T>& tap, const Tensor<T>& input) {
  if (input.rank() != 4) throw DimensionError("erf_map expects [N,C,H,W] input, got " + shape_str(input.shape()));
  Var<T> x(input, true);
  auto y = tap(x);
  if (y.rank() != 4) throw DimensionError("erf tap must return [N,K,h,w], got " + shape_str(y.shape()));
  const std::size_t ch = y.dim(2) / 2, cw = y.dim(3) / 2;
  auto objective = ops::sum_all(ops::slice(ops::slice(y, 2, ch, 1), 3, cw, 1));
  backward(objective);

  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  Tensor<T> map(Shape{h, w}, T(0));
  if (x.has_grad()) {
    const T* g = x.grad().ptr();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t i = 0; i < h * w; ++i) map[i] += std::abs(g[(b * c + k) * h * w + i]) / static_cast<T>(n);
  }
  return max_normalize(std::move(map));
}

FeatureTap parse_feature_tap(const std::string& name) {
  if (name == "cnn") return FeatureTap::kCnn;
  if (name == "mamba") return FeatureTap::kMamba;
  if (name == "fused") return FeatureTap::kFused;
  throw ConfigError("tap must be cnn, mamba or fused, got '" + name + "'");
}

namespace {

template <typename T>
Var<T> tokens_to_grid(const TokenSequence<T>& seq) {
  Var<T> tokens = seq.tokens;
  std::size_t len = seq.length();
  if (seq.has_cls) {
    tokens = ops::slice(tokens, 1, 1, len - 1);
    --len;
  }
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(len))));
  const std::size_t n = tokens.dim(0), d = tokens.dim(2);
  return ops::permute(ops::reshape(tokens, Shape{n, side, side, d}), {0, 3, 1, 2});
}

}  // namespace

template <typename T>
Var<T> model_tap(AfmNet<T>& model, const Var<T>& input, FeatureTap tap) {
  ForwardOptions opt;
  auto r = model.forward(input, opt);
  switch (tap) {
    case FeatureTap::kCnn:
      if (r.cnn_taps.empty()) throw CapabilityError("model has no CNN branch");
      return r.cnn_taps.front().feature;
    case FeatureTap::kMamba:
      if (r.mamba_taps.empty()) throw CapabilityError("model has no Mamba branch");
      return tokens_to_grid(r.mamba_taps.front());
    case FeatureTap::kFused:
      return r.fusion_outputs.back();
  }
  throw ConfigError("unknown tap");
}

template <typename T>
Tensor<T> model_erf(AfmNet<T>& model, const Tensor<T>& input, FeatureTap tap) {
  return erf_map<T>([&](const Var<T>& x) { return model_tap(model, x, tap); }, input);
}

template <typename T>
std::size_t support_count(const Tensor<T>& map, double threshold) {
  std::size_t n = 0;
  for (auto v : map.data()) n += static_cast<double>(v) > threshold ? 1 : 0;
  return n;
}

template <typename T>
void write_csv_grid(const fs::path& path, const Tensor<T>& grid) {
  if (grid.rank() != 2) throw DimensionError("CSV grid must be 2-D, got " + shape_str(grid.shape()));
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setprecision(9);
  for (std::size_t r = 0; r < grid.dim(0); ++r) {
    for (std::size_t c = 0; c < grid.dim(1); ++c) out << (c ? "," : "") << grid[r * grid.dim(1) + c];
    out << '\n';
  }
}

template <typename T>
Tensor<T> grad_cam_map(const Tensor<T>& activation, const Tensor<T>& gradient, std::size_t out_h, std::size_t out_w) {
  if (activation.rank() != 3 || gradient.shape() != activation.shape()) {
    throw DimensionError("grad_cam_map: activation " + shape_str(activation.shape()) + " and gradient " +
                         shape_str(gradient.shape()) + " must both be [C,h,w]");
  }
  const std::size_t c = activation.dim(0), h = activation.dim(1), w = activation.dim(2), hw = h * w;
  Tensor<T> cam(Shape{1, 1, h, w}, T(0));
  for (std::size_t k = 0; k < c; ++k) {
    T weight = 0;
    for (std::size_t i = 0; i < hw; ++i) weight += gradient[k * hw + i];
    weight /= static_cast<T>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam[i] += weight * activation[k * hw + i];
  }
  for (auto& v : cam.data()) v = std::max(v, T(0));
  NoGradGuard guard;
  auto resized = ops::interpolate(ops::constant(std::move(cam)), out_h, out_w, ops::InterpMode::kBilinear);
  return max_normalize(resized.value().reshaped(Shape{out_h, out_w}));
}

template <typename T>
Tensor<T> grad_cam(const CamFn<T>& fn, const Tensor<T>& input, std::size_t class_id) {
  if (input.rank() != 4 || input.dim(0) != 1) throw DimensionError("grad_cam expects one image [1,C,H,W]");
  Var<T> x(input, true);
  auto [activation, logits] = fn(x);
  if (activation.rank() != 4 || activation.dim(0) != 1) {
    throw DimensionError("grad_cam layer must be [1,C,h,w], got " + shape_str(activation.shape()));
  }
  if (class_id >= logits.dim(1)) throw ConfigError("class id " + std::to_string(class_id) + " out of range");
  backward(ops::slice(logits, 1, class_id, 1));
  const Shape chw{activation.dim(1), activation.dim(2), activation.dim(3)};
  Tensor<T> grad = activation.has_grad() ? activation.grad().reshaped(chw) : Tensor<T>(chw, T(0));
  return grad_cam_map(activation.value().reshaped(chw), grad, input.dim(2), input.dim(3));
}

template <typename T>
Tensor<T> model_grad_cam(AfmNet<T>& model, const Tensor<T>& input, std::size_t class_id, FeatureTap layer) {
  return grad_cam<T>(
      [&](const Var<T>& x) {
        auto r = model.forward(x, ForwardOptions{});
        Var<T> act;
        switch (layer) {
          case FeatureTap::kCnn:
            if (r.cnn_taps.empty()) throw CapabilityError("model has no CNN branch");
            act = r.cnn_taps.back().feature;
            break;
          case FeatureTap::kMamba:
            if (r.mamba_features.empty() || !r.mamba_features.back().defined()) {
              throw CapabilityError("model has no Mamba branch");
            }
            act = r.mamba_features.back();
            break;
          case FeatureTap::kFused:
            act = r.fusion_outputs.back();
            break;
        }
        return std::pair<Var<T>, Var<T>>{act, r.logits};
      },
      input, class_id);
}

std::string RoutingStats::csv() const {
  std::ostringstream out;
  out << std::setprecision(9) << "class,count";
  const std::size_t m = mean_gate.empty() ? 0 : mean_gate[0].size();
  for (std::size_t i = 0; i < m; ++i) out << ",expert" << i;
  out << '\n';
  for (std::size_t c = 0; c < mean_gate.size(); ++c) {
    out << c << ',' << class_counts[c];
    for (auto v : mean_gate[c]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

RoutingStats routing_stats(AfmNet<float>& model, const Dataset& data, std::size_t batch_size) {
  if (!model.moe()) throw CapabilityError("routing statistics need the MoE head; this model uses the MLP head");
  if (data.size() == 0) throw DataError("routing statistics need a non-empty dataset");
  const std::size_t classes = model.config().num_classes, m = model.config().moe.num_experts;
  RoutingStats stats;
  stats.mean_gate.assign(classes, std::vector<double>(m, 0.0));
  stats.class_counts.assign(classes, 0);
  NoGradGuard guard;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(order.size(), begin + batch_size);
    auto batch = make_batch(data, order, begin, end);
    auto r = model.forward(ops::constant(std::move(batch.images)));
    const auto& s = r.routing->scores.value();
    for (std::size_t row = 0; row < end - begin; ++row) {
      const auto label = static_cast<std::size_t>(batch.labels[row]);
      if (label >= classes) throw DataError("label " + std::to_string(label) + " exceeds the model's class count");
      ++stats.class_counts[label];
      for (std::size_t i = 0; i < m; ++i) stats.mean_gate[label][i] += static_cast<double>(s[row * m + i]);
    }
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (stats.class_counts[c] == 0) continue;
    for (auto& v : stats.mean_gate[c]) v /= static_cast<double>(stats.class_counts[c]);
  }
  return stats;
}

namespace {

struct CostSheet {
  std::size_t params = 0;
  std::size_t macs = 0;

  void conv(std::size_t in, std::size_t out, std::size_t k, std::size_t out_res, bool bias) {
    params += k * k * in * out + (bias ? out : 0);
    macs += k * k * in * out * out_res * out_res;
  }
  void bn(std::size_t ch) { params += 2 * ch; }
  void conv_bn(std::size_t in, std::size_t out, std::size_t k, std::size_t out_res) {
    conv(in, out, k, out_res, false);
    bn(out);
  }
  void linear(std::size_t in, std::size_t out, bool bias, std::size_t tokens) {
    params += in * out + (bias ? out : 0);
    macs += in * out * tokens;
  }
};

CostSheet damf_cost(std::size_t in, const FusionConfig& f, std::size_t res) {
  CostSheet s;
  const std::size_t w = f.width, mid = w / f.bottleneck_ratio, att = w / f.attention_ratio;
  for (int branch = 0; branch < 2; ++branch) {
    s.conv_bn(in, mid, 1, res);
    s.conv_bn(mid, mid, 3, res);
    s.conv_bn(mid, w, 1, res);
  }
  s.conv_bn(in, w, 3, res);
  s.conv_bn(3 * w, w, 1, res);
  // channel attention runs its two-layer map on the avg and max descriptors
  s.linear(w, att, true, 2);
  s.linear(att, w, true, 2);
  s.conv(2, 1, f.spatial_kernel, res, true);
  return s;
}

}  // namespace

nlohmann::json ComplexityReport::to_json() const {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : modules) mods.push_back({{"name", m.name}, {"params", m.params}, {"macs", m.macs}, {"flops", 2 * m.macs}});
  return {{"modules", mods}, {"total_params", total_params}, {"total_macs", total_macs}, {"total_flops", flops()}};
}

ComplexityReport count_params_flops(const ModelConfig& config) {
  config.validate();
  ComplexityReport report;
  auto add = [&report](const std::string& name, const CostSheet& s) {
    report.modules.push_back({name, s.params, s.macs});
    report.total_params += s.params;
    report.total_macs += s.macs;
  };
  const std::size_t n = config.num_fusion_stages();
  const auto& fc = config.fusion;

  if (config.cnn_enabled) {
    const auto& c = config.cnn;
    CostSheet stem;
    stem.conv_bn(3, c.widths[0], 7, config.image_size / 2);
    add("cnn.stem", stem);
    const std::size_t deepest = c.taps.back();
    std::size_t in = c.widths[0];
    for (std::size_t s = 1; s <= c.widths.size(); ++s) {
      CostSheet stage;
      const std::size_t out = c.widths[s - 1], res = config.stage_resolution(s);
      for (std::size_t b = 0; b < c.blocks[s - 1]; ++b) {
        const std::size_t bin = b == 0 ? in : out;
        const bool strided = s > 1 && b == 0;
        stage.conv_bn(bin, out, 3, res);
        stage.conv_bn(out, out, 3, res);
        if (bin != out || strided) stage.conv_bn(bin, out, 1, res);
      }
      if (s > deepest) stage.macs = 0;  // built but never run
      add("cnn.stage" + std::to_string(s), stage);
      in = out;
    }
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t stage = c.taps[t], res = config.stage_resolution(stage);
      CostSheet e1;
      e1.conv(c.widths[stage - 1], fc.width, 1, res, true);
      if (config.e1_enabled) {
        const auto d = damf_cost(fc.width, fc, res);
        e1.params += d.params;
        e1.macs += d.macs;
      }
      add("e1." + std::to_string(t), e1);
    }
  }

  if (config.mamba_enabled) {
    const auto& m = config.mamba;
    const std::size_t g = config.patch_grid(), len = g * g + 1, d = m.embed_dim, e = d * m.expand, st = m.state_size;
    CostSheet embed;
    embed.conv(3, d, m.patch, g, true);
    embed.params += d + len * d;  // cls token, positional embedding
    add("mamba.embed", embed);
    for (std::size_t b = 1; b <= m.depth; ++b) {
      CostSheet blk;
      blk.params += 2 * d;  // layer norm
      blk.linear(d, 2 * e, false, len);
      blk.params += e * m.conv_kernel + e;
      blk.macs += len * e * m.conv_kernel;
      blk.params += e * st + e * e + e + 2 * e * st + e;  // a_log, w_delta, b_delta, w_b, w_c, d_skip
      blk.macs += 3 * len * (e * e + 2 * e * st + 2 * e * st);  // three paths: delta, B, C projections and scan
      blk.linear(e, 3, true, len);
      blk.linear(e, d, false, len);
      if (b > m.taps.back()) blk.macs = 0;
      add("mamba.block" + std::to_string(b - 1), blk);
    }
    for (std::size_t t = 0; t < n; ++t) {
      CostSheet e2;
      e2.linear(d, fc.width, true, g * g);
      if (config.e2_enabled) {
        const std::size_t res = config.fusion_resolution(n - 1 - t);
        const auto dm = damf_cost(fc.width, fc, res);
        e2.params += dm.params;
        e2.macs += dm.macs;
      }
      add("e2." + std::to_string(t), e2);
    }
  }

  for (std::size_t i = 0; i < n; ++i) add("fusion.stage" + std::to_string(i), damf_cost(config.fusion_input_width(i), fc, config.fusion_resolution(i)));

  const std::size_t d = config.feature_width(), h = d * config.moe.hidden_mult;
  CostSheet head;
  if (config.head == HeadKind::kMoE) {
    const auto& mo = config.moe;
    head.linear(d, mo.num_experts, true, 1);
    const std::size_t expert_params = d * h + h + h * d + d;
    head.params += (mo.num_experts + mo.num_shared) * expert_params;
    head.macs += (mo.top_k + mo.num_shared) * 2 * d * h;
    head.linear(d, config.num_classes, true, 1);
  } else {
    head.linear(d, h, true, 1);
    head.linear(h, config.num_classes, true, 1);
  }
  add("head", head);
  return report;
}

std::vector<SweepRow> expert_sweep(const ModelConfig& base, const TrainConfig& train_config, const Dataset& train,
                                   const Dataset* test, const std::vector<std::size_t>& experts,
                                   const std::optional<fs::path>& out_dir) {
  if (experts.empty()) throw ConfigError("expert sweep needs at least one M");
  for (auto m : experts) {
    if (m < base.moe.top_k) {
      throw ConfigError("expert sweep: M=" + std::to_string(m) + " is smaller than k=" + std::to_string(base.moe.top_k));
    }
  }
  std::vector<SweepRow> rows;
  for (auto m : experts) {
    ModelConfig cfg = base;
    cfg.head = HeadKind::kMoE;
    cfg.moe.num_experts = m;
    AfmNet<float> model(cfg, train_config.seed);
    TrainOptions opt;
    if (out_dir) opt.out_dir = *out_dir / ("M" + std::to_string(m));
    train_run(train_config, model, train, opt);
    const auto ev = evaluate(model, test ? *test : train, train_config.batch_size);
    rows.push_back({m, model.parameters().param_elements(), ev.metrics.weighted_f1, ev.metrics.oa});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(9) << "M,params,weighted_f1,OA\n";
  for (const auto& r : rows) out << r.num_experts << ',' << r.params << ',' << r.weighted_f1 << ',' << r.oa << '\n';
  return out.str();
}

#define AFM_INSTANTIATE_ANALYSIS(T)                                                                       \
  template Tensor<T> erf_map(const TapFn<T>&, const Tensor<T>&);                                          \
  template Var<T> model_tap(AfmNet<T>&, const Var<T>&, FeatureTap);                                       \
  template Tensor<T> model_erf(AfmNet<T>&, const Tensor<T>&, FeatureTap);                                 \
  template std::size_t support_count(const Tensor<T>&, double);                                           \
  template void write_csv_grid(const fs::path&, const Tensor<T>&);                                        \
  template Tensor<T> grad_cam_map(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> grad_cam(const CamFn<T>&, const Tensor<T>&, std::size_t);                            \
  template Tensor<T> model_grad_cam(AfmNet<T>&, const Tensor<T>&, std::size_t, FeatureTap);

AFM_INSTANTIATE_ANALYSIS(float)
AFM_INSTANTIATE_ANALYSIS(double)

}  // namespace afm
