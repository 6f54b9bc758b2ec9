#include "afm/moe_head.hpp"

#include <algorithm>
#include <numeric>

#include "afm/errors.hpp"

namespace afm {

template <typename T>
Selection top_k(const Tensor<T>& scores, std::size_t k) {
  if (scores.rank() != 2) throw DimensionError("top_k expects [B,M] scores, got " + shape_str(scores.shape()));
  const std::size_t b = scores.dim(0), m = scores.dim(1);
  if (k == 0 || k > m) throw ConfigError("top_k: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(m) + "]");
  Selection out(b);
  std::vector<std::size_t> order(m);
  for (std::size_t r = 0; r < b; ++r) {
    const T* row = scores.ptr() + r * m;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [row](std::size_t i, std::size_t j) { return row[i] > row[j]; });
    out[r].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

namespace {

std::vector<std::size_t> selection_counts(const Selection& selected, std::size_t m) {
  std::vector<std::size_t> counts(m, 0);
  for (const auto& row : selected)
    for (auto j : row) {
      if (j >= m) throw ContractError("selected expert " + std::to_string(j) + " out of range");
      ++counts[j];
    }
  return counts;
}

}  // namespace

double load_balance_value(std::span<const std::size_t> counts, std::span<const double> mean_prob, std::size_t batch,
                          double alpha) {
  if (batch == 0) throw ContractError("load-balance loss needs a non-empty batch");
  if (counts.size() != mean_prob.size()) throw DimensionError("load-balance loss: counts and probabilities differ in length");
  double acc = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) acc += static_cast<double>(counts[i]) * mean_prob[i];
  return alpha * static_cast<double>(counts.size()) / static_cast<double>(batch) * acc;
}

template <typename T>
Var<T> load_balance_loss(const Var<T>& scores, const Selection& selected, double alpha) {
  if (!scores.defined() || scores.rank() != 2 || scores.dim(0) == 0 || selected.empty()) {
    throw ContractError("load-balance loss needs a non-empty batch");
  }
  const std::size_t b = scores.dim(0), m = scores.dim(1);
  if (selected.size() != b) throw ContractError("selection rows do not match the score batch");
  const auto counts = selection_counts(selected, m);
  Tensor<T> f(Shape{m});
  for (std::size_t i = 0; i < m; ++i) f[i] = static_cast<T>(counts[i]);
  auto p = ops::mean(scores, 0);
  const T scale = static_cast<T>(alpha * static_cast<double>(m) / static_cast<double>(b));
  return ops::mul_scalar(ops::sum_all(ops::mul(p, ops::constant(std::move(f)))), scale);
}

template <typename T>
MoEHead<T>::MoEHead(std::size_t dim, std::size_t num_classes, const MoEConfig& config, Rng& rng)
    : config_(config), gate_(dim, config.num_experts, true, rng) {
  if (config.top_k == 0 || config.top_k > config.num_experts) {
    throw ConfigError("MoE needs 1 <= k <= M, got k=" + std::to_string(config.top_k) +
                      " M=" + std::to_string(config.num_experts));
  }
  if (config.alpha < 0) throw ConfigError("MoE load-balance scale must be non-negative");
  const std::size_t hidden = dim * config.hidden_mult;
  for (std::size_t i = 0; i < config.num_experts; ++i) experts_.emplace_back(dim, hidden, rng);
  for (std::size_t i = 0; i < config.num_shared; ++i) shared_.emplace_back(dim, hidden, rng);
  classifier_ = Linear<T>(dim, num_classes, true, rng);
}

template <typename T>
Var<T> MoEHead<T>::route(const Var<T>& v, const Var<T>& scores, const Selection& selected) const {
  const std::size_t b = v.dim(0);
  if (selected.size() != b) throw ContractError("selection rows do not match the batch");
  Var<T> acc;
  for (std::size_t j = 0; j < experts_.size(); ++j) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < b; ++r)
      if (std::find(selected[r].begin(), selected[r].end(), j) != selected[r].end()) rows.push_back(r);
    if (rows.empty()) continue;
    evaluations_ += rows.size();
    auto out = experts_[j](ops::index_select(v, 0, rows));
    auto weight = ops::index_select(ops::slice(scores, 1, j, 1), 0, rows);
    auto contrib = ops::index_add(ops::mul(out, weight), 0, rows, b);
    acc = acc.defined() ? ops::add(acc, contrib) : contrib;
  }
  if (!acc.defined()) acc = ops::constant(Tensor<T>(v.shape(), T(0)));
  return acc;
}

template <typename T>
Var<T> MoEHead<T>::shared_forward(const Var<T>& v) const {
  Var<T> acc;
  for (const auto& e : shared_) acc = acc.defined() ? ops::add(acc, e(v)) : e(v);
  if (!acc.defined()) acc = ops::constant(Tensor<T>(v.shape(), T(0)));
  return acc;
}

template <typename T>
typename MoEHead<T>::Output MoEHead<T>::forward(const Var<T>& v, const Selection* forced) const {
  if (v.rank() != 2 || v.dim(1) != gate_.in_features()) {
    throw DimensionError("MoE head expects [B," + std::to_string(gate_.in_features()) + "], got " + shape_str(v.shape()));
  }
  Output out;
  auto& rep = out.report;
  rep.scores = gate(v);
  rep.selected = forced ? *forced : top_k(rep.scores.value(), config_.top_k);
  const std::size_t before = evaluations_;
  out.routed = route(v, rep.scores, rep.selected);
  rep.expert_evaluations = evaluations_ - before;
  out.shared = shared_forward(v);
  out.logits = classifier_(ops::add(out.routed, out.shared));

  const std::size_t b = v.dim(0), m = config_.num_experts;
  rep.counts = selection_counts(rep.selected, m);
  rep.mean_prob.assign(m, 0.0);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t i = 0; i < m; ++i) rep.mean_prob[i] += static_cast<double>(rep.scores.value()[r * m + i]);
  for (auto& p : rep.mean_prob) p /= static_cast<double>(b);
  rep.aux_loss = load_balance_loss(rep.scores, rep.selected, config_.alpha);
  return out;
}

template <typename T>
void MoEHead<T>::collect(ParamCollector<T>& c, const std::string& prefix) {
  gate_.collect(c, join_name(prefix, "gate"));
  for (std::size_t i = 0; i < experts_.size(); ++i) experts_[i].collect(c, join_name(prefix, "expert" + std::to_string(i)));
  for (std::size_t i = 0; i < shared_.size(); ++i) shared_[i].collect(c, join_name(prefix, "shared" + std::to_string(i)));
  classifier_.collect(c, join_name(prefix, "classifier"));
}

template <typename T>
nlohmann::json routing_report_json(const RoutingReport<T>& report) {
  nlohmann::json j;
  j["batch"] = report.batch();
  j["counts"] = report.counts;
  j["mean_prob"] = report.mean_prob;
  j["selected"] = report.selected;
  j["aux_loss"] = report.aux_loss.defined() ? static_cast<double>(report.aux_loss.item()) : 0.0;
  j["expert_evaluations"] = report.expert_evaluations;
  if (report.scores.defined()) {
    const auto& s = report.scores.value();
    std::vector<std::vector<double>> rows(s.dim(0), std::vector<double>(s.dim(1)));
    for (std::size_t r = 0; r < s.dim(0); ++r)
      for (std::size_t i = 0; i < s.dim(1); ++i) rows[r][i] = static_cast<double>(s[r * s.dim(1) + i]);
    j["scores"] = rows;
  }
  return j;
}

#define AFM_INSTANTIATE_MOE(T)                                                        \
  template Selection top_k(const Tensor<T>&, std::size_t);                            \
  template Var<T> load_balance_loss(const Var<T>&, const Selection&, double);         \
  template nlohmann::json routing_report_json(const RoutingReport<T>&);               \
  template class MoEHead<T>;

AFM_INSTANTIATE_MOE(float)
AFM_INSTANTIATE_MOE(double)

}  // namespace afm
