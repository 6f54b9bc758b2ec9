#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "afm/config.hpp"
#include "afm/nn.hpp"

namespace afm {

using Selection = std::vector<std::vector<std::size_t>>;

/// Two-layer perceptron d -> hidden -> d with ReLU.
template <typename T>
struct Expert {
  Linear<T> fc1;
  Linear<T> fc2;

  Expert() = default;
  Expert(std::size_t dim, std::size_t hidden, Rng& rng) : fc1(dim, hidden, true, rng), fc2(hidden, dim, true, rng) {}

  Var<T> operator()(const Var<T>& x) const { return fc2(ops::relu(fc1(x))); }

  void collect(ParamCollector<T>& c, const std::string& prefix) {
    fc1.collect(c, join_name(prefix, "fc1"));
    fc2.collect(c, join_name(prefix, "fc2"));
  }
};

template <typename T>
struct RoutingReport {
  Var<T> scores;                     // S [B,M]
  Selection selected;                // top-k expert ids per row, best first
  std::vector<std::size_t> counts;   // f_i: rows whose top-k set contains expert i
  std::vector<double> mean_prob;     // P_i: column mean of S
  Var<T> aux_loss;                   // scalar
  std::size_t expert_evaluations = 0;  // rows pushed through routed experts

  std::size_t batch() const { return selected.size(); }
};

/// Top-k indices of each row of S [B,M], ties toward the lower index.
template <typename T>
Selection top_k(const Tensor<T>& scores, std::size_t k);

/// alpha * M / B * sum_i f_i * P_i, differentiable through P.
template <typename T>
Var<T> load_balance_loss(const Var<T>& scores, const Selection& selected, double alpha);

/// Same quantity from raw counts and mean probabilities. Throws ContractError when batch == 0.
double load_balance_value(std::span<const std::size_t> counts, std::span<const double> mean_prob, std::size_t batch,
                          double alpha);

template <typename T>
class MoEHead {
 public:
  struct Output {
    Var<T> logits;
    Var<T> routed;
    Var<T> shared;
    RoutingReport<T> report;
  };

  MoEHead() = default;
  MoEHead(std::size_t dim, std::size_t num_classes, const MoEConfig& config, Rng& rng);

  Var<T> gate(const Var<T>& v) const { return ops::softmax(gate_(v), 1); }
  /// Sum of s_j * E_j(V) over each row's selected experts; unselected experts are never run.
  Var<T> route(const Var<T>& v, const Var<T>& scores, const Selection& selected) const;
  Var<T> shared_forward(const Var<T>& v) const;

  /// `forced` replaces the top-k choice (routing held fixed for finite differences).
  Output forward(const Var<T>& v, const Selection* forced = nullptr) const;

  const MoEConfig& config() const { return config_; }
  std::size_t evaluations() const { return evaluations_; }
  void reset_evaluations() { evaluations_ = 0; }

  Linear<T>& gate_linear() { return gate_; }
  Expert<T>& expert(std::size_t i) { return experts_.at(i); }
  Expert<T>& shared_expert(std::size_t i) { return shared_.at(i); }
  Linear<T>& classifier() { return classifier_; }
  void collect(ParamCollector<T>& c, const std::string& prefix);

 private:
  MoEConfig config_;
  Linear<T> gate_;
  std::vector<Expert<T>> experts_;
  std::vector<Expert<T>> shared_;
  Linear<T> classifier_;
  mutable std::size_t evaluations_ = 0;
};

/// Ablation head: d -> hidden -> classes.
template <typename T>
struct MlpHead {
  Linear<T> fc1;
  Linear<T> fc2;

  MlpHead() = default;
  MlpHead(std::size_t dim, std::size_t hidden, std::size_t num_classes, Rng& rng)
      : fc1(dim, hidden, true, rng), fc2(hidden, num_classes, true, rng) {}

  Var<T> operator()(const Var<T>& x) const { return fc2(ops::relu(fc1(x))); }

  void collect(ParamCollector<T>& c, const std::string& prefix) {
    fc1.collect(c, join_name(prefix, "fc1"));
    fc2.collect(c, join_name(prefix, "fc2"));
  }
};

template <typename T>
nlohmann::json routing_report_json(const RoutingReport<T>& report);

extern template class MoEHead<float>;
extern template class MoEHead<double>;

}  // namespace afm
