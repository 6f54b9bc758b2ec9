#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "afm/config.hpp"
#include "afm/data.hpp"
#include "afm/model.hpp"

namespace afm {

/// Warmup steps W = round(warmup_fraction * total).
std::size_t warmup_steps(std::size_t total, const TrainConfig& config);

/// Linear 0 -> lr_max over W steps, then cosine from lr_max down to lr_min at t = total.
double lr_schedule(double t, std::size_t total, const TrainConfig& config);

/// Decoupled-weight-decay Adam over a fixed parameter list.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<ParamRef<T>> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  /// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p). Parameters without
  /// a gradient this step are left untouched.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<ParamRef<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  double wd_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// ce + aux; aux may be undefined (MLP head).
template <typename T>
Var<T> total_loss(const Var<T>& ce, const Var<T>& aux);

struct MetricsReport {
  std::size_t num_classes = 0;
  std::size_t count = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
  std::vector<std::size_t> tp, fp, fn, support;
  std::vector<double> precision, recall, f1;
  double weighted_precision = 0, weighted_recall = 0, weighted_f1 = 0;
  double oa = 0;

  nlohmann::json to_json() const;
  std::string confusion_csv() const;
};

/// Per-class P/R/F1 with 0/0 = 0, support-weighted averages, overall accuracy.
MetricsReport compute_metrics(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes);

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

struct EvalResult {
  MetricsReport metrics;
  std::vector<int> predictions;
  double mean_loss = 0;  // unsmoothed cross-entropy
};

/// Inference-mode pass over the whole dataset.
EvalResult evaluate(AfmNet<float>& model, const Dataset& data, std::size_t batch_size = 16);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoint, metrics.jsonl, loss_trace.csv
  const Dataset* eval_data = nullptr;            // evaluated each epoch when set
  // Stop once inference-mode accuracy on the clean training set reaches this.
  std::optional<double> early_stop_accuracy;
  std::function<void(const nlohmann::json&)> on_epoch;
};

struct TrainResult {
  std::vector<double> step_loss;  // total loss per optimizer step
  std::vector<nlohmann::json> epoch_log;
  std::size_t epochs_run = 0;
  std::optional<MetricsReport> final_train;
  std::optional<MetricsReport> final_eval;
};

/// Deterministic given config.seed. Data and shape errors are rethrown with
/// epoch/step context.
TrainResult train_run(const TrainConfig& config, AfmNet<float>& model, const Dataset& train,
                      const TrainOptions& options = {});

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace afm
