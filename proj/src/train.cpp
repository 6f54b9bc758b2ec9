#include "afm/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include "afm/checkpoint.hpp"
#include "afm/errors.hpp"

namespace afm {

std::size_t warmup_steps(std::size_t total, const TrainConfig& config) {
  return static_cast<std::size_t>(std::llround(config.warmup_fraction * static_cast<double>(total)));
}

double lr_schedule(double t, std::size_t total, const TrainConfig& config) {
  const auto w = static_cast<double>(warmup_steps(total, config));
  const auto n = static_cast<double>(total);
  if (t < w) return config.lr_max * t / w;
  if (n <= w) return config.lr_max;
  const double progress = std::clamp((t - w) / (n - w), 0.0, 1.0);
  return config.lr_min + (config.lr_max - config.lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamW<T>::AdamW(std::vector<ParamRef<T>> params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var->shape(), T(0));
    v_.emplace_back(p.var->shape(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var<T>& p = *params_[i].var;
    if (!p.has_grad()) continue;
    const T* g = p.grad().ptr();
    T* w = p.mutable_value().ptr();
    T* m = m_[i].ptr();
    T* v = v_[i].ptr();
    for (std::size_t k = 0; k < m_[i].size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = beta1_ * static_cast<double>(m[k]) + (1 - beta1_) * gk;
      const double vk = beta2_ * static_cast<double>(v[k]) + (1 - beta2_) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = (mk / c1) / (std::sqrt(vk / c2) + eps_) + wd_ * static_cast<double>(w[k]);
      w[k] = static_cast<T>(static_cast<double>(w[k]) - lr * update);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.var->zero_grad();
}

template <typename T>
Var<T> total_loss(const Var<T>& ce, const Var<T>& aux) {
  return aux.defined() ? ops::add(ce, aux) : ce;
}

MetricsReport compute_metrics(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes) {
  if (preds.size() != labels.size()) {
    throw ContractError("compute_metrics: " + std::to_string(preds.size()) + " predictions vs " +
                        std::to_string(labels.size()) + " labels");
  }
  MetricsReport r;
  r.num_classes = num_classes;
  r.count = labels.size();
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = preds[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes || p < 0 || static_cast<std::size_t>(p) >= num_classes) {
      throw DataError("compute_metrics: class id out of range at sample " + std::to_string(i));
    }
    ++r.confusion[y][p];
  }
  r.tp.assign(num_classes, 0);
  r.fp.assign(num_classes, 0);
  r.fn.assign(num_classes, 0);
  r.support.assign(num_classes, 0);
  r.precision.assign(num_classes, 0);
  r.recall.assign(num_classes, 0);
  r.f1.assign(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    r.tp[c] = r.confusion[c][c];
    correct += r.tp[c];
    for (std::size_t o = 0; o < num_classes; ++o) {
      r.support[c] += r.confusion[c][o];
      if (o != c) {
        r.fn[c] += r.confusion[c][o];
        r.fp[c] += r.confusion[o][c];
      }
    }
    auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
    r.precision[c] = ratio(r.tp[c], r.tp[c] + r.fp[c]);
    r.recall[c] = ratio(r.tp[c], r.tp[c] + r.fn[c]);
    const double denom = r.precision[c] + r.recall[c];
    r.f1[c] = denom == 0 ? 0.0 : 2 * r.precision[c] * r.recall[c] / denom;
  }
  if (r.count > 0) {
    const auto n = static_cast<double>(r.count);
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double w = static_cast<double>(r.support[c]) / n;
      r.weighted_precision += w * r.precision[c];
      r.weighted_recall += w * r.recall[c];
      r.weighted_f1 += w * r.f1[c];
    }
    r.oa = static_cast<double>(correct) / n;
  }
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < num_classes; ++c) {
    per_class.push_back({{"class", c},
                         {"support", support[c]},
                         {"tp", tp[c]},
                         {"fp", fp[c]},
                         {"fn", fn[c]},
                         {"precision", precision[c]},
                         {"recall", recall[c]},
                         {"f1", f1[c]}});
  }
  return {{"OA", oa},
          {"count", count},
          {"num_classes", num_classes},
          {"weighted_precision", weighted_precision},
          {"weighted_recall", weighted_recall},
          {"weighted_f1", weighted_f1},
          {"per_class", per_class},
          {"confusion", confusion}};
}

std::string MetricsReport::confusion_csv() const {
  std::ostringstream out;
  out << "true\\pred";
  for (std::size_t c = 0; c < num_classes; ++c) out << ',' << c;
  out << '\n';
  for (std::size_t r = 0; r < num_classes; ++r) {
    out << r;
    for (std::size_t c = 0; c < num_classes; ++c) out << ',' << confusion[r][c];
    out << '\n';
  }
  return out.str();
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    const T* row = logits.ptr() + r * c;
    out[r] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

EvalResult evaluate(AfmNet<float>& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw DataError("evaluation set is empty");
  NoGradGuard guard;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  EvalResult result;
  double loss_sum = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(order.size(), begin + batch_size);
    auto batch = make_batch(data, order, begin, end);
    auto logits = model.logits(ops::constant(std::move(batch.images)));
    const auto ce = ops::cross_entropy(logits, std::span<const int>(batch.labels), 0.0f);
    loss_sum += static_cast<double>(ce.item()) * static_cast<double>(end - begin);
    const auto preds = argmax_rows(logits.value());
    result.predictions.insert(result.predictions.end(), preds.begin(), preds.end());
  }
  result.mean_loss = loss_sum / static_cast<double>(data.size());
  result.metrics = compute_metrics(result.predictions, data.labels, model.config().num_classes);
  return result;
}

namespace {

template <typename E>
[[noreturn]] void rethrow_with(const E& e, const std::string& context) {
  throw E(context + ": " + e.what());
}

}  // namespace

TrainResult train_run(const TrainConfig& config, AfmNet<float>& model, const Dataset& train,
                      const TrainOptions& options) {
  config.validate();
  if (train.size() == 0) throw DataError("training set is empty");
  if (train.image_size != model.config().image_size) {
    throw DataError("dataset images are " + std::to_string(train.image_size) + " px but the model expects " +
                    std::to_string(model.config().image_size));
  }
  if (train.num_classes() > model.config().num_classes) {
    throw DataError("dataset has " + std::to_string(train.num_classes()) + " classes but the model predicts " +
                    std::to_string(model.config().num_classes));
  }

  auto params = model.parameters();
  AdamW<float> optimizer(params.params, config.weight_decay);
  const std::size_t n = train.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  Rng order_rng(sample_seed(config.seed, 0x0D3E, 0));
  Rng shuffle_rng(sample_seed(config.seed, 0x5CA7, 0));
  const AugmentOptions augment_opt;

  std::ofstream metrics_log, loss_log;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    metrics_log.open(*options.out_dir / "metrics.jsonl");
    loss_log.open(*options.out_dir / "loss_trace.csv");
    loss_log << "step,epoch,lr,loss\n" << std::setprecision(9);
    if (!metrics_log || !loss_log) throw DataError("cannot write training logs under " + options.out_dir->string());
  }

  TrainResult result;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0, aux_sum = 0;
    std::vector<int> preds, labels;
    std::vector<std::size_t> utilization(model.moe() ? model.config().moe.num_experts : 0, 0);
    double lr = 0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size, ++step) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      const std::string context = "epoch " + std::to_string(epoch) + " step " + std::to_string(step);
      try {
        auto batch = make_batch(train, order, begin, end, config.augment ? &augment_opt : nullptr, config.seed, epoch);
        ForwardOptions fwd;
        fwd.training = true;
        fwd.rng = &shuffle_rng;
        auto out = model.forward(ops::constant(std::move(batch.images)), fwd);
        auto ce = ops::cross_entropy(out.logits, std::span<const int>(batch.labels),
                                     static_cast<float>(config.label_smoothing));
        auto loss = total_loss(ce, out.aux_loss);
        optimizer.zero_grad();
        backward(loss);
        lr = lr_schedule(static_cast<double>(step), total_steps, config);
        optimizer.step(lr);

        const double l = static_cast<double>(loss.item());
        if (!std::isfinite(l)) throw ContractError("loss became non-finite");
        result.step_loss.push_back(l);
        if (loss_log.is_open()) loss_log << step << ',' << epoch << ',' << lr << ',' << l << '\n';
        loss_sum += l * static_cast<double>(end - begin);
        if (out.aux_loss.defined()) aux_sum += static_cast<double>(out.aux_loss.item()) * static_cast<double>(end - begin);
        if (out.routing) {
          for (std::size_t i = 0; i < utilization.size(); ++i) utilization[i] += out.routing->counts[i];
        }
        const auto p = argmax_rows(out.logits.value());
        preds.insert(preds.end(), p.begin(), p.end());
        labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
      } catch (const DataError& e) {
        rethrow_with(e, context);
      } catch (const DimensionError& e) {
        rethrow_with(e, context);
      } catch (const ContractError& e) {
        rethrow_with(e, context);
      }
    }

    const auto running = compute_metrics(preds, labels, model.config().num_classes);
    nlohmann::json entry{{"epoch", epoch},
                         {"lr", lr},
                         {"loss", loss_sum / static_cast<double>(n)},
                         {"OA", running.oa},
                         {"weighted_precision", running.weighted_precision},
                         {"weighted_recall", running.weighted_recall},
                         {"weighted_f1", running.weighted_f1},
                         {"aux_loss", aux_sum / static_cast<double>(n)},
                         {"expert_utilization", utilization}};
    if (options.early_stop_accuracy) {
      const auto clean = evaluate(model, train, config.batch_size);
      entry["train_eval_OA"] = clean.metrics.oa;
      result.final_train = clean.metrics;
    }
    if (options.eval_data) {
      const auto ev = evaluate(model, *options.eval_data, config.batch_size);
      entry["eval"] = {{"OA", ev.metrics.oa},
                       {"weighted_precision", ev.metrics.weighted_precision},
                       {"weighted_recall", ev.metrics.weighted_recall},
                       {"weighted_f1", ev.metrics.weighted_f1},
                       {"loss", ev.mean_loss}};
      result.final_eval = ev.metrics;
    }
    result.epoch_log.push_back(entry);
    result.epochs_run = epoch + 1;
    if (metrics_log.is_open()) metrics_log << entry.dump() << '\n' << std::flush;
    if (options.on_epoch) options.on_epoch(entry);
    if (options.early_stop_accuracy && entry["train_eval_OA"].get<double>() >= *options.early_stop_accuracy) break;
  }

  if (options.out_dir) {
    nlohmann::json extra{{"train", config}, {"epochs_run", result.epochs_run}, {"steps", step}};
    save_checkpoint(model, *options.out_dir, extra);
  }
  return result;
}

template class AdamW<float>;
template class AdamW<double>;
template Var<float> total_loss(const Var<float>&, const Var<float>&);
template Var<double> total_loss(const Var<double>&, const Var<double>&);
template std::vector<int> argmax_rows(const Tensor<float>&);
template std::vector<int> argmax_rows(const Tensor<double>&);

}  // namespace afm
