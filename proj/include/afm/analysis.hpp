#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "afm/data.hpp"
#include "afm/model.hpp"
#include "afm/train.hpp"

namespace afm {

// ---- effective receptive field -------------------------------------------

/// Maps an input batch [N,C,H,W] to a spatial feature map [N,K,h,w].
template <typename T>
using TapFn = std::function<Var<T>(const Var<T>&)>;

/// |d(sum_k y[n,k,h/2,w/2]) / d input| summed over input channels (and
/// averaged over the batch), max-normalized to [0,1]. Returns [H,W].
template <typename T>
Tensor<T> erf_map(const TapFn<T>& tap, const Tensor<T>& input);

enum class FeatureTap { kCnn, kMamba, kFused };
FeatureTap parse_feature_tap(const std::string& name);

/// Feature map for a model tap in inference mode: the raw CNN stage output,
/// the Mamba token grid (cls dropped) or the fusion output, each at the
/// finest fusion stage.
template <typename T>
Var<T> model_tap(AfmNet<T>& model, const Var<T>& input, FeatureTap tap);

template <typename T>
Tensor<T> model_erf(AfmNet<T>& model, const Tensor<T>& input, FeatureTap tap);

/// Entries strictly greater than `threshold`.
template <typename T>
std::size_t support_count(const Tensor<T>& map, double threshold = 1e-6);

template <typename T>
void write_csv_grid(const std::filesystem::path& path, const Tensor<T>& grid);

// ---- Grad-CAM -------------------------------------------------------------

/// relu(sum_c mean(grad_c) * activation_c) over [C,h,w], bilinearly resized
/// to out_h x out_w and max-normalized (all zeros stay zero).
template <typename T>
Tensor<T> grad_cam_map(const Tensor<T>& activation, const Tensor<T>& gradient, std::size_t out_h, std::size_t out_w);

/// `fn` returns (layer activation [1,C,h,w], logits [1,K]) for a single image.
template <typename T>
using CamFn = std::function<std::pair<Var<T>, Var<T>>(const Var<T>&)>;

template <typename T>
Tensor<T> grad_cam(const CamFn<T>& fn, const Tensor<T>& input, std::size_t class_id);

template <typename T>
Tensor<T> model_grad_cam(AfmNet<T>& model, const Tensor<T>& input, std::size_t class_id, FeatureTap layer);

// ---- routing statistics ---------------------------------------------------

struct RoutingStats {
  std::vector<std::vector<double>> mean_gate;  // [C][M]
  std::vector<std::size_t> class_counts;
  std::string csv() const;
};

/// Per-class mean gating vector over the dataset (inference mode).
/// Throws CapabilityError for an MLP head.
RoutingStats routing_stats(AfmNet<float>& model, const Dataset& data, std::size_t batch_size = 16);

// ---- complexity -----------------------------------------------------------

struct ModuleCost {
  std::string name;
  std::size_t params = 0;
  std::size_t macs = 0;
};

struct ComplexityReport {
  std::vector<ModuleCost> modules;
  std::size_t total_params = 0;
  std::size_t total_macs = 0;  // per image
  std::size_t flops() const { return 2 * total_macs; }
  nlohmann::json to_json() const;
};

/// Analytic parameter and multiply-accumulate counts for one image.
/// conv = k*k*Cin*Cout*H'*W', linear = in*out per token, selective scan =
/// 2*L*E*S (state update plus readout). Normalization buffers are not parameters.
ComplexityReport count_params_flops(const ModelConfig& config);

// ---- expert sweep ---------------------------------------------------------

struct SweepRow {
  std::size_t num_experts = 0;
  std::size_t params = 0;
  double weighted_f1 = 0;
  double oa = 0;
};

/// Trains one model per M (sequentially) and scores it on `test` (or the
/// training set when null). Throws ConfigError if any M < k.
std::vector<SweepRow> expert_sweep(const ModelConfig& base, const TrainConfig& train_config, const Dataset& train,
                                   const Dataset* test, const std::vector<std::size_t>& experts,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace afm
