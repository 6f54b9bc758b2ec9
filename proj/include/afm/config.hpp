#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace afm {

struct CnnConfig {
  std::vector<std::size_t> widths{32, 64, 128, 256};
  std::vector<std::size_t> blocks{2, 2, 2, 2};
  // 1-based stage indices whose outputs feed fusion, shallow to deep.
  std::vector<std::size_t> taps{2, 3, 4};
};

struct MambaConfig {
  std::size_t patch = 16;
  std::size_t embed_dim = 64;
  std::size_t depth = 6;
  std::size_t state_size = 8;
  std::size_t expand = 2;
  std::size_t conv_kernel = 4;
  // 1-based block indices whose outputs feed fusion, shallow to deep.
  std::vector<std::size_t> taps{2, 4, 6};
};

struct FusionConfig {
  std::size_t width = 32;  // F
  std::size_t bottleneck_ratio = 4;
  std::size_t attention_ratio = 8;
  std::size_t spatial_kernel = 7;
};

enum class HeadKind { kMoE, kMlp };
enum class FusionMode { kDense, kConcat };

struct MoEConfig {
  std::size_t num_experts = 4;  // M
  std::size_t top_k = 2;
  std::size_t num_shared = 1;
  double alpha = 0.01;
  std::size_t hidden_mult = 4;
};

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t num_classes = 8;
  CnnConfig cnn;
  MambaConfig mamba;
  FusionConfig fusion;
  MoEConfig moe;

  // Ablation toggles.
  bool cnn_enabled = true;
  bool mamba_enabled = true;
  bool e1_enabled = true;
  bool e2_enabled = true;
  HeadKind head = HeadKind::kMoE;
  FusionMode fusion_mode = FusionMode::kDense;

  std::size_t num_fusion_stages() const { return cnn.taps.size(); }
  // Spatial side of the CNN stage with the given 1-based index.
  std::size_t stage_resolution(std::size_t stage) const;
  // Fusion stage i (0 = coarsest) resolution.
  std::size_t fusion_resolution(std::size_t i) const;
  std::size_t patch_grid() const { return image_size / mamba.patch; }
  std::size_t branch_inputs() const { return (cnn_enabled ? 1 : 0) + (mamba_enabled ? 1 : 0); }
  // DAMF input width at fusion stage i.
  std::size_t fusion_input_width(std::size_t i) const;
  std::size_t feature_width() const { return fusion.width * num_fusion_stages(); }

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

/// Applies one `key=value` ablation (keys cnn, mamba, e1, e2, head, dense) or a
/// `no-<key>` shorthand. Throws ConfigError on unknown keys or values.
void apply_ablation(ModelConfig& config, const std::string& spec);

/// Canonical record of the toggles, stored in checkpoint manifests.
nlohmann::json ablation_record(const ModelConfig& config);

/// Stable 64-bit FNV-1a hash of the serialized config.
std::uint64_t config_hash(const ModelConfig& config);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TrainConfig {
  double lr_max = 5e-4;
  double lr_min = 0.0;
  double weight_decay = 0.05;
  std::size_t batch_size = 16;
  std::size_t epochs = 200;
  double warmup_fraction = 0.05;
  double label_smoothing = 0.1;
  bool augment = true;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace afm
