#include "afm/config.hpp"

#include <algorithm>

#include "afm/errors.hpp"

namespace afm {

using nlohmann::json;

std::size_t ModelConfig::stage_resolution(std::size_t stage) const {
  std::size_t res = image_size / 4;
  for (std::size_t s = 2; s <= stage; ++s) res /= 2;
  return res;
}

std::size_t ModelConfig::fusion_resolution(std::size_t i) const {
  const std::size_t n = num_fusion_stages();
  return stage_resolution(cnn.taps[n - 1 - i]);
}

std::size_t ModelConfig::fusion_input_width(std::size_t i) const {
  const std::size_t history = fusion_mode == FusionMode::kDense ? i : 0;
  return fusion.width * (branch_inputs() + history);
}

void ModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (!cnn_enabled && !mamba_enabled) throw ConfigError("at least one of the CNN and Mamba branches must be enabled");
  if (cnn.widths.empty() || cnn.widths.size() != cnn.blocks.size()) {
    throw ConfigError("cnn.widths and cnn.blocks must be non-empty and of equal length");
  }
  for (auto b : cnn.blocks) {
    if (b == 0) throw ConfigError("every CNN stage needs at least one block");
  }
  if (cnn.taps.empty()) throw ConfigError("cnn.taps must name at least one stage");
  if (cnn.taps.size() != mamba.taps.size()) throw ConfigError("cnn.taps and mamba.taps must have equal length");
  for (std::size_t i = 0; i < cnn.taps.size(); ++i) {
    if (cnn.taps[i] < 1 || cnn.taps[i] > cnn.widths.size()) throw ConfigError("cnn tap out of range");
    if (i > 0 && cnn.taps[i] <= cnn.taps[i - 1]) throw ConfigError("cnn taps must be strictly increasing");
    if (mamba.taps[i] < 1 || mamba.taps[i] > mamba.depth) throw ConfigError("mamba tap out of range");
    if (i > 0 && mamba.taps[i] <= mamba.taps[i - 1]) throw ConfigError("mamba taps must be strictly increasing");
  }
  if (image_size % 4 != 0) throw ConfigError("image size must be divisible by 4 for the CNN stem");
  const std::size_t deepest = cnn.widths.size();
  std::size_t res = image_size / 4;
  for (std::size_t s = 2; s <= deepest; ++s) {
    if (res % 2 != 0 || res < 2) {
      throw ConfigError("image size " + std::to_string(image_size) + " cannot be halved through " +
                        std::to_string(deepest) + " CNN stages");
    }
    res /= 2;
  }
  if (mamba.patch == 0 || image_size % mamba.patch != 0) {
    throw ConfigError("image size must be divisible by the patch size " + std::to_string(mamba.patch));
  }
  if (mamba.embed_dim == 0 || mamba.state_size == 0 || mamba.expand == 0 || mamba.conv_kernel == 0) {
    throw ConfigError("mamba dimensions must be positive");
  }
  if (fusion.width == 0 || fusion.bottleneck_ratio == 0 || fusion.attention_ratio == 0) {
    throw ConfigError("fusion dimensions must be positive");
  }
  if (fusion.width % fusion.bottleneck_ratio != 0 || fusion.width % fusion.attention_ratio != 0) {
    throw ConfigError("fusion width must be divisible by the bottleneck and attention ratios");
  }
  if (fusion.spatial_kernel % 2 == 0) throw ConfigError("spatial attention kernel must be odd");
  if (head == HeadKind::kMoE) {
    if (moe.num_experts == 0) throw ConfigError("MoE needs at least one routable expert");
    if (moe.top_k < 1 || moe.top_k > moe.num_experts) {
      throw ConfigError("top_k must satisfy 1 <= k <= M (k=" + std::to_string(moe.top_k) +
                        ", M=" + std::to_string(moe.num_experts) + ")");
    }
    if (moe.alpha < 0) throw ConfigError("load-balance alpha must be >= 0");
  }
  if (moe.hidden_mult == 0) throw ConfigError("expert hidden multiplier must be positive");
}

namespace {

bool parse_switch(const std::string& key, const std::string& value) {
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  throw ConfigError("ablation " + key + " expects on/off, got '" + value + "'");
}

}  // namespace

void apply_ablation(ModelConfig& config, const std::string& spec) {
  std::string key, value;
  if (spec.rfind("no-", 0) == 0) {
    key = spec.substr(3);
    value = "off";
    if (key == "moe") {
      key = "head";
      value = "mlp";
    } else if (key == "dense") {
      value = "concat";
    }
  } else {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("ablation must be key=value or no-<key>, got '" + spec + "'");
    key = spec.substr(0, eq);
    value = spec.substr(eq + 1);
  }
  if (key == "cnn") {
    config.cnn_enabled = parse_switch(key, value);
  } else if (key == "mamba") {
    config.mamba_enabled = parse_switch(key, value);
  } else if (key == "e1") {
    config.e1_enabled = parse_switch(key, value);
  } else if (key == "e2") {
    config.e2_enabled = parse_switch(key, value);
  } else if (key == "head") {
    if (value == "moe") {
      config.head = HeadKind::kMoE;
    } else if (value == "mlp") {
      config.head = HeadKind::kMlp;
    } else {
      throw ConfigError("ablation head expects moe or mlp, got '" + value + "'");
    }
  } else if (key == "dense") {
    if (value == "dense" || value == "on") {
      config.fusion_mode = FusionMode::kDense;
    } else if (value == "concat" || value == "off") {
      config.fusion_mode = FusionMode::kConcat;
    } else {
      throw ConfigError("ablation dense expects dense or concat, got '" + value + "'");
    }
  } else {
    throw ConfigError("unknown ablation key '" + key + "' (expected cnn, mamba, e1, e2, head, dense)");
  }
}

json ablation_record(const ModelConfig& c) {
  return json{{"cnn", c.cnn_enabled},
              {"mamba", c.mamba_enabled},
              {"e1", c.e1_enabled},
              {"e2", c.e2_enabled},
              {"head", c.head == HeadKind::kMoE ? "moe" : "mlp"},
              {"dense", c.fusion_mode == FusionMode::kDense ? "dense" : "concat"}};
}

std::uint64_t config_hash(const ModelConfig& config) {
  const std::string text = json(config).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"image_size", c.image_size},
           {"num_classes", c.num_classes},
           {"cnn", {{"widths", c.cnn.widths}, {"blocks", c.cnn.blocks}, {"taps", c.cnn.taps}}},
           {"mamba",
            {{"patch", c.mamba.patch},
             {"embed_dim", c.mamba.embed_dim},
             {"depth", c.mamba.depth},
             {"state_size", c.mamba.state_size},
             {"expand", c.mamba.expand},
             {"conv_kernel", c.mamba.conv_kernel},
             {"taps", c.mamba.taps}}},
           {"fusion",
            {{"width", c.fusion.width},
             {"bottleneck_ratio", c.fusion.bottleneck_ratio},
             {"attention_ratio", c.fusion.attention_ratio},
             {"spatial_kernel", c.fusion.spatial_kernel}}},
           {"moe",
            {{"num_experts", c.moe.num_experts},
             {"top_k", c.moe.top_k},
             {"num_shared", c.moe.num_shared},
             {"alpha", c.moe.alpha},
             {"hidden_mult", c.moe.hidden_mult}}},
           {"ablation", ablation_record(c)}};
}

namespace {

template <typename V>
void read_opt(const json& j, const char* key, V& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void from_json(const json& j, ModelConfig& c) {
  try {
    read_opt(j, "image_size", c.image_size);
    read_opt(j, "num_classes", c.num_classes);
    if (j.contains("cnn")) {
      const auto& s = j.at("cnn");
      read_opt(s, "widths", c.cnn.widths);
      read_opt(s, "blocks", c.cnn.blocks);
      read_opt(s, "taps", c.cnn.taps);
    }
    if (j.contains("mamba")) {
      const auto& s = j.at("mamba");
      read_opt(s, "patch", c.mamba.patch);
      read_opt(s, "embed_dim", c.mamba.embed_dim);
      read_opt(s, "depth", c.mamba.depth);
      read_opt(s, "state_size", c.mamba.state_size);
      read_opt(s, "expand", c.mamba.expand);
      read_opt(s, "conv_kernel", c.mamba.conv_kernel);
      read_opt(s, "taps", c.mamba.taps);
    }
    if (j.contains("fusion")) {
      const auto& s = j.at("fusion");
      read_opt(s, "width", c.fusion.width);
      read_opt(s, "bottleneck_ratio", c.fusion.bottleneck_ratio);
      read_opt(s, "attention_ratio", c.fusion.attention_ratio);
      read_opt(s, "spatial_kernel", c.fusion.spatial_kernel);
    }
    if (j.contains("moe")) {
      const auto& s = j.at("moe");
      read_opt(s, "num_experts", c.moe.num_experts);
      read_opt(s, "top_k", c.moe.top_k);
      read_opt(s, "num_shared", c.moe.num_shared);
      read_opt(s, "alpha", c.moe.alpha);
      read_opt(s, "hidden_mult", c.moe.hidden_mult);
    }
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      read_opt(a, "cnn", c.cnn_enabled);
      read_opt(a, "mamba", c.mamba_enabled);
      read_opt(a, "e1", c.e1_enabled);
      read_opt(a, "e2", c.e2_enabled);
      if (a.contains("head")) apply_ablation(c, "head=" + a.at("head").get<std::string>());
      if (a.contains("dense")) apply_ablation(c, "dense=" + a.at("dense").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

void TrainConfig::validate() const {
  if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("label smoothing must lie in [0, 1)");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ConfigError("warmup fraction must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (lr_max <= 0) throw ConfigError("lr_max must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be >= 0");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr_max", c.lr_max},
           {"lr_min", c.lr_min},
           {"weight_decay", c.weight_decay},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"warmup_fraction", c.warmup_fraction},
           {"label_smoothing", c.label_smoothing},
           {"augment", c.augment},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  try {
    read_opt(j, "lr_max", c.lr_max);
    read_opt(j, "lr_min", c.lr_min);
    read_opt(j, "weight_decay", c.weight_decay);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "warmup_fraction", c.warmup_fraction);
    read_opt(j, "label_smoothing", c.label_smoothing);
    read_opt(j, "augment", c.augment);
    read_opt(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
}

}  // namespace afm
