#pragma once

#include <filesystem>
#include <memory>
#include <optional>

#include <nlohmann/json.hpp>

#include "afm/model.hpp"

namespace afm {

// Checkpoint directory layout:
//   manifest.json       config, toggles, and an index of named tensors
//   params/<name>.bin   one tensor dump per parameter or BN buffer

template <typename T>
void save_checkpoint(AfmNet<T>& model, const std::filesystem::path& dir, const nlohmann::json& extra = {});

nlohmann::json read_manifest(const std::filesystem::path& dir);

/// Rebuilds the model from the manifest config and loads every tensor.
/// When `requested` is given its ablation toggles must match the manifest.
/// Throws IntegrityError on missing/extra entries, shape mismatch, or corrupt blobs.
template <typename T>
std::unique_ptr<AfmNet<T>> load_checkpoint(const std::filesystem::path& dir,
                                           const std::optional<ModelConfig>& requested = std::nullopt);

/// Loads tensors into an existing model of matching configuration.
template <typename T>
void load_checkpoint_into(AfmNet<T>& model, const std::filesystem::path& dir);

}  // namespace afm
