#pragma once

#include <filesystem>

#include "breaknet/model.hpp"
#include "json.hpp"

namespace breaknet {

// A checkpoint is a JSON manifest plus one blob next to it (same stem, ".bin")
// holding every parameter and buffer as consecutive raw-tensor records.
//
//   {"format": "breaknet-checkpoint", "version": 1, "config": {...},
//    "blob": "best.bin", "tensors": [{"name", "kind", "shape", "offset"}...],
//    "extra": {...}}

template <typename T>
void save_checkpoint(const std::filesystem::path& manifest, const BreakNet<T>& net,
                     const nlohmann::json& extra = nlohmann::json::object());

/// Rebuilds the model from the stored config and fills in every tensor.
/// Throws IoError on a missing or malformed file, or a name/shape mismatch.
template <typename T>
BreakNet<T> load_checkpoint(const std::filesystem::path& manifest);

/// Copies stored tensors into an existing model with the same config.
template <typename T>
void load_checkpoint_into(const std::filesystem::path& manifest, BreakNet<T>& net);

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& manifest);

}  // namespace breaknet
