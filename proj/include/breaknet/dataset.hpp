#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "breaknet/synth.hpp"

namespace breaknet {

// On-disk layout, one directory per volume:
//   meta.json                     spec, seed, pitches, per-frame shadow runs
//   frame_0000_image.bnt          f32 [H, W]
//   frame_0000_labels.bnt         f32 [H, W] class ids
//   frame_0000_boundaries.bnt     f64 [8, W]
//   frame_0000_labels_lq.bnt      degraded labels (only with --degrade)
//   frame_0000_boundaries_lq.bnt

struct Dataset {
  std::vector<BScanSample> scans;
  std::vector<LabelMap> degraded;  // empty, or one per scan
  std::vector<BoundaryProfile> degraded_boundaries;
  std::vector<std::string> sources;  // "<volume dir>/<frame>"
};

/// Shadow mask as runs of shadowed columns: [[begin, end, start_row...], ...].
nlohmann::json encode_shadow(const ShadowMask& mask);
ShadowMask decode_shadow(const nlohmann::json& runs, int width);

void write_volume(const std::filesystem::path& dir, const Volume& volume, const DegradedLabels* degraded = nullptr);

/// Loads one volume directory, or every volume directory below `root` in name
/// order. Throws IoError on missing or malformed files.
Dataset load_dataset(const std::filesystem::path& root);

/// Training labels replaced by the degraded ones. Throws IoError when the set
/// has none.
std::vector<BScanSample> with_degraded_labels(const Dataset& data);

/// FNV-1a over images and labels, as 16 hex digits.
std::string dataset_hash(const std::vector<BScanSample>& scans);

/// Independent single-frame samples cycling through `regimes`; sample i uses a
/// seed derived from (seed, i).
std::vector<BScanSample> gen_mixed_samples(const SynthSpec& base, int count, std::uint64_t seed,
                                           const std::vector<ShadowRegime>& regimes);

/// 8-bit binary PGM of an image in [0, 1]. Boundary rows of `overlay`, when
/// given, are drawn white.
void write_pgm(const std::filesystem::path& path, const std::vector<float>& image, int height, int width,
               const BoundaryProfile* overlay = nullptr);

}  // namespace breaknet
