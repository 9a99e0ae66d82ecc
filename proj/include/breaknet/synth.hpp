#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "breaknet/geometry.hpp"
#include "json.hpp"

namespace breaknet {

/// Vessel-shadow difficulty regime.
enum class ShadowRegime { None, Normal, MultipleClose, Ultrawide };

std::string_view regime_name(ShadowRegime r);
ShadowRegime parse_regime(std::string_view name);

/// Parameters of the layered-retina generator. Lengths are in pixels.
struct SynthSpec {
  int height = 128;
  int width = 128;
  int num_layers = 7;

  // Boundary geometry: base depth per boundary (empty = default fractions of
  // the height), a curvature term shared by every boundary and a smaller
  // per-boundary thickness modulation. Harmonics complete whole cycles over
  // the image width.
  std::vector<double> base_depths;
  int harmonics = 3;
  double max_amplitude = 8.0;
  double thickness_amplitude = 1.0;
  int max_cycles = 2;

  // Mean intensity per class, top background first.
  std::vector<double> intensities = {0.05, 0.85, 0.55, 0.30, 0.65, 0.20, 0.80, 0.95, 0.40};
  double noise_std = 0.08;

  ShadowRegime regime = ShadowRegime::None;
  int shadow_count = 1;
  double shadow_min_width = 4.0;
  double shadow_max_width = 10.0;
  double attenuation = 0.3;  // alpha in (0, 1]
  int shadow_start_boundary = 1;  // 1-based; rows at and below it are attenuated

  double axial_pitch_um = 2.0;
  double lateral_pitch_um = 2.0;

  // Volumes: target mean frame-to-frame boundary motion produced by advancing
  // the harmonic phases (a lateral translation of the periodic geometry), plus
  // an optional linear axial drift per frame.
  double drift_px = 0.0;
  double axial_drift_px = 0.0;

  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  std::vector<double> resolved_base_depths() const;
};

nlohmann::json to_json(const SynthSpec& spec);
/// Fields absent from `j` keep their defaults; unknown fields are rejected.
SynthSpec synth_spec_from_json(const nlohmann::json& j);

struct Harmonic {
  double amplitude = 0.0;
  int cycles = 1;  // whole periods across the width
  double phase = 0.0;
};

/// Closed-form boundary geometry: for boundary b, column x and frame f,
///   row = base[b] + sum_common A sin(2 pi m (x + f*shift) / W + phi)
///               + sum_b     A sin(2 pi m (x + f*shift) / W + phi) + f*axial_drift.
struct BoundaryModel {
  int width = 0;
  std::vector<double> base;
  std::vector<Harmonic> common;
  std::vector<std::vector<Harmonic>> own;  // per boundary
  double shift_per_frame = 0.0;
  double axial_drift = 0.0;

  double row(int boundary, double x, int frame = 0) const;
  BoundaryProfile profile(int frame, double axial_pitch_um) const;
};

struct ShadowMask {
  std::vector<std::uint8_t> shadowed;  // per column
  std::vector<int> start_row;          // per column, -1 when unshadowed
};

struct BScanSample {
  std::vector<float> image;  // H x W, values in [0, 1]
  LabelMap labels;
  BoundaryProfile boundaries;
  double axial_pitch_um = 2.0;
  double lateral_pitch_um = 2.0;
  ShadowMask shadow;

  int height() const { return labels.height; }
  int width() const { return labels.width; }
};

struct Volume {
  SynthSpec spec;
  BoundaryModel geometry;
  std::vector<BScanSample> frames;
};

/// Samples the closed-form geometry for a spec. Throws std::invalid_argument if
/// the amplitudes could make boundaries cross or leave the image.
BoundaryModel gen_boundary_model(const SynthSpec& spec, std::mt19937_64& rng);

/// Boundary curves of a single frame.
BoundaryProfile gen_boundaries(const SynthSpec& spec, std::mt19937_64& rng);

/// Pixel row r gets the number of boundaries whose rounded row is <= r.
LabelMap rasterize_labels(const BoundaryProfile& boundaries, int height);

/// Layer mean plus Gaussian speckle, clamped to [0, 1].
std::vector<float> render_bscan(const LabelMap& labels, const SynthSpec& spec, std::mt19937_64& rng);

/// Multiplies rows at and below the start boundary by the attenuation in the
/// regime's shadow columns. Labels are never touched.
ShadowMask apply_shadows(std::vector<float>& image, const BoundaryProfile& boundaries, const SynthSpec& spec,
                         std::mt19937_64& rng);

/// Chooses shadow column intervals [begin, end) for the spec's regime.
std::vector<std::pair<int, int>> shadow_intervals(const SynthSpec& spec, std::mt19937_64& rng);

/// One complete sample, a pure function of (spec, spec.seed).
BScanSample gen_sample(const SynthSpec& spec);

/// A sequence of frames sharing one geometry that drifts between frames.
Volume gen_volume(const SynthSpec& spec, int n_frames);

/// Mean |row(f+1) - row(f)| over boundaries and columns.
double mean_frame_displacement(const BoundaryModel& model, int frame);

struct DegradedLabels {
  std::vector<int> keyframes;
  std::vector<BoundaryProfile> boundaries;    // per frame
  std::vector<LabelMap> labels;               // per frame
  std::vector<std::vector<double>> displacement;  // per frame, degraded - true (boundary-major)
  double max_abs_displacement = 0.0;
};

/// Keeps every stride-th frame exact and linearly interpolates boundaries per
/// column in between; frames after the last keyframe copy it.
DegradedLabels degrade_ground_truth(const Volume& volume, int keyframe_stride = 5);

struct AugmentToggles {
  bool transpose = true;
  bool vertical_flip = true;
  bool horizontal_flip = true;
  bool contrast = true;

  static AugmentToggles none() { return {false, false, false, false}; }
  bool operator==(const AugmentToggles&) const = default;
};

/// Applies each enabled augmentation with probability 0.5. Transpose only
/// happens on square samples and leaves no column-wise boundary profile, so
/// `boundaries` is cleared to all-absent in that case.
BScanSample augment(const BScanSample& sample, std::mt19937_64& rng, const AugmentToggles& toggles);

BScanSample flip_horizontal(const BScanSample& sample);
BScanSample flip_vertical(const BScanSample& sample);
BScanSample transpose(const BScanSample& sample);

}  // namespace breaknet
