#include "breaknet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace breaknet {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }
int uniform_int(std::mt19937_64& rng, int lo, int hi) {  // inclusive
  if (hi <= lo) return lo;
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr double kDefaultDepthFractions[kNumBoundaries] = {0.22, 0.30, 0.40, 0.48, 0.55, 0.70, 0.76, 0.82};
constexpr double kMinGap = 2.0;

std::vector<Harmonic> draw_harmonics(std::mt19937_64& rng, int count, double max_amplitude, int max_cycles) {
  std::vector<Harmonic> hs;
  if (count <= 0 || max_amplitude <= 0.0) return hs;
  std::vector<double> weights(static_cast<std::size_t>(count));
  double total = 0.0;
  for (auto& w : weights) {
    w = uniform(rng, 0.2, 1.0);
    total += w;
  }
  const double budget = max_amplitude * uniform(rng, 0.5, 1.0);
  for (int h = 0; h < count; ++h) {
    Harmonic hm;
    hm.amplitude = budget * weights[h] / total;
    hm.cycles = uniform_int(rng, 1, max_cycles);
    hm.phase = uniform(rng, 0.0, kTwoPi);
    hs.push_back(hm);
  }
  return hs;
}

double eval_harmonics(const std::vector<Harmonic>& hs, double x, int width) {
  double s = 0.0;
  for (const auto& h : hs) s += h.amplitude * std::sin(kTwoPi * h.cycles * x / width + h.phase);
  return s;
}

}  // namespace

std::string_view regime_name(ShadowRegime r) {
  switch (r) {
    case ShadowRegime::None: return "none";
    case ShadowRegime::Normal: return "normal";
    case ShadowRegime::MultipleClose: return "multiple_close";
    case ShadowRegime::Ultrawide: return "ultrawide";
  }
  return "none";
}

ShadowRegime parse_regime(std::string_view name) {
  if (name == "none") return ShadowRegime::None;
  if (name == "normal") return ShadowRegime::Normal;
  if (name == "multiple_close") return ShadowRegime::MultipleClose;
  if (name == "ultrawide") return ShadowRegime::Ultrawide;
  throw std::invalid_argument("unknown shadow regime '" + std::string(name) +
                              "' (expected none, normal, multiple_close or ultrawide)");
}

std::vector<double> SynthSpec::resolved_base_depths() const {
  if (!base_depths.empty()) return base_depths;
  std::vector<double> d(kNumBoundaries);
  for (int b = 0; b < kNumBoundaries; ++b) d[b] = kDefaultDepthFractions[b] * height;
  return d;
}

void SynthSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("synth spec: " + field + ": " + msg);
  };
  if (height < 16 || width < 4) fail("height/width", "image must be at least 16 x 4 pixels");
  if (num_layers != kNumBoundaries - 1) fail("num_layers", "only 7 layers (8 boundaries) are supported");
  if (!base_depths.empty() && static_cast<int>(base_depths.size()) != kNumBoundaries) {
    fail("base_depths", "must list exactly 8 depths");
  }
  if (harmonics < 0) fail("harmonics", "must be >= 0");
  if (max_amplitude < 0.0) fail("max_amplitude", "must be >= 0");
  if (thickness_amplitude < 0.0) fail("thickness_amplitude", "must be >= 0");
  if (max_cycles < 1) fail("max_cycles", "must be >= 1");
  if (static_cast<int>(intensities.size()) != kNumClasses) fail("intensities", "must list 9 class means");
  for (std::size_t i = 0; i < intensities.size(); ++i) {
    if (intensities[i] < 0.0 || intensities[i] > 1.0) fail("intensities", "values must lie in [0, 1]");
    if (i > 0 && std::abs(intensities[i] - intensities[i - 1]) < 0.1 - 1e-12) {
      fail("intensities", "adjacent layer means must differ by at least 0.1 (classes " + std::to_string(i - 1) +
                              " and " + std::to_string(i) + ")");
    }
  }
  if (noise_std < 0.0) fail("noise_std", "must be >= 0");
  if (!(attenuation > 0.0 && attenuation <= 1.0)) fail("attenuation", "must lie in (0, 1]");
  if (shadow_start_boundary < 1 || shadow_start_boundary > kNumBoundaries) {
    fail("shadow_start_boundary", "must be in [1, 8]");
  }
  if (regime != ShadowRegime::None) {
    if (shadow_count < 1) fail("shadow_count", "must be >= 1");
    if (shadow_min_width < 1.0) fail("shadow_min_width", "widths must be >= 1 px");
    if (shadow_max_width < shadow_min_width) fail("shadow_max_width", "must be >= shadow_min_width");
    if (regime == ShadowRegime::MultipleClose && shadow_count < 2) {
      fail("shadow_count", "multiple_close needs at least 2 shadows");
    }
    if (regime == ShadowRegime::MultipleClose) {
      // worst case: max widths with gaps just under 2x width
      const double span = shadow_count * shadow_max_width + (shadow_count - 1) * (2.0 * shadow_max_width - 1.0);
      if (span > width) fail("shadow_count", "multiple_close shadows do not fit in the image width");
    }
    if (regime == ShadowRegime::Normal && shadow_count * shadow_max_width > width) {
      fail("shadow_count", "shadows do not fit in the image width");
    }
  }
  if (!(axial_pitch_um > 0.0) || !(lateral_pitch_um > 0.0)) fail("pitch", "pixel pitches must be positive");
  if (drift_px < 0.0) fail("drift_px", "must be >= 0");

  const auto base = resolved_base_depths();
  for (int b = 0; b + 1 < kNumBoundaries; ++b) {
    if (base[b + 1] - base[b] - 2.0 * thickness_amplitude < kMinGap) {
      fail("thickness_amplitude", "boundaries " + std::to_string(b + 1) + " and " + std::to_string(b + 2) +
                                      " could come closer than 2 px (base gap " +
                                      std::to_string(base[b + 1] - base[b]) + ")");
    }
  }
  const double reach = max_amplitude + thickness_amplitude;
  if (base.front() - reach < 1.0 || base.back() + reach > height - 2.0) {
    fail("max_amplitude", "boundary excursion leaves the image");
  }
}

nlohmann::json to_json(const SynthSpec& s) {
  return {{"height", s.height},
          {"width", s.width},
          {"num_layers", s.num_layers},
          {"base_depths", s.base_depths},
          {"harmonics", s.harmonics},
          {"max_amplitude", s.max_amplitude},
          {"thickness_amplitude", s.thickness_amplitude},
          {"max_cycles", s.max_cycles},
          {"intensities", s.intensities},
          {"noise_std", s.noise_std},
          {"regime", regime_name(s.regime)},
          {"shadow_count", s.shadow_count},
          {"shadow_min_width", s.shadow_min_width},
          {"shadow_max_width", s.shadow_max_width},
          {"attenuation", s.attenuation},
          {"shadow_start_boundary", s.shadow_start_boundary},
          {"axial_pitch_um", s.axial_pitch_um},
          {"lateral_pitch_um", s.lateral_pitch_um},
          {"drift_px", s.drift_px},
          {"axial_drift_px", s.axial_drift_px},
          {"seed", s.seed}};
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("synth spec: expected a JSON object");
  SynthSpec s;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "height") s.height = v.get<int>();
      else if (key == "width") s.width = v.get<int>();
      else if (key == "num_layers") s.num_layers = v.get<int>();
      else if (key == "base_depths") s.base_depths = v.get<std::vector<double>>();
      else if (key == "harmonics") s.harmonics = v.get<int>();
      else if (key == "max_amplitude") s.max_amplitude = v.get<double>();
      else if (key == "thickness_amplitude") s.thickness_amplitude = v.get<double>();
      else if (key == "max_cycles") s.max_cycles = v.get<int>();
      else if (key == "intensities") s.intensities = v.get<std::vector<double>>();
      else if (key == "noise_std") s.noise_std = v.get<double>();
      else if (key == "regime") s.regime = parse_regime(v.get<std::string>());
      else if (key == "shadow_count") s.shadow_count = v.get<int>();
      else if (key == "shadow_min_width") s.shadow_min_width = v.get<double>();
      else if (key == "shadow_max_width") s.shadow_max_width = v.get<double>();
      else if (key == "attenuation") s.attenuation = v.get<double>();
      else if (key == "shadow_start_boundary") s.shadow_start_boundary = v.get<int>();
      else if (key == "axial_pitch_um") s.axial_pitch_um = v.get<double>();
      else if (key == "lateral_pitch_um") s.lateral_pitch_um = v.get<double>();
      else if (key == "drift_px") s.drift_px = v.get<double>();
      else if (key == "axial_drift_px") s.axial_drift_px = v.get<double>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else throw std::invalid_argument("unknown field");
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("synth spec: " + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("synth spec: " + key + ": " + e.what());
    }
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Geometry

double BoundaryModel::row(int boundary, double x, int frame) const {
  const double xs = x + frame * shift_per_frame;
  return base[boundary] + eval_harmonics(common, xs, width) + eval_harmonics(own[boundary], xs, width) +
         frame * axial_drift;
}

BoundaryProfile BoundaryModel::profile(int frame, double axial_pitch_um) const {
  BoundaryProfile p(static_cast<int>(base.size()), width, axial_pitch_um);
  for (int b = 0; b < p.num_boundaries; ++b)
    for (int x = 0; x < width; ++x) p.at(b, x) = row(b, x, frame);
  return p;
}

BoundaryModel gen_boundary_model(const SynthSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  BoundaryModel m;
  m.width = spec.width;
  m.base = spec.resolved_base_depths();
  m.common = draw_harmonics(rng, spec.harmonics, spec.max_amplitude, spec.max_cycles);
  for (int b = 0; b < kNumBoundaries; ++b) {
    m.own.push_back(draw_harmonics(rng, spec.harmonics, spec.thickness_amplitude, spec.max_cycles));
  }
  m.axial_drift = spec.axial_drift_px;
  return m;
}

namespace {
void check_ordering(const BoundaryProfile& p) {
  for (int x = 0; x < p.width; ++x)
    for (int b = 0; b + 1 < p.num_boundaries; ++b) {
      if (!(p.at(b + 1, x) - p.at(b, x) >= kMinGap - 1e-9)) {
        throw std::logic_error("generated boundaries " + std::to_string(b + 1) + "/" + std::to_string(b + 2) +
                               " closer than 2 px at column " + std::to_string(x));
      }
    }
}
}  // namespace

BoundaryProfile gen_boundaries(const SynthSpec& spec, std::mt19937_64& rng) {
  const BoundaryModel m = gen_boundary_model(spec, rng);
  BoundaryProfile p = m.profile(0, spec.axial_pitch_um);
  check_ordering(p);
  return p;
}

LabelMap rasterize_labels(const BoundaryProfile& boundaries, int height) {
  LabelMap labels(height, boundaries.width);
  for (int x = 0; x < boundaries.width; ++x) {
    std::vector<long> starts(static_cast<std::size_t>(boundaries.num_boundaries));
    for (int b = 0; b < boundaries.num_boundaries; ++b) starts[b] = std::lround(boundaries.at(b, x));
    for (int r = 0; r < height; ++r) {
      int cls = 0;
      for (int b = 0; b < boundaries.num_boundaries; ++b) cls += starts[b] <= r ? 1 : 0;
      labels.at(r, x) = static_cast<std::uint8_t>(cls);
    }
  }
  return labels;
}

std::vector<float> render_bscan(const LabelMap& labels, const SynthSpec& spec, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<float> image(labels.data.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    double v = spec.intensities[labels.data[i]];
    if (spec.noise_std > 0.0) v += spec.noise_std * noise(rng);
    image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return image;
}

std::vector<std::pair<int, int>> shadow_intervals(const SynthSpec& spec, std::mt19937_64& rng) {
  std::vector<std::pair<int, int>> out;
  const int W = spec.width;
  auto draw_width = [&]() {
    return std::max(1, static_cast<int>(std::lround(uniform(rng, spec.shadow_min_width, spec.shadow_max_width))));
  };
  switch (spec.regime) {
    case ShadowRegime::None:
      break;
    case ShadowRegime::Normal: {
      for (int s = 0; s < spec.shadow_count; ++s) {
        const int w = draw_width();
        for (int attempt = 0; attempt < 100; ++attempt) {
          const int x0 = uniform_int(rng, 0, W - w);
          const bool overlaps = std::any_of(out.begin(), out.end(), [&](const auto& iv) {
            return x0 < iv.second && iv.first < x0 + w;
          });
          if (!overlaps) {
            out.emplace_back(x0, x0 + w);
            break;
          }
        }
      }
      break;
    }
    case ShadowRegime::MultipleClose: {
      std::vector<int> widths, gaps;
      int span = 0;
      for (int s = 0; s < spec.shadow_count; ++s) {
        widths.push_back(draw_width());
        span += widths.back();
      }
      for (int s = 0; s + 1 < spec.shadow_count; ++s) {
        const int narrow = std::min(widths[s], widths[s + 1]);
        gaps.push_back(uniform_int(rng, 1, std::max(1, 2 * narrow - 1)));
        span += gaps.back();
      }
      int x = uniform_int(rng, 0, std::max(0, W - span));
      for (int s = 0; s < spec.shadow_count; ++s) {
        out.emplace_back(x, std::min(W, x + widths[s]));
        if (s + 1 < spec.shadow_count) x += widths[s] + gaps[s];
      }
      break;
    }
    case ShadowRegime::Ultrawide: {
      const int lo = static_cast<int>(std::ceil(0.25 * W));
      const int hi = std::max(lo, static_cast<int>(std::floor(0.40 * W)));
      const int w = uniform_int(rng, lo, hi);
      const int x0 = uniform_int(rng, 0, W - w);
      out.emplace_back(x0, x0 + w);
      break;
    }
  }
  return out;
}

ShadowMask apply_shadows(std::vector<float>& image, const BoundaryProfile& boundaries, const SynthSpec& spec,
                         std::mt19937_64& rng) {
  const int W = spec.width, H = spec.height;
  ShadowMask mask;
  mask.shadowed.assign(static_cast<std::size_t>(W), 0);
  mask.start_row.assign(static_cast<std::size_t>(W), -1);
  const float alpha = static_cast<float>(spec.attenuation);
  for (const auto& [x0, x1] : shadow_intervals(spec, rng)) {
    for (int x = x0; x < x1; ++x) {
      const int start = static_cast<int>(std::lround(boundaries.at(spec.shadow_start_boundary - 1, x)));
      mask.shadowed[x] = 1;
      mask.start_row[x] = std::clamp(start, 0, H);
    }
  }
  if (alpha == 1.0f) return mask;
  for (int x = 0; x < W; ++x) {
    if (!mask.shadowed[x]) continue;
    for (int r = mask.start_row[x]; r < H; ++r) image[static_cast<std::size_t>(r) * W + x] *= alpha;
  }
  return mask;
}

namespace {
BScanSample make_sample(const SynthSpec& spec, const BoundaryProfile& boundaries, std::mt19937_64& noise_rng,
                        std::mt19937_64& shadow_rng) {
  BScanSample s;
  s.boundaries = boundaries;
  s.labels = rasterize_labels(boundaries, spec.height);
  s.image = render_bscan(s.labels, spec, noise_rng);
  s.axial_pitch_um = spec.axial_pitch_um;
  s.lateral_pitch_um = spec.lateral_pitch_um;
  if (spec.regime != ShadowRegime::None) {
    s.shadow = apply_shadows(s.image, boundaries, spec, shadow_rng);
  } else {
    s.shadow.shadowed.assign(static_cast<std::size_t>(spec.width), 0);
    s.shadow.start_row.assign(static_cast<std::size_t>(spec.width), -1);
  }
  return s;
}
}  // namespace

BScanSample gen_sample(const SynthSpec& spec) {
  std::mt19937_64 geom(mix_seed(spec.seed, 0)), noise(mix_seed(spec.seed, 1)), shadow(mix_seed(spec.seed, 2));
  const BoundaryProfile b = gen_boundaries(spec, geom);
  return make_sample(spec, b, noise, shadow);
}

double mean_frame_displacement(const BoundaryModel& model, int frame) {
  double total = 0.0;
  const int B = static_cast<int>(model.base.size());
  for (int b = 0; b < B; ++b)
    for (int x = 0; x < model.width; ++x) total += std::abs(model.row(b, x, frame + 1) - model.row(b, x, frame));
  return total / (static_cast<double>(B) * model.width);
}

Volume gen_volume(const SynthSpec& spec, int n_frames) {
  if (n_frames < 1) throw std::invalid_argument("gen_volume: n_frames must be >= 1");
  Volume vol;
  vol.spec = spec;
  std::mt19937_64 geom(mix_seed(spec.seed, 0)), shadow(mix_seed(spec.seed, 2));
  vol.geometry = gen_boundary_model(spec, geom);

  if (spec.drift_px > 0.0) {
    BoundaryModel probe = vol.geometry;
    probe.axial_drift = 0.0;
    auto displacement = [&](double s) {
      probe.shift_per_frame = s;
      return mean_frame_displacement(probe, 0);
    };
    int fastest = 1;
    for (const auto& h : probe.common) fastest = std::max(fastest, h.cycles);
    for (const auto& own : probe.own)
      for (const auto& h : own) fastest = std::max(fastest, h.cycles);
    double lo = 0.0, hi = 0.5 * spec.width / fastest;
    if (displacement(hi) < spec.drift_px) {
      throw std::invalid_argument("synth spec: drift_px: " + std::to_string(spec.drift_px) +
                                  " px per frame is unreachable with the configured harmonics");
    }
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (displacement(mid) < spec.drift_px ? lo : hi) = mid;
    }
    vol.geometry.shift_per_frame = 0.5 * (lo + hi);
  }

  const double total_axial = std::abs(spec.axial_drift_px) * (n_frames - 1);
  const auto base = spec.resolved_base_depths();
  const double reach = spec.max_amplitude + spec.thickness_amplitude;
  if (base.front() - reach - total_axial < 1.0 || base.back() + reach + total_axial > spec.height - 2.0) {
    throw std::invalid_argument("synth spec: axial_drift_px: boundaries leave the image within " +
                                std::to_string(n_frames) + " frames");
  }

  // Vessels persist through neighbouring B-scans: shadow columns are drawn once.
  std::mt19937_64 shadow_frame_rng = shadow;
  for (int f = 0; f < n_frames; ++f) {
    // frame 0 shares the single-sample noise stream
    std::mt19937_64 noise(mix_seed(spec.seed, f == 0 ? 1 : 1000 + static_cast<std::uint64_t>(f)));
    std::mt19937_64 sh = shadow_frame_rng;
    const BoundaryProfile b = vol.geometry.profile(f, spec.axial_pitch_um);
    check_ordering(b);
    vol.frames.push_back(make_sample(spec, b, noise, sh));
  }
  return vol;
}

DegradedLabels degrade_ground_truth(const Volume& volume, int keyframe_stride) {
  if (keyframe_stride < 2) throw std::invalid_argument("degrade_ground_truth: stride must be >= 2");
  const int F = static_cast<int>(volume.frames.size());
  DegradedLabels out;
  for (int f = 0; f < F; f += keyframe_stride) out.keyframes.push_back(f);
  for (int f = 0; f < F; ++f) {
    const auto& truth = volume.frames[f].boundaries;
    const int k0 = (f / keyframe_stride) * keyframe_stride;
    const int k1 = k0 + keyframe_stride;
    BoundaryProfile deg = volume.frames[k0].boundaries;
    if (f != k0 && k1 < F) {
      const double t = static_cast<double>(f - k0) / keyframe_stride;
      const auto& a = volume.frames[k0].boundaries;
      const auto& b = volume.frames[k1].boundaries;
      for (std::size_t i = 0; i < deg.rows.size(); ++i) deg.rows[i] = (1.0 - t) * a.rows[i] + t * b.rows[i];
    }
    std::vector<double> disp(deg.rows.size());
    for (std::size_t i = 0; i < disp.size(); ++i) {
      disp[i] = deg.rows[i] - truth.rows[i];
      out.max_abs_displacement = std::max(out.max_abs_displacement, std::abs(disp[i]));
    }
    out.labels.push_back(rasterize_labels(deg, volume.frames[f].height()));
    out.boundaries.push_back(std::move(deg));
    out.displacement.push_back(std::move(disp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

BScanSample flip_horizontal(const BScanSample& s) {
  BScanSample o = s;
  const int H = s.height(), W = s.width();
  for (int r = 0; r < H; ++r)
    for (int x = 0; x < W; ++x) {
      o.image[static_cast<std::size_t>(r) * W + x] = s.image[static_cast<std::size_t>(r) * W + (W - 1 - x)];
      o.labels.at(r, x) = s.labels.at(r, W - 1 - x);
    }
  for (int b = 0; b < s.boundaries.num_boundaries; ++b)
    for (int x = 0; x < s.boundaries.width; ++x) o.boundaries.at(b, x) = s.boundaries.at(b, W - 1 - x);
  if (!s.shadow.shadowed.empty()) {
    std::reverse(o.shadow.shadowed.begin(), o.shadow.shadowed.end());
    std::reverse(o.shadow.start_row.begin(), o.shadow.start_row.end());
  }
  return o;
}

BScanSample flip_vertical(const BScanSample& s) {
  BScanSample o = s;
  const int H = s.height(), W = s.width();
  for (int r = 0; r < H; ++r)
    for (int x = 0; x < W; ++x) {
      o.image[static_cast<std::size_t>(r) * W + x] = s.image[static_cast<std::size_t>(H - 1 - r) * W + x];
      o.labels.at(r, x) = s.labels.at(H - 1 - r, x);
    }
  for (auto& v : o.boundaries.rows) v = (H - 1) - v;
  return o;
}

BScanSample transpose(const BScanSample& s) {
  const int H = s.height(), W = s.width();
  BScanSample o = s;
  o.labels = LabelMap(W, H);
  o.image.assign(s.image.size(), 0.0f);
  for (int r = 0; r < H; ++r)
    for (int x = 0; x < W; ++x) {
      o.image[static_cast<std::size_t>(x) * H + r] = s.image[static_cast<std::size_t>(r) * W + x];
      o.labels.at(x, r) = s.labels.at(r, x);
    }
  o.boundaries = BoundaryProfile(s.boundaries.num_boundaries, H, s.axial_pitch_um);
  o.shadow = ShadowMask{};
  std::swap(o.axial_pitch_um, o.lateral_pitch_um);
  return o;
}

BScanSample augment(const BScanSample& sample, std::mt19937_64& rng, const AugmentToggles& toggles) {
  BScanSample s = sample;
  // One draw per toggle, taken unconditionally, keeps the stream aligned.
  const bool do_t = uniform01(rng) < 0.5;
  const bool do_v = uniform01(rng) < 0.5;
  const bool do_h = uniform01(rng) < 0.5;
  const bool do_c = uniform01(rng) < 0.5;
  const double gain = uniform(rng, 0.7, 1.3);
  if (toggles.transpose && do_t && s.height() == s.width()) s = transpose(s);
  if (toggles.vertical_flip && do_v) s = flip_vertical(s);
  if (toggles.horizontal_flip && do_h) s = flip_horizontal(s);
  if (toggles.contrast && do_c) {
    for (auto& v : s.image) v = static_cast<float>(std::clamp(gain * v, 0.0, 1.0));
  }
  return s;
}

}  // namespace breaknet
