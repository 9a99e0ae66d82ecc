#include <cmath>
#include <numbers>
#include <random>

#include "breaknet/metrics.hpp"
#include "breaknet/synth.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace breaknet;

namespace {

SynthSpec random_spec(std::mt19937_64& rng) {
  SynthSpec s;
  s.height = 48 + static_cast<int>(rng() % 113);
  s.width = 16 + static_cast<int>(rng() % 145);
  s.harmonics = static_cast<int>(rng() % 5);
  s.max_cycles = 1 + static_cast<int>(rng() % 3);
  const auto base = s.resolved_base_depths();
  double min_gap = 1e9;
  for (int b = 0; b + 1 < 8; ++b) min_gap = std::min(min_gap, base[b + 1] - base[b]);
  s.thickness_amplitude = test::uniform(rng, 0.0, std::min(1.5, (min_gap - 2.0) / 2.0));
  const double room = std::min(base.front() - 1.0, s.height - 2.0 - base.back()) - s.thickness_amplitude;
  s.max_amplitude = test::uniform(rng, 0.0, std::min(10.0, room));
  s.noise_std = test::uniform(rng, 0.0, 0.2);
  s.attenuation = test::uniform(rng, 0.05, 1.0);
  s.shadow_start_boundary = 1 + static_cast<int>(rng() % 8);
  s.regime = static_cast<ShadowRegime>(rng() % 4);
  if (s.regime == ShadowRegime::MultipleClose) {
    s.shadow_count = 2 + static_cast<int>(rng() % 2);
    const double wmax = std::floor((s.width + s.shadow_count - 1.0) / (3.0 * s.shadow_count - 2.0));
    s.shadow_max_width = test::uniform(rng, 1.0, wmax);
    s.shadow_min_width = test::uniform(rng, 1.0, s.shadow_max_width);
  } else if (s.regime == ShadowRegime::Normal) {
    s.shadow_count = 1 + static_cast<int>(rng() % 3);
    s.shadow_max_width = test::uniform(rng, 1.0, std::min(12.0, static_cast<double>(s.width) / s.shadow_count));
    s.shadow_min_width = test::uniform(rng, 1.0, s.shadow_max_width);
  }
  s.seed = rng();
  return s;
}

// Class of pixel (r, x) read straight off the boundary rows: rows above the
// first boundary are 0, rows between boundary j and j+1 are j.
std::uint8_t class_from_boundaries(const BoundaryProfile& b, int r, int x) {
  int cls = 0;
  for (int j = 0; j < b.num_boundaries; ++j)
    if (r >= std::floor(b.at(j, x) + 0.5)) cls = j + 1;
  return static_cast<std::uint8_t>(cls);
}

std::vector<std::uint8_t> mask_of(const LabelMap& m, int cls) {
  std::vector<std::uint8_t> out(m.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.data[i] == cls;
  return out;
}

}  // namespace

TEST_SUITE("synth") {
  TEST_CASE("zero harmonics give flat boundaries at the base depths") {
    SynthSpec s;
    s.harmonics = 0;
    s.thickness_amplitude = 0.0;
    std::mt19937_64 rng(1);
    const auto b = gen_boundaries(s, rng);
    const auto base = s.resolved_base_depths();
    for (int j = 0; j < 8; ++j)
      for (int x = 0; x < s.width; ++x) CHECK(b.at(j, x) == base[j]);
  }

  TEST_CASE("same seed gives identical curves and samples") {
    SynthSpec s;
    s.regime = ShadowRegime::Normal;
    s.seed = 77;
    std::mt19937_64 a(5), b(5);
    CHECK(gen_boundaries(s, a).rows == gen_boundaries(s, b).rows);
    const auto x = gen_sample(s), y = gen_sample(s);
    CHECK(x.image == y.image);
    CHECK(x.labels == y.labels);
    CHECK(x.shadow.shadowed == y.shadow.shadowed);
    s.seed = 78;
    CHECK(gen_sample(s).image != x.image);
  }

  TEST_CASE("flat boundaries rasterize to the expected runs") {
    BoundaryProfile b(8, 3, 1.0);
    for (int j = 0; j < 8; ++j)
      for (int x = 0; x < 3; ++x) b.at(j, x) = 10.0 * (j + 1);
    const auto labels = rasterize_labels(b, 100);
    for (int x = 0; x < 3; ++x) {
      std::vector<int> runs(9, 0);
      for (int r = 0; r < 100; ++r) ++runs[labels.at(r, x)];
      CHECK(runs == std::vector<int>{10, 10, 10, 10, 10, 10, 10, 10, 20});
    }
  }

  TEST_CASE("spec validation names the field") {
    SynthSpec s;
    s.intensities[3] = s.intensities[2] + 0.05;
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("intensities"), std::invalid_argument);
    s = SynthSpec{};
    s.attenuation = 0.0;
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("attenuation"), std::invalid_argument);
    s = SynthSpec{};
    s.max_amplitude = 40.0;
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("max_amplitude"), std::invalid_argument);
    s = SynthSpec{};
    s.thickness_amplitude = 6.0;
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("thickness_amplitude"), std::invalid_argument);
    s = SynthSpec{};
    s.regime = ShadowRegime::MultipleClose;
    s.shadow_count = 1;
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("shadow_count"), std::invalid_argument);
    CHECK_THROWS_AS(parse_regime("sideways"), std::invalid_argument);
  }

  TEST_CASE("spec JSON round trip and unknown fields") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 50; ++i) {
      const auto s = random_spec(rng);
      const auto j = to_json(s);
      CHECK(to_json(synth_spec_from_json(j)) == j);
    }
    CHECK_THROWS_AS(synth_spec_from_json({{"hieght", 4}}), std::invalid_argument);
    CHECK(synth_spec_from_json(nlohmann::json::object()).height == 128);
  }

  TEST_CASE("random specs: every sample satisfies the sample invariants") {
    std::mt19937_64 rng(3);
    int ordering = 0, labels_bad = 0, roundtrip = 0, immunity = 0, range = 0, shadow_bad = 0, determinism = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const SynthSpec s = random_spec(rng);
      const BScanSample smp = gen_sample(s);
      const int H = s.height, W = s.width;
      for (int x = 0; x < W; ++x)
        for (int j = 0; j + 1 < 8; ++j) ordering += smp.boundaries.at(j + 1, x) - smp.boundaries.at(j, x) < 2.0 - 1e-9;
      for (int r = 0; r < H; ++r)
        for (int x = 0; x < W; ++x) labels_bad += smp.labels.at(r, x) != class_from_boundaries(smp.boundaries, r, x);
      const auto ext = label_to_boundaries(smp.labels);
      for (int j = 0; j < 8; ++j)
        for (int x = 0; x < W; ++x)
          roundtrip += !(std::abs(ext.profile.at(j, x) - smp.boundaries.at(j, x)) <= 0.5);
      for (float v : smp.image) range += !(v >= 0.0f && v <= 1.0f);

      SynthSpec clean_spec = s;
      clean_spec.regime = ShadowRegime::None;
      const BScanSample clean = gen_sample(clean_spec);
      immunity += clean.labels != smp.labels || clean.boundaries.rows != smp.boundaries.rows;
      for (int x = 0; x < W; ++x) {
        const int start = smp.shadow.shadowed[x] ? static_cast<int>(std::lround(smp.boundaries.at(s.shadow_start_boundary - 1, x))) : H;
        for (int r = 0; r < H; ++r) {
          const float c = clean.image[static_cast<std::size_t>(r) * W + x];
          const float expect = (r >= start && s.attenuation != 1.0) ? c * static_cast<float>(s.attenuation) : c;
          shadow_bad += smp.image[static_cast<std::size_t>(r) * W + x] != expect;
        }
      }
      if (trial % 50 == 0) determinism += gen_sample(s).image != smp.image;
    }
    CHECK(ordering == 0);
    CHECK(labels_bad == 0);
    CHECK(roundtrip == 0);
    CHECK(range == 0);
    CHECK(immunity == 0);
    CHECK(shadow_bad == 0);
    CHECK(determinism == 0);
  }

  TEST_CASE("every column holds all nine classes") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 100; ++trial) {
      const auto smp = gen_sample(random_spec(rng));
      for (int x = 0; x < smp.width(); ++x) {
        std::vector<int> seen(9, 0);
        for (int r = 0; r < smp.height(); ++r) seen[smp.labels.at(r, x)] = 1;
        CHECK(std::count(seen.begin(), seen.end(), 1) == 9);
      }
    }
  }

  TEST_CASE("noise-free rendering is piecewise constant") {
    SynthSpec s;
    s.noise_std = 0.0;
    const auto smp = gen_sample(s);
    for (std::size_t i = 0; i < smp.image.size(); ++i)
      CHECK(smp.image[i] == static_cast<float>(s.intensities[smp.labels.data[i]]));
  }

  TEST_CASE("per-layer intensity statistics") {
    SynthSpec s;
    s.height = s.width = 256;
    s.intensities = {0.3, 0.4, 0.5, 0.6, 0.7, 0.6, 0.5, 0.4, 0.3};
    s.noise_std = 0.05;
    const auto smp = gen_sample(s);
    for (int c = 0; c < 9; ++c) {
      double sum = 0, sq = 0;
      int n = 0;
      for (std::size_t i = 0; i < smp.image.size(); ++i)
        if (smp.labels.data[i] == c) {
          sum += smp.image[i];
          sq += smp.image[i] * static_cast<double>(smp.image[i]);
          ++n;
        }
      const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
      CAPTURE(c);
      CHECK(std::abs(mean - s.intensities[c]) < 4.0 * s.noise_std / std::sqrt(n));
      CHECK(sd == doctest::Approx(s.noise_std).epsilon(0.1));
    }
  }

  TEST_CASE("attenuation of one leaves the image unchanged") {
    SynthSpec s;
    s.regime = ShadowRegime::Ultrawide;
    s.attenuation = 1.0;
    SynthSpec none = s;
    none.regime = ShadowRegime::None;
    const auto a = gen_sample(s);
    CHECK(a.image == gen_sample(none).image);
    CHECK(std::count(a.shadow.shadowed.begin(), a.shadow.shadowed.end(), 1) > 0);
  }

  TEST_CASE("shadowed layer mean is alpha times the unshadowed mean") {
    SynthSpec s;
    s.height = s.width = 256;
    s.regime = ShadowRegime::Ultrawide;
    s.attenuation = 0.3;
    s.intensities = {0.3, 0.4, 0.5, 0.6, 0.7, 0.6, 0.5, 0.4, 0.3};
    s.noise_std = 0.05;
    s.shadow_start_boundary = 3;
    const auto smp = gen_sample(s);
    for (int c = 3; c < 9; ++c) {
      double in = 0, out = 0;
      int nin = 0, nout = 0;
      for (int r = 0; r < s.height; ++r)
        for (int x = 0; x < s.width; ++x) {
          if (smp.labels.at(r, x) != c) continue;
          const double v = smp.image[static_cast<std::size_t>(r) * s.width + x];
          if (smp.shadow.shadowed[x]) in += v, ++nin;
          else out += v, ++nout;
        }
      REQUIRE(nin > 100);
      CHECK(in / nin == doctest::Approx(0.3 * out / nout).epsilon(0.03));
    }
  }

  TEST_CASE("shadow regimes follow their geometry rules") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 300; ++trial) {
      SynthSpec s;
      s.width = 64 + static_cast<int>(rng() % 128);
      s.regime = ShadowRegime::Ultrawide;
      auto iv = shadow_intervals(s, rng);
      REQUIRE(iv.size() == 1);
      const int w = iv[0].second - iv[0].first;
      CHECK(w >= 0.25 * s.width);
      CHECK(w <= 0.40 * s.width);
      CHECK(iv[0].first >= 0);
      CHECK(iv[0].second <= s.width);

      s.regime = ShadowRegime::MultipleClose;
      s.shadow_count = 3;
      s.shadow_min_width = 3;
      s.shadow_max_width = 6;
      iv = shadow_intervals(s, rng);
      REQUIRE(iv.size() == 3);
      for (std::size_t k = 0; k + 1 < iv.size(); ++k) {
        const int gap = iv[k + 1].first - iv[k].second;
        const int narrow = std::min(iv[k].second - iv[k].first, iv[k + 1].second - iv[k + 1].first);
        CHECK(gap >= 1);
        CHECK(gap < 2 * narrow);
      }

      s.regime = ShadowRegime::Normal;
      s.shadow_count = 3;
      iv = shadow_intervals(s, rng);
      for (std::size_t a = 0; a < iv.size(); ++a)
        for (std::size_t b = a + 1; b < iv.size(); ++b)
          CHECK((iv[a].second <= iv[b].first || iv[b].second <= iv[a].first));
    }
  }

  TEST_CASE("volumes: zero drift, single frame, measured drift") {
    SynthSpec s;
    s.seed = 9;
    s.regime = ShadowRegime::Normal;
    const auto still = gen_volume(s, 4);
    for (const auto& f : still.frames) CHECK(f.boundaries.rows == still.frames[0].boundaries.rows);

    const auto one = gen_volume(s, 1);
    const auto single = gen_sample(s);
    REQUIRE(one.frames.size() == 1);
    CHECK(one.frames[0].image == single.image);
    CHECK(one.frames[0].labels == single.labels);
    CHECK(one.frames[0].boundaries.rows == single.boundaries.rows);
    CHECK_THROWS_AS(gen_volume(s, 0), std::invalid_argument);

    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 20; ++trial) {
      SynthSpec d;
      d.seed = rng();
      d.drift_px = test::uniform(rng, 0.1, 1.0);
      const auto vol = gen_volume(d, 6);
      for (int f = 0; f + 1 < 6; ++f) {
        double total = 0;
        const auto& a = vol.frames[f].boundaries.rows;
        const auto& b = vol.frames[f + 1].boundaries.rows;
        for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(b[i] - a[i]);
        const double measured = total / static_cast<double>(a.size());
        CHECK(measured >= 0.9 * d.drift_px);
        CHECK(measured <= 1.1 * d.drift_px);
      }
      // shadows persist through the volume
      for (const auto& f : vol.frames) CHECK(f.shadow.shadowed == vol.frames[0].shadow.shadowed);
    }
  }

  TEST_CASE("degraded ground truth: keyframes exact, linear drift exact") {
    SynthSpec s;
    s.drift_px = 0.5;
    s.seed = 11;
    const auto vol = gen_volume(s, 13);
    const auto deg = degrade_ground_truth(vol, 5);
    CHECK(deg.keyframes == std::vector<int>{0, 5, 10});
    for (int k : deg.keyframes) {
      CHECK(deg.labels[k] == vol.frames[k].labels);
      for (double d : deg.displacement[k]) CHECK(d == 0.0);
    }
    // after the last keyframe the labels are held
    CHECK(deg.boundaries[12].rows == vol.frames[10].boundaries.rows);
    CHECK_THROWS_AS(degrade_ground_truth(vol, 1), std::invalid_argument);

    SynthSpec lin;
    lin.harmonics = 0;
    lin.axial_drift_px = 0.7;
    const auto lv = gen_volume(lin, 11);
    const auto ld = degrade_ground_truth(lv, 5);
    CHECK(ld.max_abs_displacement < 1e-9);
  }

  TEST_CASE("degraded ground truth matches the sinusoid chord error") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 10; ++trial) {
      SynthSpec s;
      s.harmonics = 1;
      s.thickness_amplitude = 0.0;
      s.max_cycles = 2;
      s.drift_px = test::uniform(rng, 0.5, 2.0);
      s.seed = rng();
      const auto vol = gen_volume(s, 11);
      const auto& g = vol.geometry;
      REQUIRE(g.common.size() == 1);
      const double A = g.common[0].amplitude, phi = g.common[0].phase;
      const double w = 2.0 * std::numbers::pi * g.common[0].cycles / s.width;
      const double shift = g.shift_per_frame;
      // Chord between keyframes k and k+5 against the true sinusoid at f.
      double expected = 0.0;
      for (int f = 0; f < 10; ++f) {
        const int k0 = (f / 5) * 5;
        const double t = (f - k0) / 5.0;
        for (int x = 0; x < s.width; ++x) {
          auto y = [&](int fr) { return A * std::sin(w * (x + fr * shift) + phi); };
          expected = std::max(expected, std::abs((1 - t) * y(k0) + t * y(k0 + 5) - y(f)));
        }
      }
      const auto deg = degrade_ground_truth(vol, 5);
      CHECK(deg.max_abs_displacement == doctest::Approx(expected).epsilon(1e-9));
      CHECK(expected > 0.0);
    }
  }

  TEST_CASE("augmentation") {
    SynthSpec s;
    s.regime = ShadowRegime::Normal;
    s.seed = 13;
    const auto smp = gen_sample(s);
    std::mt19937_64 rng(14);
    for (int i = 0; i < 8; ++i) {
      const auto same = augment(smp, rng, AugmentToggles::none());
      CHECK(same.image == smp.image);
      CHECK(same.labels == smp.labels);
    }
    const auto hh = flip_horizontal(flip_horizontal(smp));
    CHECK(hh.image == smp.image);
    CHECK(hh.labels == smp.labels);
    CHECK(hh.boundaries.rows == smp.boundaries.rows);
    CHECK(hh.shadow.shadowed == smp.shadow.shadowed);
    const auto vv = flip_vertical(flip_vertical(smp));
    CHECK(vv.image == smp.image);
    CHECK(vv.labels == smp.labels);
    const auto tt = transpose(transpose(smp));
    CHECK(tt.image == smp.image);
    CHECK(tt.labels == smp.labels);

    // horizontal flip keeps image, labels and boundaries aligned
    const auto h = flip_horizontal(smp);
    CHECK(h.labels == rasterize_labels(h.boundaries, smp.height()));

    // contrast only: image scaled by a gain in [0.7, 1.3], labels untouched
    AugmentToggles c = AugmentToggles::none();
    c.contrast = true;
    SynthSpec plain;
    plain.noise_std = 0.0;
    plain.intensities = {0.3, 0.4, 0.5, 0.6, 0.7, 0.6, 0.5, 0.4, 0.3};
    const auto p = gen_sample(plain);
    int changed = 0;
    for (int i = 0; i < 40; ++i) {
      const auto a = augment(p, rng, c);
      CHECK(a.labels == p.labels);
      const double g = a.image[0] / p.image[0];
      CHECK(g >= 0.7 - 1e-6);
      CHECK(g <= 1.3 + 1e-6);
      changed += a.image != p.image;
    }
    CHECK(changed > 5);
    CHECK(changed < 35);
  }

  TEST_CASE("dice is flip-equivariant") {
    std::mt19937_64 rng(15);
    for (int trial = 0; trial < 200; ++trial) {
      const int H = 1 + static_cast<int>(rng() % 12), W = 1 + static_cast<int>(rng() % 12);
      BScanSample a, b;
      a.labels = LabelMap(H, W);
      b.labels = LabelMap(H, W);
      for (auto& v : a.labels.data) v = static_cast<std::uint8_t>(rng() % 3);
      for (auto& v : b.labels.data) v = static_cast<std::uint8_t>(rng() % 3);
      a.image.assign(a.labels.data.size(), 0.0f);
      b.image = a.image;
      a.boundaries = b.boundaries = BoundaryProfile(8, W, 1.0);
      for (int cls = 0; cls < 3; ++cls) {
        const double d = dice(mask_of(a.labels, cls), mask_of(b.labels, cls));
        CHECK(dice(mask_of(flip_horizontal(a).labels, cls), mask_of(flip_horizontal(b).labels, cls)) == doctest::Approx(d));
        CHECK(dice(mask_of(flip_vertical(a).labels, cls), mask_of(flip_vertical(b).labels, cls)) == doctest::Approx(d));
      }
    }
  }
}
