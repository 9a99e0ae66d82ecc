#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "breaknet/metrics.hpp"
#include "breaknet/synth.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace breaknet;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::uint8_t> random_mask(std::mt19937_64& rng, std::size_t n, double p) {
  std::vector<std::uint8_t> m(n);
  for (auto& v : m) v = test::uniform(rng, 0, 1) < p;
  return m;
}

// Set-based counting: indices of set pixels, intersected and united.
std::pair<double, double> set_oracle(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::set<std::size_t> P, G, I, U;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]) P.insert(i);
    if (b[i]) G.insert(i);
  }
  std::set_intersection(P.begin(), P.end(), G.begin(), G.end(), std::inserter(I, I.end()));
  std::set_union(P.begin(), P.end(), G.begin(), G.end(), std::inserter(U, U.end()));
  if (U.empty()) return {1.0, 1.0};
  return {2.0 * I.size() / static_cast<double>(P.size() + G.size()), I.size() / static_cast<double>(U.size())};
}

BoundaryProfile random_profile(std::mt19937_64& rng, int W, double pitch, double absent) {
  BoundaryProfile p(8, W, pitch);
  for (int x = 0; x < W; ++x) {
    double r = test::uniform(rng, 0, 5);
    for (int b = 0; b < 8; ++b) {
      r += test::uniform(rng, 1, 6);
      p.at(b, x) = test::uniform(rng, 0, 1) < absent ? kNaN : r;
    }
  }
  return p;
}

LabelMap layered(int H, int W, const std::vector<int>& starts) {
  BoundaryProfile b(8, W, 1.0);
  for (int j = 0; j < 8; ++j)
    for (int x = 0; x < W; ++x) b.at(j, x) = starts[j];
  return rasterize_labels(b, H);
}

std::vector<std::uint8_t> mask_of(const LabelMap& m, int cls) {
  std::vector<std::uint8_t> out(m.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.data[i] == cls;
  return out;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("dice and iou on constructed masks") {
    const std::vector<std::uint8_t> a = {1, 1, 0, 1, 0, 0}, none(6, 0);
    CHECK(dice(a, a) == 1.0);
    CHECK(iou(a, a) == 1.0);
    const std::vector<std::uint8_t> b = {0, 0, 1, 0, 1, 1};
    CHECK(dice(a, b) == 0.0);
    CHECK(iou(a, b) == 0.0);
    CHECK(dice(none, none) == 1.0);
    CHECK(iou(none, none) == 1.0);
    // 2x2 squares on a 3x3 grid overlapping in two pixels
    const std::vector<std::uint8_t> p = {1, 1, 0, 1, 1, 0, 0, 0, 0}, g = {0, 1, 1, 0, 1, 1, 0, 0, 0};
    CHECK(dice(p, g) == doctest::Approx(0.5));
    CHECK(iou(p, g) == doctest::Approx(1.0 / 3.0));
    CHECK(iou(p, g) == doctest::Approx(dice(p, g) / (2.0 - dice(p, g))));
    CHECK_THROWS_AS(dice(p, a), std::invalid_argument);
    CHECK_THROWS_AS(iou(p, a), std::invalid_argument);
  }

  TEST_CASE("dice and iou match set counting on random masks") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 1 + rng() % 64;
      const double p = test::uniform(rng, 0, 1);
      const auto a = random_mask(rng, n, p), b = random_mask(rng, n, test::uniform(rng, 0, 1));
      const auto [d, j] = set_oracle(a, b);
      CHECK(dice(a, b) == doctest::Approx(d).epsilon(1e-14));
      CHECK(iou(a, b) == doctest::Approx(j).epsilon(1e-14));
      CHECK(dice(a, b) == dice(b, a));
      CHECK(iou(a, b) == iou(b, a));
      CHECK(iou(a, b) == doctest::Approx(dice(a, b) / (2.0 - dice(a, b))).epsilon(1e-14));
    }
  }

  TEST_CASE("class dice and iou agree with binary masks") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 200; ++trial) {
      const int H = 1 + static_cast<int>(rng() % 10), W = 1 + static_cast<int>(rng() % 10);
      LabelMap a(H, W), b(H, W);
      for (auto& v : a.data) v = static_cast<std::uint8_t>(rng() % 4);
      for (auto& v : b.data) v = static_cast<std::uint8_t>(rng() % 4);
      for (int c = 0; c < 5; ++c) {
        CHECK(class_dice(a, b, c) == doctest::Approx(dice(mask_of(a, c), mask_of(b, c))));
        CHECK(class_iou(a, b, c) == doctest::Approx(iou(mask_of(a, c), mask_of(b, c))));
      }
    }
  }

  TEST_CASE("contour error") {
    BoundaryProfile a(8, 5, 1.5), b(8, 5, 1.5);
    for (int j = 0; j < 8; ++j)
      for (int x = 0; x < 5; ++x) {
        a.at(j, x) = 10.0 * j + x;
        b.at(j, x) = a.at(j, x) + 3.0;
      }
    CHECK(contour_error(a, a) == 0.0);
    CHECK(contour_error(b, a) == doctest::Approx(4.5));
    CHECK(contour_error(a, b) == doctest::Approx(4.5));
    BoundaryProfile empty(8, 5, 1.5);
    CHECK_THROWS_AS(contour_error(empty, a), NotComputable);
    CHECK_THROWS_AS(contour_error(a, BoundaryProfile(8, 5, 2.0)), std::invalid_argument);
    CHECK_THROWS_AS(contour_error(a, BoundaryProfile(8, 4, 1.5)), std::invalid_argument);
  }

  TEST_CASE("thickness error") {
    BoundaryProfile a(8, 4, 2.0), b(8, 4, 2.0);
    for (int x = 0; x < 4; ++x)
      for (int j = 0; j < 8; ++j) {
        a.at(j, x) = 10.0 * j;
        b.at(j, x) = 10.0 * j + (j >= 4 ? 2.0 : 0.0);
      }
    CHECK(thickness_error(a, a) == 0.0);
    // one layer of seven is 12 px instead of 10
    CHECK(thickness_error(b, a) == doctest::Approx(4.0 / 7.0));
    const auto per = thickness_error_per_layer(b, a);
    CHECK(per[3] == doctest::Approx(4.0));
    CHECK(per[0] == 0.0);
    BoundaryProfile empty(8, 4, 2.0);
    CHECK_THROWS_AS(thickness_error(empty, a), NotComputable);
  }

  TEST_CASE("contour and thickness error match per-column oracles") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
      const int W = 1 + static_cast<int>(rng() % 12);
      const double pitch = test::uniform(rng, 0.5, 3.0);
      const auto p = random_profile(rng, W, pitch, 0.2), g = random_profile(rng, W, pitch, 0.2);
      double ce = 0, te = 0;
      int nce = 0, nte = 0;
      for (int x = 0; x < W; ++x) {
        std::vector<double> pc, gc;
        for (int b = 0; b < 8; ++b) {
          pc.push_back(p.at(b, x));
          gc.push_back(g.at(b, x));
        }
        for (int b = 0; b < 8; ++b)
          if (!std::isnan(pc[b]) && !std::isnan(gc[b])) ce += std::abs(pc[b] - gc[b]), ++nce;
        for (int b = 0; b < 7; ++b) {
          const double tp = pc[b + 1] - pc[b], tg = gc[b + 1] - gc[b];
          if (!std::isnan(tp) && !std::isnan(tg)) te += std::abs(tp - tg), ++nte;
        }
      }
      if (nce) CHECK(contour_error(p, g) == doctest::Approx(ce / nce * pitch).epsilon(1e-12));
      else CHECK_THROWS_AS(contour_error(p, g), NotComputable);
      if (nte) CHECK(thickness_error(p, g) == doctest::Approx(te / nte * pitch).epsilon(1e-12));
      else CHECK_THROWS_AS(thickness_error(p, g), NotComputable);
      if (nce) CHECK(contour_error(p, g) >= 0.0);
    }
  }

  TEST_CASE("label_to_boundaries") {
    const auto lm = layered(100, 4, {10, 20, 30, 40, 50, 60, 70, 80});
    const auto ext = label_to_boundaries(lm, 2.0);
    CHECK(ext.defective_count() == 0);
    CHECK(ext.profile.axial_pitch_um == 2.0);
    for (int j = 0; j < 8; ++j) CHECK(ext.profile.at(j, 2) == 10.0 * (j + 1));

    const LabelMap uniform(50, 6, 3);
    const auto u = label_to_boundaries(uniform);
    CHECK(u.defective_count() == 6);
    for (double v : u.profile.rows) CHECK(std::isnan(v));

    LabelMap skip = lm;
    for (int r = 0; r < 100; ++r)
      if (skip.at(r, 1) == 3) skip.at(r, 1) = 2;  // column 1 jumps 2 -> 4
    const auto s = label_to_boundaries(skip);
    CHECK(s.defective[1] == 1);
    CHECK(s.defective_count() == 1);
    CHECK(std::isnan(s.profile.at(0, 1)));

    LabelMap reorder = lm;
    reorder.at(95, 0) = 2;  // class goes back up after 8
    CHECK(label_to_boundaries(reorder).defective[0] == 1);
  }

  TEST_CASE("round trip through the generator is within half a pixel") {
    std::mt19937_64 rng(4);
    double worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
      SynthSpec s;
      s.height = 80 + static_cast<int>(rng() % 112);
      s.width = 8 + static_cast<int>(rng() % 64);
      s.max_amplitude = test::uniform(rng, 0, 0.18 * s.height - 4);
      s.seed = rng();
      const auto smp = gen_sample(s);
      const auto ext = label_to_boundaries(smp.labels, s.axial_pitch_um);
      CHECK(ext.defective_count() == 0);
      for (std::size_t i = 0; i < ext.profile.rows.size(); ++i)
        worst = std::max(worst, std::abs(ext.profile.rows[i] - smp.boundaries.rows[i]));
    }
    CHECK(worst <= 0.5);
  }

  TEST_CASE("failure detection") {
    SynthSpec s;
    s.seed = 5;
    const auto gt = gen_sample(s).labels;
    CHECK_FALSE(detect_failure(gt));
    LabelMap broken = gt;
    for (int x = 0; x < gt.width; x += 10)
      for (int r = 0; r < gt.height; ++r)
        if (broken.at(r, x) == 4) broken.at(r, x) = 3;
    CHECK(detect_failure(broken));
    LabelMap one = gt;
    for (int r = 0; r < gt.height; ++r)
      if (one.at(r, 7) == 4) one.at(r, 7) = 3;
    CHECK(label_to_boundaries(one).defective_fraction() == doctest::Approx(1.0 / 128));
    CHECK_FALSE(detect_failure(one));  // 1/128 is under 1%
    CHECK(detect_failure(one, 0.005));
  }

  TEST_CASE("failure rate counts failed scans") {
    std::vector<LabelMap> gt, pred;
    for (int i = 0; i < 10; ++i) {
      SynthSpec s;
      s.seed = 100 + i;
      gt.push_back(gen_sample(s).labels);
      pred.push_back(gt.back());
      if (i == 3 || i == 7)
        for (int r = 0; r < s.height; ++r)
          for (int x = 0; x < s.width; ++x)
            if (pred.back().at(r, x) == 5) pred.back().at(r, x) = 4;
    }
    const auto rep = evaluate_labels(pred, gt, 2.0);
    CHECK(rep.failure_rate == doctest::Approx(0.2));
    CHECK(rep.ce_um.count == 8);
    CHECK(std::isnan(rep.scans[3].ce_um));
    CHECK(rep.ce_um.mean == 0.0);
  }

  TEST_CASE("perfect predictions give the perfect report") {
    std::vector<LabelMap> gt;
    for (int i = 0; i < 5; ++i) {
      SynthSpec s;
      s.seed = 200 + i;
      s.regime = ShadowRegime::Ultrawide;
      gt.push_back(gen_sample(s).labels);
    }
    const auto rep = evaluate_labels(gt, gt, 2.0, "Oracle");
    CHECK(rep.dice.mean == 1.0);
    CHECK(rep.iou.mean == 1.0);
    CHECK(rep.ce_um.mean == 0.0);
    CHECK(rep.te_um.mean == 0.0);
    CHECK(rep.failure_rate == 0.0);
    CHECK(rep.dice.std == 0.0);
    CHECK_THROWS_AS(evaluate_labels({}, {}, 2.0), std::invalid_argument);
    CHECK_THROWS_AS(evaluate_labels({gt[0]}, gt, 2.0), std::invalid_argument);

    const auto csv = report_csv({rep});
    CHECK(csv == "Method,Dice,IoU,FailureRate,CE_um,TE_um\nOracle,1.0000(0.0000),1.0000(0.0000),0.00,0.0000(0.0000),"
                 "0.0000(0.0000)\n");
    const auto layers = per_layer_csv({rep});
    CHECK(layers.rfind("Method,NFL,IPL,INL,OPL,ONL,EZ,RPE,All\n", 0) == 0);
    const auto j = to_json(rep);
    CHECK(j["num_scans"] == 5);
    CHECK(j["dice"]["mean"] == 1.0);
    CHECK(j["te_per_layer_um"].contains("RPE"));
  }

  TEST_CASE("report values stay in range on random predictions") {
    std::mt19937_64 rng(6);
    std::vector<LabelMap> gt, pred;
    for (int i = 0; i < 20; ++i) {
      SynthSpec s;
      s.height = s.width = 32;
      s.base_depths = {6, 9, 12, 15, 18, 21, 24, 27};
      s.thickness_amplitude = 0.5;
      s.max_amplitude = 2;
      s.seed = rng();
      gt.push_back(gen_sample(s).labels);
      LabelMap p = gt.back();
      for (auto& v : p.data)
        if (rng() % 20 == 0) v = static_cast<std::uint8_t>(rng() % 9);
      pred.push_back(p);
    }
    const auto rep = evaluate_labels(pred, gt, 2.0);
    for (const auto& sm : rep.scans) {
      for (double d : sm.dice) CHECK((d >= 0.0 && d <= 1.0));
      for (double d : sm.iou) CHECK((d >= 0.0 && d <= 1.0));
      if (!std::isnan(sm.ce_um)) CHECK(sm.ce_um >= 0.0);
    }
    CHECK((rep.failure_rate >= 0.0 && rep.failure_rate <= 1.0));
  }

  TEST_CASE("metrics are invariant under a joint horizontal flip") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      SynthSpec s;
      s.height = 48;
      s.width = 24;
      s.thickness_amplitude = 0.4;
      s.max_amplitude = 3;
      s.seed = rng();
      auto g = gen_sample(s);
      auto p = g;
      for (auto& v : p.labels.data)
        if (rng() % 30 == 0) v = static_cast<std::uint8_t>(rng() % 9);
      const auto a = evaluate_labels({p.labels}, {g.labels}, 2.0);
      const auto b = evaluate_labels({flip_horizontal(p).labels}, {flip_horizontal(g).labels}, 2.0);
      CHECK(a.dice.mean == doctest::Approx(b.dice.mean));
      CHECK(a.iou.mean == doctest::Approx(b.iou.mean));
      CHECK(a.scans[0].failed == b.scans[0].failed);
      CHECK(a.scans[0].defective_fraction == doctest::Approx(b.scans[0].defective_fraction));
      if (!a.scans[0].failed && !std::isnan(a.scans[0].ce_um)) {
        CHECK(a.scans[0].ce_um == doctest::Approx(b.scans[0].ce_um));
        CHECK(a.scans[0].te_um == doctest::Approx(b.scans[0].te_um));
      }
    }
  }

  TEST_CASE("summary statistics and intersection") {
    const auto st = summarize({1.0, 3.0, kNaN});
    CHECK(st.count == 2);
    CHECK(st.mean == 2.0);
    CHECK(st.std == 1.0);
    CHECK(summarize({}).count == 0);
    LabelMap a(1, 3), b(1, 3);
    a.data = {1, 2, 3};
    b.data = {1, 5, 3};
    CHECK(intersect_labels(a, b).data == std::vector<std::uint8_t>{1, 255, 3});
  }

  TEST_CASE("evaluate on a network and report files") {
    BreakNet<float> net(ModelConfig{}, 3);
    std::vector<BScanSample> scans;
    for (int i = 0; i < 3; ++i) {
      SynthSpec s;
      s.height = s.width = 32;
      s.base_depths = {6, 9, 12, 15, 18, 21, 24, 27};
      s.thickness_amplitude = 0.5;
      s.max_amplitude = 1;
      s.seed = 300 + i;
      scans.push_back(gen_sample(s));
    }
    const auto labels = predict_labels(net, scans, 2);
    REQUIRE(labels.size() == 3);
    const auto rep = evaluate(net, scans, "Untrained", 2);
    CHECK(rep.scans.size() == 3);
    CHECK((rep.dice.mean >= 0.0 && rep.dice.mean <= 1.0));
    CHECK_THROWS_AS(evaluate(net, {}, "x"), std::invalid_argument);

    const auto dir = std::filesystem::temp_directory_path() / "breaknet_report_test";
    write_reports(dir, {rep});
    std::ifstream in(dir / "report.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "Method,Dice,IoU,FailureRate,CE_um,TE_um");
    CHECK(std::filesystem::exists(dir / "report.json"));
    CHECK(std::filesystem::exists(dir / "report_layers.csv"));
    std::filesystem::remove_all(dir);
  }
}
