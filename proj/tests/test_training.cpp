#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "breaknet/checkpoint.hpp"
#include "breaknet/dataset.hpp"
#include "breaknet/gradcheck.hpp"
#include "breaknet/tape.hpp"
#include "breaknet/training.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace breaknet;

namespace {

// Direct sums over the one-hot target, classes present only.
double dice_loss_oracle(const Tensord& p, const Tensord& g, double eps = 1e-6) {
  const auto N = p.dim(0), C = p.dim(1), P = p.dim(2) * p.dim(3);
  double total = 0;
  int present = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    double pg = 0, ps = 0, gs = 0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < P; ++i) {
        const double a = p.ptr()[(n * C + c) * P + i], b = g.ptr()[(n * C + c) * P + i];
        pg += a * b;
        ps += a;
        gs += b;
      }
    if (gs > 0) total += (2 * pg + eps) / (ps + gs + eps), ++present;
  }
  return 1.0 - total / present;
}

Tensord random_probs(Shape s, std::mt19937_64& rng) {
  return softmax(test::random_tensor(s, rng, -3, 3), 1);
}

Tensord random_target(std::int64_t N, std::int64_t C, std::int64_t H, std::int64_t W, std::mt19937_64& rng,
                      std::vector<LabelMap>& store) {
  store.clear();
  for (std::int64_t n = 0; n < N; ++n) {
    LabelMap m(static_cast<int>(H), static_cast<int>(W));
    for (auto& v : m.data) v = static_cast<std::uint8_t>(rng() % static_cast<std::uint64_t>(C));
    store.push_back(m);
  }
  std::vector<const LabelMap*> ptrs;
  for (const auto& m : store) ptrs.push_back(&m);
  return one_hot<double>(ptrs, static_cast<int>(C));
}

std::vector<BScanSample> easy_set(int count, int size, std::uint64_t seed) {
  SynthSpec s;
  s.height = s.width = size;
  for (int b = 0; b < kNumBoundaries; ++b) s.base_depths.push_back(size * (6.0 + 3.0 * b) / 32.0);
  s.max_amplitude = 2.0;
  s.thickness_amplitude = 0.5;
  s.noise_std = 0.05;
  return gen_mixed_samples(s, count, seed, {ShadowRegime::None});
}

ModelConfig small_config() {
  ModelConfig c;
  c.encoder_channels = {4, 4, 8, 8};
  c.stem_channels = 4;
  c.decoder_width = 8;
  return c;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("one-hot encoding") {
    LabelMap a(1, 3);
    a.data = {0, 2, 1};
    const auto t = one_hot<double>({&a}, 3);
    CHECK(t.shape() == Shape{1, 3, 1, 3});
    CHECK(std::vector<double>(t.data().begin(), t.data().end()) == std::vector<double>{1, 0, 0, 0, 0, 1, 0, 1, 0});
    a.data[0] = 7;
    CHECK_THROWS_AS(one_hot<double>({&a}, 3), std::invalid_argument);
  }

  TEST_CASE("dice loss examples") {
    std::mt19937_64 rng(1);
    std::vector<LabelMap> store;
    const auto g = random_target(2, 4, 5, 6, rng, store);
    CHECK(dice_loss(g, g).item() <= 1e-5);

    // two classes, prediction is the complement
    LabelMap m(2, 2);
    m.data = {0, 1, 1, 0};
    const auto t = one_hot<double>({&m}, 2);
    LabelMap inv(2, 2);
    inv.data = {1, 0, 0, 1};
    CHECK(dice_loss(one_hot<double>({&inv}, 2), t).item() >= 1.0 - 1e-5);

    Tensord half(t.shape(), 0.5);
    CHECK(dice_loss(half, t).item() == doctest::Approx(dice_loss_oracle(half, t)).epsilon(1e-15));
    CHECK(dice_loss(half, t).item() == doctest::Approx(0.5).epsilon(1e-6));
  }

  TEST_CASE("dice loss matches direct sums and stays in range") {
    std::mt19937_64 rng(2);
    std::vector<LabelMap> store;
    for (int trial = 0; trial < 200; ++trial) {
      const std::int64_t N = 1 + rng() % 3, C = 2 + rng() % 8, H = 1 + rng() % 6, W = 1 + rng() % 6;
      const auto g = random_target(N, C, H, W, rng, store);
      const auto p = random_probs({N, C, H, W}, rng);
      const double l = dice_loss(p, g).item();
      CHECK(l == doctest::Approx(dice_loss_oracle(p, g)).epsilon(1e-12));
      CHECK(l >= 0.0);
      CHECK(l <= 1.0 + 1e-6);
    }
  }

  TEST_CASE("dice loss gradient") {
    std::mt19937_64 rng(3);
    std::vector<LabelMap> store;
    const auto g = random_target(2, 3, 4, 4, rng, store);
    Tensord logits = test::random_tensor({2, 3, 4, 4}, rng, -2, 2);
    const auto r = grad_check([&] { return dice_loss(softmax(logits, 1), g); }, {logits});
    CHECK(r.max_rel_error < 1e-5);
  }

  TEST_CASE("deep supervision") {
    std::mt19937_64 rng(4);
    std::vector<LabelMap> store;
    const auto g = random_target(2, 5, 4, 4, rng, store);
    CHECK(deep_supervision_loss(g, {g, g, g}, g, {0.25, 0.25, 0.25, 0.25}).item() <= 1e-5);
    const auto m = random_probs({2, 5, 4, 4}, rng);
    std::vector<Tensord> aux = {random_probs({2, 5, 4, 4}, rng), random_probs({2, 5, 4, 4}, rng),
                                random_probs({2, 5, 4, 4}, rng)};
    CHECK(deep_supervision_loss(m, aux, g, {1, 0, 0, 0}).item() == doctest::Approx(dice_loss(m, g).item()));
    const double mean = (dice_loss_oracle(m, g) + dice_loss_oracle(aux[0], g) + dice_loss_oracle(aux[1], g) +
                         dice_loss_oracle(aux[2], g)) /
                        4.0;
    CHECK(deep_supervision_loss(m, aux, g, {0.25, 0.25, 0.25, 0.25}).item() == doctest::Approx(mean).epsilon(1e-12));
  }

  TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    for (int e = 0; e < 5; ++e) CHECK(lr_at(e, c) == doctest::Approx(1e-2));
    CHECK(lr_at(5, c) == doctest::Approx(8e-3));
    CHECK(lr_at(10, c) == doctest::Approx(6.4e-3));
    for (int e = 0; e < 100; ++e) CHECK(lr_at(e + 1, c) <= lr_at(e, c));
  }

  TEST_CASE("config validation and JSON") {
    TrainConfig c;
    c.aux_loss_weights = {0.5, 0.5, 0.5, 0.5};
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("aux_loss_weights"), std::invalid_argument);
    c = TrainConfig{};
    c.decay_factor = 1.5;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("decay_factor"), std::invalid_argument);
    c = TrainConfig{};
    c.lr0 = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.seed = 99;
    c.augment.transpose = false;
    c.max_epochs = 3;
    CHECK(train_config_from_json(to_json(c)) == c);
    CHECK_THROWS_AS(train_config_from_json({{"lr", 1}}), std::invalid_argument);
  }

  TEST_CASE("adam") {
    Tensord p({3}, 1.0);
    p.set_requires_grad(true);
    std::vector<Tensord> ps = {p};
    AdamState<double> st;
    adam_step(ps, st, 0.1);
    for (double v : p.data()) CHECK(v == 1.0);

    Tensord q = Tensord(Shape{3}, std::vector<double>{1.0, -2.0, 0.5});
    q.set_requires_grad(true);
    auto lq = sum(mul(q, Tensord(Shape{3}, std::vector<double>{3.0, -0.001, 0.0})));
    backward(lq);
    std::vector<Tensord> qs = {q};
    AdamState<double> s2;
    adam_step(qs, s2, 0.1);
    CHECK(q.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(q.data()[1] == doctest::Approx(-1.9).epsilon(1e-4));
    CHECK(q.data()[2] == 0.5);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(q.data()[i] - std::vector<double>{1, -2, 0.5}[i]) <= 0.1 + 1e-12);

    Tensord x = Tensord(Shape{1}, std::vector<double>{1.0});
    x.set_requires_grad(true);
    std::vector<Tensord> xs = {x};
    AdamState<double> s3;
    for (int i = 0; i < 100; ++i) {
      Tape::current().clear();
      x.zero_grad();
      auto lx = sum(mul(x, x));
      backward(lx);
      adam_step(xs, s3, 0.1);
    }
    CHECK(std::abs(x.data()[0]) < 0.1);
  }

  TEST_CASE("one epoch on eight samples takes one step; runs are reproducible") {
    const auto data = easy_set(8, 32, 1);
    const auto val = easy_set(2, 32, 2);
    const std::string before = dataset_hash(val);
    TrainConfig cfg;
    cfg.max_epochs = 1;
    cfg.seed = 5;
    BreakNet<float> a(small_config(), 1);
    const auto la = train(a, data, val, cfg);
    REQUIRE(la.epochs.size() == 1);
    CHECK(la.epochs[0].steps == 1);
    CHECK(la.total_steps == 1);
    CHECK(la.epochs[0].epoch == 0);
    CHECK(dataset_hash(val) == before);

    cfg.max_epochs = 2;
    BreakNet<float> b(small_config(), 1), c(small_config(), 1);
    const auto lb = train(b, data, val, cfg);
    const auto lc = train(c, data, val, cfg);
    REQUIRE(lb.epochs.size() == 2);
    for (int e = 0; e < 2; ++e) {
      CHECK(lb.epochs[e].epoch == e);
      CHECK(to_json(lb.epochs[e], false) == to_json(lc.epochs[e], false));
    }
    for (std::size_t i = 0; i < b.parameters().size(); ++i)
      CHECK(std::equal(b.parameters()[i].tensor.data().begin(), b.parameters()[i].tensor.data().end(),
                       c.parameters()[i].tensor.data().begin()));
  }

  TEST_CASE("training writes logs and the best checkpoint") {
    const auto dir = std::filesystem::temp_directory_path() / "breaknet_train_test";
    std::filesystem::remove_all(dir);
    const auto data = easy_set(4, 32, 3);
    TrainConfig cfg;
    cfg.max_epochs = 2;
    cfg.batch_size = 2;
    cfg.checkpoint_every = 1;
    BreakNet<float> net(small_config(), 2);
    int calls = 0;
    TrainOptions opts;
    opts.out_dir = dir;
    opts.on_epoch = [&](const EpochRecord&) { ++calls; };
    const auto log = train(net, data, data, cfg, opts);
    CHECK(calls == 2);
    CHECK(log.epochs[0].steps == 2);
    std::ifstream in(dir / "log.jsonl");
    int lines = 0;
    for (std::string line; std::getline(in, line);) ++lines;
    CHECK(lines == 2);
    CHECK(std::filesystem::exists(dir / "checkpoint_best.json"));
    CHECK(std::filesystem::exists(dir / "checkpoint_epoch0001.json"));
    const auto best = load_checkpoint<float>(dir / "checkpoint_best.json");
    for (std::size_t i = 0; i < best.parameters().size(); ++i)
      CHECK(std::equal(best.parameters()[i].tensor.data().begin(), best.parameters()[i].tensor.data().end(),
                       net.parameters()[i].tensor.data().begin()));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("empty sets and non-finite loss are rejected") {
    const auto data = easy_set(2, 32, 4);
    BreakNet<float> net(small_config());
    TrainConfig cfg;
    cfg.max_epochs = 1;
    CHECK_THROWS_AS(train(net, {}, data, cfg), std::invalid_argument);
    CHECK_THROWS_AS(train(net, data, {}, cfg), std::invalid_argument);
    auto bad = data;
    bad[0].image[5] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_WITH_AS(train(net, bad, data, cfg), doctest::Contains("batch seed"), NonFiniteLoss);
  }
}
