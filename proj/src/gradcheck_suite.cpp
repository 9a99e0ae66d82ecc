#include "breaknet/gradcheck_suite.hpp"

#include <array>
#include <random>
#include <stdexcept>

#include "breaknet/training.hpp"

namespace breaknet {

namespace {

constexpr double kOpTol = 1e-5;
constexpr double kModelTol = 1e-4;
// Smaller steps keep the difference quotient off leaky-ReLU kinks and, for
// the full model, keep the h^2 truncation term of train-mode batch norm over
// the 1x1 bottleneck (two values per channel) below the tolerance.
constexpr double kBlockStep = 1e-6;
constexpr double kModelStep = 1e-7;

Tensord rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensord t(std::move(shape));
  for (auto& v : t.data()) v = lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
  return t;
}

// Contracts an output with fixed random weights so every element matters.
Tensord project(const Tensord& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, rand_tensor(y.shape(), rng)));
}

// One case per op, checked on every shape set and reporting the worst error.
GradCheckCase op_case(std::string name, std::uint64_t seed, std::vector<std::vector<Shape>> sets,
                      std::function<Tensord(const std::vector<Tensord>&)> f) {
  GradCheckCase c{std::move(name), "op", kOpTol, 1e-4, {}};
  c.run = [=]() {
    GradCheckResult worst;
    std::uint64_t s = seed;
    for (const auto& shapes : sets) {
      std::mt19937_64 rng(++s * 7919);
      std::vector<Tensord> inputs;
      for (const auto& sh : shapes) inputs.push_back(rand_tensor(sh, rng));
      const GradCheckResult r = grad_check([&]() { return project(f(inputs), s); }, inputs);
      if (r.max_rel_error >= worst.max_rel_error) worst = r;
    }
    return worst;
  };
  return c;
}

void randomize(std::vector<NamedTensor<double>>& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params)
    for (auto& v : p.tensor.data()) v += 0.2 * ((static_cast<double>(rng() >> 11) * 0x1.0p-53) - 0.5);
}

std::vector<Tensord> tensors_of(std::initializer_list<const Conv<double>*> convs) {
  std::vector<Tensord> out;
  for (const auto* c : convs) {
    out.push_back(c->weight);
    if (c->bias.defined()) out.push_back(c->bias);
  }
  return out;
}

std::vector<GradCheckCase> op_cases() {
  using V = const std::vector<Tensord>&;
  std::vector<GradCheckCase> cs;
  cs.push_back(op_case("conv2d", 1, {{{2, 3, 5, 5}, {4, 3, 3, 3}, {4}}, {{1, 2, 4, 6}, {3, 2, 3, 3}, {3}},
                                     {{1, 1, 7, 3}, {2, 1, 5, 5}, {2}}},
                       [](V in) { return conv2d(in[0], in[1], in[2], 1, static_cast<int>(in[1].dim(2) / 2), 1); }));
  cs.push_back(op_case("conv2d_stride2", 2, {{{1, 2, 6, 6}, {3, 2, 3, 3}, {3}}, {{2, 1, 5, 7}, {2, 1, 3, 3}, {2}},
                                             {{1, 3, 8, 4}, {2, 3, 1, 1}, {2}}},
                       [](V in) { return conv2d(in[0], in[1], in[2], 2, static_cast<int>(in[1].dim(2) / 2), 1); }));
  cs.push_back(op_case("conv2d_depthwise", 3, {{{2, 4, 6, 6}, {4, 1, 5, 5}, {4}}, {{1, 3, 8, 8}, {3, 1, 3, 3}, {3}},
                                               {{1, 2, 5, 4}, {2, 1, 3, 3}, {2}}},
                       [](V in) {
                         return conv2d(in[0], in[1], in[2], 2, static_cast<int>(in[1].dim(2) / 2),
                                       static_cast<int>(in[0].dim(1)));
                       }));
  cs.push_back(op_case("conv2d_groups", 4, {{{1, 4, 4, 4}, {6, 2, 3, 3}}, {{2, 6, 3, 3}, {3, 2, 1, 1}},
                                            {{1, 4, 5, 3}, {4, 2, 3, 3}}},
                       [](V in) {
                         const int groups = static_cast<int>(in[0].dim(1) / in[1].dim(1));
                         return conv2d(in[0], in[1], Tensord(), 1, static_cast<int>(in[1].dim(2) / 2), groups);
                       }));
  cs.push_back(op_case("avg_pool2d", 5, {{{2, 2, 5, 5}}, {{1, 3, 4, 6}}, {{1, 1, 7, 3}}},
                       [](V in) { return avg_pool2d(in[0], 3, 1, 1); }));
  cs.push_back(op_case("avg_pool2d_stride2", 6, {{{1, 2, 4, 4}}, {{2, 1, 6, 8}}, {{1, 2, 5, 5}}},
                       [](V in) { return avg_pool2d(in[0], 2, 2, 0); }));
  cs.push_back(op_case("bilinear_upsample", 7, {{{1, 2, 3, 4}}, {{2, 1, 2, 2}}, {{1, 1, 4, 3}}}, [](V in) {
    return bilinear_upsample(in[0], 2 * in[0].dim(2), 2 * in[0].dim(3) + 1);
  }));
  cs.push_back(op_case("softmax_axis1", 8, {{{2, 4, 3, 3}}, {{1, 9, 2, 2}}, {{3, 2, 1, 4}}},
                       [](V in) { return softmax(in[0], 1); }));
  cs.push_back(op_case("softmax_last", 9, {{{3, 5}}, {{2, 3, 4}}, {{1, 7}}},
                       [](V in) { return softmax(in[0], static_cast<int>(in[0].rank()) - 1); }));
  cs.push_back(op_case("layer_norm", 10, {{{2, 3, 3, 3}, {3}, {3}}, {{1, 5, 2, 4}, {5}, {5}}, {{1, 2, 3, 1}, {2}, {2}}},
                       [](V in) { return layer_norm(in[0], in[1], in[2]); }));
  cs.push_back(op_case("batch_norm_train", 11,
                       {{{3, 2, 3, 3}, {2}, {2}}, {{2, 3, 2, 2}, {3}, {3}}, {{4, 1, 1, 3}, {1}, {1}}}, [](V in) {
                         BatchNormStats<double> st(in[1].dim(0));
                         return batch_norm(in[0], in[1], in[2], st, true);
                       }));
  cs.push_back(op_case("batch_norm_eval", 12,
                       {{{2, 2, 3, 3}, {2}, {2}}, {{1, 3, 2, 2}, {3}, {3}}, {{3, 1, 2, 1}, {1}, {1}}}, [](V in) {
                         BatchNormStats<double> st(in[1].dim(0));
                         st.running_mean.data()[0] = 0.3;
                         st.running_var.data()[0] = 2.0;
                         return batch_norm(in[0], in[1], in[2], st, false);
                       }));
  cs.push_back(op_case("leaky_relu", 13, {{{4, 7}}, {{2, 3, 5}}, {{1, 2, 3, 3}}}, [](V in) { return leaky_relu(in[0]); }));
  cs.push_back(op_case("gelu", 14, {{{4, 7}}, {{2, 3, 5}}, {{1, 2, 3, 3}}}, [](V in) { return gelu(in[0]); }));
  cs.push_back(op_case("dropout", 15, {{{4, 7}}, {{2, 3, 5}}, {{1, 2, 3, 3}}}, [](V in) {
    std::mt19937_64 rng(99);
    return dropout(in[0], 0.3, true, rng);
  }));
  cs.push_back(op_case("matmul", 16, {{{3, 4}, {4, 5}}, {{1, 6}, {6, 2}}, {{5, 1}, {1, 3}}},
                       [](V in) { return matmul(in[0], in[1]); }));
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      std::vector<std::vector<Shape>> sets;
      for (const auto& [b, m, k, n] : {std::array<std::int64_t, 4>{2, 3, 4, 5}, {1, 2, 6, 3}, {3, 4, 1, 2}}) {
        sets.push_back({ta ? Shape{b, k, m} : Shape{b, m, k}, tb ? Shape{b, n, k} : Shape{b, k, n}});
      }
      cs.push_back(op_case("batched_matmul_t" + std::to_string(ta) + std::to_string(tb),
                           17 + static_cast<std::uint64_t>(ta * 2 + tb), sets,
                           [ta, tb](V in) { return batched_matmul(in[0], in[1], ta != 0, tb != 0); }));
    }
  cs.push_back(op_case("concat", 21, {{{2, 1, 3, 3}, {2, 2, 3, 3}}, {{1, 3, 2, 4}, {1, 1, 2, 4}}, {{1, 2, 1, 1}, {1, 2, 1, 1}}},
                       [](V in) { return concat(std::vector<Tensord>{in[0], in[1]}, 1); }));
  const std::vector<std::vector<Shape>> pairs = {{{3, 4}, {3, 4}}, {{2, 3, 2}, {2, 3, 2}}, {{1, 2, 2, 3}, {1, 2, 2, 3}}};
  const std::vector<std::vector<Shape>> singles = {{{3, 4}}, {{2, 3, 2}}, {{1, 2, 2, 3}}};
  cs.push_back(op_case("add", 22, pairs, [](V in) { return add(in[0], in[1]); }));
  cs.push_back(op_case("sub", 23, pairs, [](V in) { return sub(in[0], in[1]); }));
  cs.push_back(op_case("mul", 24, pairs, [](V in) { return mul(in[0], in[1]); }));
  cs.push_back(op_case("scale", 25, singles, [](V in) { return scale(in[0], 1.7); }));
  cs.push_back(op_case("sum", 26, singles, [](V in) { return sum(in[0]); }));
  cs.push_back(op_case("mean", 27, singles, [](V in) { return mean(in[0]); }));
  cs.push_back(op_case("reshape", 28, singles, [](V in) { return reshape(in[0], {in[0].numel()}); }));
  {
    GradCheckCase c{"dice_loss", "op", kOpTol, 1e-4, {}};
    c.run = []() {
      std::mt19937_64 rng(28);
      Tensord logits = rand_tensor({2, 4, 3, 3}, rng, -2.0, 2.0);
      LabelMap a(3, 3), b(3, 3);
      for (auto& v : a.data) v = static_cast<std::uint8_t>(rng() % 3);  // class 3 absent
      for (auto& v : b.data) v = static_cast<std::uint8_t>(rng() % 3);
      const Tensord target = one_hot<double>({&a, &b}, 4);
      return grad_check([&]() { return dice_loss(softmax(logits, 1), target); }, {logits});
    };
    cs.push_back(std::move(c));
  }
  return cs;
}

std::vector<GradCheckCase> block_cases() {
  std::vector<GradCheckCase> cs;
  auto block = [&](std::string name, std::function<GradCheckResult(BreakNet<double>&, std::mt19937_64&)> f) {
    GradCheckCase c{std::move(name), "block", kOpTol, kBlockStep, {}};
    c.run = [f]() {
      ModelConfig cfg = tiny_config();
      cfg.encoder_channels = {4, 4, 4, 4};
      cfg.stem_channels = 4;
      cfg.decoder_width = 4;
      BreakNet<double> net(cfg, 5);
      randomize(net.parameters(), 6);
      std::mt19937_64 rng(7);
      return f(net, rng);
    };
    cs.push_back(std::move(c));
  };
  block("stem", [](BreakNet<double>& net, std::mt19937_64& rng) {
    Tensord x = rand_tensor({2, 1, 6, 6}, rng);
    auto& s = net.stem;
    std::vector<Tensord> in = {x, s.conv1.weight, s.conv1.bias, s.bn1.gamma, s.bn1.beta,
                               s.conv2.weight, s.conv2.bias, s.bn2.gamma, s.bn2.beta};
    return grad_check([&]() { return project(stem_forward(x, s, true), 1); }, in, kBlockStep);
  });
  block("patch_embed", [](BreakNet<double>& net, std::mt19937_64& rng) {
    Tensord x = rand_tensor({1, 4, 8, 8}, rng);
    const auto& e = net.encoder[0].paths[1].embed;
    auto in = tensors_of({&e});
    in.insert(in.begin(), x);
    return grad_check([&]() { return project(patch_embed(x, e), 2); }, in, kBlockStep);
  });
  block("cnn_block", [](BreakNet<double>& net, std::mt19937_64& rng) {
    Tensord x = rand_tensor({1, 4, 4, 4}, rng);
    const auto& p = net.encoder[0].paths[0].cnn;
    auto in = tensors_of({&p.expand, &p.depthwise, &p.project});
    in.insert(in.begin(), x);
    return grad_check([&]() { return project(cnn_block(x, p), 3); }, in, kBlockStep);
  });
  block("sa_pool", [](BreakNet<double>&, std::mt19937_64& rng) {
    Tensord x = rand_tensor({1, 3, 4, 5}, rng);
    return grad_check([&]() { return project(sa_pool(x), 4); }, {x}, kBlockStep);
  });
  block("sa_factorized", [](BreakNet<double>& net, std::mt19937_64& rng) {
    Tensord x = rand_tensor({2, 4, 3, 3}, rng);
    const auto& t = net.encoder[0].paths[1].trans;
    auto in = tensors_of({&t.query, &t.key, &t.value});
    in.insert(in.begin(), x);
    return grad_check([&]() { return project(sa_factorized(x, t.query, t.key, t.value, 2), 5); }, in, kBlockStep);
  });
  for (int path = 0; path < 2; ++path) {
    block(path == 0 ? "trans_block_pool" : "trans_block_factorized", [path](BreakNet<double>& net, std::mt19937_64& rng) {
      Tensord x = rand_tensor({1, 4, 3, 3}, rng);
      const auto& t = net.encoder[0].paths[path].trans;
      std::vector<Tensord> in = {x, t.norm1.gamma, t.norm1.beta, t.norm2.gamma, t.norm2.beta};
      for (auto& e : tensors_of({&t.fc1, &t.fc2})) in.push_back(e);
      if (t.attention == Attention::Factorized)
        for (auto& e : tensors_of({&t.query, &t.key, &t.value})) in.push_back(e);
      ForwardContext ctx;
      return grad_check([&]() { return project(trans_block(x, t, ctx), 6); }, in, kBlockStep);
    });
  }
  block("msfe", [](BreakNet<double>& net, std::mt19937_64& rng) {
    Tensord x = rand_tensor({1, 4, 4, 4}, rng);
    const auto& m = net.encoder[1];
    std::vector<Tensord> in = {x, m.fuse.weight, m.fuse.bias};
    for (const auto& p : m.paths) in.push_back(p.embed.weight);
    ForwardContext ctx;
    return grad_check([&]() { return project(msfe_forward(x, m, ctx), 7); }, in, kBlockStep);
  });
  block("dec_block", [](BreakNet<double>& net, std::mt19937_64& rng) {
    Tensord d = rand_tensor({2, 4, 2, 2}, rng);
    Tensord lat = rand_tensor({2, 4, 4, 4}, rng);
    auto& b = net.decoder.blocks[1];
    std::vector<Tensord> in = {d, lat, b.bn.gamma, b.bn.beta};
    for (auto& e : tensors_of({&b.depthwise, &b.pointwise})) in.push_back(e);
    return grad_check([&]() { return project(dec_block(d, lat, b, true), 8); }, in, kBlockStep);
  });
  return cs;
}

GradCheckCase model_case() {
  GradCheckCase c{"breaknet_tiny", "model", kModelTol, kModelStep, {}};
  c.run = []() {
    BreakNet<double> net(tiny_config(), 3);
    randomize(net.parameters(), 4);
    std::mt19937_64 rng(5);
    Tensord x = rand_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
    LabelMap a(16, 16), b(16, 16);
    for (auto& v : a.data) v = static_cast<std::uint8_t>(rng() % kNumClasses);
    for (auto& v : b.data) v = static_cast<std::uint8_t>(rng() % kNumClasses);
    const Tensord target = one_hot<double>({&a, &b}, kNumClasses);
    const std::vector<double> w = {0.25, 0.25, 0.25, 0.25};
    std::vector<Tensord> in;
    for (auto& p : net.parameters()) in.push_back(p.tensor);
    return grad_check(
        [&]() {
          auto out = net.forward(x, true);
          return deep_supervision_loss(out.main, out.aux, target, w);
        },
        in, kModelStep);
  };
  return c;
}

}  // namespace

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.encoder_channels = {2, 2, 2, 2};
  cfg.stem_channels = 2;
  cfg.decoder_width = 2;
  cfg.dropout = 0.0;
  return cfg;
}

std::vector<GradCheckCase> gradcheck_cases(std::string_view scope) {
  std::vector<GradCheckCase> out;
  const bool all = scope == "all";
  if (!all && scope != "op" && scope != "block" && scope != "model") {
    throw std::invalid_argument("unknown gradcheck scope '" + std::string(scope) + "' (op, block, model or all)");
  }
  if (all || scope == "op")
    for (auto& c : op_cases()) out.push_back(std::move(c));
  if (all || scope == "block")
    for (auto& c : block_cases()) out.push_back(std::move(c));
  if (all || scope == "model") out.push_back(model_case());
  return out;
}

}  // namespace breaknet
