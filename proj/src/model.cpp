#include "breaknet/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace breaknet {

std::string_view attention_name(Attention a) { return a == Attention::Pool ? "PL" : "FA"; }

Attention parse_attention(std::string_view name) {
  if (name == "PL") return Attention::Pool;
  if (name == "FA") return Attention::Factorized;
  throw std::invalid_argument("unknown attention strategy '" + std::string(name) + "' (expected PL or FA)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("model config: " + field + ": " + msg);
  };
  if (stages < 1 || stages > 8) fail("stages", "must be in [1, 8]");
  if (static_cast<int>(encoder_channels.size()) != stages) {
    fail("encoder_channels", "length " + std::to_string(encoder_channels.size()) + " != stages " +
                                 std::to_string(stages));
  }
  for (int c : encoder_channels) {
    if (c < 1) fail("encoder_channels", "entries must be >= 1");
  }
  if (paths.empty()) fail("paths", "at least one patch kernel is required");
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (paths[i].kernel < 1 || paths[i].kernel % 2 == 0) fail("paths", "patch kernels must be odd and positive");
    for (std::size_t j = 0; j < i; ++j) {
      if (paths[j].kernel == paths[i].kernel) fail("paths", "duplicate patch kernel " + std::to_string(paths[i].kernel));
    }
  }
  if (stem_channels < 1) fail("stem_channels", "must be >= 1");
  if (decoder_width < 1) fail("decoder_width", "must be >= 1");
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (!(mlp_ratio > 0.0)) fail("mlp_ratio", "must be positive");
  if (heads < 1) fail("heads", "must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout", "must lie in [0, 1)");
  for (std::size_t i = 0; i < encoder_channels.size(); ++i) {
    const int cin = i == 0 ? stem_channels : encoder_channels[i - 1];
    if (cin % heads != 0) {
      fail("heads", "stage " + std::to_string(i + 1) + " input channels " + std::to_string(cin) +
                        " not divisible by heads " + std::to_string(heads));
    }
  }
}

nlohmann::json to_json(const ModelConfig& cfg) {
  nlohmann::json paths = nlohmann::json::array();
  for (const auto& p : cfg.paths) paths.push_back({{"kernel", p.kernel}, {"attention", attention_name(p.attention)}});
  return {{"stages", cfg.stages},
          {"paths", paths},
          {"encoder_channels", cfg.encoder_channels},
          {"stem_channels", cfg.stem_channels},
          {"decoder_width", cfg.decoder_width},
          {"num_classes", cfg.num_classes},
          {"mlp_ratio", cfg.mlp_ratio},
          {"heads", cfg.heads},
          {"dropout", cfg.dropout}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  if (!j.is_object()) throw std::invalid_argument("model config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "stages") {
        cfg.stages = value.get<int>();
      } else if (key == "paths") {
        cfg.paths.clear();
        for (const auto& p : value) {
          cfg.paths.push_back({p.at("kernel").get<int>(), parse_attention(p.at("attention").get<std::string>())});
        }
      } else if (key == "encoder_channels") {
        cfg.encoder_channels = value.get<std::vector<int>>();
      } else if (key == "stem_channels") {
        cfg.stem_channels = value.get<int>();
      } else if (key == "decoder_width") {
        cfg.decoder_width = value.get<int>();
      } else if (key == "num_classes") {
        cfg.num_classes = value.get<int>();
      } else if (key == "mlp_ratio") {
        cfg.mlp_ratio = value.get<double>();
      } else if (key == "heads") {
        cfg.heads = value.get<int>();
      } else if (key == "dropout") {
        cfg.dropout = value.get<double>();
      } else {
        throw std::invalid_argument("unknown field");
      }
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("model config: " + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("model config: " + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {"BL1", "BL2", "BL3", "BL4", "BreakNet"};
  return names;
}

ModelConfig build_variant(std::string_view name) {
  ModelConfig cfg;
  using A = Attention;
  if (name == "BL1") {
    cfg.paths = {{3, A::Pool}};
  } else if (name == "BL2") {
    cfg.paths = {{3, A::Factorized}};
  } else if (name == "BL3") {
    cfg.paths = {{3, A::Pool}, {5, A::Pool}};
  } else if (name == "BL4") {
    cfg.paths = {{3, A::Factorized}, {5, A::Factorized}};
  } else if (name == "BreakNet") {
    cfg.paths = {{3, A::Pool}, {5, A::Factorized}};
  } else {
    throw std::invalid_argument("unknown model variant '" + std::string(name) +
                                "' (expected BL1, BL2, BL3, BL4 or BreakNet)");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Blocks

template <typename T>
Tensor<T> stem_forward(const Tensor<T>& image, StemParams<T>& p, bool train) {
  auto x = leaky_relu(batch_norm(p.conv1(image), p.bn1.gamma, p.bn1.beta, p.bn1.stats, train));
  return leaky_relu(batch_norm(p.conv2(x), p.bn2.gamma, p.bn2.beta, p.bn2.stats, train));
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const Conv<T>& embed) {
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("patch_embed: spatial dims must be even, got " + shape_str(x.shape()));
  }
  return embed(x);
}

template <typename T>
Tensor<T> cnn_block(const Tensor<T>& x, const CnnBlockParams<T>& p) {
  return add(p.project(p.depthwise(p.expand(x))), x);
}

template <typename T>
Tensor<T> sa_pool(const Tensor<T>& tokens) {
  return avg_pool2d(tokens, 3, 1, 1);
}

template <typename T>
Tensor<T> sa_factorized(const Tensor<T>& tokens, const Conv<T>& query, const Conv<T>& key, const Conv<T>& value,
                        int heads) {
  const std::int64_t N = tokens.dim(0), C = tokens.dim(1), H = tokens.dim(2), W = tokens.dim(3);
  if (heads < 1 || C % heads != 0) {
    throw ShapeError("sa_factorized: channels " + std::to_string(C) + " not divisible by heads " +
                     std::to_string(heads));
  }
  const std::int64_t d = C / heads;
  const Shape per_head{N * heads, d, H * W};
  auto q = reshape(query(tokens), per_head);
  auto k = softmax(reshape(key(tokens), per_head), 2);
  auto v = reshape(value(tokens), per_head);
  auto context = batched_matmul(k, v, false, true);       // d x d per head
  auto mixed = batched_matmul(context, q, true, false);  // d x T
  return reshape(scale(mixed, T(1) / std::sqrt(static_cast<T>(d))), tokens.shape());
}

template <typename T>
Tensor<T> trans_block(const Tensor<T>& x, const TransBlockParams<T>& p, const ForwardContext& ctx) {
  auto normed = layer_norm(x, p.norm1.gamma, p.norm1.beta);
  auto mixed = p.attention == Attention::Pool ? sa_pool(normed)
                                              : sa_factorized(normed, p.query, p.key, p.value, p.heads);
  std::mt19937_64 fallback;
  std::mt19937_64& rng = ctx.rng ? *ctx.rng : fallback;
  auto xbar = dropout(mixed, ctx.dropout, ctx.train, rng);
  auto skip = add(xbar, x);
  auto hidden = gelu(p.fc1(layer_norm(skip, p.norm2.gamma, p.norm2.beta)));
  return add(dropout(p.fc2(hidden), ctx.dropout, ctx.train, rng), skip);
}

template <typename T>
Tensor<T> msfe_forward(const Tensor<T>& x, const MsfeParams<T>& p, const ForwardContext& ctx) {
  std::vector<Tensor<T>> trans_out, cnn_out;
  for (const auto& path : p.paths) {
    auto tokens = patch_embed(x, path.embed);
    cnn_out.push_back(cnn_block(tokens, path.cnn));
    trans_out.push_back(trans_block(tokens, path.trans, ctx));
  }
  std::vector<Tensor<T>> parts = std::move(trans_out);
  parts.insert(parts.end(), cnn_out.begin(), cnn_out.end());
  return p.fuse(concat(parts, 1));
}

template <typename T>
Tensor<T> dec_block(const Tensor<T>& d_next, const Tensor<T>& lateral, DecBlockParams<T>& p, bool train) {
  if (d_next.rank() != 4 || lateral.rank() != 4 || lateral.dim(0) != d_next.dim(0) ||
      lateral.dim(1) != d_next.dim(1) || lateral.dim(2) != 2 * d_next.dim(2) || lateral.dim(3) != 2 * d_next.dim(3)) {
    throw ShapeError("dec_block: lateral " + shape_str(lateral.shape()) + " must have the channels of and twice " +
                     "the spatial size of the decoder input " + shape_str(d_next.shape()));
  }
  auto x = leaky_relu(batch_norm(p.depthwise(d_next), p.bn.gamma, p.bn.beta, p.bn.stats, train));
  auto up = bilinear_upsample(x, lateral.dim(2), lateral.dim(3));
  return p.pointwise(add(up, lateral));
}

// ---------------------------------------------------------------------------
// BreakNet

namespace {

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Conv<T> conv(std::int64_t cin, std::int64_t cout, int k, int stride, int groups) {
    Conv<T> c;
    const std::int64_t fan_in = (cin / groups) * k * k;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> w(static_cast<std::size_t>(cout * (cin / groups) * k * k));
    for (auto& v : w) v = static_cast<T>((2.0 * uniform() - 1.0) * bound);
    c.weight = Tensor<T>(Shape{cout, cin / groups, k, k}, std::move(w));
    c.bias = Tensor<T>(Shape{cout}, T(0));
    c.stride = stride;
    c.padding = k / 2;
    c.groups = groups;
    return c;
  }
  Conv<T> pointwise(std::int64_t cin, std::int64_t cout) { return conv(cin, cout, 1, 1, 1); }
  Conv<T> depthwise(std::int64_t c, int k, int stride) { return conv(c, c, k, stride, static_cast<int>(c)); }

 private:
  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
  std::mt19937_64 rng_;
};

template <typename T>
LayerNormParams<T> make_ln(std::int64_t c) {
  return {Tensor<T>(Shape{c}, T(1)), Tensor<T>(Shape{c}, T(0))};
}

template <typename T>
BatchNormParams<T> make_bn(std::int64_t c) {
  return {Tensor<T>(Shape{c}, T(1)), Tensor<T>(Shape{c}, T(0)), BatchNormStats<T>(c)};
}

}  // namespace

template <typename T>
BreakNet<T>::BreakNet(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg_.validate();
  Initializer<T> init(seed);
  const int S = cfg_.stages;
  const int Dw = cfg_.decoder_width;

  stem.conv1 = init.conv(1, cfg_.stem_channels, 3, 1, 1);
  stem.bn1 = make_bn<T>(cfg_.stem_channels);
  stem.conv2 = init.conv(cfg_.stem_channels, cfg_.stem_channels, 3, 1, 1);
  stem.bn2 = make_bn<T>(cfg_.stem_channels);

  for (int i = 0; i < S; ++i) {
    const std::int64_t cin = i == 0 ? cfg_.stem_channels : cfg_.encoder_channels[i - 1];
    const std::int64_t hidden = std::max<std::int64_t>(1, std::llround(cfg_.mlp_ratio * static_cast<double>(cin)));
    MsfeParams<T> stage;
    for (const auto& pc : cfg_.paths) {
      MsfePathParams<T> path;
      path.kernel = pc.kernel;
      path.embed = init.depthwise(cin, pc.kernel, 2);
      path.cnn.expand = init.pointwise(cin, cin);
      path.cnn.depthwise = init.depthwise(cin, 3, 1);
      path.cnn.project = init.pointwise(cin, cin);
      path.trans.attention = pc.attention;
      path.trans.heads = cfg_.heads;
      path.trans.norm1 = make_ln<T>(cin);
      path.trans.norm2 = make_ln<T>(cin);
      if (pc.attention == Attention::Factorized) {
        path.trans.query = init.pointwise(cin, cin);
        path.trans.key = init.pointwise(cin, cin);
        path.trans.value = init.pointwise(cin, cin);
      }
      path.trans.fc1 = init.pointwise(cin, hidden);
      path.trans.fc2 = init.pointwise(hidden, cin);
      stage.paths.push_back(std::move(path));
    }
    const std::int64_t fused_in = 2 * static_cast<std::int64_t>(cfg_.paths.size()) * cin;
    stage.fuse = init.pointwise(fused_in, cfg_.encoder_channels[i]);
    encoder.push_back(std::move(stage));
  }

  decoder.bottleneck = init.pointwise(cfg_.encoder_channels[S - 1], Dw);
  decoder.laterals.push_back(init.pointwise(cfg_.stem_channels, Dw));
  for (int i = 0; i + 1 < S; ++i) decoder.laterals.push_back(init.pointwise(cfg_.encoder_channels[i], Dw));
  for (int i = 0; i < S; ++i) {
    DecBlockParams<T> blk;
    blk.depthwise = init.depthwise(Dw, 3, 1);
    blk.bn = make_bn<T>(Dw);
    blk.pointwise = init.pointwise(Dw, Dw);
    decoder.blocks.push_back(std::move(blk));
    decoder.heads.push_back(init.pointwise(Dw, cfg_.num_classes));
  }
  register_all();
  set_requires_grad(true);
}

template <typename T>
void BreakNet<T>::register_all() {
  params_.clear();
  buffers_.clear();
  auto conv = [this](const std::string& name, Conv<T>& c) {
    params_.push_back({name + ".weight", c.weight});
    params_.push_back({name + ".bias", c.bias});
  };
  auto ln = [this](const std::string& name, LayerNormParams<T>& p) {
    params_.push_back({name + ".gamma", p.gamma});
    params_.push_back({name + ".beta", p.beta});
  };
  auto bn = [this](const std::string& name, BatchNormParams<T>& p) {
    params_.push_back({name + ".gamma", p.gamma});
    params_.push_back({name + ".beta", p.beta});
    buffers_.push_back({name + ".running_mean", p.stats.running_mean});
    buffers_.push_back({name + ".running_var", p.stats.running_var});
  };

  conv("stem.conv1", stem.conv1);
  bn("stem.bn1", stem.bn1);
  conv("stem.conv2", stem.conv2);
  bn("stem.bn2", stem.bn2);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string stage = "msfe" + std::to_string(i + 1);
    for (auto& path : encoder[i].paths) {
      const std::string pre = stage + ".k" + std::to_string(path.kernel);
      conv(pre + ".embed", path.embed);
      conv(pre + ".cnn.expand", path.cnn.expand);
      conv(pre + ".cnn.depthwise", path.cnn.depthwise);
      conv(pre + ".cnn.project", path.cnn.project);
      ln(pre + ".trans.norm1", path.trans.norm1);
      if (path.trans.attention == Attention::Factorized) {
        conv(pre + ".trans.query", path.trans.query);
        conv(pre + ".trans.key", path.trans.key);
        conv(pre + ".trans.value", path.trans.value);
      }
      ln(pre + ".trans.norm2", path.trans.norm2);
      conv(pre + ".trans.fc1", path.trans.fc1);
      conv(pre + ".trans.fc2", path.trans.fc2);
    }
    conv(stage + ".fuse", encoder[i].fuse);
  }
  conv("decoder.bottleneck", decoder.bottleneck);
  for (std::size_t i = 0; i < decoder.laterals.size(); ++i) {
    conv("decoder.lateral" + std::to_string(i), decoder.laterals[i]);
  }
  for (std::size_t i = 0; i < decoder.blocks.size(); ++i) {
    const std::string pre = "decoder.dec" + std::to_string(i + 1);
    conv(pre + ".depthwise", decoder.blocks[i].depthwise);
    bn(pre + ".bn", decoder.blocks[i].bn);
    conv(pre + ".pointwise", decoder.blocks[i].pointwise);
  }
  for (std::size_t i = 0; i < decoder.heads.size(); ++i) {
    conv("decoder.head" + std::to_string(i + 1), decoder.heads[i]);
  }
}

template <typename T>
std::int64_t BreakNet<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void BreakNet<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void BreakNet<T>::set_requires_grad(bool on) {
  for (auto& p : params_) p.tensor.set_requires_grad(on);
}

template <typename T>
typename BreakNet<T>::Outputs BreakNet<T>::forward(const Tensor<T>& image, bool train) {
  const std::int64_t div = cfg_.size_divisor();
  if (image.rank() != 4 || image.dim(1) != 1) {
    throw ShapeError("BreakNet: expected N x 1 x H x W input, got " + shape_str(image.shape()));
  }
  if (image.dim(2) % div != 0 || image.dim(3) % div != 0) {
    throw ShapeError("BreakNet: input height and width must be divisible by " + std::to_string(div) + ", got " +
                     shape_str(image.shape()));
  }
  const std::int64_t H = image.dim(2), W = image.dim(3);
  const int S = cfg_.stages;
  ForwardContext ctx{train, cfg_.dropout, &dropout_rng_};

  Outputs out;
  out.stem = stem_forward(image, stem, train);
  Tensor<T> cur = out.stem;
  for (int i = 0; i < S; ++i) {
    cur = msfe_forward(cur, encoder[i], ctx);
    out.encoder.push_back(cur);
  }

  std::vector<Tensor<T>> laterals;
  laterals.push_back(decoder.laterals[0](out.stem));
  for (int i = 1; i < S; ++i) laterals.push_back(decoder.laterals[i](out.encoder[i - 1]));

  out.decoder.resize(S);
  Tensor<T> d = decoder.bottleneck(out.encoder[S - 1]);
  for (int i = S - 1; i >= 0; --i) {
    d = dec_block(d, laterals[i], decoder.blocks[i], train);
    out.decoder[i] = d;
  }

  out.main = softmax(decoder.heads[0](out.decoder[0]), 1);
  for (int i = 1; i < S; ++i) {
    // The head is pointwise and bilinear weights sum to one, so segmenting
    // before resizing equals segmenting the resized (D + lateral) map.
    auto logits = decoder.heads[i](add(out.decoder[i], laterals[i]));
    out.aux.push_back(softmax(bilinear_upsample(logits, H, W), 1));
  }
  return out;
}

#define BREAKNET_INSTANTIATE_BLOCKS(T)                                                                     \
  template Tensor<T> stem_forward(const Tensor<T>&, StemParams<T>&, bool);                                \
  template Tensor<T> patch_embed(const Tensor<T>&, const Conv<T>&);                                        \
  template Tensor<T> cnn_block(const Tensor<T>&, const CnnBlockParams<T>&);                                \
  template Tensor<T> sa_pool(const Tensor<T>&);                                                            \
  template Tensor<T> sa_factorized(const Tensor<T>&, const Conv<T>&, const Conv<T>&, const Conv<T>&, int); \
  template Tensor<T> trans_block(const Tensor<T>&, const TransBlockParams<T>&, const ForwardContext&);     \
  template Tensor<T> msfe_forward(const Tensor<T>&, const MsfeParams<T>&, const ForwardContext&);          \
  template Tensor<T> dec_block(const Tensor<T>&, const Tensor<T>&, DecBlockParams<T>&, bool);              \
  template class BreakNet<T>;

BREAKNET_INSTANTIATE_BLOCKS(float)
BREAKNET_INSTANTIATE_BLOCKS(double)

}  // namespace breaknet
