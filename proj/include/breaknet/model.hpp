#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "breaknet/ops.hpp"
#include "breaknet/tensor.hpp"
#include "json.hpp"

namespace breaknet {

/// Token mixer inside a Trans block.
enum class Attention {
  Pool,        // PL: 3x3 average pooling
  Factorized,  // FA: softmax over the token axis of k, then q * (k^T v) / sqrt(d)
};

std::string_view attention_name(Attention a);
Attention parse_attention(std::string_view name);

struct PathConfig {
  int kernel = 3;
  Attention attention = Attention::Pool;

  bool operator==(const PathConfig&) const = default;
};

struct ModelConfig {
  int stages = 4;
  std::vector<PathConfig> paths = {{3, Attention::Pool}, {5, Attention::Factorized}};
  std::vector<int> encoder_channels = {8, 16, 32, 64};
  int stem_channels = 8;
  int decoder_width = 32;
  int num_classes = 9;  // above-ILM, NFL, IPL, INL, OPL, ONL, EZ, RPE, below-BM
  double mlp_ratio = 4.0;
  int heads = 1;
  double dropout = 0.1;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  /// Input height and width must be multiples of this.
  std::int64_t size_divisor() const { return std::int64_t{1} << stages; }

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Ablation table variants: BL1, BL2, BL3, BL4 and BreakNet.
ModelConfig build_variant(std::string_view name);
const std::vector<std::string>& variant_names();

// ---------------------------------------------------------------------------
// Parameter groups

template <typename T>
struct Conv {
  Tensor<T> weight;
  Tensor<T> bias;
  int stride = 1;
  int padding = 0;
  int groups = 1;

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding, groups); }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormStats<T> stats;
};

template <typename T>
struct StemParams {
  Conv<T> conv1;
  BatchNormParams<T> bn1;
  Conv<T> conv2;
  BatchNormParams<T> bn2;
};

template <typename T>
struct CnnBlockParams {
  Conv<T> expand;  // pointwise
  Conv<T> depthwise;
  Conv<T> project;  // pointwise
};

template <typename T>
struct TransBlockParams {
  Attention attention = Attention::Pool;
  int heads = 1;
  LayerNormParams<T> norm1;
  LayerNormParams<T> norm2;
  Conv<T> query, key, value;  // only for Attention::Factorized
  Conv<T> fc1, fc2;
};

template <typename T>
struct MsfePathParams {
  int kernel = 3;
  Conv<T> embed;  // depthwise k x k, stride 2
  CnnBlockParams<T> cnn;
  TransBlockParams<T> trans;
};

template <typename T>
struct MsfeParams {
  std::vector<MsfePathParams<T>> paths;
  Conv<T> fuse;
};

template <typename T>
struct DecBlockParams {
  Conv<T> depthwise;
  BatchNormParams<T> bn;
  Conv<T> pointwise;
};

template <typename T>
struct DecoderParams {
  Conv<T> bottleneck;             // deepest encoder map -> decoder width
  std::vector<Conv<T>> laterals;  // [0] stem, [i] MSFE_i for i < stages
  std::vector<DecBlockParams<T>> blocks;  // [i] is DEC_{i+1}
  std::vector<Conv<T>> heads;     // [i] segments DEC_{i+1}
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Mode and randomness shared by one forward pass.
struct ForwardContext {
  bool train = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

// ---------------------------------------------------------------------------
// Blocks

/// Two (3x3 conv -> BN -> leaky ReLU) units at full resolution.
template <typename T>
Tensor<T> stem_forward(const Tensor<T>& image, StemParams<T>& p, bool train);

/// Stride-2 depthwise k x k convolution; halves H and W, keeps channels.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const Conv<T>& embed);

/// Pointwise -> depthwise 3x3 -> pointwise, plus the input.
template <typename T>
Tensor<T> cnn_block(const Tensor<T>& x, const CnnBlockParams<T>& p);

/// 3x3 average pooling token mixer, stride 1, shape preserving.
template <typename T>
Tensor<T> sa_pool(const Tensor<T>& tokens);

/// Linear-complexity attention over the H*W tokens of each head.
///
/// With d = C / heads, the key map is softmax-normalized over tokens, the
/// d x d context k^T v is formed once per head, and every token's output is
/// its query times the context scaled by 1/sqrt(d).
template <typename T>
Tensor<T> sa_factorized(const Tensor<T>& tokens, const Conv<T>& query, const Conv<T>& key, const Conv<T>& value,
                        int heads);

/// Xbar = Dpt(SA(Norm(x))); out = Dpt(MLP(Norm(Xbar + x))) + Xbar + x.
template <typename T>
Tensor<T> trans_block(const Tensor<T>& x, const TransBlockParams<T>& p, const ForwardContext& ctx);

/// One encoder stage: every path embeds, runs its CNN and Trans block, and the
/// trans outputs followed by the CNN outputs are concatenated and fused.
template <typename T>
Tensor<T> msfe_forward(const Tensor<T>& x, const MsfeParams<T>& p, const ForwardContext& ctx);

/// D = pointwise(UP(LR(BN(depthwise(d_next)))) + lateral).
template <typename T>
Tensor<T> dec_block(const Tensor<T>& d_next, const Tensor<T>& lateral, DecBlockParams<T>& p, bool train);

// ---------------------------------------------------------------------------

template <typename T>
class BreakNet {
 public:
  struct Outputs {
    Tensor<T> main;              // softmax probabilities, N x classes x H x W
    std::vector<Tensor<T>> aux;  // aux[i] comes from DEC_{i+2}
    Tensor<T> stem;
    std::vector<Tensor<T>> encoder;  // MSFE_1 .. MSFE_stages outputs
    std::vector<Tensor<T>> decoder;  // decoder[i] is D_{i+1}
  };

  explicit BreakNet(ModelConfig cfg, std::uint64_t seed = 0);

  /// Throws ShapeError when the input is not N x 1 x H x W with H, W divisible by 2^stages.
  Outputs forward(const Tensor<T>& image, bool train);

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedTensor<T>>& parameters() { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  /// Batch-norm running statistics, saved with checkpoints but not trained.
  std::vector<NamedTensor<T>>& buffers() { return buffers_; }
  const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }
  std::int64_t parameter_count() const;
  void zero_grad();
  void set_requires_grad(bool on);
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  StemParams<T> stem;
  std::vector<MsfeParams<T>> encoder;
  DecoderParams<T> decoder;

 private:
  void register_all();

  ModelConfig cfg_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::mt19937_64 dropout_rng_;
};

extern template class BreakNet<float>;
extern template class BreakNet<double>;

}  // namespace breaknet
