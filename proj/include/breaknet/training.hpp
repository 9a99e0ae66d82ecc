#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "breaknet/model.hpp"
#include "breaknet/synth.hpp"
#include "json.hpp"

namespace breaknet {

struct TrainConfig {
  double lr0 = 1e-2;
  double decay_factor = 0.8;
  int decay_every = 5;
  int batch_size = 8;
  int max_epochs = 60;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::vector<double> aux_loss_weights = {0.25, 0.25, 0.25, 0.25};  // main, then DEC2..DEC4
  AugmentToggles augment;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs between periodic checkpoints, 0 = best only

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Missing fields keep their defaults; unknown fields are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// lr0 * decay_factor^floor(epoch / decay_every).
double lr_at(int epoch, const TrainConfig& cfg);

/// 1 - mean soft Dice over the classes present in the target, with
/// d_c = (2 sum p g + eps) / (sum p + sum g + eps) summed over N, H, W.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target_onehot, double eps = 1e-6);

/// weights[0] * dice(main) + sum_i weights[i + 1] * dice(aux[i]).
template <typename T>
Tensor<T> deep_supervision_loss(const Tensor<T>& main, const std::vector<Tensor<T>>& aux, const Tensor<T>& target,
                                const std::vector<double>& weights);

/// N x classes x H x W one-hot encoding of label maps of equal size.
template <typename T>
Tensor<T> one_hot(const std::vector<const LabelMap*>& labels, int classes);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update from each tensor's accumulated gradient
/// (a tensor without a gradient counts as zero).
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_dice = 0.0;
  double val_iou = 0.0;
  int steps = 0;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_dice = -1.0;
  std::int64_t total_steps = 0;
};

nlohmann::json to_json(const EpochRecord& r, bool with_time = true);

/// Non-finite loss during training.
class NonFiniteLoss : public NumericError {
 public:
  using NumericError::NumericError;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::function<void(const EpochRecord&)> on_epoch;
  int eval_batch_size = 8;
};

/// Seeded shuffling and augmentation, per-epoch validation by mean layer
/// Dice. The best epoch's weights are restored into `net` at the end and,
/// with an output directory, saved as checkpoint_best.{json,bin} next to
/// log.jsonl and best.json. Throws NonFiniteLoss naming the batch seed.
template <typename T>
TrainLog train(BreakNet<T>& net, const std::vector<BScanSample>& train_set, const std::vector<BScanSample>& val_set,
               const TrainConfig& cfg, const TrainOptions& opts = {});

/// Seed of batch `batch` in `epoch`; drives its augmentation and dropout.
std::uint64_t batch_seed(std::uint64_t seed, int epoch, int batch);

}  // namespace breaknet
