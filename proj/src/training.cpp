#include "breaknet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "breaknet/checkpoint.hpp"
#include "breaknet/metrics.hpp"
#include "breaknet/tape.hpp"
#include "breaknet/tensor_io.hpp"

namespace breaknet {

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("train config: " + field + ": " + msg);
  };
  if (!(lr0 > 0.0)) fail("lr0", "must be > 0");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) fail("decay_factor", "must lie in (0, 1]");
  if (decay_every < 1) fail("decay_every", "must be >= 1");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (max_epochs < 1) fail("max_epochs", "must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps", "must be > 0");
  if (aux_loss_weights.size() != 4) fail("aux_loss_weights", "needs 4 values (main and three auxiliary outputs)");
  double s = 0.0;
  for (double w : aux_loss_weights) {
    if (!(w >= 0.0)) fail("aux_loss_weights", "values must be >= 0");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-9) fail("aux_loss_weights", "must sum to 1");
  if (checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"decay_factor", c.decay_factor},
          {"decay_every", c.decay_every},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"aux_loss_weights", c.aux_loss_weights},
          {"augment",
           {{"transpose", c.augment.transpose},
            {"vertical_flip", c.augment.vertical_flip},
            {"horizontal_flip", c.augment.horizontal_flip},
            {"contrast", c.augment.contrast}}},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "lr0") c.lr0 = v.get<double>();
      else if (key == "decay_factor") c.decay_factor = v.get<double>();
      else if (key == "decay_every") c.decay_every = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "max_epochs") c.max_epochs = v.get<int>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "aux_loss_weights") c.aux_loss_weights = v.get<std::vector<double>>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "checkpoint_every") c.checkpoint_every = v.get<int>();
      else if (key == "augment") {
        if (!v.is_object()) throw std::invalid_argument("expected an object");
        for (const auto& [k, b] : v.items()) {
          if (k == "transpose") c.augment.transpose = b.get<bool>();
          else if (k == "vertical_flip") c.augment.vertical_flip = b.get<bool>();
          else if (k == "horizontal_flip") c.augment.horizontal_flip = b.get<bool>();
          else if (k == "contrast") c.augment.contrast = b.get<bool>();
          else throw std::invalid_argument("unknown toggle '" + k + "'");
        }
      } else {
        throw std::invalid_argument("unknown field");
      }
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("train config: " + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("train config: " + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("lr_at: epoch must be >= 0");
  return cfg.lr0 * std::pow(cfg.decay_factor, epoch / cfg.decay_every);
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target, double eps) {
  if (probs.rank() != 4 || probs.shape() != target.shape()) {
    throw ShapeError("dice_loss: probs " + shape_str(probs.shape()) + " and target " + shape_str(target.shape()) +
                     " must be equal N x C x H x W");
  }
  const std::int64_t N = probs.dim(0), C = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  std::vector<double> inter(static_cast<std::size_t>(C), 0.0), denom(static_cast<std::size_t>(C), 0.0),
      gsum(static_cast<std::size_t>(C), 0.0);
  const T* p = probs.ptr();
  const T* g = target.ptr();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const std::int64_t off = (n * C + c) * plane;
      double si = 0.0, sp = 0.0, sg = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) {
        si += static_cast<double>(p[off + i]) * g[off + i];
        sp += p[off + i];
        sg += g[off + i];
      }
      inter[c] += si;
      denom[c] += sp + sg;
      gsum[c] += sg;
    }
  std::vector<std::uint8_t> present(static_cast<std::size_t>(C));
  int K = 0;
  for (std::int64_t c = 0; c < C; ++c) K += present[c] = gsum[c] > 0.0;
  if (K == 0) {
    std::fill(present.begin(), present.end(), std::uint8_t{1});
    K = static_cast<int>(C);
  }
  double mean_d = 0.0;
  for (std::int64_t c = 0; c < C; ++c)
    if (present[c]) mean_d += (2.0 * inter[c] + eps) / (denom[c] + eps);
  mean_d /= K;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(1.0 - mean_d));

  if (detail::needs_grad<T>({&probs}) && probs.requires_grad()) {
    auto pn = probs.node();
    auto gn = target.node();
    auto on = out.node();
    detail::attach(out, "dice_loss", {&probs}, [=]() {
      if (on->grad.empty()) return;
      const double up = on->grad[0];
      T* dp = detail::grad_of(*pn);
      const T* gd = gn->data.data();
      for (std::int64_t c = 0; c < C; ++c) {
        if (!present[c]) continue;
        const double s = denom[c] + eps;
        const double a = -up / K * 2.0 / s;                          // coefficient of g
        const double b = up / K * (2.0 * inter[c] + eps) / (s * s);  // constant term
        for (std::int64_t n = 0; n < N; ++n) {
          const std::int64_t off = (n * C + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) dp[off + i] += static_cast<T>(a * gd[off + i] + b);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> deep_supervision_loss(const Tensor<T>& main, const std::vector<Tensor<T>>& aux, const Tensor<T>& target,
                                const std::vector<double>& weights) {
  if (weights.size() != aux.size() + 1) {
    throw std::invalid_argument("deep_supervision_loss: need " + std::to_string(aux.size() + 1) + " weights");
  }
  Tensor<T> loss = scale(dice_loss(main, target), static_cast<T>(weights[0]));
  for (std::size_t i = 0; i < aux.size(); ++i) {
    if (weights[i + 1] == 0.0) continue;
    loss = add(loss, scale(dice_loss(aux[i], target), static_cast<T>(weights[i + 1])));
  }
  return loss;
}

template <typename T>
Tensor<T> one_hot(const std::vector<const LabelMap*>& labels, int classes) {
  if (labels.empty()) throw std::invalid_argument("one_hot: no label maps");
  const int H = labels[0]->height, W = labels[0]->width;
  const auto N = static_cast<std::int64_t>(labels.size());
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor<T> out({N, classes, H, W}, T(0));
  T* o = out.ptr();
  for (std::int64_t n = 0; n < N; ++n) {
    const LabelMap& l = *labels[n];
    if (l.height != H || l.width != W) throw ShapeError("one_hot: label maps differ in size");
    for (std::int64_t i = 0; i < plane; ++i) {
      const int c = l.data[i];
      if (c >= classes) throw std::invalid_argument("one_hot: class id " + std::to_string(c) + " out of range");
      o[(n * classes + c) * plane + i] = T(1);
    }
  }
  return out;
}

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& st, double lr, double beta1, double beta2, double eps) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
      st.v.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }
  }
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  ++st.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
  const T step_size = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T e = static_cast<T>(eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = st.m[k];
    auto& v = st.v[k];
    if (m.size() != static_cast<std::size_t>(p.numel())) throw std::invalid_argument("adam_step: shape changed");
    T* w = p.ptr();
    const auto& node = *p.node();
    const bool has = !node.grad.empty();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const T g = has ? node.grad[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + e);
    }
  }
}

nlohmann::json to_json(const EpochRecord& r, bool with_time) {
  nlohmann::json j = {{"epoch", r.epoch},       {"lr", r.lr},           {"train_loss", r.train_loss},
                      {"val_dice", r.val_dice}, {"val_iou", r.val_iou}, {"steps", r.steps}};
  if (with_time) j["wall_seconds"] = r.wall_seconds;
  return j;
}

std::uint64_t batch_seed(std::uint64_t seed, int epoch, int batch) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(epoch) + 1));
  z += 0xd1b54a32d192ed03ULL * (static_cast<std::uint64_t>(batch) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

void shuffle(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

template <typename T>
std::vector<std::vector<T>> snapshot(const BreakNet<T>& net) {
  std::vector<std::vector<T>> s;
  for (const auto& p : net.parameters()) s.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  for (const auto& b : net.buffers()) s.emplace_back(b.tensor.data().begin(), b.tensor.data().end());
  return s;
}

template <typename T>
void restore(BreakNet<T>& net, const std::vector<std::vector<T>>& s) {
  std::size_t k = 0;
  for (auto& p : net.parameters()) std::copy(s[k].begin(), s[k].end(), p.tensor.data().begin()), ++k;
  for (auto& b : net.buffers()) std::copy(s[k].begin(), s[k].end(), b.tensor.data().begin()), ++k;
}

void write_text(const std::filesystem::path& path, const std::string& text, bool append = false) {
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace

template <typename T>
TrainLog train(BreakNet<T>& net, const std::vector<BScanSample>& train_set, const std::vector<BScanSample>& val_set,
               const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (val_set.empty()) throw std::invalid_argument("train: empty validation set");
  const int H = train_set[0].height(), W = train_set[0].width();
  for (const auto& s : train_set)
    if (s.height() != H || s.width() != W) throw ShapeError("train: training scans differ in size");

  const bool files = !opts.out_dir.empty();
  if (files) {
    std::error_code ec;
    std::filesystem::create_directories(opts.out_dir, ec);
    if (ec) throw IoError("cannot create " + opts.out_dir.string() + ": " + ec.message());
    write_text(opts.out_dir / "log.jsonl", "");
  }

  net.set_requires_grad(true);
  std::vector<Tensor<T>> params;
  for (auto& p : net.parameters()) params.push_back(p.tensor);
  AdamState<T> adam;
  TrainLog log;
  std::vector<std::vector<T>> best;
  std::mt19937_64 order_rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at(epoch, cfg);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, order_rng);

    double loss_sum = 0.0;
    int batch = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::uint64_t bseed = batch_seed(cfg.seed, epoch, batch);
      std::mt19937_64 aug_rng(bseed);
      net.reseed_dropout(bseed);

      std::vector<BScanSample> samples;
      for (std::size_t i = start; i < end; ++i) samples.push_back(augment(train_set[order[i]], aug_rng, cfg.augment));
      const auto n = static_cast<std::int64_t>(samples.size());
      const std::int64_t h = samples[0].height(), w = samples[0].width();
      Tensor<T> x({n, 1, h, w});
      std::vector<const LabelMap*> labels;
      for (std::int64_t k = 0; k < n; ++k) {
        const auto& s = samples[k];
        if (s.height() != h || s.width() != w) throw ShapeError("train: augmented scans differ in size");
        std::transform(s.image.begin(), s.image.end(), x.ptr() + k * plane, [](float v) { return static_cast<T>(v); });
        labels.push_back(&s.labels);
      }
      const Tensor<T> target = one_hot<T>(labels, net.config().num_classes);

      Tape::current().clear();
      net.zero_grad();
      auto out = net.forward(x, true);
      auto loss = deep_supervision_loss(out.main, out.aux, target, cfg.aux_loss_weights);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        Tape::current().clear();
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", batch " << batch << " (batch seed " << bseed << ")";
        throw NonFiniteLoss(msg.str());
      }
      backward(loss);
      adam_step(params, adam, rec.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
      loss_sum += lv;
      ++rec.steps;
    }
    rec.train_loss = loss_sum / rec.steps;
    log.total_steps += rec.steps;

    const MetricsReport val = evaluate(net, val_set, "validation", opts.eval_batch_size);
    rec.val_dice = val.dice.mean;
    rec.val_iou = val.iou.mean;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);

    const bool improved = rec.val_dice > log.best_val_dice;
    if (improved) {
      log.best_val_dice = rec.val_dice;
      log.best_epoch = epoch;
      best = snapshot(net);
    }
    if (files) {
      write_text(opts.out_dir / "log.jsonl", to_json(rec).dump() + "\n", true);
      const nlohmann::json extra = {{"epoch", epoch}, {"val_dice", rec.val_dice}, {"train", to_json(cfg)}};
      if (improved) {
        save_checkpoint(opts.out_dir / "checkpoint_best.json", net, extra);
        write_text(opts.out_dir / "best.json", nlohmann::json{{"checkpoint", "checkpoint_best.json"},
                                                              {"epoch", epoch},
                                                              {"val_dice", rec.val_dice}}
                                                       .dump(2) +
                                                   "\n");
      }
      if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_epoch%04d.json", epoch);
        save_checkpoint(opts.out_dir / name, net, extra);
      }
    }
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  restore(net, best);
  return log;
}

template Tensor<float> dice_loss<float>(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> dice_loss<double>(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> deep_supervision_loss<float>(const Tensor<float>&, const std::vector<Tensor<float>>&,
                                                    const Tensor<float>&, const std::vector<double>&);
template Tensor<double> deep_supervision_loss<double>(const Tensor<double>&, const std::vector<Tensor<double>>&,
                                                      const Tensor<double>&, const std::vector<double>&);
template Tensor<float> one_hot<float>(const std::vector<const LabelMap*>&, int);
template Tensor<double> one_hot<double>(const std::vector<const LabelMap*>&, int);
template void adam_step<float>(std::vector<Tensor<float>>&, AdamState<float>&, double, double, double, double);
template void adam_step<double>(std::vector<Tensor<double>>&, AdamState<double>&, double, double, double, double);
template TrainLog train<float>(BreakNet<float>&, const std::vector<BScanSample>&, const std::vector<BScanSample>&,
                               const TrainConfig&, const TrainOptions&);
template TrainLog train<double>(BreakNet<double>&, const std::vector<BScanSample>&, const std::vector<BScanSample>&,
                                const TrainConfig&, const TrainOptions&);

}  // namespace breaknet
