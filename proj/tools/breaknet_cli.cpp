// breaknet: synthetic data generation, training, evaluation, ablation and
// gradient checks for the BreakNet retinal layer segmenter.
//
// Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "breaknet/checkpoint.hpp"
#include "breaknet/dataset.hpp"
#include "breaknet/gradcheck_suite.hpp"
#include "breaknet/metrics.hpp"
#include "breaknet/model.hpp"
#include "breaknet/synth.hpp"
#include "breaknet/tensor_io.hpp"
#include "breaknet/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace breaknet;

namespace {

constexpr const char* kVersion = "1.0.0";

enum Exit { kOk = 0, kUsage = 1, kNumeric = 2, kIo = 3 };

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed: " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// --seed beats BREAKNET_SEED, which beats the config file.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_seed) {
  if (flag) return *flag;
  if (const char* env = std::getenv("BREAKNET_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw std::invalid_argument("BREAKNET_SEED: not an unsigned integer: " + std::string(env));
    return v;
  }
  return config_seed;
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;
  bool deterministic = false;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& dir) const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_json(dir / "run.json", {{"command", command},
                                  {"argv", argv},
                                  {"config", config},
                                  {"seed", seed},
                                  {"artifacts", artifacts},
                                  {"tool_version", kVersion},
                                  {"deterministic", deterministic},
                                  {"threads", 1},
                                  {"wall_seconds", wall}});
  }
};

std::uint64_t volume_seed(std::uint64_t seed, int v) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(v + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string volume_dir(int v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "vol_%04d", v);
  return buf;
}

ModelConfig resolve_model(const std::string& variant, const std::string& model_config) {
  if (!model_config.empty()) return model_config_from_json(read_json(model_config));
  return build_variant(variant);
}

TrainConfig resolve_train(const std::string& path, std::optional<std::uint64_t> seed_flag) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : train_config_from_json(read_json(path));
  cfg.seed = resolve_seed(seed_flag, cfg.seed);
  return cfg;
}

// Training scans and validation scans. Without --val the last eighth of the
// data (at least one scan) is held out.
std::pair<std::vector<BScanSample>, std::vector<BScanSample>> split_data(const std::string& data_dir,
                                                                         const std::string& val_dir, bool degraded) {
  const Dataset data = load_dataset(data_dir);
  std::vector<BScanSample> train = degraded ? with_degraded_labels(data) : data.scans;
  std::vector<BScanSample> val;
  if (!val_dir.empty()) {
    val = load_dataset(val_dir).scans;
  } else {
    if (train.size() < 2) throw std::invalid_argument("--data: need at least 2 scans when --val is not given");
    const std::size_t n_val = std::max<std::size_t>(1, train.size() / 8);
    val.assign(data.scans.end() - static_cast<std::ptrdiff_t>(n_val), data.scans.end());
    train.resize(train.size() - n_val);
  }
  return {std::move(train), std::move(val)};
}

void print_epoch(const std::string& tag, const EpochRecord& r) {
  std::printf("%s epoch %3d  lr %.3e  loss %.4f  val Dice %.4f  IoU %.4f  (%.1fs)\n", tag.c_str(), r.epoch, r.lr,
              r.train_loss, r.val_dice, r.val_iou, r.wall_seconds);
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
  int volumes = 1, frames = 1, degrade = 0;
  std::vector<std::string> regimes;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a, Manifest& m) {
  SynthSpec spec = a.spec.empty() ? SynthSpec{} : synth_spec_from_json(read_json(a.spec));
  spec.seed = resolve_seed(a.seed, spec.seed);
  spec.validate();
  if (a.volumes < 1 || a.frames < 1) throw std::invalid_argument("--volumes and --frames must be >= 1");
  if (a.degrade == 1 || a.degrade < 0) throw std::invalid_argument("--degrade: keyframe stride must be >= 2");
  std::vector<ShadowRegime> regimes;
  for (const auto& r : a.regimes) regimes.push_back(parse_regime(r));
  make_dir(a.out);
  m.seed = spec.seed;
  m.config = {{"spec", to_json(spec)},
              {"volumes", a.volumes},
              {"frames", a.frames},
              {"degrade", a.degrade},
              {"regimes", a.regimes}};
  for (int v = 0; v < a.volumes; ++v) {
    SynthSpec vs = spec;
    vs.seed = a.volumes == 1 ? spec.seed : volume_seed(spec.seed, v);
    if (!regimes.empty()) {
      vs.regime = regimes[static_cast<std::size_t>(v) % regimes.size()];
      if (vs.regime == ShadowRegime::MultipleClose) vs.shadow_count = std::max(2, vs.shadow_count);
      vs.validate();
    }
    const Volume vol = gen_volume(vs, a.frames);
    const fs::path dir = fs::path(a.out) / volume_dir(v);
    if (a.degrade > 0) {
      const DegradedLabels deg = degrade_ground_truth(vol, a.degrade);
      write_volume(dir, vol, &deg);
    } else {
      write_volume(dir, vol);
    }
    m.artifacts.push_back(volume_dir(v));
  }
  std::printf("wrote %d volume(s) of %d frame(s) to %s\n", a.volumes, a.frames, a.out.c_str());
  m.write(a.out);
  return kOk;
}

struct TrainArgs {
  std::string variant = "BreakNet", model_config, data, val, config, out;
  bool degraded = false;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, Manifest& m) {
  const ModelConfig mc = resolve_model(a.variant, a.model_config);
  const TrainConfig tc = resolve_train(a.config, a.seed);
  auto [train_set, val_set] = split_data(a.data, a.val, a.degraded);
  make_dir(a.out);
  m.seed = tc.seed;
  m.config = {{"model", to_json(mc)}, {"train", to_json(tc)}, {"variant", a.variant},
              {"data", a.data},       {"degraded_labels", a.degraded}, {"data_hash", dataset_hash(train_set)}};
  BreakNet<float> net(mc, tc.seed);
  TrainOptions opts;
  opts.out_dir = a.out;
  opts.on_epoch = [&](const EpochRecord& r) { print_epoch(a.variant, r); };
  const TrainLog log = train(net, train_set, val_set, tc, opts);
  std::printf("best epoch %d, validation Dice %.4f\n", log.best_epoch, log.best_val_dice);
  m.artifacts = {"log.jsonl", "best.json", "checkpoint_best.json", "checkpoint_best.bin"};
  m.write(a.out);
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, predictions, data, out, method = "BreakNet";
  bool overlay = false;
};

int cmd_eval(const EvalArgs& a, Manifest& m) {
  if (a.checkpoint.empty() && a.predictions.empty()) throw std::invalid_argument("eval needs --checkpoint or --predictions");
  const Dataset data = load_dataset(a.data);
  std::vector<LabelMap> pred;
  if (!a.predictions.empty()) {
    // label maps produced elsewhere, stored as a dataset
    const Dataset p = load_dataset(a.predictions);
    if (p.scans.size() != data.scans.size()) {
      throw std::invalid_argument("--predictions holds " + std::to_string(p.scans.size()) + " scans, --data holds " +
                                  std::to_string(data.scans.size()));
    }
    for (const auto& s : p.scans) pred.push_back(s.labels);
  } else {
    BreakNet<float> net = load_checkpoint<float>(a.checkpoint);
    if (net.config().num_classes != kNumClasses) {
      throw std::invalid_argument("checkpoint predicts " + std::to_string(net.config().num_classes) +
                                  " classes but the data has " + std::to_string(kNumClasses));
    }
    pred = predict_labels(net, data.scans);
  }
  make_dir(a.out);
  m.config = {{"checkpoint", a.checkpoint},
              {"predictions", a.predictions},
              {"data", a.data},
              {"data_hash", dataset_hash(data.scans)}};
  std::vector<LabelMap> gt;
  for (const auto& s : data.scans) gt.push_back(s.labels);
  const MetricsReport rep = evaluate_labels(pred, gt, data.scans.front().axial_pitch_um, a.method);
  write_reports(a.out, {rep});
  m.artifacts = {"report.json", "report.csv", "report_layers.csv"};
  if (a.overlay) {
    make_dir(fs::path(a.out) / "overlays");
    for (std::size_t i = 0; i < data.scans.size(); ++i) {
      const auto& s = data.scans[i];
      const auto prof = label_to_boundaries(pred[i], s.axial_pitch_um).profile;
      char name[64];
      std::snprintf(name, sizeof name, "overlays/scan_%04zu.pgm", i);
      write_pgm(fs::path(a.out) / name, s.image, s.height(), s.width(), &prof);
      m.artifacts.emplace_back(name);
    }
  }
  std::cout << report_csv({rep});
  m.write(a.out);
  return kOk;
}

struct AblateArgs {
  std::string data, val, test, config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_ablate(const AblateArgs& a, Manifest& m) {
  const TrainConfig tc = resolve_train(a.config, a.seed);
  auto [train_set, val_set] = split_data(a.data, a.val, false);
  const std::vector<BScanSample> test_set = a.test.empty() ? val_set : load_dataset(a.test).scans;
  make_dir(a.out);
  const std::string hash = dataset_hash(train_set);
  m.seed = tc.seed;
  m.config = {{"train", to_json(tc)}, {"data", a.data}, {"data_hash", hash}};
  std::vector<MetricsReport> rows;
  json timing = json::array();
  for (const auto& variant : variant_names()) {
    BreakNet<float> net(build_variant(variant), tc.seed);
    TrainOptions opts;
    opts.out_dir = fs::path(a.out) / variant;
    opts.on_epoch = [&](const EpochRecord& r) { print_epoch(variant, r); };
    const auto t0 = std::chrono::steady_clock::now();
    train(net, train_set, val_set, tc, opts);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(evaluate(net, test_set, variant));
    timing.push_back({{"method", variant}, {"wall_seconds", secs}, {"data_hash", hash}});
    m.artifacts.push_back(variant);
  }
  write_reports(a.out, rows);
  std::ostringstream csv;
  csv << "Method,Dice,IoU,FailureRate,CE_um,TE_um,WallSeconds,DataHash\n";
  std::istringstream body(report_csv(rows));
  std::string line;
  std::getline(body, line);  // header
  for (std::size_t i = 0; std::getline(body, line); ++i) {
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.1f", timing[i]["wall_seconds"].get<double>());
    csv << line << ',' << secs << ',' << hash << '\n';
  }
  {
    std::ofstream os(fs::path(a.out) / "ablation.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write ablation.csv");
    os << csv.str();
  }
  write_json(fs::path(a.out) / "timing.json", timing);
  m.artifacts.insert(m.artifacts.end(), {"ablation.csv", "timing.json", "report.json", "report.csv"});
  std::cout << csv.str();
  m.write(a.out);
  return kOk;
}

int cmd_gradcheck(const std::string& scope, double tol_override) {
  int failed = 0;
  for (const auto& c : gradcheck_cases(scope)) {
    const double tol = tol_override > 0.0 ? tol_override : c.tolerance;
    const GradCheckResult r = c.run();
    const bool ok = r.max_rel_error < tol;
    failed += !ok;
    std::printf("%-6s %-26s max rel error %.3e  (tol %.0e)  %s\n", c.scope.c_str(), c.name.c_str(), r.max_rel_error,
                tol, ok ? "ok" : "FAIL");
  }
  std::fflush(stdout);
  return failed ? kNumeric : kOk;
}

struct ExportArgs {
  std::string data, out;
  bool overlay = true, labels = false;
};

int cmd_export_pgm(const ExportArgs& a, Manifest& m) {
  const Dataset data = load_dataset(a.data);
  make_dir(a.out);
  m.config = {{"data", a.data}, {"overlay", a.overlay}, {"labels", a.labels}};
  for (std::size_t i = 0; i < data.scans.size(); ++i) {
    const auto& s = data.scans[i];
    char name[64];
    std::snprintf(name, sizeof name, "scan_%04zu.pgm", i);
    write_pgm(fs::path(a.out) / name, s.image, s.height(), s.width(), a.overlay ? &s.boundaries : nullptr);
    m.artifacts.emplace_back(name);
    if (a.labels) {
      std::vector<float> lab(s.labels.data.size());
      for (std::size_t k = 0; k < lab.size(); ++k) lab[k] = static_cast<float>(s.labels.data[k]) / (kNumClasses - 1);
      std::snprintf(name, sizeof name, "labels_%04zu.pgm", i);
      write_pgm(fs::path(a.out) / name, lab, s.height(), s.width());
      m.artifacts.emplace_back(name);
    }
  }
  std::printf("wrote %zu preview(s) to %s\n", data.scans.size(), a.out.c_str());
  m.write(a.out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BreakNet retinal layer segmentation toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "Force single-threaded, bit-reproducible execution");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate synthetic B-scan volumes");
  synth->add_option("--spec", sa.spec, "SynthSpec JSON (defaults when omitted)");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--volumes", sa.volumes, "Number of volumes");
  synth->add_option("--frames", sa.frames, "Frames per volume");
  synth->add_option("--degrade", sa.degrade, "Also write labels interpolated from every n-th frame");
  synth->add_option("--seed", sa.seed, "Seed (overrides BREAKNET_SEED and the spec)");
  synth->add_option("--regimes", sa.regimes, "Shadow regimes assigned to volumes in turn")->delimiter(',');

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model");
  trn->add_option("--model", ta.variant, "Variant: BL1, BL2, BL3, BL4 or BreakNet");
  trn->add_option("--model-config", ta.model_config, "ModelConfig JSON (overrides --model)");
  trn->add_option("--data", ta.data, "Training dataset directory")->required();
  trn->add_option("--val", ta.val, "Validation dataset directory");
  trn->add_option("--config", ta.config, "TrainConfig JSON");
  trn->add_option("--out", ta.out, "Run directory")->required();
  trn->add_flag("--degraded-labels", ta.degraded, "Train on the interpolated labels written by synth --degrade");
  trn->add_option("--seed", ta.seed, "Seed (overrides BREAKNET_SEED and the config)");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
  auto* ck = evl->add_option("--checkpoint", ea.checkpoint, "Checkpoint manifest (.json)");
  auto* pr = evl->add_option("--predictions", ea.predictions, "Dataset directory whose labels are scored instead");
  ck->excludes(pr);
  evl->add_option("--data", ea.data, "Dataset directory")->required();
  evl->add_option("--out", ea.out, "Report directory")->required();
  evl->add_option("--method", ea.method, "Method name in the report");
  evl->add_flag("--overlay", ea.overlay, "Write one PGM per scan with predicted boundaries");

  AblateArgs aa;
  auto* abl = app.add_subcommand("ablate", "Train and compare BL1..BL4 and BreakNet");
  abl->add_option("--data", aa.data, "Training dataset directory")->required();
  abl->add_option("--val", aa.val, "Validation dataset directory");
  abl->add_option("--test", aa.test, "Held-out dataset directory (defaults to validation)");
  abl->add_option("--config", aa.config, "TrainConfig JSON");
  abl->add_option("--out", aa.out, "Output directory")->required();
  abl->add_option("--seed", aa.seed, "Seed (overrides BREAKNET_SEED and the config)");

  std::string scope = "all";
  double tol = 0.0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks in 64-bit");
  gc->add_option("--scope", scope, "op, block, model or all")->check(CLI::IsMember({"op", "block", "model", "all"}));
  gc->add_option("--tol", tol, "Override every tolerance");

  ExportArgs xa;
  bool no_overlay = false;
  auto* exp = app.add_subcommand("export-pgm", "Write 8-bit PGM previews of a dataset");
  exp->add_option("--data", xa.data, "Dataset directory")->required();
  exp->add_option("--out", xa.out, "Output directory")->required();
  exp->add_flag("--no-overlay", no_overlay, "Skip the boundary overlay");
  exp->add_flag("--labels", xa.labels, "Also write label maps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  Manifest m;
  m.argv.assign(argv, argv + argc);
  m.deterministic = deterministic;
  try {
    if (*synth) return m.command = "synth", cmd_synth(sa, m);
    if (*trn) return m.command = "train", cmd_train(ta, m);
    if (*evl) return m.command = "eval", cmd_eval(ea, m);
    if (*abl) return m.command = "ablate", cmd_ablate(aa, m);
    if (*gc) return cmd_gradcheck(scope, tol);
    if (*exp) {
      xa.overlay = !no_overlay;
      return m.command = "export-pgm", cmd_export_pgm(xa, m);
    }
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  }
  return kUsage;
}
