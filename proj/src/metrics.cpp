#include "breaknet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "breaknet/tape.hpp"
#include "breaknet/tensor_io.hpp"

namespace breaknet {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_pair(const BoundaryProfile& pred, const BoundaryProfile& gt) {
  if (pred.num_boundaries != gt.num_boundaries || pred.width != gt.width) {
    throw std::invalid_argument("boundary profiles differ in size");
  }
  if (std::abs(pred.axial_pitch_um - gt.axial_pitch_um) > 1e-12) {
    throw std::invalid_argument("boundary profiles differ in axial pitch");
  }
}

std::string cell(const Stat& s, double factor = 1.0) {
  if (s.count == 0) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f(%.4f)", s.mean * factor, s.std * factor);
  return buf;
}

nlohmann::json stat_json(const Stat& s) {
  nlohmann::json j = {{"count", s.count}};
  j["mean"] = s.count ? nlohmann::json(s.mean) : nlohmann::json(nullptr);
  j["std"] = s.count ? nlohmann::json(s.std) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json num_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

const std::vector<std::string>& layer_names() {
  static const std::vector<std::string> names = {"NFL", "IPL", "INL", "OPL", "ONL", "EZ", "RPE"};
  return names;
}

int BoundaryExtraction::defective_count() const {
  return static_cast<int>(std::count(defective.begin(), defective.end(), std::uint8_t{1}));
}

double BoundaryExtraction::defective_fraction() const {
  return defective.empty() ? 0.0 : static_cast<double>(defective_count()) / static_cast<double>(defective.size());
}

BoundaryExtraction label_to_boundaries(const LabelMap& labels, double axial_pitch_um, int num_classes) {
  BoundaryExtraction out;
  out.profile = BoundaryProfile(num_classes - 1, labels.width, axial_pitch_um);
  out.defective.assign(static_cast<std::size_t>(labels.width), 0);
  std::vector<int> run_start(static_cast<std::size_t>(num_classes));
  for (int x = 0; x < labels.width; ++x) {
    bool ok = true;
    int expected = 0;  // next class the column must show
    int prev = -1;
    for (int r = 0; r < labels.height && ok; ++r) {
      const int c = labels.at(r, x);
      if (c == prev) continue;
      if (c != expected) ok = false;
      else run_start[c] = r;
      prev = c;
      ++expected;
    }
    if (!ok || expected != num_classes) {
      out.defective[x] = 1;
      continue;
    }
    for (int b = 1; b < num_classes; ++b) out.profile.at(b - 1, x) = run_start[b];
  }
  return out;
}

double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("dice: mask sizes differ");
  std::int64_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("iou: mask sizes differ");
  std::int64_t uni = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    uni += a || b;
    both += a && b;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(both) / static_cast<double>(uni);
}

namespace {
std::pair<std::int64_t, std::int64_t> class_counts(const LabelMap& pred, const LabelMap& gt, int cls,
                                                    std::int64_t& both) {
  if (pred.height != gt.height || pred.width != gt.width) throw std::invalid_argument("label maps differ in size");
  std::int64_t p = 0, g = 0;
  both = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool a = pred.data[i] == cls, b = gt.data[i] == cls;
    p += a;
    g += b;
    both += a && b;
  }
  return {p, g};
}
}  // namespace

double class_dice(const LabelMap& pred, const LabelMap& gt, int cls) {
  std::int64_t both = 0;
  const auto [p, g] = class_counts(pred, gt, cls, both);
  return p + g == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double class_iou(const LabelMap& pred, const LabelMap& gt, int cls) {
  std::int64_t both = 0;
  const auto [p, g] = class_counts(pred, gt, cls, both);
  const std::int64_t uni = p + g - both;
  return uni == 0 ? 1.0 : static_cast<double>(both) / static_cast<double>(uni);
}

std::vector<double> contour_error_per_boundary(const BoundaryProfile& pred, const BoundaryProfile& gt) {
  check_pair(pred, gt);
  std::vector<double> out(static_cast<std::size_t>(pred.num_boundaries), kNaN);
  for (int b = 0; b < pred.num_boundaries; ++b) {
    double s = 0.0;
    int n = 0;
    for (int x = 0; x < pred.width; ++x) {
      if (!pred.present(b, x) || !gt.present(b, x)) continue;
      s += std::abs(pred.at(b, x) - gt.at(b, x));
      ++n;
    }
    if (n) out[b] = s / n * gt.axial_pitch_um;
  }
  return out;
}

double contour_error(const BoundaryProfile& pred, const BoundaryProfile& gt) {
  check_pair(pred, gt);
  double s = 0.0;
  std::int64_t n = 0;
  for (int b = 0; b < pred.num_boundaries; ++b)
    for (int x = 0; x < pred.width; ++x) {
      if (!pred.present(b, x) || !gt.present(b, x)) continue;
      s += std::abs(pred.at(b, x) - gt.at(b, x));
      ++n;
    }
  if (n == 0) throw NotComputable("contour error not computable: no comparable columns");
  return s / static_cast<double>(n) * gt.axial_pitch_um;
}

namespace {
bool layer_comparable(const BoundaryProfile& pred, const BoundaryProfile& gt, int j, int x) {
  return pred.present(j, x) && pred.present(j + 1, x) && gt.present(j, x) && gt.present(j + 1, x);
}
double thickness_diff(const BoundaryProfile& pred, const BoundaryProfile& gt, int j, int x) {
  return std::abs((pred.at(j + 1, x) - pred.at(j, x)) - (gt.at(j + 1, x) - gt.at(j, x)));
}
}  // namespace

std::vector<double> thickness_error_per_layer(const BoundaryProfile& pred, const BoundaryProfile& gt) {
  check_pair(pred, gt);
  std::vector<double> out(static_cast<std::size_t>(std::max(0, pred.num_boundaries - 1)), kNaN);
  for (int j = 0; j + 1 < pred.num_boundaries; ++j) {
    double s = 0.0;
    int n = 0;
    for (int x = 0; x < pred.width; ++x) {
      if (!layer_comparable(pred, gt, j, x)) continue;
      s += thickness_diff(pred, gt, j, x);
      ++n;
    }
    if (n) out[j] = s / n * gt.axial_pitch_um;
  }
  return out;
}

double thickness_error(const BoundaryProfile& pred, const BoundaryProfile& gt) {
  check_pair(pred, gt);
  double s = 0.0;
  std::int64_t n = 0;
  for (int j = 0; j + 1 < pred.num_boundaries; ++j)
    for (int x = 0; x < pred.width; ++x) {
      if (!layer_comparable(pred, gt, j, x)) continue;
      s += thickness_diff(pred, gt, j, x);
      ++n;
    }
  if (n == 0) throw NotComputable("thickness error not computable: no comparable columns");
  return s / static_cast<double>(n) * gt.axial_pitch_um;
}

bool detect_failure(const LabelMap& labels, double tau) {
  return label_to_boundaries(labels).defective_fraction() > tau;
}

LabelMap intersect_labels(const LabelMap& a, const LabelMap& b, std::uint8_t ignore) {
  if (a.height != b.height || a.width != b.width) throw std::invalid_argument("intersect_labels: sizes differ");
  LabelMap out(a.height, a.width);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] == b.data[i] ? a.data[i] : ignore;
  return out;
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  double sum = 0.0;
  for (double v : values)
    if (!std::isnan(v)) {
      sum += v;
      ++s.count;
    }
  if (s.count == 0) return s;
  s.mean = sum / s.count;
  double ss = 0.0;
  for (double v : values)
    if (!std::isnan(v)) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / s.count);
  return s;
}

MetricsReport evaluate_labels(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt,
                              double axial_pitch_um, const std::string& method) {
  if (gt.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (pred.size() != gt.size()) throw std::invalid_argument("evaluate: prediction and truth counts differ");
  MetricsReport rep;
  rep.method = method;
  const int L = static_cast<int>(layer_names().size());
  int failures = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    ScanMetrics m;
    for (int c = 0; c < kNumClasses; ++c) {
      m.dice.push_back(class_dice(pred[i], gt[i], c));
      m.iou.push_back(class_iou(pred[i], gt[i], c));
    }
    for (int c = 1; c <= L; ++c) {
      m.mean_dice += m.dice[c];
      m.mean_iou += m.iou[c];
    }
    m.mean_dice /= L;
    m.mean_iou /= L;
    const auto p = label_to_boundaries(pred[i], axial_pitch_um);
    const auto g = label_to_boundaries(gt[i], axial_pitch_um);
    m.defective_fraction = p.defective_fraction();
    m.failed = m.defective_fraction > kFailureThreshold;
    failures += m.failed;
    m.ce_per_boundary.assign(kNumBoundaries, kNaN);
    m.te_per_layer.assign(kNumBoundaries - 1, kNaN);
    if (!m.failed) {
      try {
        m.ce_um = contour_error(p.profile, g.profile);
        m.te_um = thickness_error(p.profile, g.profile);
        m.ce_per_boundary = contour_error_per_boundary(p.profile, g.profile);
        m.te_per_layer = thickness_error_per_layer(p.profile, g.profile);
      } catch (const NotComputable&) {
        m.ce_um = m.te_um = kNaN;
      }
    }
    rep.scans.push_back(std::move(m));
  }
  auto collect = [&](auto getter) {
    std::vector<double> v;
    for (const auto& s : rep.scans) v.push_back(getter(s));
    return summarize(v);
  };
  for (int c = 0; c < kNumClasses; ++c) {
    rep.class_dice.push_back(collect([c](const ScanMetrics& s) { return s.dice[c]; }));
    rep.class_iou.push_back(collect([c](const ScanMetrics& s) { return s.iou[c]; }));
  }
  rep.dice = collect([](const ScanMetrics& s) { return s.mean_dice; });
  rep.iou = collect([](const ScanMetrics& s) { return s.mean_iou; });
  rep.failure_rate = static_cast<double>(failures) / static_cast<double>(gt.size());
  rep.ce_um = collect([](const ScanMetrics& s) { return s.ce_um; });
  rep.te_um = collect([](const ScanMetrics& s) { return s.te_um; });
  for (int b = 0; b < kNumBoundaries; ++b)
    rep.ce_per_boundary.push_back(collect([b](const ScanMetrics& s) { return s.ce_per_boundary[b]; }));
  for (int j = 0; j + 1 < kNumBoundaries; ++j)
    rep.te_per_layer.push_back(collect([j](const ScanMetrics& s) { return s.te_per_layer[j]; }));
  return rep;
}

template <typename T>
std::vector<LabelMap> predict_labels(BreakNet<T>& net, const std::vector<BScanSample>& scans, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("predict_labels: batch_size must be >= 1");
  NoGradGuard guard;
  std::vector<LabelMap> out;
  out.reserve(scans.size());
  std::size_t i = 0;
  while (i < scans.size()) {
    const int H = scans[i].height(), W = scans[i].width();
    std::size_t j = i;
    while (j < scans.size() && j - i < static_cast<std::size_t>(batch_size) && scans[j].height() == H &&
           scans[j].width() == W)
      ++j;
    const auto n = static_cast<std::int64_t>(j - i);
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Tensor<T> x({n, 1, H, W});
    for (std::int64_t k = 0; k < n; ++k)
      std::transform(scans[i + k].image.begin(), scans[i + k].image.end(), x.ptr() + k * plane,
                     [](float v) { return static_cast<T>(v); });
    const auto probs = net.forward(x, false).main;
    const std::int64_t C = probs.dim(1);
    const T* p = probs.ptr();
    for (std::int64_t k = 0; k < n; ++k) {
      LabelMap lm(H, W);
      for (std::int64_t px = 0; px < plane; ++px) {
        int best = 0;
        T best_v = p[(k * C) * plane + px];
        for (std::int64_t c = 1; c < C; ++c) {
          const T v = p[(k * C + c) * plane + px];
          if (v > best_v) {
            best_v = v;
            best = static_cast<int>(c);
          }
        }
        lm.data[px] = static_cast<std::uint8_t>(best);
      }
      out.push_back(std::move(lm));
    }
    i = j;
  }
  return out;
}

template <typename T>
MetricsReport evaluate(BreakNet<T>& net, const std::vector<BScanSample>& scans, const std::string& method,
                       int batch_size) {
  if (scans.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (net.config().num_classes != kNumClasses) {
    throw std::invalid_argument("evaluate: model predicts " + std::to_string(net.config().num_classes) +
                                " classes, data has " + std::to_string(kNumClasses));
  }
  std::vector<LabelMap> gt;
  gt.reserve(scans.size());
  for (const auto& s : scans) gt.push_back(s.labels);
  return evaluate_labels(predict_labels(net, scans, batch_size), gt, scans.front().axial_pitch_um, method);
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["num_scans"] = r.scans.size();
  j["dice"] = stat_json(r.dice);
  j["iou"] = stat_json(r.iou);
  j["failure_rate"] = r.failure_rate;
  j["ce_um"] = stat_json(r.ce_um);
  j["te_um"] = stat_json(r.te_um);
  j["class_dice"] = nlohmann::json::array();
  j["class_iou"] = nlohmann::json::array();
  for (const auto& s : r.class_dice) j["class_dice"].push_back(stat_json(s));
  for (const auto& s : r.class_iou) j["class_iou"].push_back(stat_json(s));
  j["ce_per_boundary_um"] = nlohmann::json::array();
  for (const auto& s : r.ce_per_boundary) j["ce_per_boundary_um"].push_back(stat_json(s));
  j["te_per_layer_um"] = nlohmann::json::object();
  for (std::size_t l = 0; l < r.te_per_layer.size() && l < layer_names().size(); ++l)
    j["te_per_layer_um"][layer_names()[l]] = stat_json(r.te_per_layer[l]);
  j["scans"] = nlohmann::json::array();
  for (const auto& s : r.scans) {
    j["scans"].push_back({{"dice", s.dice},
                          {"iou", s.iou},
                          {"mean_dice", s.mean_dice},
                          {"mean_iou", s.mean_iou},
                          {"failed", s.failed},
                          {"defective_fraction", s.defective_fraction},
                          {"ce_um", num_or_null(s.ce_um)},
                          {"te_um", num_or_null(s.te_um)}});
  }
  return j;
}

std::string report_csv(const std::vector<MetricsReport>& rows) {
  std::ostringstream os;
  os << "Method,Dice,IoU,FailureRate,CE_um,TE_um\n";
  for (const auto& r : rows) {
    char fr[32];
    std::snprintf(fr, sizeof fr, "%.2f", r.failure_rate * 100.0);
    os << r.method << ',' << cell(r.dice) << ',' << cell(r.iou) << ',' << fr << ',' << cell(r.ce_um) << ','
       << cell(r.te_um) << '\n';
  }
  return os.str();
}

std::string per_layer_csv(const std::vector<MetricsReport>& rows) {
  std::ostringstream os;
  os << "Method";
  for (const auto& n : layer_names()) os << ',' << n;
  os << ",All\n";
  for (const auto& r : rows) {
    os << r.method;
    for (std::size_t c = 1; c <= layer_names().size(); ++c) os << ',' << cell(r.class_dice[c]);
    os << ',' << cell(r.dice) << '\n';
  }
  return os.str();
}

void write_reports(const std::filesystem::path& dir, const std::vector<MetricsReport>& rows) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream os(dir / name, std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / name).string());
    os << text;
    if (!os) throw IoError("write failed: " + (dir / name).string());
  };
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back(to_json(r));
  write("report.json", (rows.size() == 1 ? j[0] : j).dump(2) + "\n");
  write("report.csv", report_csv(rows));
  write("report_layers.csv", per_layer_csv(rows));
}

template std::vector<LabelMap> predict_labels<float>(BreakNet<float>&, const std::vector<BScanSample>&, int);
template std::vector<LabelMap> predict_labels<double>(BreakNet<double>&, const std::vector<BScanSample>&, int);
template MetricsReport evaluate<float>(BreakNet<float>&, const std::vector<BScanSample>&, const std::string&, int);
template MetricsReport evaluate<double>(BreakNet<double>&, const std::vector<BScanSample>&, const std::string&, int);

}  // namespace breaknet
