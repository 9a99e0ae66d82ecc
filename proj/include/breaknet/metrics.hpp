#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "breaknet/geometry.hpp"
#include "breaknet/model.hpp"
#include "breaknet/synth.hpp"
#include "json.hpp"

namespace breaknet {

/// Raised when CE/TE have no column to compare.
class NotComputable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kFailureThreshold = 0.01;

/// Layer names of classes 1..7.
const std::vector<std::string>& layer_names();

struct BoundaryExtraction {
  BoundaryProfile profile;              // defective columns are all-absent
  std::vector<std::uint8_t> defective;  // per column

  int defective_count() const;
  double defective_fraction() const;
};

/// Boundary b (1-based) sits at the first row of the class-b run that directly
/// follows a class b-1 run. A column is defective when its class runs are not
/// strictly increasing or when any class is missing.
BoundaryExtraction label_to_boundaries(const LabelMap& labels, double axial_pitch_um = 1.0,
                                       int num_classes = kNumClasses);

/// Binary-mask overlap. Both are 1 when both masks are empty.
/// Throws std::invalid_argument on a size mismatch.
double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

double class_dice(const LabelMap& pred, const LabelMap& gt, int cls);
double class_iou(const LabelMap& pred, const LabelMap& gt, int cls);

/// Mean |pred - gt| * pitch over every (boundary, column) present in both.
/// Throws NotComputable when nothing is comparable and std::invalid_argument
/// when the profiles disagree in size or pitch.
double contour_error(const BoundaryProfile& pred, const BoundaryProfile& gt);
/// Per-boundary variant; NaN where a boundary has no comparable column.
std::vector<double> contour_error_per_boundary(const BoundaryProfile& pred, const BoundaryProfile& gt);

/// Mean |thick_pred - thick_gt| * pitch over layers and columns where both
/// bounding boundaries are present in both profiles.
double thickness_error(const BoundaryProfile& pred, const BoundaryProfile& gt);
std::vector<double> thickness_error_per_layer(const BoundaryProfile& pred, const BoundaryProfile& gt);

/// True iff more than `tau` of the columns are defective.
bool detect_failure(const LabelMap& labels, double tau = kFailureThreshold);

/// Pixelwise agreement of two annotations; disagreeing pixels get `ignore`.
LabelMap intersect_labels(const LabelMap& a, const LabelMap& b, std::uint8_t ignore = 255);

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // population
  int count = 0;
};
Stat summarize(const std::vector<double>& values);  // ignores NaN

struct ScanMetrics {
  std::vector<double> dice;  // per class
  std::vector<double> iou;
  double mean_dice = 0.0;  // layers NFL..RPE
  double mean_iou = 0.0;
  bool failed = false;
  double defective_fraction = 0.0;
  double ce_um = std::numeric_limits<double>::quiet_NaN();  // NaN when excluded
  double te_um = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> ce_per_boundary;
  std::vector<double> te_per_layer;
};

struct MetricsReport {
  std::string method;
  std::vector<ScanMetrics> scans;
  std::vector<Stat> class_dice;  // per class
  std::vector<Stat> class_iou;
  Stat dice;  // per-scan mean over NFL..RPE
  Stat iou;
  double failure_rate = 0.0;
  Stat ce_um;  // over non-failed scans
  Stat te_um;
  std::vector<Stat> ce_per_boundary;
  std::vector<Stat> te_per_layer;
};

/// Scores predicted label maps against ground truth. Throws
/// std::invalid_argument on an empty or mismatched set.
MetricsReport evaluate_labels(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt,
                              double axial_pitch_um, const std::string& method = "BreakNet");

/// Argmax of the main output, in eval mode, `batch_size` scans at a time.
template <typename T>
std::vector<LabelMap> predict_labels(BreakNet<T>& net, const std::vector<BScanSample>& scans, int batch_size = 8);

/// Throws std::invalid_argument on an empty dataset or a class-count mismatch.
template <typename T>
MetricsReport evaluate(BreakNet<T>& net, const std::vector<BScanSample>& scans, const std::string& method = "BreakNet",
                       int batch_size = 8);

nlohmann::json to_json(const MetricsReport& r);
/// Header: Method,Dice,IoU,FailureRate,CE_um,TE_um; cells are "mean(std)",
/// failure rate in percent.
std::string report_csv(const std::vector<MetricsReport>& rows);
/// Header: Method,NFL,IPL,INL,OPL,ONL,EZ,RPE,All with Dice "mean(std)" cells.
std::string per_layer_csv(const std::vector<MetricsReport>& rows);
/// Writes report.json, report.csv and report_layers.csv into `dir`.
void write_reports(const std::filesystem::path& dir, const std::vector<MetricsReport>& rows);

}  // namespace breaknet
