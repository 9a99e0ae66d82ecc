#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace breaknet {

inline constexpr int kNumBoundaries = 8;
inline constexpr int kNumClasses = kNumBoundaries + 1;

/// Row-major H x W map of class ids.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

  std::uint8_t& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  bool operator==(const LabelMap&) const = default;
};

/// Per-column subpixel row of each boundary; NaN marks an absent boundary.
struct BoundaryProfile {
  int num_boundaries = kNumBoundaries;
  int width = 0;
  std::vector<double> rows;  // num_boundaries x width
  double axial_pitch_um = 1.0;

  BoundaryProfile() = default;
  BoundaryProfile(int boundaries, int w, double pitch)
      : num_boundaries(boundaries),
        width(w),
        rows(static_cast<std::size_t>(boundaries) * static_cast<std::size_t>(w),
             std::numeric_limits<double>::quiet_NaN()),
        axial_pitch_um(pitch) {}

  double& at(int boundary, int col) { return rows[static_cast<std::size_t>(boundary) * width + col]; }
  double at(int boundary, int col) const { return rows[static_cast<std::size_t>(boundary) * width + col]; }
  bool present(int boundary, int col) const { return !std::isnan(at(boundary, col)); }
};

}  // namespace breaknet
