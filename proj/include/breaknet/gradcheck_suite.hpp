#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "breaknet/gradcheck.hpp"
#include "breaknet/model.hpp"

namespace breaknet {

struct GradCheckCase {
  std::string name;
  std::string scope;  // "op", "block" or "model"
  double tolerance = 1e-5;
  double step = 1e-4;  // central-difference step
  std::function<GradCheckResult()> run;
};

/// Channels [2,2,2,2], stem and decoder width 2, dropout 0.
ModelConfig tiny_config();

/// Finite-difference targets for "op", "block", "model" or "all".
/// Throws std::invalid_argument on an unknown scope.
std::vector<GradCheckCase> gradcheck_cases(std::string_view scope);

}  // namespace breaknet
