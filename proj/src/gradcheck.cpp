#include "breaknet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "breaknet/tape.hpp"

namespace breaknet {

namespace {
double eval_scalar(const std::function<Tensord()>& f) {
  NoGradGuard guard;
  const Tensord out = f();
  if (out.numel() != 1) throw ShapeError("grad_check: function must return a scalar, got " + shape_str(out.shape()));
  const double v = out.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function returned a non-finite value");
  return v;
}
}  // namespace

GradCheckResult grad_check(const std::function<Tensord()>& f, std::vector<Tensord> inputs, double eps) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape::current().clear();
  Tensord loss = f();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: function returned a non-finite value");
  backward(loss);

  GradCheckResult result;
  result.per_input.assign(inputs.size(), 0.0);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensord& t = inputs[k];
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(t.numel()), 0.0);
    auto data = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = eval_scalar(f);
      data[i] = orig - eps;
      const double down = eval_scalar(f);
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.per_input[k]) result.per_input[k] = err;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = k;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace breaknet
