#include "quicknat/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace quicknat {

double GradCheckReport::max_relative_error() const {
  double worst = 0.0;
  for (const auto& t : tensors) {
    if (!t.passed || t.max_relative_error < tolerance) worst = std::max(worst, t.max_relative_error);
  }
  return worst;
}

Index GradCheckReport::skipped() const {
  Index n = 0;
  for (const auto& t : tensors) n += t.skipped;
  return n;
}

Index GradCheckReport::probes() const {
  Index n = 0;
  for (const auto& t : tensors) n += t.probes;
  return n;
}

bool GradCheckReport::passed() const {
  for (const auto& t : tensors) {
    if (!t.passed) return false;
  }
  return static_cast<double>(skipped()) <= max_skipped_fraction * static_cast<double>(probes());
}

namespace {

double evaluate(const GradObjective& objective, const std::vector<Tensor<double>>& params) {
  Tape<double> tape;
  std::vector<Var> leaves;
  for (const auto& p : params) leaves.push_back(tape.leaf(p, false));
  const Var out = objective(tape, leaves);
  if (tape.value(out).size() != 1) throw ShapeError("grad_check: objective must be scalar");
  return tape.value(out)[0];
}

}  // namespace

GradCheckReport grad_check(const GradObjective& objective, const std::vector<Tensor<double>>& params,
                           const GradCheckOptions& options, const std::vector<std::string>& names) {
  Tape<double> tape;
  std::vector<Var> leaves;
  for (const auto& p : params) leaves.push_back(tape.leaf(p, true));
  const Var out = objective(tape, leaves);
  tape.backward(out);

  GradCheckReport report;
  report.tolerance = options.tolerance;
  report.max_skipped_fraction = options.max_skipped_fraction;
  const double base = options.skip_kinks ? evaluate(objective, params) : 0.0;
  std::vector<Tensor<double>> probe = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor<double> analytic = tape.grad(leaves[k]);
    const Index n = params[k].size();
    const Index count = options.max_probes > 0 ? std::min(n, options.max_probes) : n;
    double max_diff = 0.0, scale = 0.0;
    Index skipped = 0;
    for (Index j = 0; j < count; ++j) {
      const Index i = count == n ? j : (j * n) / count;
      const double saved = probe[k][i];
      const double h = options.step;
      probe[k][i] = saved + h;
      const double up = evaluate(objective, probe);
      probe[k][i] = saved - h;
      const double down = evaluate(objective, probe);
      probe[k][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      if (options.skip_kinks) {
        const double err = std::abs(numeric - analytic[i]);
        const double magnitude = std::max(std::abs(numeric), std::abs(analytic[i]));
        const double spread = std::abs((up - base) / h - (base - down) / h);
        if (err >= options.tolerance * magnitude && err >= options.abs_tolerance && err <= spread) {
          ++skipped;
          continue;
        }
      }
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        throw NumericalError("grad_check: non-finite gradient in tensor " + std::to_string(k));
      }
      max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
      scale = std::max({scale, std::abs(numeric), std::abs(analytic[i])});
    }
    TensorGradError e;
    e.name = k < names.size() ? names[k] : "param" + std::to_string(k);
    e.max_abs_error = max_diff;
    e.max_relative_error = scale > 0.0 ? max_diff / scale : max_diff;
    e.probes = count;
    e.skipped = skipped;
    e.passed = e.max_relative_error < options.tolerance || e.max_abs_error < options.abs_tolerance;
    report.tensors.push_back(e);
  }
  return report;
}

}  // namespace quicknat
