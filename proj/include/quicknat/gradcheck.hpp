#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "quicknat/autodiff.hpp"

namespace quicknat {

/// Scalar objective built on a fresh tape from leaves bound to `params`.
using GradObjective = std::function<Var(Tape<double>&, std::span<const Var> params)>;

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  /// Upper bound on probed elements per tensor (0 = every element). Probes
  /// are spread evenly across the tensor.
  Index max_probes = 0;
  /// A tensor also passes when max|analytic - numeric| is below this; covers
  /// gradients that are identically zero (e.g. a conv bias feeding batch norm).
  double abs_tolerance = 1e-8;
  /// Drop a failing probe when its forward and backward one-sided slopes
  /// differ by at least its error: the step straddles a ReLU or max-pool kink,
  /// where no finite difference estimates the derivative. At a smooth point
  /// the slopes agree to O(step), so a wrong analytic gradient still fails.
  bool skip_kinks = false;
  /// Largest fraction of probes that may be skipped before the check fails.
  double max_skipped_fraction = 0.1;
};

struct TensorGradError {
  std::string name;
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  Index probes = 0;
  Index skipped = 0;  ///< probes dropped as kink crossings
  bool passed = false;
};

struct GradCheckReport {
  std::vector<TensorGradError> tensors;
  double tolerance = 0.0;
  double max_skipped_fraction = 0.0;

  /// Worst relative error over tensors whose absolute error exceeds the
  /// absolute floor; tensors at the floor pass and are left out.
  double max_relative_error() const;
  Index skipped() const;
  Index probes() const;
  bool passed() const;
};

/// Compares reverse-mode gradients of a scalar objective against central
/// differences. The error for one tensor is max|analytic - numeric| divided
/// by max(max|analytic|, max|numeric|), taken over the probed elements.
GradCheckReport grad_check(const GradObjective& objective, const std::vector<Tensor<double>>& params,
                           const GradCheckOptions& options = {}, const std::vector<std::string>& names = {});

}  // namespace quicknat
