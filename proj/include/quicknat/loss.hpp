#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "quicknat/autodiff.hpp"
#include "quicknat/tensor.hpp"

namespace quicknat {

/// Empirical class priors over a training set.
struct ClassFrequencies {
  std::vector<double> f;
  std::vector<std::int64_t> counts;

  Index num_classes() const { return static_cast<Index>(f.size()); }
  bool absent(Index label) const { return counts.at(static_cast<std::size_t>(label)) == 0; }
  /// Median over classes with nonzero frequency.
  double median() const;
  /// Smallest nonzero frequency.
  double min_present() const;
  /// Boundary weight w0 = 2 * median(f) / f_min.
  double boundary_weight() const { return 2.0 * median() / min_present(); }
};

/// Counts labels 0..num_classes-1 across every tensor in `labels`.
ClassFrequencies class_frequencies(std::span<const LabelTensor> labels, Index num_classes);

/// Text table with one "label_id frequency" line per class.
void write_frequencies(const ClassFrequencies& freq, const std::filesystem::path& path);
ClassFrequencies read_frequencies(const std::filesystem::path& path);

/// Pixels of a [H,W] (or [B,H,W]) label map that have a 4-neighbour in the same
/// slice with a different label; missing neighbours at the border do not count.
Tensor<std::uint8_t> boundary_mask(const LabelTensor& labels);

/// Per-pixel weights median(f)/f_label + w0 * [pixel on a label boundary].
/// Accepts [H,W] or [B,H,W] label maps; the result has the same shape.
Tensor<double> weight_map(const LabelTensor& labels, const ClassFrequencies& freq);

inline constexpr double kProbabilityFloor = 1e-12;

struct LossParts {
  double logistic = 0.0;  ///< weighted logistic term (mean over pixels)
  double dice = 0.0;      ///< mean soft Dice over classes present in the ground truth
  Index clamped = 0;      ///< true-class probabilities raised to the floor inside log
  double total() const { return logistic - dice; }
};

/// Evaluates the composite loss without recording gradients.
/// probs [B,N,H,W], labels [B,H,W], weights [B,H,W].
template <typename T>
LossParts evaluate_loss(const Tensor<T>& probs, const LabelTensor& labels, const Tensor<T>& weights);

/// logistic - dice as a scalar tape node, differentiable with respect to `probs`.
template <typename T>
Var combined_loss(Tape<T>& tape, Var probs, const LabelTensor& labels, const Tensor<T>& weights);

}  // namespace quicknat
