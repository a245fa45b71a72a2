#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "quicknat/network.hpp"
#include "quicknat/tensor.hpp"

namespace quicknat {

/// A 3-D image with dims (D,H,W), W fastest in memory, and voxel spacing in mm
/// per axis. In conformed (LIA) space D runs posterior-anterior, H superior-
/// inferior and W right-left, so coronal slices fix D, axial slices fix H and
/// sagittal slices fix W.
template <typename T>
struct Volume {
  Tensor<T> voxels;  ///< [D,H,W]
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  Volume() = default;
  explicit Volume(std::array<Index, 3> dims, T fill = T(0), std::array<double, 3> spacing_mm = {1.0, 1.0, 1.0})
      : voxels({dims[0], dims[1], dims[2]}, fill), spacing(spacing_mm) {}
  Volume(Tensor<T> v, std::array<double, 3> spacing_mm) : voxels(std::move(v)), spacing(spacing_mm) {}

  std::array<Index, 3> dims() const { return {voxels.dim(0), voxels.dim(1), voxels.dim(2)}; }
  Index size() const { return voxels.size(); }
  Index index(Index d, Index h, Index w) const { return (d * voxels.dim(1) + h) * voxels.dim(2) + w; }
  T& at(Index d, Index h, Index w) { return voxels[index(d, h, w)]; }
  const T& at(Index d, Index h, Index w) const { return voxels[index(d, h, w)]; }
  double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }
  bool operator==(const Volume&) const = default;
};

using IntensityVolume = Volume<float>;
using LabelVolume = Volume<std::int32_t>;

/// Per-voxel class probabilities, channel-last [D,H,W,N].
template <typename T>
using ProbVolume = Tensor<T>;

/// Volume axis held fixed by each view's slices.
int slice_axis(View view);

/// Decomposes a [D,H,W] volume into the view's 2-D slices [S,rows,cols]; rows
/// and cols are the two remaining axes in increasing axis order.
template <typename T>
Tensor<T> slice_volume(const Tensor<T>& volume, View view);

/// Inverse of slice_volume.
template <typename T>
Tensor<T> stack_slices(const Tensor<T>& slices, View view);

/// Coordinates of voxel (d,h,w) in the view's slice stack: {slice, row, col}.
std::array<Index, 3> slice_coordinates(View view, Index d, Index h, Index w);

/// Zero-pads [S,C,H,W] symmetrically to the next multiples of `multiple`
/// (extra pixel after). `crop_slices` undoes it.
struct Padding {
  Index top = 0, bottom = 0, left = 0, right = 0;
};
Padding padding_for(Index rows, Index cols, Index multiple = 16);
template <typename T>
Tensor<T> pad_slices(const Tensor<T>& slices, const Padding& pad);
template <typename T>
Tensor<T> crop_slices(const Tensor<T>& slices, const Padding& pad);

/// Many-to-one label map used by the sagittal network, where left and right
/// structures are indistinguishable.
struct LabelMerge {
  std::vector<std::int32_t> to_merged;  ///< indexed by source label
  Index merged_classes = 0;

  Index source_classes() const { return static_cast<Index>(to_merged.size()); }
  /// Smallest source label mapping to each merged label.
  std::vector<std::int32_t> representatives() const;

  /// The 28 -> 16 map of the QuickNAT label set (12 left/right pairs merged).
  static LabelMerge quicknat();
  /// Identity on `classes` labels.
  static LabelMerge identity(Index classes);
  /// Validates and builds a merge from an explicit table.
  static LabelMerge from_table(std::vector<std::int32_t> to_merged);
};

LabelVolume sagittal_merge_labels(const LabelVolume& labels, const LabelMerge& merge);
LabelTensor merge_labels(const LabelTensor& labels, const LabelMerge& merge);

/// Replicates each merged channel into every source channel mapping to it. The
/// result is not a simplex when any pair is merged.
template <typename T>
ProbVolume<T> sagittal_expand_probs(const ProbVolume<T>& p_merged, const LabelMerge& merge);

struct AggregationWeights {
  double axial = 0.4;
  double coronal = 0.4;
  double sagittal = 0.2;
  void validate() const;
};

/// Per-voxel argmax of the weighted sum; ties go to the lowest class id.
/// Views passed as nullptr contribute nothing.
template <typename T>
LabelVolume aggregate(const ProbVolume<T>* p_axial, const ProbVolume<T>* p_coronal, const ProbVolume<T>* p_sagittal,
                      const AggregationWeights& weights);

template <typename T>
LabelVolume aggregate(const ProbVolume<T>& p_axial, const ProbVolume<T>& p_coronal, const ProbVolume<T>& p_sagittal,
                      const AggregationWeights& weights) {
  return aggregate<T>(&p_axial, &p_coronal, &p_sagittal, weights);
}

/// Argmax over the last axis with lowest-id tie breaking.
template <typename T>
LabelVolume argmax_labels(const ProbVolume<T>& probs, std::array<double, 3> spacing = {1.0, 1.0, 1.0});

/// Runs one view network over every slice of `volume` in eval mode and returns
/// the restacked probabilities [D,H,W,N]. Slices are padded to multiples of 16.
template <typename T>
ProbVolume<T> predict_view(ViewNetwork<T>& net, const IntensityVolume& volume, Index batch_size = 8);

/// Up to three view networks plus the sagittal label merge.
template <typename T>
struct ViewEnsemble {
  std::optional<ViewNetwork<T>> coronal;
  std::optional<ViewNetwork<T>> axial;
  std::optional<ViewNetwork<T>> sagittal;
  LabelMerge sagittal_merge = LabelMerge::quicknat();
};

/// Segments with every network present; absent views are skipped.
template <typename T>
LabelVolume segment_volume(ViewEnsemble<T>& nets, const IntensityVolume& volume, const AggregationWeights& weights);

}  // namespace quicknat
