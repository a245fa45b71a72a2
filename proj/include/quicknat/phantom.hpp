#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "quicknat/multiview.hpp"

namespace quicknat {

/// Axis-aligned ellipsoid in normalized coordinates, each axis spanning [-1,1].
struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  std::int32_t label = 0;

  bool contains(const std::array<double, 3>& u) const;
  /// Volume in normalized units (the whole grid is 8).
  double volume() const;
};

inline constexpr Index kPhantomClasses = 6;

/// Synthetic head-like volume: an outer shell (1), a central core (2), a
/// left/right mirrored pair (3, 4) and a small midline structure (5).
struct PhantomSpec {
  Index size = 64;
  Index classes = kPhantomClasses;
  std::vector<double> means{0.0, 0.3, 0.6, 1.0, 1.25, 0.8};
  double noise_sd = 0.1;
  /// Per-volume intensity gain drawn from [1-g, 1+g] (scanner variation).
  double gain_jitter = 0.15;
  /// Per-class relative contrast change drawn from [-c, c] (tissue variation).
  double contrast_jitter = 0.1;
  /// Amplitude of a random linear bias field 1 + b.u with |b_axis| <= amplitude.
  double bias_field = 0.0;
  std::uint64_t seed = 0;
};

struct Phantom {
  IntensityVolume image;
  LabelVolume labels;
  std::vector<Ellipsoid> structures;  ///< painted in order; later ones win
};

/// Seed-jittered structure geometry, redrawn until nested and disjoint.
std::vector<Ellipsoid> phantom_geometry(const PhantomSpec& spec);

/// Throws DataError when a class covers less than 0.2% of the voxels.
Phantom generate_phantom(const PhantomSpec& spec);

/// Normalized coordinate of voxel centre i on an n-voxel axis.
inline double voxel_coordinate(Index i, Index n) { return (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2.0 - 1.0; }

/// Left/right merge for the phantom label set (3 and 4 share an id).
LabelMerge phantom_sagittal_merge(Index classes = kPhantomClasses);

/// Simulated auxiliary labels: each boundary voxel independently flips to a
/// neighbouring class with probability `rate`. Each structure is assigned a
/// dilation or erosion bias, which picks the flip direction where it applies.
/// The flip set grows monotonically with `rate` for a fixed seed.
LabelVolume corrupt_labels(const LabelVolume& labels, double rate, std::uint64_t seed);

}  // namespace quicknat
