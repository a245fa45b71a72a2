#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "quicknat/multiview.hpp"

namespace quicknat {

enum class LabelScheme { quicknat, freesurfer, manual };

std::string_view to_string(LabelScheme scheme);
LabelScheme parse_scheme(std::string_view name);

/// Source-scheme ids to QuickNAT ids 1..27, loaded from a CSV with the columns
/// "structure,quicknat,freesurfer,manual". Background 0 is implicit.
struct RemapTable {
  std::map<std::int32_t, std::string> structures;  ///< QuickNAT id -> name
  std::map<std::int32_t, std::int32_t> freesurfer;
  std::map<std::int32_t, std::int32_t> manual;

  static RemapTable load(const std::filesystem::path& path);
  /// The table shipped in the repository's data directory.
  static RemapTable builtin();
  /// Maps every QuickNAT id to itself in both source columns.
  static RemapTable identity();

  std::string name_of(std::int32_t quicknat_id) const;
};

/// Manual cortical parcels (> 100) collapse to 210 (even) or 211 (odd).
std::int32_t collapse_manual_cortex(std::int32_t id);

struct RemapResult {
  LabelVolume labels;
  Index unmapped_voxels = 0;
  std::map<std::int32_t, Index> unmapped_ids;  ///< source id -> voxel count
};

/// Unlisted source ids map to background and are counted (and logged).
RemapResult remap_labels(const LabelVolume& labels, const RemapTable& table, LabelScheme scheme);

}  // namespace quicknat
