#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "quicknat/multiview.hpp"

namespace quicknat {

/// Supported NIfTI-1 datatype codes.
enum class NiftiType : std::int16_t { uint8 = 2, int16 = 4, float32 = 16 };

std::string_view to_string(NiftiType type);
std::size_t bytes_per_voxel(NiftiType type);

/// A single-file, uncompressed NIfTI-1 image. The header block (including any
/// extension bytes up to vox_offset) and the payload are kept verbatim so that
/// reading and writing a supported file reproduces it byte for byte.
struct NiftiImage {
  std::vector<char> header;   ///< vox_offset bytes
  std::vector<char> payload;  ///< nx*ny*nz voxels, x fastest
  std::array<Index, 3> dims{};        ///< (nx, ny, nz)
  std::array<double, 3> pixdim{1.0, 1.0, 1.0};
  NiftiType type = NiftiType::float32;
  double scl_slope = 0.0;
  double scl_inter = 0.0;

  Index voxel_count() const { return dims[0] * dims[1] * dims[2]; }
};

/// Throws DataError naming the offending field (gzip, magic, datatype, dims,
/// payload length).
NiftiImage read_nifti(const std::filesystem::path& path);
/// Atomic write of header + payload.
void write_nifti(const NiftiImage& image, const std::filesystem::path& path);

/// Volume (D,H,W) maps to NIfTI (z,y,x): W is the fastest NIfTI axis.
IntensityVolume to_intensity_volume(const NiftiImage& image);
/// Rejects non-integral or out-of-range label values.
LabelVolume to_label_volume(const NiftiImage& image);
NiftiImage from_volume(const IntensityVolume& volume);
NiftiImage from_volume(const LabelVolume& volume, NiftiType type = NiftiType::int16);

IntensityVolume read_intensity_volume(const std::filesystem::path& path);
LabelVolume read_label_volume(const std::filesystem::path& path);
void write_volume(const IntensityVolume& volume, const std::filesystem::path& path);
void write_volume(const LabelVolume& volume, const std::filesystem::path& path, NiftiType type = NiftiType::int16);

}  // namespace quicknat
