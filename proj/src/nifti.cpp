#include "quicknat/nifti.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "quicknat/fileio.hpp"

namespace quicknat {

static_assert(std::endian::native == std::endian::little, "NIfTI I/O assumes a little-endian host");

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDefaultOffset = 352;

template <typename T>
T get(const std::vector<char>& h, std::size_t offset) {
  T v;
  std::memcpy(&v, h.data() + offset, sizeof(T));
  return v;
}

template <typename T>
void put(std::vector<char>& h, std::size_t offset, T v) {
  std::memcpy(h.data() + offset, &v, sizeof(T));
}

DataError nifti_error(const std::filesystem::path& path, const std::string& what) {
  return DataError("NIfTI " + path.string() + ": " + what);
}

}  // namespace

std::string_view to_string(NiftiType type) {
  switch (type) {
    case NiftiType::uint8: return "uint8";
    case NiftiType::int16: return "int16";
    case NiftiType::float32: return "float32";
  }
  return "unknown";
}

std::size_t bytes_per_voxel(NiftiType type) {
  switch (type) {
    case NiftiType::uint8: return 1;
    case NiftiType::int16: return 2;
    case NiftiType::float32: return 4;
  }
  throw std::invalid_argument("unknown NIfTI type");
}

NiftiImage read_nifti(const std::filesystem::path& path) {
  const std::string bytes = read_text_file(path);
  if (bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0x1f && static_cast<unsigned char>(bytes[1]) == 0x8b) {
    throw nifti_error(path, "gzip-compressed files are not supported (decompress to .nii first)");
  }
  if (bytes.size() < kHeaderSize) throw nifti_error(path, "file shorter than the 348-byte header");
  std::vector<char> h(bytes.begin(), bytes.begin() + kHeaderSize);
  const std::int32_t sizeof_hdr = get<std::int32_t>(h, 0);
  if (sizeof_hdr != 348) {
    throw nifti_error(path, sizeof_hdr == 0x5C010000 ? "sizeof_hdr indicates big-endian byte order (unsupported)"
                                                     : "sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348");
  }
  if (std::memcmp(h.data() + 344, "n+1\0", 4) != 0) {
    throw nifti_error(path, "magic is not \"n+1\" (only single-file NIfTI-1 is supported)");
  }
  NiftiImage img;
  const auto ndim = get<std::int16_t>(h, 40);
  if (ndim < 1 || ndim > 7) throw nifti_error(path, "dim[0] = " + std::to_string(ndim) + " is invalid");
  for (int i = 0; i < 3; ++i) {
    const auto d = i < ndim ? get<std::int16_t>(h, 42 + 2 * static_cast<std::size_t>(i)) : std::int16_t{1};
    if (d < 1) throw nifti_error(path, "dim[" + std::to_string(i + 1) + "] = " + std::to_string(d) + " is invalid");
    img.dims[static_cast<std::size_t>(i)] = d;
  }
  for (int i = 3; i < ndim; ++i) {
    if (get<std::int16_t>(h, 42 + 2 * static_cast<std::size_t>(i)) != 1) {
      throw nifti_error(path, "dim[" + std::to_string(i + 1) + "] > 1; only 3-D volumes are supported");
    }
  }
  const auto code = get<std::int16_t>(h, 70);
  if (code != 2 && code != 4 && code != 16) {
    throw nifti_error(path, "datatype " + std::to_string(code) + " is unsupported (uint8, int16 and float32 only)");
  }
  img.type = static_cast<NiftiType>(code);
  const auto bitpix = get<std::int16_t>(h, 72);
  if (static_cast<std::size_t>(bitpix) != 8 * bytes_per_voxel(img.type)) {
    throw nifti_error(path, "bitpix " + std::to_string(bitpix) + " does not match datatype " +
                                std::string(to_string(img.type)));
  }
  for (int i = 0; i < 3; ++i) {
    const float p = get<float>(h, 80 + 4 * static_cast<std::size_t>(i));
    if (!(p > 0.0f) || !std::isfinite(p)) {
      throw nifti_error(path, "pixdim[" + std::to_string(i + 1) + "] = " + std::to_string(p) + " is not positive");
    }
    img.pixdim[static_cast<std::size_t>(i)] = p;
  }
  const float vox_offset = get<float>(h, 108);
  if (!(vox_offset >= static_cast<float>(kHeaderSize)) || vox_offset != std::floor(vox_offset)) {
    throw nifti_error(path, "vox_offset " + std::to_string(vox_offset) + " is invalid");
  }
  img.scl_slope = get<float>(h, 112);
  img.scl_inter = get<float>(h, 116);
  const auto offset = static_cast<std::size_t>(vox_offset);
  const std::size_t need = static_cast<std::size_t>(img.voxel_count()) * bytes_per_voxel(img.type);
  if (bytes.size() < offset || bytes.size() - offset < need) {
    throw nifti_error(path, "payload shorter than dims imply (" + std::to_string(bytes.size() < offset ? 0 : bytes.size() - offset) +
                                " of " + std::to_string(need) + " bytes)");
  }
  img.header.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(offset));
  img.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                     bytes.begin() + static_cast<std::ptrdiff_t>(offset + need));
  return img;
}

void write_nifti(const NiftiImage& image, const std::filesystem::path& path) {
  const std::size_t need = static_cast<std::size_t>(image.voxel_count()) * bytes_per_voxel(image.type);
  if (image.payload.size() != need) throw std::invalid_argument("write_nifti: payload size does not match dims");
  if (image.header.size() < kDefaultOffset) throw std::invalid_argument("write_nifti: header block too short");
  atomic_write(path, [&](std::ostream& os) {
    os.write(image.header.data(), static_cast<std::streamsize>(image.header.size()));
    os.write(image.payload.data(), static_cast<std::streamsize>(image.payload.size()));
  });
}

namespace {

// Voxel values in NIfTI order with scaling applied.
std::vector<double> decode(const NiftiImage& img) {
  const std::size_t n = static_cast<std::size_t>(img.voxel_count());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (img.type) {
      case NiftiType::uint8: out[i] = static_cast<unsigned char>(img.payload[i]); break;
      case NiftiType::int16: {
        std::int16_t v;
        std::memcpy(&v, img.payload.data() + 2 * i, 2);
        out[i] = v;
        break;
      }
      case NiftiType::float32: {
        float v;
        std::memcpy(&v, img.payload.data() + 4 * i, 4);
        out[i] = v;
        break;
      }
    }
  }
  if (img.scl_slope != 0.0 && !(img.scl_slope == 1.0 && img.scl_inter == 0.0)) {
    for (double& v : out) v = v * img.scl_slope + img.scl_inter;
  }
  return out;
}

std::array<double, 3> volume_spacing(const NiftiImage& img) { return {img.pixdim[2], img.pixdim[1], img.pixdim[0]}; }

std::array<Index, 3> volume_dims(const NiftiImage& img) { return {img.dims[2], img.dims[1], img.dims[0]}; }

NiftiImage blank_image(std::array<Index, 3> volume_dims, std::array<double, 3> spacing, NiftiType type) {
  NiftiImage img;
  img.type = type;
  img.dims = {volume_dims[2], volume_dims[1], volume_dims[0]};
  img.pixdim = {spacing[2], spacing[1], spacing[0]};
  for (Index d : img.dims) {
    if (d < 1 || d > std::numeric_limits<std::int16_t>::max()) throw ShapeError("NIfTI dims must lie in [1, 32767]");
  }
  img.header.assign(kDefaultOffset, 0);
  auto& h = img.header;
  put<std::int32_t>(h, 0, 348);
  put<std::int16_t>(h, 40, 3);
  for (int i = 0; i < 3; ++i) put<std::int16_t>(h, 42 + 2 * static_cast<std::size_t>(i), static_cast<std::int16_t>(img.dims[static_cast<std::size_t>(i)]));
  for (int i = 3; i < 7; ++i) put<std::int16_t>(h, 42 + 2 * static_cast<std::size_t>(i), 1);
  put<std::int16_t>(h, 70, static_cast<std::int16_t>(type));
  put<std::int16_t>(h, 72, static_cast<std::int16_t>(8 * bytes_per_voxel(type)));
  put<float>(h, 76, 1.0f);
  for (int i = 0; i < 3; ++i) put<float>(h, 80 + 4 * static_cast<std::size_t>(i), static_cast<float>(img.pixdim[static_cast<std::size_t>(i)]));
  put<float>(h, 108, static_cast<float>(kDefaultOffset));
  h[123] = 2;  // xyzt_units: millimetres
  std::memcpy(h.data() + 344, "n+1\0", 4);
  img.payload.assign(static_cast<std::size_t>(img.voxel_count()) * bytes_per_voxel(type), 0);
  return img;
}

}  // namespace

IntensityVolume to_intensity_volume(const NiftiImage& image) {
  const std::vector<double> values = decode(image);
  IntensityVolume v(volume_dims(image), 0.0f, volume_spacing(image));
  for (std::size_t i = 0; i < values.size(); ++i) v.voxels[static_cast<Index>(i)] = static_cast<float>(values[i]);
  return v;
}

LabelVolume to_label_volume(const NiftiImage& image) {
  const std::vector<double> values = decode(image);
  LabelVolume v(volume_dims(image), 0, volume_spacing(image));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = values[i];
    if (!std::isfinite(x) || x != std::round(x) || x < 0.0 || x > std::numeric_limits<std::int32_t>::max()) {
      throw DataError("label volume holds a non-integral or negative value " + std::to_string(x));
    }
    v.voxels[static_cast<Index>(i)] = static_cast<std::int32_t>(x);
  }
  return v;
}

NiftiImage from_volume(const IntensityVolume& volume) {
  NiftiImage img = blank_image(volume.dims(), volume.spacing, NiftiType::float32);
  std::memcpy(img.payload.data(), volume.voxels.data(), img.payload.size());
  return img;
}

NiftiImage from_volume(const LabelVolume& volume, NiftiType type) {
  if (type == NiftiType::float32) throw std::invalid_argument("label volumes are stored as uint8 or int16");
  NiftiImage img = blank_image(volume.dims(), volume.spacing, type);
  const std::int32_t hi = type == NiftiType::uint8 ? 255 : std::numeric_limits<std::int16_t>::max();
  for (Index i = 0; i < volume.size(); ++i) {
    const std::int32_t l = volume.voxels[i];
    if (l < 0 || l > hi) {
      throw DataError("label " + std::to_string(l) + " does not fit NIfTI type " + std::string(to_string(type)));
    }
    if (type == NiftiType::uint8) {
      img.payload[static_cast<std::size_t>(i)] = static_cast<char>(static_cast<unsigned char>(l));
    } else {
      const auto v = static_cast<std::int16_t>(l);
      std::memcpy(img.payload.data() + 2 * i, &v, 2);
    }
  }
  return img;
}

IntensityVolume read_intensity_volume(const std::filesystem::path& path) { return to_intensity_volume(read_nifti(path)); }

LabelVolume read_label_volume(const std::filesystem::path& path) {
  try {
    return to_label_volume(read_nifti(path));
  } catch (const DataError& e) {
    const std::string msg = e.what();
    if (msg.rfind("NIfTI ", 0) == 0) throw;
    throw DataError("NIfTI " + path.string() + ": " + msg);
  }
}

void write_volume(const IntensityVolume& volume, const std::filesystem::path& path) {
  write_nifti(from_volume(volume), path);
}

void write_volume(const LabelVolume& volume, const std::filesystem::path& path, NiftiType type) {
  write_nifti(from_volume(volume, type), path);
}

}  // namespace quicknat
