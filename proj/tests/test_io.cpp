#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "quicknat/fileio.hpp"
#include "quicknat/metrics.hpp"
#include "quicknat/nifti.hpp"
#include "quicknat/remap.hpp"

using namespace quicknat;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("qn_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path path(const std::string& name) const { return dir_ / name; }

  fs::path dir_;
};

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

template <typename T>
void poke(std::string& bytes, std::size_t offset, T value) {
  std::memcpy(bytes.data() + offset, &value, sizeof(T));
}

LabelVolume random_labels(std::array<Index, 3> dims, std::int32_t lo, std::int32_t hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> u(lo, hi);
  LabelVolume v(dims);
  for (auto& x : v.voxels.values()) x = u(rng);
  return v;
}

template <typename F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.what();
  }
  return "no error";
}

LabelVolume single_label(std::int32_t id) { return LabelVolume(Tensor<std::int32_t>({1, 1, 1}, std::vector<std::int32_t>{id}), {1, 1, 1}); }

}  // namespace

using Nifti = TempDir;

TEST_F(Nifti, Int16RoundTripIsBitIdentical) {
  LabelVolume v = random_labels({32, 32, 32}, 0, 32767, 1);
  v.spacing = {1.2, 0.9, 1.1};
  write_volume(v, path("a.nii"));
  const NiftiImage img = read_nifti(path("a.nii"));
  EXPECT_EQ(img.type, NiftiType::int16);
  const LabelVolume back = to_label_volume(img);
  EXPECT_EQ(back.voxels, v.voxels);
  for (int a = 0; a < 3; ++a) EXPECT_FLOAT_EQ(static_cast<float>(back.spacing[a]), static_cast<float>(v.spacing[a]));
  write_nifti(img, path("b.nii"));
  EXPECT_EQ(file_bytes(path("a.nii")), file_bytes(path("b.nii")));
}

TEST_F(Nifti, Float32AndUint8RoundTrip) {
  IntensityVolume f({3, 4, 5});
  for (Index i = 0; i < f.size(); ++i) f.voxels[i] = 0.25f * static_cast<float>(i) - 3.0f;
  write_volume(f, path("f.nii"));
  EXPECT_EQ(read_intensity_volume(path("f.nii")), f);

  const LabelVolume l = random_labels({4, 3, 2}, 0, 255, 2);
  write_volume(l, path("u.nii"), NiftiType::uint8);
  EXPECT_EQ(read_nifti(path("u.nii")).type, NiftiType::uint8);
  EXPECT_EQ(read_label_volume(path("u.nii")).voxels, l.voxels);
}

TEST_F(Nifti, AxisOrderPutsWFastest) {
  LabelVolume v({2, 3, 4});
  v.at(1, 2, 3) = 7;
  const NiftiImage img = from_volume(v);
  EXPECT_EQ(img.dims, (std::array<Index, 3>{4, 3, 2}));
  // Voxel (x=3, y=2, z=1) sits at x + nx*(y + ny*z).
  std::int16_t value = 0;
  std::memcpy(&value, img.payload.data() + 2 * (3 + 4 * (2 + 3 * 1)), 2);
  EXPECT_EQ(value, 7);
}

TEST_F(Nifti, AnisotropicSpacingReachesVolumes) {
  IntensityVolume f({2, 2, 2});
  write_volume(f, path("s.nii"));
  std::string bytes = file_bytes(path("s.nii"));
  // pixdim[1..3] = (1, 1, 1.5) at byte offsets 80, 84, 88.
  poke(bytes, 80, 1.0f);
  poke(bytes, 84, 1.0f);
  poke(bytes, 88, 1.5f);
  write_bytes(path("s.nii"), bytes);
  const IntensityVolume back = read_intensity_volume(path("s.nii"));
  EXPECT_EQ(back.spacing, (std::array<double, 3>{1.5, 1.0, 1.0}));
  LabelVolume l(back.dims(), 1, back.spacing);
  // 8 voxels of 1.5 mm^3 = 12 mm^3.
  EXPECT_NEAR(volume_of(l, 1), 0.012, 1e-15);
}

TEST_F(Nifti, ScaleSlopeAndInterceptApply) {
  LabelVolume v({1, 1, 3});
  v.voxels[0] = 1;
  v.voxels[1] = 2;
  v.voxels[2] = 3;
  write_volume(v, path("sc.nii"));
  std::string bytes = file_bytes(path("sc.nii"));
  poke(bytes, 112, 2.0f);   // scl_slope
  poke(bytes, 116, 10.0f);  // scl_inter
  write_bytes(path("sc.nii"), bytes);
  const IntensityVolume f = read_intensity_volume(path("sc.nii"));
  EXPECT_EQ(std::vector<float>(f.voxels.values().begin(), f.voxels.values().end()), (std::vector<float>{12, 14, 16}));
}

TEST_F(Nifti, TruncatedPayloadIsNamed) {
  write_volume(LabelVolume({4, 4, 4}), path("t.nii"));
  fs::resize_file(path("t.nii"), fs::file_size(path("t.nii")) - 10);
  const std::string msg = error_of([&] { read_nifti(path("t.nii")); });
  EXPECT_NE(msg.find("payload shorter than dims imply"), std::string::npos) << msg;
}

TEST_F(Nifti, HeaderErrorsNameTheField) {
  write_volume(LabelVolume({2, 2, 2}), path("h.nii"));
  const std::string good = file_bytes(path("h.nii"));

  write_bytes(path("gz.nii"), std::string("\x1f\x8b\x08\x00", 4) + good);
  EXPECT_NE(error_of([&] { read_nifti(path("gz.nii")); }).find("gzip"), std::string::npos);

  std::string bad_magic = good;
  bad_magic[345] = 'i';
  write_bytes(path("m.nii"), bad_magic);
  EXPECT_NE(error_of([&] { read_nifti(path("m.nii")); }).find("magic"), std::string::npos);

  std::string bad_type = good;
  poke<std::int16_t>(bad_type, 70, 64);  // float64
  poke<std::int16_t>(bad_type, 72, 64);
  write_bytes(path("d.nii"), bad_type);
  EXPECT_NE(error_of([&] { read_nifti(path("d.nii")); }).find("datatype"), std::string::npos);

  write_bytes(path("short.nii"), good.substr(0, 100));
  EXPECT_NE(error_of([&] { read_nifti(path("short.nii")); }), "no error");
  EXPECT_NE(error_of([&] { read_nifti(path("missing.nii")); }), "no error");
}

TEST_F(Nifti, LabelConversionRejectsNonIntegralAndOutOfRange) {
  IntensityVolume f({1, 1, 2});
  f.voxels[1] = 1.5f;
  EXPECT_THROW(to_label_volume(from_volume(f)), DataError);
  LabelVolume big({1, 1, 1}, 300);
  EXPECT_THROW(from_volume(big, NiftiType::uint8), DataError);
  EXPECT_THROW(from_volume(LabelVolume({1, 1, 1}, 40000)), DataError);
}

using FileIo = TempDir;

TEST_F(FileIo, FailedWriterLeavesTargetUntouched) {
  const fs::path target = path("keep.txt");
  atomic_write(target, [](std::ostream& os) { os << "original"; });
  EXPECT_THROW(atomic_write(target, [](std::ostream& os) {
                 os << "partial";
                 throw std::runtime_error("interrupted");
               }),
               std::runtime_error);
  EXPECT_EQ(read_text_file(target), "original");
  // No temporary siblings remain.
  EXPECT_EQ(std::distance(fs::directory_iterator(dir_), fs::directory_iterator()), 1);
}

TEST(Remap, BuiltinTableRows) {
  const RemapTable t = RemapTable::builtin();
  EXPECT_EQ(t.structures.size(), 27u);
  const RemapResult fs17 = remap_labels(single_label(17), t, LabelScheme::freesurfer);
  EXPECT_EQ(fs17.labels.voxels[0], 15);
  EXPECT_EQ(t.name_of(15), "Hippocampus Left");
  EXPECT_EQ(remap_labels(single_label(48), t, LabelScheme::manual).labels.voxels[0], 15);
  EXPECT_EQ(collapse_manual_cortex(207), 211);
  EXPECT_EQ(collapse_manual_cortex(208), 210);
  EXPECT_EQ(collapse_manual_cortex(48), 48);
  EXPECT_EQ(remap_labels(single_label(207), t, LabelScheme::manual).labels.voxels[0], 2);
  EXPECT_EQ(t.name_of(2), "Cortical Grey Matter Left");
  EXPECT_EQ(t.name_of(0), "Background");
}

TEST(Remap, UnlistedIdsBecomeBackgroundAndAreCounted) {
  LabelVolume v(Tensor<std::int32_t>({1, 1, 4}, std::vector<std::int32_t>{99, 17, 99, 0}), {1, 1, 1});
  const RemapResult r = remap_labels(v, RemapTable::builtin(), LabelScheme::freesurfer);
  EXPECT_EQ(std::vector<std::int32_t>(r.labels.voxels.values().begin(), r.labels.voxels.values().end()),
            (std::vector<std::int32_t>{0, 15, 0, 0}));
  EXPECT_EQ(r.unmapped_voxels, 2);
  EXPECT_EQ(r.unmapped_ids.at(99), 2);
}

TEST(Remap, IdentityRemapIsIdempotent) {
  const RemapTable id = RemapTable::identity();
  const LabelVolume v = random_labels({4, 4, 4}, 0, 30, 3);
  for (LabelScheme s : {LabelScheme::quicknat, LabelScheme::freesurfer}) {
    const LabelVolume once = remap_labels(v, id, s).labels;
    EXPECT_EQ(remap_labels(once, id, s).labels, once);
    for (Index i = 0; i < v.size(); ++i) EXPECT_EQ(once.voxels[i], v.voxels[i] <= 27 ? v.voxels[i] : 0);
  }
}

TEST(Remap, SchemeNames) {
  EXPECT_EQ(parse_scheme("manual"), LabelScheme::manual);
  EXPECT_EQ(to_string(LabelScheme::freesurfer), "freesurfer");
  EXPECT_THROW(parse_scheme("aseg"), DataError);
}

using RemapFile = TempDir;

TEST_F(RemapFile, MalformedTablesAreRejected) {
  write_bytes(path("hdr.csv"), "name,id\nA,1\n");
  EXPECT_THROW(RemapTable::load(path("hdr.csv")), DataError);
  write_bytes(path("dup.csv"), "structure,quicknat,freesurfer,manual\nA,1,2,3\nB,2,2,4\n");
  EXPECT_THROW(RemapTable::load(path("dup.csv")), DataError);
  write_bytes(path("zero.csv"), "structure,quicknat,freesurfer,manual\nA,0,2,3\n");
  EXPECT_THROW(RemapTable::load(path("zero.csv")), DataError);
  write_bytes(path("ok.csv"), "structure,quicknat,freesurfer,manual\nA,1,12,13\n");
  const RemapTable t = RemapTable::load(path("ok.csv"));
  EXPECT_EQ(remap_labels(single_label(12), t, LabelScheme::freesurfer).labels.voxels[0], 1);
}
