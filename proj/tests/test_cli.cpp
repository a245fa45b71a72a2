#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "quicknat/fileio.hpp"
#include "quicknat/nifti.hpp"

using namespace quicknat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("qn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome run(const std::string& args) const {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = std::string("'") + QUICKNAT_CLI + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.out = slurp(out);
    o.err = slurp(err);
    return o;
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, HelpExitsZero) {
  const Outcome o = run("--help");
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.out.find("segment"), std::string::npos);
}

TEST_F(Cli, UnknownFlagPrintsUsageAndExitsOne) {
  const Outcome o = run("segment img.nii --model m --out o --bogus 1");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("bogus"), std::string::npos) << o.err;
  EXPECT_NE(o.err.find("--model"), std::string::npos) << o.err;
  EXPECT_EQ(run("").code, 1);
}

TEST_F(Cli, PhantomWritesImageLabelsAndAuxiliary) {
  const Outcome o = run("phantom --seed 3 --size 16 --corruption 0.2 --out " + path("ph"));
  ASSERT_EQ(o.code, 0) << o.err;
  const IntensityVolume image = read_intensity_volume(path("ph/phantom_3_image.nii"));
  const LabelVolume labels = read_label_volume(path("ph/phantom_3_labels.nii"));
  const LabelVolume aux = read_label_volume(path("ph/phantom_3_aux.nii"));
  EXPECT_EQ(image.dims(), (std::array<Index, 3>{16, 16, 16}));
  EXPECT_EQ(labels.dims(), image.dims());
  EXPECT_NE(aux.voxels, labels.voxels);
}

TEST_F(Cli, MissingCheckpointIsADataError) {
  ASSERT_EQ(run("phantom --seed 1 --size 16 --out " + path("ph")).code, 0);
  fs::create_directories(path("model"));
  const Outcome o = run("segment " + path("ph/phantom_1_image.nii") + " --model " + path("model") + " --views axial --out " + path("seg"));
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("checkpoint not found"), std::string::npos) << o.err;
  EXPECT_NE(o.err.find("axial.ckpt"), std::string::npos) << o.err;
}

TEST_F(Cli, MissingInputFileIsADataError) {
  const Outcome o = run("evaluate " + path("none.nii") + " " + path("none.nii"));
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("none.nii"), std::string::npos) << o.err;
}

TEST_F(Cli, EvaluateRemapsManualReferenceIds) {
  // Manual 48 is hippocampus left (QuickNAT 15); manual 207 collapses into cortical grey matter left (2).
  LabelVolume pred({1, 2, 2}), truth({1, 2, 2});
  pred.voxels[0] = 15;
  pred.voxels[1] = 2;
  pred.voxels[2] = 2;
  truth.voxels[0] = 48;
  truth.voxels[1] = 207;
  write_volume(pred, path("pred.nii"));
  write_volume(truth, path("truth.nii"));
  const Outcome o = run("evaluate " + path("pred.nii") + " " + path("truth.nii") + " --scheme manual --subject s1 --out " + path("rep"));
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(o.out.rfind("subject,label,structure,dice,volume_ml,reference_volume_ml,volume_distance\n", 0), 0u) << o.out;
  EXPECT_NE(o.out.find("s1,15,Hippocampus Left,1,"), std::string::npos) << o.out;
  // Two predicted voxels against one reference voxel: 2*1/(2+1).
  EXPECT_NE(o.out.find("s1,2,Cortical Grey Matter Left,0.6666666667,"), std::string::npos) << o.out;
  EXPECT_EQ(slurp(path("rep/report.csv")), o.out);
  EXPECT_TRUE(fs::exists(path("rep/report.json")));
}

TEST_F(Cli, UnknownSchemeIsAUsageError) {
  LabelVolume v({1, 1, 1});
  write_volume(v, path("v.nii"));
  EXPECT_EQ(run("evaluate " + path("v.nii") + " " + path("v.nii") + " --scheme aseg").code, 1);
}

TEST_F(Cli, GradientCheckPasses) {
  const Outcome o = run("gradcheck --seed 1");
  EXPECT_EQ(o.code, 0) << o.out << o.err;
}

TEST_F(Cli, PretrainSegmentEvaluatePipeline) {
  {
    std::ofstream cfg(path("tiny.cfg"));
    cfg << "stage = pretrain\nview = coronal\nlr = 0.02\nbatch = 2\nmax_epochs = 1\nwidth = 4\nphantom_size = 16\n"
           "train_phantoms = 1\nval_phantoms = 1\ndata_seed = 5\ncorruption_rate = 0.1\nout = model\n";
  }
  const Outcome train = run("-q pretrain --config " + path("tiny.cfg"));
  ASSERT_EQ(train.code, 0) << train.err;
  EXPECT_TRUE(fs::exists(path("model/coronal.ckpt")));
  EXPECT_TRUE(fs::exists(path("model/coronal_history.csv")));
  EXPECT_TRUE(fs::exists(path("model/coronal.cfg")));

  ASSERT_EQ(run("phantom --seed 9 --size 16 --out " + path("ph")).code, 0);
  const Outcome seg = run("segment " + path("ph/phantom_9_image.nii") + " --model " + path("model") + " --views coronal --out " + path("seg"));
  ASSERT_EQ(seg.code, 0) << seg.err;
  const LabelVolume s = read_label_volume(path("seg/segmentation.nii"));
  EXPECT_EQ(s.dims(), (std::array<Index, 3>{16, 16, 16}));

  const Outcome ev = run("evaluate " + path("seg/segmentation.nii") + " " + path("ph/phantom_9_labels.nii"));
  EXPECT_EQ(ev.code, 0) << ev.err;
  EXPECT_NE(ev.out.find("segmentation,1,"), std::string::npos) << ev.out;

  {
    std::ofstream cfg(path("fine.cfg"));
    cfg << "stage = finetune\nview = coronal\nmax_epochs = 1\nwidth = 4\nphantom_size = 16\ntrain_phantoms = 1\n"
           "init = model\nout = fine\n";
  }
  const Outcome fine = run("-q finetune --config " + path("fine.cfg"));
  EXPECT_EQ(fine.code, 0) << fine.err;
  EXPECT_TRUE(fs::exists(path("fine/coronal.ckpt")));
}
