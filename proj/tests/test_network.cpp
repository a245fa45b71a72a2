#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "quicknat/checkpoint.hpp"
#include "quicknat/gradsuite.hpp"
#include "quicknat/network.hpp"
#include "test_util.hpp"

using namespace quicknat;
using quicknat::testing::random_tensor;

namespace {

template <typename T>
std::vector<Tensor<T>> flatten(NetworkParameters<T> params) {
  std::vector<Tensor<T>> out;
  params.visit([&](const std::string&, Parameter<T>& p) { out.push_back(p.value); });
  params.visit_buffers([&](const std::string&, Tensor<T>& b) { out.push_back(b); });
  return out;
}

Index block_params(Index in, Index w, Index k) {
  return 2 * in + in * w * k * k + w + 2 * (in + w) + (in + w) * w * k * k + w + 2 * (in + 2 * w) + (in + 2 * w) * w + w;
}

std::filesystem::path temp_path(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(Network, ParameterCountMatchesLayerArithmetic) {
  for (Index width : {4, 8, 64}) {
    const NetworkConfig cfg = NetworkConfig::miniature(6, width);
    auto params = init_params<float>(cfg, 0);
    // Encoder 1 sees the image; later encoders see `width` maps; decoders see
    // the unpooled map concatenated with its skip connection.
    Index expected = block_params(1, width, 5) + 3 * block_params(width, width, 5);
    expected += width * width * 25 + width + 2 * width;
    expected += 4 * block_params(2 * width, width, 5);
    expected += width * 6 + 6;
    EXPECT_EQ(params.parameter_count(), expected) << "width " << width;
  }
}

TEST(Network, ForwardShapesAndSimplex) {
  auto params = init_params<double>(NetworkConfig::miniature(4, 4), 1);
  ViewNetwork<double> net(View::coronal, params);
  const Tensor<double> probs = net.predict(random_tensor({2, 1, 32, 16}, 2));
  ASSERT_EQ(probs.shape(), (Shape{2, 4, 32, 16}));
  for (Index b = 0; b < 2; ++b) {
    for (Index i = 0; i < 32; ++i) {
      for (Index j = 0; j < 16; ++j) {
        double total = 0.0;
        for (Index c = 0; c < 4; ++c) {
          const double p = probs.at(b, c, i, j);
          EXPECT_GE(p, 0.0);
          total += p;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
  }
}

TEST(Network, InitialSoftmaxIsNearUniform) {
  auto params = init_params<double>(NetworkConfig::miniature(5, 8), 3);
  ViewNetwork<double> net(View::axial, params);
  const Tensor<double> probs = net.predict(random_tensor({1, 1, 16, 16}, 4));
  for (double p : probs.values()) EXPECT_NEAR(p, 0.2, 0.1);
}

TEST(Network, RejectsSizesNotDivisibleBySixteen) {
  auto params = init_params<float>(NetworkConfig::miniature(3, 4), 0);
  ViewNetwork<float> net(View::coronal, params);
  EXPECT_THROW(net.predict(Tensor<float>({1, 1, 24, 16})), ShapeError);
  EXPECT_THROW(net.predict(Tensor<float>({1, 2, 16, 16})), ShapeError);
}

TEST(Network, InitializationIsSeedDeterministic) {
  const NetworkConfig cfg = NetworkConfig::miniature(3, 4);
  EXPECT_EQ(flatten(init_params<float>(cfg, 7)), flatten(init_params<float>(cfg, 7)));
  EXPECT_NE(flatten(init_params<float>(cfg, 7)), flatten(init_params<float>(cfg, 8)));
}

TEST(Network, EvalPredictionIsIndependentOfBatchComposition) {
  auto params = init_params<double>(NetworkConfig::miniature(3, 4), 5);
  ViewNetwork<double> net(View::sagittal, params);
  const Tensor<double> a = random_tensor({1, 1, 16, 16}, 10);
  const Tensor<double> b = random_tensor({1, 1, 16, 16}, 11);
  std::vector<double> both(a.values().begin(), a.values().end());
  both.insert(both.end(), b.values().begin(), b.values().end());
  const Tensor<double> pa = net.predict(a);
  const Tensor<double> pab = net.predict(Tensor<double>({2, 1, 16, 16}, both));
  for (Index i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i], pab[i]);
}

TEST(Network, PrecisionCastRoundTrip) {
  auto d = init_params<double>(NetworkConfig::miniature(3, 4), 2);
  const auto f = d.cast<float>();
  const auto back = f.cast<double>();
  const auto a = flatten(d), b = flatten(back);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (Index i = 0; i < a[t].size(); ++i) EXPECT_NEAR(a[t][i], b[t][i], 1e-6 * (1.0 + std::abs(a[t][i])));
  }
}

TEST(GradientSuite, EveryEntryPassesOnSeveralSeeds) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto suite = gradient_suite(seed);
    EXPECT_EQ(suite.size(), 13u);
    for (const auto& e : suite) {
      EXPECT_TRUE(e.report.passed()) << e.name << " seed " << seed << " err " << e.report.max_relative_error();
      EXPECT_LT(e.report.max_relative_error(), e.report.tolerance);
    }
  }
}

TEST(GradientSuite, TolerancesFollowLinearity) {
  for (const auto& e : gradient_suite(4)) {
    const bool linear = e.name == "conv2d" || e.name == "batchnorm2d(eval)" || e.name == "relu" ||
                        e.name == "maxpool2x2" || e.name == "unpool2x2" || e.name == "concat_channels" ||
                        e.name == "sum+mean+add";
    EXPECT_EQ(e.report.tolerance, linear ? kLinearGradTolerance : kGradTolerance) << e.name;
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  Checkpoint<float> ckpt;
  ckpt.view = View::axial;
  ckpt.params = init_params<float>(NetworkConfig::miniature(6, 4), 9);
  ckpt.meta = {{"stage", "pretrain"}, {"epoch", "3"}};
  OptimizerState<float> opt;
  opt.learning_rate = 0.02;
  ckpt.params.visit([&](const std::string&, Parameter<float>& p) { opt.velocity.push_back(p.value); });
  ckpt.optimizer = opt;
  const auto path = temp_path("qn_ckpt_roundtrip.ckpt");
  save_checkpoint(ckpt, path);
  const Checkpoint<float> back = load_checkpoint<float>(path);
  EXPECT_EQ(back.view, View::axial);
  EXPECT_EQ(back.meta, ckpt.meta);
  EXPECT_EQ(back.params.config, ckpt.params.config);
  EXPECT_EQ(flatten(back.params), flatten(ckpt.params));
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->velocity, opt.velocity);
  EXPECT_DOUBLE_EQ(back.optimizer->learning_rate, 0.02);

  // Saving what was loaded reproduces the file byte for byte.
  const auto again = temp_path("qn_ckpt_roundtrip2.ckpt");
  save_checkpoint(back, again);
  std::ifstream a(path, std::ios::binary), b(again, std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
  std::filesystem::remove(path);
  std::filesystem::remove(again);
}

TEST(Checkpoint, LoadsAcrossPrecision) {
  Checkpoint<double> ckpt;
  ckpt.params = init_params<double>(NetworkConfig::miniature(3, 4), 1);
  const auto path = temp_path("qn_ckpt_precision.ckpt");
  save_checkpoint(ckpt, path);
  const Checkpoint<float> f = load_checkpoint<float>(path);
  EXPECT_EQ(flatten(f.params), flatten(ckpt.params.cast<float>()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedOrForeignFilesAreDataErrors) {
  Checkpoint<float> ckpt;
  ckpt.params = init_params<float>(NetworkConfig::miniature(3, 4), 1);
  const auto path = temp_path("qn_ckpt_truncated.ckpt");
  save_checkpoint(ckpt, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 16);
  EXPECT_THROW(load_checkpoint<float>(path), DataError);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "not a checkpoint\n";
  }
  EXPECT_THROW(load_checkpoint<float>(path), DataError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint<float>(path), DataError);
}
