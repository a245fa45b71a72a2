#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <vector>

#include "quicknat/gradcheck.hpp"
#include "quicknat/loss.hpp"
#include "quicknat/ops.hpp"
#include "test_util.hpp"

using namespace quicknat;
using quicknat::testing::random_labels;
using quicknat::testing::random_tensor;

namespace {

// Piecewise-constant label slice: random rectangles painted over a random
// background, so slices have interiors as well as boundaries.
LabelTensor blocky_labels(Index h, Index w, std::int32_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> cls(0, classes - 1);
  std::uniform_int_distribution<Index> row(0, h - 1), col(0, w - 1);
  LabelTensor t({h, w}, cls(rng));
  for (int r = 0; r < 6; ++r) {
    Index r0 = row(rng), r1 = row(rng), c0 = col(rng), c1 = col(rng);
    if (r0 > r1) std::swap(r0, r1);
    if (c0 > c1) std::swap(c0, c1);
    const std::int32_t l = cls(rng);
    for (Index i = r0; i <= r1; ++i) {
      for (Index j = c0; j <= c1; ++j) t[i * w + j] = l;
    }
  }
  return t;
}

// Independent restatement of the weighting rule: counted frequencies, median
// over present classes, boundary via explicit 4-neighbour comparison.
std::vector<double> brute_force_weights(const LabelTensor& slice, const std::vector<LabelTensor>& training,
                                        std::int32_t classes) {
  std::map<std::int32_t, double> count;
  double total = 0.0;
  for (const auto& t : training) {
    for (std::int32_t v : t.values()) {
      count[v] += 1.0;
      total += 1.0;
    }
  }
  std::vector<double> present;
  for (std::int32_t c = 0; c < classes; ++c) {
    if (count[c] > 0.0) present.push_back(count[c] / total);
  }
  std::sort(present.begin(), present.end());
  const std::size_t n = present.size();
  const double median = n % 2 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
  const double w0 = 2.0 * median / present.front();

  const Index h = slice.dim(0), w = slice.dim(1);
  std::vector<double> out(static_cast<std::size_t>(h * w));
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      const std::int32_t l = slice[i * w + j];
      bool edge = false;
      if (i > 0 && slice[(i - 1) * w + j] != l) edge = true;
      if (i + 1 < h && slice[(i + 1) * w + j] != l) edge = true;
      if (j > 0 && slice[i * w + j - 1] != l) edge = true;
      if (j + 1 < w && slice[i * w + j + 1] != l) edge = true;
      out[static_cast<std::size_t>(i * w + j)] = median / (count[l] / total) + (edge ? w0 : 0.0);
    }
  }
  return out;
}

Tensor<double> uniform_probs(Index b, Index n, Index h, Index w) { return Tensor<double>({b, n, h, w}, 1.0 / static_cast<double>(n)); }

Tensor<double> one_hot(const LabelTensor& labels, Index n) {
  const Index b = labels.dim(0), h = labels.dim(1), w = labels.dim(2);
  Tensor<double> p({b, n, h, w});
  for (Index k = 0; k < b; ++k) {
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) p.at(k, labels[(k * h + i) * w + j], i, j) = 1.0;
    }
  }
  return p;
}

}  // namespace

TEST(ClassFrequencies, CountsAndMedianOverPresentClasses) {
  LabelTensor a({2, 2}, std::vector<std::int32_t>{0, 0, 1, 3});
  LabelTensor b({1, 4}, std::vector<std::int32_t>{0, 0, 0, 1});
  const std::vector<LabelTensor> set{a, b};
  const ClassFrequencies f = class_frequencies(set, 4);
  EXPECT_EQ(f.counts, (std::vector<std::int64_t>{5, 2, 0, 1}));
  EXPECT_DOUBLE_EQ(f.f[0], 5.0 / 8.0);
  EXPECT_TRUE(f.absent(2));
  // Present frequencies {1/8, 2/8, 5/8}: median 2/8, minimum 1/8.
  EXPECT_DOUBLE_EQ(f.median(), 0.25);
  EXPECT_DOUBLE_EQ(f.min_present(), 0.125);
  EXPECT_DOUBLE_EQ(f.boundary_weight(), 4.0);
}

TEST(ClassFrequencies, BoundaryWeightMatchesCountedFrequencies) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<LabelTensor> set;
    for (int s = 0; s < 3; ++s) set.push_back(blocky_labels(12, 10, 5, seed * 7 + s));
    const ClassFrequencies f = class_frequencies(set, 5);
    std::vector<double> counted(5, 0.0);
    for (const auto& t : set) {
      for (std::int32_t v : t.values()) counted[static_cast<std::size_t>(v)] += 1.0 / 360.0;
    }
    std::vector<double> present;
    for (double v : counted) {
      if (v > 0) present.push_back(v);
    }
    std::sort(present.begin(), present.end());
    const std::size_t n = present.size();
    const double median = n % 2 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
    EXPECT_NEAR(f.boundary_weight(), 2.0 * median / present.front(), 1e-12) << "seed " << seed;
  }
}

TEST(ClassFrequencies, FileRoundTrip) {
  const std::vector<LabelTensor> set{random_labels({6, 6}, 4, 3)};
  const ClassFrequencies f = class_frequencies(set, 4);
  const auto path = std::filesystem::temp_directory_path() / "qn_freq_roundtrip.txt";
  write_frequencies(f, path);
  const ClassFrequencies g = read_frequencies(path);
  ASSERT_EQ(g.num_classes(), f.num_classes());
  for (Index i = 0; i < f.num_classes(); ++i) {
    EXPECT_DOUBLE_EQ(g.f[static_cast<std::size_t>(i)], f.f[static_cast<std::size_t>(i)]);
    EXPECT_EQ(g.absent(i), f.absent(i));
  }
  EXPECT_DOUBLE_EQ(g.boundary_weight(), f.boundary_weight());
  std::filesystem::remove(path);
}

TEST(BoundaryMask, SingleIslandMarksBothSides) {
  LabelTensor t({3, 3}, 0);
  t[4] = 1;
  const Tensor<std::uint8_t> m = boundary_mask(t);
  // Centre and its four neighbours differ; corners touch only background.
  EXPECT_EQ(std::vector<std::uint8_t>(m.values().begin(), m.values().end()),
            (std::vector<std::uint8_t>{0, 1, 0, 1, 1, 1, 0, 1, 0}));
}

TEST(BoundaryMask, SlicesInABatchAreIndependent) {
  LabelTensor t({2, 2, 2}, std::vector<std::int32_t>{0, 0, 0, 0, 1, 1, 1, 1});
  const Tensor<std::uint8_t> m = boundary_mask(t);
  for (std::uint8_t v : m.values()) EXPECT_EQ(v, 0);
}

TEST(WeightMap, MatchesBruteForceOnRandomSlices) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::vector<LabelTensor> training;
    for (int s = 0; s < 4; ++s) training.push_back(blocky_labels(16, 12, 6, 1000 + seed * 4 + s));
    // Every class present so any slice label has a nonzero frequency.
    training.push_back(LabelTensor({1, 6}, std::vector<std::int32_t>{0, 1, 2, 3, 4, 5}));
    const ClassFrequencies f = class_frequencies(training, 6);
    const LabelTensor slice = seed % 2 ? blocky_labels(16, 12, 6, seed) : random_labels({16, 12}, 6, seed);
    const Tensor<double> w = weight_map(slice, f);
    const std::vector<double> oracle = brute_force_weights(slice, training, 6);
    ASSERT_EQ(w.size(), static_cast<Index>(oracle.size()));
    for (Index i = 0; i < w.size(); ++i) {
      ASSERT_NEAR(w[i], oracle[static_cast<std::size_t>(i)], 1e-9) << "seed " << seed << " pixel " << i;
    }
  }
}

TEST(WeightMap, RejectsLabelsWithoutTrainingFrequency) {
  const std::vector<LabelTensor> set{LabelTensor({1, 2}, std::vector<std::int32_t>{0, 1})};
  const ClassFrequencies f = class_frequencies(set, 3);
  EXPECT_THROW(weight_map(LabelTensor({1, 1}, 2), f), DataError);
  EXPECT_THROW(weight_map(LabelTensor({1, 1}, 7), f), DataError);
}

TEST(Loss, PerfectPredictionHasUnitDice) {
  const LabelTensor labels = random_labels({2, 4, 4}, 3, 5);
  const Tensor<double> w({2, 4, 4}, 1.0);
  const LossParts parts = evaluate_loss(one_hot(labels, 3), labels, w);
  EXPECT_NEAR(parts.logistic, 0.0, 1e-15);
  EXPECT_NEAR(parts.dice, 1.0, 1e-15);
  EXPECT_NEAR(parts.total(), -1.0, 1e-15);
}

TEST(Loss, UniformPredictionClosedForm) {
  // Two classes present, each in half the pixels, p = 1/2 everywhere:
  // logistic = ln 2 with unit weights; per-class Dice = 2(n/4)/(n/4 + n/2) = 2/3.
  LabelTensor labels({1, 2, 2}, std::vector<std::int32_t>{0, 1, 0, 1});
  const Tensor<double> w({1, 2, 2}, 1.0);
  const LossParts parts = evaluate_loss(uniform_probs(1, 2, 2, 2), labels, w);
  EXPECT_NEAR(parts.logistic, std::log(2.0), 1e-15);
  EXPECT_NEAR(parts.dice, 2.0 / 3.0, 1e-15);
}

TEST(Loss, AbsentClassesDoNotEnterDice) {
  LabelTensor labels({1, 1, 2}, 0);
  const Tensor<double> w({1, 1, 2}, 1.0);
  Tensor<double> p({1, 3, 1, 2});
  p.at(0, 0, 0, 0) = p.at(0, 0, 0, 1) = 1.0;
  EXPECT_NEAR(evaluate_loss(p, labels, w).dice, 1.0, 1e-15);
}

TEST(Loss, WeightsScaleOnlyTheLogisticTerm) {
  const LabelTensor labels = random_labels({1, 4, 4}, 3, 9);
  Tensor<double> logits = random_tensor({1, 3, 4, 4}, 10);
  Tape<double> tape;
  const Tensor<double> p = tape.value(softmax_channels(tape, tape.constant(logits)));
  const LossParts one = evaluate_loss(p, labels, Tensor<double>({1, 4, 4}, 1.0));
  const LossParts three = evaluate_loss(p, labels, Tensor<double>({1, 4, 4}, 3.0));
  EXPECT_NEAR(three.logistic, 3.0 * one.logistic, 1e-12);
  EXPECT_DOUBLE_EQ(three.dice, one.dice);
}

TEST(Loss, ClampsVanishingTrueClassProbability) {
  LabelTensor labels({1, 1, 1}, 1);
  Tensor<double> p({1, 2, 1, 1});
  p[0] = 1.0;
  const LossParts parts = evaluate_loss(p, labels, Tensor<double>({1, 1, 1}, 1.0));
  EXPECT_EQ(parts.clamped, 1);
  EXPECT_NEAR(parts.logistic, -std::log(kProbabilityFloor), 1e-9);
}

TEST(Loss, RejectsMismatchedShapesAndLabels) {
  const Tensor<double> p = uniform_probs(1, 2, 2, 2);
  EXPECT_THROW(evaluate_loss(p, LabelTensor({1, 2, 3}), Tensor<double>({1, 2, 3}, 1.0)), ShapeError);
  EXPECT_THROW(evaluate_loss(p, LabelTensor({1, 2, 2}, 2), Tensor<double>({1, 2, 2}, 1.0)), DataError);
}

TEST(Loss, GradientThroughSoftmaxMatchesFiniteDifferences) {
  const LabelTensor labels = random_labels({2, 4, 4}, 4, 21);
  const std::vector<LabelTensor> set{labels};
  const Tensor<double> w = weight_map(labels, class_frequencies(set, 4));
  const GradCheckReport report = grad_check(
      [&](Tape<double>& tape, std::span<const Var> in) {
        return combined_loss(tape, softmax_channels(tape, in[0]), labels, w);
      },
      {random_tensor({2, 4, 4, 4}, 22)});
  EXPECT_LT(report.max_relative_error(), 1e-6);
}
