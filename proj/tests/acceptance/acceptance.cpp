// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset; the exit status is nonzero when any run fails.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "quicknat/gradsuite.hpp"
#include "quicknat/log.hpp"
#include "quicknat/loss.hpp"
#include "quicknat/metrics.hpp"
#include "quicknat/multiview.hpp"
#include "quicknat/nifti.hpp"
#include "quicknat/ops.hpp"
#include "quicknat/phantom.hpp"
#include "quicknat/trainer.hpp"

using namespace quicknat;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradSuiteSeconds = 120.0;
constexpr double kSimplexTolerance = 1e-12;
constexpr double kWeightMapTolerance = 1e-9;
constexpr double kBoundaryWeightTolerance = 1e-12;
constexpr double kOverfitDice = 0.95;
constexpr double kOverfitSeconds = 600.0;
constexpr int kOverfitEpochs = 30;
constexpr Index kOverfitWidth = 16;
constexpr double kFineTuneMargin = 0.02;
constexpr double kAggregationSlack = 0.01;
constexpr int kSeedsRequired = 4;
constexpr int kSeeds = 5;
constexpr double kMetricTolerance = 1e-12;
constexpr double kHedgesJ = 0.97297;
constexpr double kHedgesJTolerance = 5e-6;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* format, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, a);
  return buf;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("qn_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + QUICKNAT_CLI + "' -q " + args;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Phantom varied_phantom(std::uint64_t seed, Index size) {
  PhantomSpec spec;
  spec.size = size;
  spec.seed = seed;
  spec.bias_field = 0.2;
  spec.gain_jitter = 0.25;
  spec.contrast_jitter = 0.15;
  return generate_phantom(spec);
}

TrainConfig desk_config(std::uint64_t seed, int epochs, double lr) {
  TrainConfig c;
  c.seed = seed;
  c.batch_size = 2;
  c.learning_rate = lr;
  c.schedule.decay_period = 20;
  c.schedule.max_epochs = epochs;
  c.schedule.patience = 1000;  // the plateau rule never ends these runs early
  return c;
}

// 1. Finite-difference checks at 64-bit over every op, the dense block, the network and the loss.
Outcome gradient_suite_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<GradSuiteEntry> suite = gradient_suite(1);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string failed;
  for (const GradSuiteEntry& e : suite) {
    worst = std::max(worst, e.report.max_relative_error());
    if (!e.report.passed()) failed += " " + e.name;
  }
  std::ostringstream os;
  os << suite.size() << " entries, worst rel err " << fmt("%.2e", worst) << ", " << fmt("%.1f", secs) << " s";
  if (!failed.empty()) os << ", failed:" << failed;
  return {failed.empty() && secs < kGradSuiteSeconds, os.str()};
}

// 2. Exact structural identities.
Outcome structural_check() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto random = [&](Shape s) {
    Tensor<double> t(std::move(s));
    for (double& v : t.values()) v = u(rng);
    return t;
  };
  std::vector<std::string> failures;

  // Pool then unpool keeps each window maximum in place and zeroes the rest.
  for (int trial = 0; trial < 10; ++trial) {
    Tape<double> tape;
    const Tensor<double> x = random({2, 3, 8, 8});
    auto [pooled, idx] = maxpool2x2(tape, tape.constant(x));
    const Tensor<double>& back = tape.value(unpool2x2(tape, pooled, idx));
    for (Index i = 0; i < x.size(); ++i) {
      const Index w = i % 8, h = (i / 8) % 8, plane = i / 64;
      const Index base = plane * 64 + (h & ~Index{1}) * 8 + (w & ~Index{1});
      const double m = std::max({x[base], x[base + 1], x[base + 8], x[base + 9]});
      if (back[i] != (x[i] == m ? m : 0.0)) {
        failures.push_back("pool/unpool");
        break;
      }
    }
  }

  // Softmax outputs lie on the simplex.
  {
    Tape<double> tape;
    Tensor<double> x = random({2, 6, 5, 5});
    x.array() *= 30.0;
    const Tensor<double>& y = tape.value(softmax_channels(tape, tape.constant(x)));
    for (Index b = 0; b < 2; ++b) {
      for (Index p = 0; p < 25; ++p) {
        double s = 0.0;
        bool in_range = true;
        for (Index c = 0; c < 6; ++c) {
          const double v = y[(b * 6 + c) * 25 + p];
          s += v;
          in_range = in_range && v >= 0.0 && v <= 1.0;
        }
        if (!in_range || std::abs(s - 1.0) > kSimplexTolerance) failures.push_back("softmax simplex");
      }
    }
  }

  // Slicing then stacking returns the volume for every view.
  {
    const Tensor<double> v = random({5, 6, 7});
    for (View view : {View::coronal, View::axial, View::sagittal}) {
      if (stack_slices(slice_volume(v, view), view) != v) failures.push_back("slice/stack " + std::string(to_string(view)));
    }
  }

  // Expanding merged probabilities and merging the argmax recovers the merged argmax.
  {
    const LabelMerge m = LabelMerge::quicknat();
    ProbVolume<double> merged({3, 4, 5, m.merged_classes});
    std::gamma_distribution<double> g(1.0, 1.0);
    for (Index v = 0; v < 60; ++v) {
      double total = 0.0;
      for (Index c = 0; c < m.merged_classes; ++c) total += merged[v * m.merged_classes + c] = g(rng);
      for (Index c = 0; c < m.merged_classes; ++c) merged[v * m.merged_classes + c] /= total;
    }
    const ProbVolume<double> expanded = sagittal_expand_probs(merged, m);
    if (sagittal_merge_labels(argmax_labels(expanded), m).voxels != argmax_labels(merged).voxels) {
      failures.push_back("merge/expand");
    }
  }

  // Scaling all three aggregation weights by a power of two leaves every label unchanged.
  {
    std::vector<ProbVolume<double>> p;
    std::gamma_distribution<double> g(1.0, 1.0);
    for (int k = 0; k < 3; ++k) {
      ProbVolume<double> q({4, 5, 6, 7});
      for (double& v : q.values()) v = g(rng);
      p.push_back(std::move(q));
    }
    const AggregationWeights base{0.4, 0.4, 0.2};
    const LabelVolume ref = aggregate(p[0], p[1], p[2], base);
    for (double c : {0.0625, 0.5, 2.0, 256.0}) {
      if (aggregate(p[0], p[1], p[2], AggregationWeights{c * 0.4, c * 0.4, c * 0.2}) != ref) failures.push_back("lambda scaling");
    }
  }

  std::set<std::string> distinct(failures.begin(), failures.end());
  std::string detail = "pool/unpool, softmax, slice/stack, merge/expand, lambda scaling";
  if (!distinct.empty()) {
    detail = "failed:";
    for (const auto& f : distinct) detail += " " + f;
  }
  return {distinct.empty(), detail};
}

// Piecewise-constant label slice built from random rectangles.
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

// 3. Weight map against a direct restatement from counted frequencies.
Outcome loss_oracle_check() {
  constexpr std::int32_t kClasses = 6;
  double worst_map = 0.0, worst_w0 = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::vector<LabelTensor> training;
    for (int s = 0; s < 4; ++s) training.push_back(blocky_labels(16, 12, kClasses, 1000 + seed * 4 + s));
    training.push_back(LabelTensor({1, kClasses}, std::vector<std::int32_t>{0, 1, 2, 3, 4, 5}));
    const ClassFrequencies f = class_frequencies(training, kClasses);

    std::map<std::int32_t, double> count;
    double total = 0.0;
    for (const auto& t : training) {
      for (std::int32_t v : t.values()) {
        count[v] += 1.0;
        total += 1.0;
      }
    }
    std::vector<double> present;
    for (std::int32_t c = 0; c < kClasses; ++c) {
      if (count[c] > 0.0) present.push_back(count[c] / total);
    }
    std::sort(present.begin(), present.end());
    const std::size_t n = present.size();
    const double median = n % 2 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
    const double w0 = 2.0 * median / present.front();
    worst_w0 = std::max(worst_w0, std::abs(f.boundary_weight() - w0));

    const LabelTensor slice = blocky_labels(16, 12, kClasses, seed);
    const Tensor<double> map = weight_map(slice, f);
    for (Index i = 0; i < 16; ++i) {
      for (Index j = 0; j < 12; ++j) {
        const std::int32_t l = slice[i * 12 + j];
        const bool edge = (i > 0 && slice[(i - 1) * 12 + j] != l) || (i + 1 < 16 && slice[(i + 1) * 12 + j] != l) ||
                          (j > 0 && slice[i * 12 + j - 1] != l) || (j + 1 < 12 && slice[i * 12 + j + 1] != l);
        const double want = median / (count[l] / total) + (edge ? w0 : 0.0);
        worst_map = std::max(worst_map, std::abs(map[i * 12 + j] - want));
      }
    }
  }
  return {worst_map < kWeightMapTolerance && worst_w0 < kBoundaryWeightTolerance,
          "100 slices, max |diff| " + fmt("%.1e", worst_map) + ", omega0 max |diff| " + fmt("%.1e", worst_w0)};
}

SliceDataset<float> view_set(const IntensityVolume& image, const LabelVolume& labels, View view, Index classes) {
  return slice_dataset<float>(image, labels, view, classes);
}

// 4. One coronal network memorizes its 64^3 training phantom.
Outcome overfit_check() {
  int passed = 0;
  double slowest = 0.0;
  std::ostringstream os;
  os << "dice";
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    PhantomSpec spec;
    spec.size = 64;
    spec.seed = seed;
    const Phantom p = generate_phantom(spec);
    const SliceDataset<float> data = view_set(p.image, p.labels, View::coronal, kPhantomClasses);
    auto params = init_params<float>(NetworkConfig::miniature(kPhantomClasses, kOverfitWidth), seed);
    const auto t0 = std::chrono::steady_clock::now();
    train_stage(params, data, data, desk_config(seed, kOverfitEpochs, 0.02));
    const double secs = seconds_since(t0);
    ViewNetwork<float> net(View::coronal, params);
    const double dice = mean_foreground_dice(argmax_labels(predict_view(net, p.image)), p.labels, kPhantomClasses);
    slowest = std::max(slowest, secs);
    passed += dice >= kOverfitDice && secs <= kOverfitSeconds;
    os << ' ' << fmt("%.3f", dice);
  }
  os << "; " << passed << "/" << kSeeds << " seeds pass, slowest " << fmt("%.0f", slowest) << " s";
  return {passed >= kSeedsRequired, os.str()};
}

// 5. Pretraining on corrupted phantoms then fine-tuning beats training on the manual pair alone.
Outcome finetune_check() {
  int passed = 0;
  std::ostringstream os;
  os << "margin";
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    auto corrupted = [&](std::uint64_t s) {
      const Phantom p = varied_phantom(s, 32);
      return view_set(p.image, corrupt_labels(p.labels, 0.2, s), View::coronal, kPhantomClasses);
    };
    SliceDataset<float> aux, manual;
    for (std::uint64_t i = 0; i < 20; ++i) aux = SliceDataset<float>::concat(aux, corrupted(1000 + 100 * seed + i));
    const SliceDataset<float> aux_val = corrupted(1500 + 100 * seed);
    for (std::uint64_t i = 0; i < 2; ++i) {
      const Phantom p = varied_phantom(2000 + 100 * seed + i, 32);
      manual = SliceDataset<float>::concat(manual, view_set(p.image, p.labels, View::coronal, kPhantomClasses));
    }

    TwoStageConfig cfg{desk_config(seed, 4, 0.02), desk_config(seed, 10, 0.01)};
    cfg.finetune.schedule = Schedule::finetune();
    cfg.finetune.schedule.decay_period = 20;
    cfg.finetune.schedule.max_epochs = 10;
    cfg.finetune.schedule.patience = 1000;
    const auto init = init_params<float>(NetworkConfig::miniature(kPhantomClasses, 8), seed);
    const TwoStageResult<float> res = two_stage(init, aux, aux_val, manual, manual, cfg);
    auto only = init;
    train_stage(only, manual, manual, desk_config(seed, 10, 0.02));

    ViewNetwork<float> fine(View::coronal, res.finetuned), scratch(View::coronal, only);
    double d_fine = 0.0, d_only = 0.0;
    for (std::uint64_t i = 0; i < 5; ++i) {
      const Phantom p = varied_phantom(3000 + 100 * seed + i, 32);
      d_fine += mean_foreground_dice(argmax_labels(predict_view(fine, p.image)), p.labels, kPhantomClasses) / 5.0;
      d_only += mean_foreground_dice(argmax_labels(predict_view(scratch, p.image)), p.labels, kPhantomClasses) / 5.0;
    }
    passed += d_fine - d_only >= kFineTuneMargin;
    os << ' ' << fmt("%+.3f", d_fine - d_only);
  }
  os << "; " << passed << "/" << kSeeds << " seeds pass";
  return {passed >= kSeedsRequired, os.str()};
}

// 6. Three-view aggregation is no worse than the best single view.
Outcome aggregation_check() {
  constexpr std::uint64_t seed = 0;
  const LabelMerge merge = phantom_sagittal_merge();
  std::vector<Phantom> train, held;
  for (std::uint64_t i = 0; i < 8; ++i) train.push_back(varied_phantom(5000 + 100 * seed + i, 32));
  for (std::uint64_t i = 0; i < 5; ++i) held.push_back(varied_phantom(6000 + 100 * seed + i, 32));

  ViewEnsemble<float> ens;
  ens.sagittal_merge = merge;
  for (View view : {View::coronal, View::axial, View::sagittal}) {
    const bool sag = view == View::sagittal;
    const Index classes = sag ? merge.merged_classes : kPhantomClasses;
    SliceDataset<float> data;
    for (const Phantom& p : train) {
      const LabelVolume labels = sag ? sagittal_merge_labels(p.labels, merge) : p.labels;
      data = SliceDataset<float>::concat(data, view_set(p.image, labels, view, classes));
    }
    auto params = init_params<float>(NetworkConfig::miniature(classes, 8), seed);
    train_stage(params, data, data, desk_config(seed, 10, 0.02));
    (view == View::coronal ? ens.coronal : sag ? ens.sagittal : ens.axial).emplace(view, std::move(params));
  }

  double cor = 0.0, ax = 0.0, sag = 0.0, agg = 0.0;
  for (const Phantom& p : held) {
    cor += mean_foreground_dice(argmax_labels(predict_view(*ens.coronal, p.image)), p.labels, kPhantomClasses) / 5.0;
    ax += mean_foreground_dice(argmax_labels(predict_view(*ens.axial, p.image)), p.labels, kPhantomClasses) / 5.0;
    sag += mean_foreground_dice(argmax_labels(predict_view(*ens.sagittal, p.image)), sagittal_merge_labels(p.labels, merge),
                                merge.merged_classes) /
           5.0;
    agg += mean_foreground_dice(segment_volume(ens, p.image, AggregationWeights{}), p.labels, kPhantomClasses) / 5.0;
  }
  const double best = std::max({cor, ax, sag});
  std::ostringstream os;
  os << "coronal " << fmt("%.3f", cor) << ", axial " << fmt("%.3f", ax) << ", sagittal " << fmt("%.3f", sag)
     << ", aggregated " << fmt("%.3f", agg);
  return {agg >= best - kAggregationSlack, os.str()};
}

// Two-sided exact rank-sum p by enumerating every split of the pooled sample.
double enumerated_ranksum_p(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> pooled(x);
  pooled.insert(pooled.end(), y.begin(), y.end());
  const std::size_t N = pooled.size(), n1 = x.size();
  std::vector<double> rank(N);
  for (std::size_t i = 0; i < N; ++i) {
    double below = 0, equal = 0;
    for (double v : pooled) {
      below += v < pooled[i];
      equal += v == pooled[i];
    }
    rank[i] = below + (equal + 1.0) / 2.0;
  }
  const double observed = std::accumulate(rank.begin(), rank.begin() + static_cast<long>(n1), 0.0);
  double lower = 0, upper = 0, total = 0;
  for (std::uint32_t mask = 0; mask < (1u << N); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != n1) continue;
    double w = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (mask & (1u << i)) w += rank[i];
    }
    total += 1;
    lower += w <= observed;
    upper += w >= observed;
  }
  return std::min(1.0, 2.0 * std::min(lower, upper) / total);
}

// 7. Metrics against hand-computed values and enumeration.
Outcome metric_oracle_check() {
  std::vector<std::string> failures;
  auto expect = [&](const char* name, double got, double want, double tol = kMetricTolerance) {
    if (!(std::abs(got - want) <= tol)) failures.push_back(name);
  };

  const LabelVolume a(Tensor<std::int32_t>({1, 2, 3}, std::vector<std::int32_t>{1, 1, 1, 0, 2, 2}), {1, 1, 1});
  const LabelVolume b(Tensor<std::int32_t>({1, 2, 3}, std::vector<std::int32_t>{1, 1, 0, 0, 2, 1}), {1, 1, 1});
  expect("dice", dice_score(a, b, 1), 4.0 / 6.0);
  expect("dice", dice_score(a, b, 2), 2.0 / 3.0);
  expect("volume distance", volume_distance(12.0, 8.0), 0.4);

  const std::vector<double> cv_values{2, 4, 4, 4, 5, 5, 7, 9};
  expect("cv total", cv_total(cv_values), 0.4);
  const std::vector<std::pair<double, double>> sessions{{11, 9}, {20, 20}, {6, 4}};
  expect("cv intra-session", cv_intra_session(sessions), std::sqrt(0.05 / 3.0));

  expect("hedges J", hedges_correction(15, 15), kHedgesJ, kHedgesJTolerance);
  const std::vector<double> g1{1, 2, 3, 4, 5}, g2{3, 4, 5, 6, 7};
  expect("hedges g", hedges_g(g1, g2).value, (28.0 / 31.0) * -2.0 / std::sqrt(2.5));
  const std::vector<double> treated{5, 6, 7, 8}, control{1, 2, 3, 4};
  expect("glass delta", glass_delta(treated, control).value, 4.0 / std::sqrt(5.0 / 3.0));

  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n1 = 2 + rng() % 5, n2 = 2 + rng() % (12 - n1 - 1);
    std::uniform_int_distribution<int> u(0, trial % 2 ? 5 : 40);
    std::vector<double> x(n1), y(n2);
    for (double& v : x) v = u(rng) * 0.5;
    for (double& v : y) v = u(rng) * 0.5 + (trial % 3);
    expect("wilcoxon", wilcoxon_ranksum(x, y).p, enumerated_ranksum_p(x, y));
  }

  Eigen::MatrixXd X(4, 2);
  X << 1, 0, 1, 1, 1, 2, 1, 3;
  Eigen::VectorXd y(4);
  y << 1, 3, 2, 5;
  const OlsFit fit = ols(X, y, {"intercept", "x"});
  expect("ols", fit.coefficients(0), 1.1);
  expect("ols", fit.coefficients(1), 1.1);
  expect("ols", fit.residual_variance, 1.35);

  const std::vector<double> r1{9, 6, 8, 7, 10, 6}, r2{8, 5, 8, 6, 9, 7};
  const double msr = 26.9 / 6.0, msc = 0.75, mse = 0.35;
  expect("icc", icc(r1, r2), (msr - mse) / (msr + mse + (2.0 / 6.0) * (msc - mse)));

  std::set<std::string> distinct(failures.begin(), failures.end());
  std::string detail = "dice, d_V, CV_s, CV_t, Hedges g and J, Glass delta, Wilcoxon (40 enumerations), OLS, ICC";
  if (!distinct.empty()) {
    detail = "failed:";
    for (const auto& f : distinct) detail += " " + f;
  }
  return {distinct.empty(), detail};
}

void write_run_config(const fs::path& path, const fs::path& out, Index size, int epochs, int phantoms) {
  std::ofstream cfg(path);
  cfg << "stage = pretrain\nseed = 3\nlr = 0.02\ndecay_period = 20\nbatch = 2\nwidth = 8\ncorruption_rate = 0.1\n"
      << "max_epochs = " << epochs << "\nphantom_size = " << size << "\ntrain_phantoms = " << phantoms
      << "\nval_phantoms = 1\ndata_seed = 40\nout = " << out.string() << "\n";
}

// 8. Segmenting the same volume twice with the same checkpoints gives identical volumes.
Outcome consistency_check() {
  const fs::path dir = scratch_dir("consistency");
  write_run_config(dir / "run.cfg", dir / "model", 32, 6, 3);
  if (run_cli("pretrain --config '" + (dir / "run.cfg").string() + "' --views coronal,axial,sagittal") != 0) {
    return {false, "pretrain failed"};
  }
  if (run_cli("phantom --seed 77 --size 32 --out '" + dir.string() + "'") != 0) return {false, "phantom failed"};
  const std::string image = "'" + (dir / "phantom_77_image.nii").string() + "'";
  for (const char* run : {"a", "b"}) {
    if (run_cli("segment " + image + " --model '" + (dir / "model").string() + "' --out '" + (dir / run).string() + "'") != 0) {
      return {false, "segment failed"};
    }
  }
  const LabelVolume first = read_label_volume(dir / "a" / "segmentation.nii");
  const LabelVolume second = read_label_volume(dir / "b" / "segmentation.nii");
  double worst = 0.0;
  int structures = 0;
  for (std::int32_t l = 1; l < kPhantomClasses; ++l) {
    const double va = volume_of(first, l), vb = volume_of(second, l);
    if (va + vb == 0.0) continue;
    ++structures;
    worst = std::max(worst, volume_distance(va, vb));
  }
  fs::remove_all(dir);
  return {worst == 0.0 && structures > 0, std::to_string(structures) + " structures, max d_V " + fmt("%g", worst)};
}

// 9. Identical seeds and configs give bit-identical histories and checkpoints, in-process and across processes.
Outcome reproducibility_check() {
  const fs::path dir = scratch_dir("repro");
  std::vector<std::string> mismatches;

  auto train_once = [&](const fs::path& out) {
    fs::create_directories(out);
    SliceDataset<float> train;
    for (std::uint64_t i = 0; i < 2; ++i) {
      const Phantom p = varied_phantom(70 + i, 32);
      train = SliceDataset<float>::concat(train, view_set(p.image, corrupt_labels(p.labels, 0.2, 70 + i), View::axial, kPhantomClasses));
    }
    const Phantom v = varied_phantom(80, 32);
    const SliceDataset<float> val = view_set(v.image, v.labels, View::axial, kPhantomClasses);
    TrainConfig c = desk_config(5, 4, 0.02);
    c.view = View::axial;
    c.checkpoint_path = out / "axial.ckpt";
    c.history_path = out / "axial_history.csv";
    auto params = init_params<float>(NetworkConfig::miniature(kPhantomClasses, 8), 5);
    train_stage(params, train, val, c);
  };
  train_once(dir / "a");
  train_once(dir / "b");
  for (const char* f : {"axial.ckpt", "axial_history.csv"}) {
    if (file_bytes(dir / "a" / f).empty() || file_bytes(dir / "a" / f) != file_bytes(dir / "b" / f)) {
      mismatches.push_back(std::string("in-process ") + f);
    }
  }

  for (const char* run : {"c", "d"}) {
    write_run_config(dir / (std::string(run) + ".cfg"), dir / run, 16, 2, 2);
    if (run_cli("pretrain --config '" + (dir / (std::string(run) + ".cfg")).string() + "'") != 0) {
      mismatches.push_back("cli pretrain failed");
    }
  }
  for (const char* f : {"coronal.ckpt", "coronal_history.csv"}) {
    if (file_bytes(dir / "c" / f).empty() || file_bytes(dir / "c" / f) != file_bytes(dir / "d" / f)) {
      mismatches.push_back(std::string("cross-process ") + f);
    }
  }
  fs::remove_all(dir);
  std::string detail = "histories and checkpoints identical in-process and across processes";
  if (!mismatches.empty()) {
    detail = "differ:";
    for (const auto& m : mismatches) detail += " " + m;
  }
  return {mismatches.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  set_log_level(LogLevel::error);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite_check},
      {"structural identities", structural_check},
      {"loss oracles", loss_oracle_check},
      {"phantom overfit", overfit_check},
      {"fine-tuning direction", finetune_check},
      {"multi-view aggregation", aggregation_check},
      {"metric oracles", metric_oracle_check},
      {"segmentation consistency", consistency_check},
      {"reproducibility", reproducibility_check},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  bool all = true;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int number = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(number)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    all = all && o.pass;
    std::printf("%s %d %s: %s [%.0f s]\n", o.pass ? "PASS" : "FAIL", number, criteria[k].first.c_str(), o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
