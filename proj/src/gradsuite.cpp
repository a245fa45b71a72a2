#include "quicknat/gradsuite.hpp"

#include <random>

#include "quicknat/loss.hpp"
#include "quicknat/network.hpp"
#include "quicknat/ops.hpp"

namespace quicknat {

namespace {

class Inputs {
 public:
  explicit Inputs(std::uint64_t seed) : rng_(seed) {}

  Tensor<double> uniform(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(std::move(shape));
    for (double& v : t.values()) v = u(rng_);
    return t;
  }

  // Keeps finite differences away from ReLU kinks and max-pool ties.
  Tensor<double> away_from_zero(Shape shape, double gap = 0.05) {
    Tensor<double> t = uniform(std::move(shape));
    for (double& v : t.values()) {
      if (std::abs(v) < gap) v += v < 0 ? -gap : gap;
    }
    return t;
  }

  LabelTensor labels(Shape shape, std::int32_t classes) {
    std::uniform_int_distribution<std::int32_t> u(0, classes - 1);
    LabelTensor t(std::move(shape));
    for (auto& v : t.values()) v = u(rng_);
    return t;
  }

  std::uint64_t next() { return rng_(); }

  // Batch-norm gamma/beta drawn away from their init values (1 and 0). With
  // beta = 0, a mean-zero unpooled channel lands exactly on a ReLU kink.
  void jitter_affine(Parameter<double>& p) {
    if (p.kind != ParamKind::bn_affine) return;
    std::uniform_real_distribution<double> u(0.2, 0.6);
    std::bernoulli_distribution sign(0.5);
    for (double& v : p.value.values()) v += sign(rng_) ? u(rng_) : -u(rng_);
  }

 private:
  std::mt19937_64 rng_;
};

GradCheckOptions exact(double tolerance) { return {1e-6, tolerance, 0}; }

template <typename T>
std::vector<Parameter<T>*> block_parameters(DenseBlockParams<T>& b) {
  return {&b.bn1.gamma, &b.bn1.beta, &b.conv1.weight, &b.conv1.bias, &b.bn2.gamma, &b.bn2.beta,
          &b.conv2.weight, &b.conv2.bias, &b.bn3.gamma, &b.bn3.beta, &b.conv3.weight, &b.conv3.bias};
}

}  // namespace

bool all_passed(const std::vector<GradSuiteEntry>& suite) {
  for (const auto& e : suite) {
    if (!e.report.passed()) return false;
  }
  return true;
}

std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed) {
  Inputs in(seed);
  std::vector<GradSuiteEntry> out;
  auto run = [&](std::string name, const GradObjective& f, const std::vector<Tensor<double>>& params,
                 GradCheckOptions options) { out.push_back({std::move(name), grad_check(f, params, options)}); };

  run("conv2d", [](Tape<double>& t, std::span<const Var> p) { return sum(t, conv2d(t, p[0], p[1], p[2])); },
      {in.uniform({2, 3, 8, 8}), in.uniform({4, 3, 5, 5}), in.uniform({4})}, exact(kLinearGradTolerance));

  for (Mode mode : {Mode::train, Mode::eval}) {
    auto stats = BatchNormStats<double>::initial(3);
    stats.running_mean = in.uniform({3});
    stats.running_var = in.uniform({3}, 0.5, 2.0);
    const Tensor<double> upstream = in.uniform({4, 3, 6, 6});
    run(mode == Mode::train ? "batchnorm2d(train)" : "batchnorm2d(eval)",
        [&](Tape<double>& t, std::span<const Var> p) {
          return weighted_sum(t, batchnorm2d(t, p[0], p[1], p[2], mode, stats), upstream);
        },
        {in.uniform({4, 3, 6, 6}), in.uniform({3}, 0.5, 1.5), in.uniform({3})},
        exact(mode == Mode::train ? kGradTolerance : kLinearGradTolerance));
  }

  {
    const Tensor<double> upstream = in.uniform({2, 3, 4, 4});
    run("relu", [&](Tape<double>& t, std::span<const Var> p) { return weighted_sum(t, relu(t, p[0]), upstream); },
        {in.away_from_zero({2, 3, 4, 4})}, exact(kLinearGradTolerance));
  }
  {
    const Tensor<double> upstream = in.uniform({1, 2, 3, 2});
    run("maxpool2x2",
        [&](Tape<double>& t, std::span<const Var> p) { return weighted_sum(t, maxpool2x2(t, p[0]).first, upstream); },
        {in.away_from_zero({1, 2, 6, 4})}, exact(kLinearGradTolerance));
  }
  {
    Tape<double> scratch;
    const PoolIndices indices = maxpool2x2(scratch, scratch.constant(in.uniform({2, 2, 4, 6}))).second;
    const Tensor<double> upstream = in.uniform({2, 2, 4, 6});
    run("unpool2x2",
        [&](Tape<double>& t, std::span<const Var> p) { return weighted_sum(t, unpool2x2(t, p[0], indices), upstream); },
        {in.uniform({2, 2, 2, 3})}, exact(kLinearGradTolerance));
  }
  {
    const Tensor<double> upstream = in.uniform({2, 5, 3, 3});
    run("concat_channels",
        [&](Tape<double>& t, std::span<const Var> p) {
          return weighted_sum(t, concat_channels(t, {p[0], p[1]}), upstream);
        },
        {in.uniform({2, 2, 3, 3}), in.uniform({2, 3, 3, 3})}, exact(kLinearGradTolerance));
  }
  {
    const Tensor<double> upstream = in.uniform({1, 5, 4, 4});
    run("softmax_channels",
        [&](Tape<double>& t, std::span<const Var> p) { return weighted_sum(t, softmax_channels(t, p[0]), upstream); },
        {in.uniform({1, 5, 4, 4}, -3.0, 3.0)}, exact(kGradTolerance));
  }
  run("sum+mean+add", [](Tape<double>& t, std::span<const Var> p) { return add(t, sum(t, p[0]), mean(t, p[1])); },
      {in.uniform({3, 4}), in.uniform({2, 5})}, exact(kLinearGradTolerance));
  run("square", [](Tape<double>& t, std::span<const Var> p) { return sum(t, square(t, p[0])); }, {in.uniform({3, 4})},
      exact(kGradTolerance));

  {
    NetworkParameters<double> net = init_params<double>(NetworkConfig::miniature(3, 4), in.next());
    DenseBlockParams<double> block = net.encoders[1];
    std::vector<Parameter<double>*> slots = block_parameters(block);
    std::vector<Tensor<double>> params{in.uniform({2, 4, 8, 8})};
    for (auto* s : slots) {
      in.jitter_affine(*s);
      params.push_back(s->value);
    }
    const Tensor<double> upstream = in.uniform({2, 4, 8, 8});
    run("dense_block",
        [&](Tape<double>& t, std::span<const Var> p) {
          for (std::size_t i = 0; i < slots.size(); ++i) slots[i]->var = p[i + 1];
          return weighted_sum(t, dense_block(t, p[0], block, Mode::train), upstream);
        },
        params, exact(kGradTolerance));
  }

  {
    NetworkParameters<double> net = init_params<double>(NetworkConfig::miniature(3, 4), in.next());
    std::vector<Parameter<double>*> slots;
    std::vector<Tensor<double>> params{in.uniform({2, 1, 16, 16})};
    net.visit([&](const std::string&, Parameter<double>& p) {
      in.jitter_affine(p);
      slots.push_back(&p);
      params.push_back(p.value);
    });
    const LabelTensor labels = in.labels({2, 16, 16}, 3);
    const ClassFrequencies freq = class_frequencies(std::span<const LabelTensor>(&labels, 1), 3);
    const Tensor<double> weights = weight_map(labels, freq);
    // A handful of probes per tensor keeps the check to a few seconds. With
    // ReLU and max-pool in the path, probes that straddle a kink are dropped.
    // Train-mode batch norm couples every unit, so one activation sitting
    // within a step of zero can put a sizeable share of probes on a kink.
    GradCheckOptions options{1e-6, kGradTolerance, 6};
    options.skip_kinks = true;
    options.max_skipped_fraction = 0.25;
    run("network+loss",
        [&](Tape<double>& t, std::span<const Var> p) {
          for (std::size_t i = 0; i < slots.size(); ++i) slots[i]->var = p[i + 1];
          const ForwardResult r = forward(t, net, p[0], Mode::train);
          return combined_loss(t, r.probabilities, labels, weights);
        },
        params, options);
  }

  {
    const LabelTensor labels = in.labels({2, 6, 6}, 4);
    const ClassFrequencies freq = class_frequencies(std::span<const LabelTensor>(&labels, 1), 4);
    const Tensor<double> weights = weight_map(labels, freq);
    run("combined_loss",
        [&](Tape<double>& t, std::span<const Var> p) {
          return combined_loss(t, softmax_channels(t, p[0]), labels, weights);
        },
        {in.uniform({2, 4, 6, 6}, -2.0, 2.0)}, exact(kGradTolerance));
  }
  return out;
}

}  // namespace quicknat
