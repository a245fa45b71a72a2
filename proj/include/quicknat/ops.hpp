#pragma once

#include <span>
#include <utility>
#include <vector>

#include "quicknat/autodiff.hpp"
#include "quicknat/tensor.hpp"

namespace quicknat {

enum class Mode { train, eval };

/// Same-padded (zero-fill) 2-D cross-correlation.
/// input [B,Cin,H,W], kernel [Cout,Cin,kH,kW] with odd kH/kW, bias [Cout].
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias);

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Running statistics used in eval mode; initialized to mean 0, variance 1.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static BatchNormStats initial(Index channels) {
    return {Tensor<T>({channels}, T(0)), Tensor<T>({channels}, T(1))};
  }
};

/// Per-channel batch normalization. Train mode normalizes with the batch
/// statistics and updates `stats`; eval mode uses `stats` unchanged.
template <typename T>
Var batchnorm2d(Tape<T>& tape, Var input, Var gamma, Var beta, Mode mode, BatchNormStats<T>& stats,
                const BatchNormOptions& options = {});

template <typename T>
Var relu(Tape<T>& tape, Var input);

/// Argmax bookkeeping of a 2x2 max-pool: for every output cell, the flat
/// index (into the pooled input tensor) of the winning input cell.
struct PoolIndices {
  Shape input_shape;
  Shape output_shape;
  std::vector<Index> argmax;
};

/// Non-overlapping 2x2 max-pool, stride 2. Ties resolve to the lowest flat index.
template <typename T>
std::pair<Var, PoolIndices> maxpool2x2(Tape<T>& tape, Var input);

/// Places each input value at the position recorded by the matching max-pool; zeros elsewhere.
template <typename T>
Var unpool2x2(Tape<T>& tape, Var input, const PoolIndices& indices);

template <typename T>
Var concat_channels(Tape<T>& tape, std::span<const Var> inputs);

template <typename T>
Var concat_channels(Tape<T>& tape, std::initializer_list<Var> inputs) {
  return concat_channels(tape, std::span<const Var>(inputs.begin(), inputs.size()));
}

/// Softmax over the channel axis of a [B,N,H,W] tensor, computed with max-subtraction.
template <typename T>
Var softmax_channels(Tape<T>& tape, Var input);

// Scalar reductions and elementwise helpers, mostly for building test objectives.
template <typename T>
Var sum(Tape<T>& tape, Var input);
template <typename T>
Var mean(Tape<T>& tape, Var input);
template <typename T>
Var square(Tape<T>& tape, Var input);
template <typename T>
Var add(Tape<T>& tape, Var a, Var b);
/// Sum of elementwise products with a constant weight tensor.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var input, const Tensor<T>& weights);

}  // namespace quicknat
