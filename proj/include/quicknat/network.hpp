#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

#include "quicknat/autodiff.hpp"
#include "quicknat/ops.hpp"
#include "quicknat/tensor.hpp"

namespace quicknat {

enum class View { coronal, axial, sagittal };

std::string_view to_string(View view);
View parse_view(std::string_view name);

/// Classes predicted by the full-resolution 28-class networks.
inline constexpr Index kQuickNatClasses = 28;
/// Classes of the sagittal network after left/right structures are merged.
inline constexpr Index kQuickNatSagittalClasses = 16;

struct NetworkConfig {
  Index in_channels = 1;
  Index width = 64;
  Index kernel = 5;
  Index num_classes = kQuickNatClasses;

  /// Full-size architecture: 64 feature maps, 5x5 kernels.
  static NetworkConfig full(Index num_classes = kQuickNatClasses) { return {1, 64, 5, num_classes}; }
  /// Reduced width for tests and desk-scale training runs.
  static NetworkConfig miniature(Index num_classes = 3, Index width = 8) { return {1, width, 5, num_classes}; }

  bool operator==(const NetworkConfig&) const = default;
};

enum class ParamKind { weight, bias, bn_affine };

/// A learnable tensor plus the tape leaf it is currently bound to.
template <typename T>
struct Parameter {
  Tensor<T> value;
  ParamKind kind = ParamKind::weight;
  Var var;
};

template <typename T>
struct ConvLayer {
  Parameter<T> weight;
  Parameter<T> bias;
};

template <typename T>
struct BatchNormLayer {
  Parameter<T> gamma;
  Parameter<T> beta;
  BatchNormStats<T> stats;
};

/// BN->ReLU->conv5x5 (in->w), BN->ReLU->conv5x5 (in+w->w), BN->ReLU->conv1x1 (in+2w->w).
template <typename T>
struct DenseBlockParams {
  BatchNormLayer<T> bn1;
  ConvLayer<T> conv1;
  BatchNormLayer<T> bn2;
  ConvLayer<T> conv2;
  BatchNormLayer<T> bn3;
  ConvLayer<T> conv3;

  static DenseBlockParams allocate(Index in_channels, Index width, Index kernel);
  Index in_channels() const { return conv1.weight.value.dim(1); }
};

/// Visitor receiving (hierarchical name, parameter).
template <typename T>
using ParameterVisitor = std::function<void(const std::string&, Parameter<T>&)>;
/// Visitor receiving (hierarchical name, running-statistic buffer).
template <typename T>
using BufferVisitor = std::function<void(const std::string&, Tensor<T>&)>;

/// Every learnable tensor of one view network.
template <typename T>
struct NetworkParameters {
  NetworkConfig config;
  std::array<DenseBlockParams<T>, 4> encoders;
  ConvLayer<T> bottleneck_conv;
  BatchNormLayer<T> bottleneck_bn;
  std::array<DenseBlockParams<T>, 4> decoders;
  ConvLayer<T> classifier;

  /// Zero-filled parameters shaped for `config` (BN gamma = 1, running var = 1).
  static NetworkParameters allocate(const NetworkConfig& config);

  void visit(const ParameterVisitor<T>& f);
  void visit_buffers(const BufferVisitor<T>& f);
  /// Number of learnable scalars.
  Index parameter_count();

  /// Registers every parameter as a leaf of `tape`, replacing previous bindings.
  void bind(Tape<T>& tape, bool requires_grad = true);

  template <typename U>
  NetworkParameters<U> cast() const;
};

/// Deterministic fan-in scaled initialization: hidden conv weights ~ N(0, 1/fan_in),
/// classifier weights a tenth of that (near-uniform initial softmax), biases 0,
/// BN gamma 1 and beta 0.
template <typename T>
NetworkParameters<T> init_params(const NetworkConfig& config, std::uint64_t seed);

/// One dense block on bound parameters. Output has `width` channels and the input's spatial size.
template <typename T>
Var dense_block(Tape<T>& tape, Var x, DenseBlockParams<T>& p, Mode mode);

struct ForwardResult {
  Var logits;
  Var probabilities;
};

/// Full encoder/bottleneck/decoder/classifier pass on bound parameters.
/// `input` is [B,1,H,W] with H and W divisible by 16.
template <typename T>
ForwardResult forward(Tape<T>& tape, NetworkParameters<T>& params, Var input, Mode mode);

/// Parameters of one principal-view network.
template <typename T>
class ViewNetwork {
 public:
  ViewNetwork(View view, NetworkParameters<T> params) : view_(view), params_(std::move(params)) {}

  View view() const { return view_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }
  NetworkParameters<T>& params() { return params_; }
  const NetworkParameters<T>& params() const { return params_; }
  Index num_classes() const { return params_.config.num_classes; }

  /// Eval-style convenience: binds parameters without gradients and returns
  /// per-pixel class probabilities [B,N,H,W].
  Tensor<T> predict(const Tensor<T>& slices);

 private:
  View view_;
  Mode mode_ = Mode::eval;
  NetworkParameters<T> params_;
};

}  // namespace quicknat
