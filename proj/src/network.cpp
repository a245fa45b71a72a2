#include "quicknat/network.hpp"

#include <cmath>
#include <random>

namespace quicknat {

std::string_view to_string(View view) {
  switch (view) {
    case View::coronal: return "coronal";
    case View::axial: return "axial";
    case View::sagittal: return "sagittal";
  }
  return "unknown";
}

View parse_view(std::string_view name) {
  if (name == "coronal") return View::coronal;
  if (name == "axial") return View::axial;
  if (name == "sagittal") return View::sagittal;
  throw std::invalid_argument("unknown view '" + std::string(name) + "' (expected coronal, axial or sagittal)");
}

namespace {

template <typename T>
ConvLayer<T> make_conv(Index in, Index out, Index kernel) {
  return {{Tensor<T>({out, in, kernel, kernel}), ParamKind::weight, {}}, {Tensor<T>({out}), ParamKind::bias, {}}};
}

template <typename T>
BatchNormLayer<T> make_bn(Index channels) {
  return {{Tensor<T>({channels}, T(1)), ParamKind::bn_affine, {}},
          {Tensor<T>({channels}), ParamKind::bn_affine, {}},
          BatchNormStats<T>::initial(channels)};
}

template <typename T>
void visit_conv(const std::string& prefix, ConvLayer<T>& c, const ParameterVisitor<T>& f) {
  f(prefix + ".weight", c.weight);
  f(prefix + ".bias", c.bias);
}

template <typename T>
void visit_bn(const std::string& prefix, BatchNormLayer<T>& b, const ParameterVisitor<T>& f) {
  f(prefix + ".gamma", b.gamma);
  f(prefix + ".beta", b.beta);
}

template <typename T>
void visit_block(const std::string& prefix, DenseBlockParams<T>& p, const ParameterVisitor<T>& f) {
  visit_bn(prefix + ".bn1", p.bn1, f);
  visit_conv(prefix + ".conv1", p.conv1, f);
  visit_bn(prefix + ".bn2", p.bn2, f);
  visit_conv(prefix + ".conv2", p.conv2, f);
  visit_bn(prefix + ".bn3", p.bn3, f);
  visit_conv(prefix + ".conv3", p.conv3, f);
}

template <typename T>
void visit_bn_buffers(const std::string& prefix, BatchNormLayer<T>& b, const BufferVisitor<T>& f) {
  f(prefix + ".running_mean", b.stats.running_mean);
  f(prefix + ".running_var", b.stats.running_var);
}

template <typename T, typename U>
Parameter<U> cast_param(const Parameter<T>& p) {
  return {p.value.template cast<U>(), p.kind, {}};
}

template <typename T, typename U>
ConvLayer<U> cast_conv(const ConvLayer<T>& c) {
  return {cast_param<T, U>(c.weight), cast_param<T, U>(c.bias)};
}

template <typename T, typename U>
BatchNormLayer<U> cast_bn(const BatchNormLayer<T>& b) {
  return {cast_param<T, U>(b.gamma), cast_param<T, U>(b.beta),
          {b.stats.running_mean.template cast<U>(), b.stats.running_var.template cast<U>()}};
}

template <typename T, typename U>
DenseBlockParams<U> cast_block(const DenseBlockParams<T>& p) {
  return {cast_bn<T, U>(p.bn1), cast_conv<T, U>(p.conv1), cast_bn<T, U>(p.bn2),
          cast_conv<T, U>(p.conv2), cast_bn<T, U>(p.bn3), cast_conv<T, U>(p.conv3)};
}

template <typename T>
Var apply_conv(Tape<T>& tape, Var x, ConvLayer<T>& c) {
  return conv2d(tape, x, c.weight.var, c.bias.var);
}

template <typename T>
Var apply_bn(Tape<T>& tape, Var x, BatchNormLayer<T>& b, Mode mode) {
  return batchnorm2d(tape, x, b.gamma.var, b.beta.var, mode, b.stats);
}

}  // namespace

template <typename T>
DenseBlockParams<T> DenseBlockParams<T>::allocate(Index in_channels, Index width, Index kernel) {
  return {make_bn<T>(in_channels),
          make_conv<T>(in_channels, width, kernel),
          make_bn<T>(in_channels + width),
          make_conv<T>(in_channels + width, width, kernel),
          make_bn<T>(in_channels + 2 * width),
          make_conv<T>(in_channels + 2 * width, width, 1)};
}

template <typename T>
NetworkParameters<T> NetworkParameters<T>::allocate(const NetworkConfig& config) {
  if (config.in_channels <= 0 || config.width <= 0 || config.num_classes < 2 || config.kernel % 2 == 0) {
    throw std::invalid_argument("invalid network configuration");
  }
  NetworkParameters<T> p;
  p.config = config;
  const Index w = config.width, k = config.kernel;
  for (std::size_t i = 0; i < 4; ++i) {
    p.encoders[i] = DenseBlockParams<T>::allocate(i == 0 ? config.in_channels : w, w, k);
    // Decoder input: unpooled features concatenated with the encoder skip.
    p.decoders[i] = DenseBlockParams<T>::allocate(2 * w, w, k);
  }
  p.bottleneck_conv = make_conv<T>(w, w, k);
  p.bottleneck_bn = make_bn<T>(w);
  p.classifier = make_conv<T>(w, config.num_classes, 1);
  return p;
}

template <typename T>
void NetworkParameters<T>::visit(const ParameterVisitor<T>& f) {
  for (std::size_t i = 0; i < 4; ++i) visit_block("encoder" + std::to_string(i + 1), encoders[i], f);
  visit_conv("bottleneck.conv", bottleneck_conv, f);
  visit_bn("bottleneck.bn", bottleneck_bn, f);
  for (std::size_t i = 0; i < 4; ++i) visit_block("decoder" + std::to_string(i + 1), decoders[i], f);
  visit_conv("classifier.conv", classifier, f);
}

template <typename T>
void NetworkParameters<T>::visit_buffers(const BufferVisitor<T>& f) {
  auto block = [&](const std::string& prefix, DenseBlockParams<T>& p) {
    visit_bn_buffers(prefix + ".bn1", p.bn1, f);
    visit_bn_buffers(prefix + ".bn2", p.bn2, f);
    visit_bn_buffers(prefix + ".bn3", p.bn3, f);
  };
  for (std::size_t i = 0; i < 4; ++i) block("encoder" + std::to_string(i + 1), encoders[i]);
  visit_bn_buffers("bottleneck.bn", bottleneck_bn, f);
  for (std::size_t i = 0; i < 4; ++i) block("decoder" + std::to_string(i + 1), decoders[i]);
}

template <typename T>
Index NetworkParameters<T>::parameter_count() {
  Index n = 0;
  visit([&](const std::string&, Parameter<T>& p) { n += p.value.size(); });
  return n;
}

template <typename T>
void NetworkParameters<T>::bind(Tape<T>& tape, bool requires_grad) {
  visit([&](const std::string&, Parameter<T>& p) { p.var = tape.leaf(p.value, requires_grad); });
}

template <typename T>
template <typename U>
NetworkParameters<U> NetworkParameters<T>::cast() const {
  NetworkParameters<U> out;
  out.config = config;
  for (std::size_t i = 0; i < 4; ++i) {
    out.encoders[i] = cast_block<T, U>(encoders[i]);
    out.decoders[i] = cast_block<T, U>(decoders[i]);
  }
  out.bottleneck_conv = cast_conv<T, U>(bottleneck_conv);
  out.bottleneck_bn = cast_bn<T, U>(bottleneck_bn);
  out.classifier = cast_conv<T, U>(classifier);
  return out;
}

template <typename T>
NetworkParameters<T> init_params(const NetworkConfig& config, std::uint64_t seed) {
  NetworkParameters<T> p = NetworkParameters<T>::allocate(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  p.visit([&](const std::string& name, Parameter<T>& param) {
    if (param.kind != ParamKind::weight) return;
    const Shape& s = param.value.shape();
    const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
    double scale = 1.0 / std::sqrt(fan_in);
    if (name.starts_with("classifier")) scale *= 0.1;
    for (T& v : param.value.values()) v = static_cast<T>(scale * normal(rng));
  });
  return p;
}

template <typename T>
Var dense_block(Tape<T>& tape, Var x, DenseBlockParams<T>& p, Mode mode) {
  const Index cin = tape.value(x).rank() == 4 ? tape.value(x).dim(1) : -1;
  if (cin != p.in_channels()) {
    throw ShapeError("dense_block: parameters expect " + std::to_string(p.in_channels()) +
                     " input channels, got shape " + to_string(tape.value(x).shape()));
  }
  const Var out1 = apply_conv(tape, relu(tape, apply_bn(tape, x, p.bn1, mode)), p.conv1);
  const Var cat1 = concat_channels(tape, {x, out1});
  const Var out2 = apply_conv(tape, relu(tape, apply_bn(tape, cat1, p.bn2, mode)), p.conv2);
  const Var cat2 = concat_channels(tape, {x, out1, out2});
  return apply_conv(tape, relu(tape, apply_bn(tape, cat2, p.bn3, mode)), p.conv3);
}

template <typename T>
ForwardResult forward(Tape<T>& tape, NetworkParameters<T>& params, Var input, Mode mode) {
  const Shape& s = tape.value(input).shape();
  if (s.size() != 4 || s[1] != params.config.in_channels) {
    throw ShapeError("forward expects [B," + std::to_string(params.config.in_channels) + ",H,W], got " +
                     to_string(s));
  }
  if (s[2] % 16 != 0 || s[3] % 16 != 0) {
    throw ShapeError("forward: slice size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " is not divisible by 16; pad the input");
  }
  std::array<Var, 4> skips;
  std::array<PoolIndices, 4> pools;
  Var x = input;
  for (std::size_t i = 0; i < 4; ++i) {
    skips[i] = dense_block(tape, x, params.encoders[i], mode);
    auto [pooled, idx] = maxpool2x2(tape, skips[i]);
    x = pooled;
    pools[i] = std::move(idx);
  }
  x = apply_bn(tape, apply_conv(tape, x, params.bottleneck_conv), params.bottleneck_bn, mode);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t level = 3 - i;  // decoder i+1 pairs with encoder 4-i
    const Var up = unpool2x2(tape, x, pools[level]);
    x = dense_block(tape, concat_channels(tape, {up, skips[level]}), params.decoders[i], mode);
  }
  const Var logits = apply_conv(tape, x, params.classifier);
  return {logits, softmax_channels(tape, logits)};
}

template <typename T>
Tensor<T> ViewNetwork<T>::predict(const Tensor<T>& slices) {
  Tape<T> tape;
  params_.bind(tape, false);
  const Var input = tape.constant(slices);
  return tape.value(forward(tape, params_, input, mode_).probabilities);
}

#define QUICKNAT_INSTANTIATE_NETWORK(T)                                                              \
  template struct DenseBlockParams<T>;                                                               \
  template struct NetworkParameters<T>;                                                              \
  template NetworkParameters<T> init_params<T>(const NetworkConfig&, std::uint64_t);                 \
  template Var dense_block<T>(Tape<T>&, Var, DenseBlockParams<T>&, Mode);                            \
  template ForwardResult forward<T>(Tape<T>&, NetworkParameters<T>&, Var, Mode);                     \
  template class ViewNetwork<T>;

QUICKNAT_INSTANTIATE_NETWORK(float)
QUICKNAT_INSTANTIATE_NETWORK(double)

template NetworkParameters<double> NetworkParameters<float>::cast<double>() const;
template NetworkParameters<float> NetworkParameters<double>::cast<float>() const;
template NetworkParameters<float> NetworkParameters<float>::cast<float>() const;
template NetworkParameters<double> NetworkParameters<double>::cast<double>() const;

}  // namespace quicknat
