#include "quicknat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

namespace quicknat {

Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw ShapeError(std::string(what) + " expects a 4-D tensor, got " + to_string(s));
}

struct ConvGeometry {
  Index batch, in_channels, height, width, out_channels, kh, kw;
  Index patch() const { return in_channels * kh * kw; }
  Index plane() const { return height * width; }
};

// Unfolds one image [Cin,H,W] into a [Cin*kh*kw, H*W] matrix of zero-padded patches.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, RowMatrix<T>& col) {
  const Index ph = g.kh / 2, pw = g.kw / 2;
  for (Index c = 0; c < g.in_channels; ++c) {
    const T* channel = image + c * g.plane();
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        T* row = col.data() + ((c * g.kh + i) * g.kw + j) * g.plane();
        // Valid output columns; empty when the kernel offset exceeds the width.
        const Index w_lo = std::min<Index>(g.width, std::max<Index>(0, pw - j));
        const Index w_hi = std::max<Index>(w_lo, std::min<Index>(g.width, g.width + pw - j));
        for (Index h = 0; h < g.height; ++h) {
          T* out = row + h * g.width;
          const Index sh = h + i - ph;
          if (sh < 0 || sh >= g.height) {
            std::fill(out, out + g.width, T(0));
            continue;
          }
          std::fill(out, out + w_lo, T(0));
          const T* src = channel + sh * g.width + (j - pw);
          std::copy(src + w_lo, src + w_hi, out + w_lo);
          std::fill(out + w_hi, out + g.width, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch gradients back into an image gradient.
template <typename T>
void col2im_add(const RowMatrix<T>& col, const ConvGeometry& g, T* image_grad) {
  const Index ph = g.kh / 2, pw = g.kw / 2;
  for (Index c = 0; c < g.in_channels; ++c) {
    T* channel = image_grad + c * g.plane();
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const T* row = col.data() + ((c * g.kh + i) * g.kw + j) * g.plane();
        // Valid output columns; empty when the kernel offset exceeds the width.
        const Index w_lo = std::min<Index>(g.width, std::max<Index>(0, pw - j));
        const Index w_hi = std::max<Index>(w_lo, std::min<Index>(g.width, g.width + pw - j));
        for (Index h = 0; h < g.height; ++h) {
          const Index sh = h + i - ph;
          if (sh < 0 || sh >= g.height) continue;
          const T* in = row + h * g.width;
          T* dst = channel + sh * g.width + (j - pw);
          for (Index w = w_lo; w < w_hi; ++w) dst[w] += in[w];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias) {
  const Tensor<T>& x = tape.value(input);
  const Tensor<T>& k = tape.value(kernel);
  const Tensor<T>& b = tape.value(bias);
  require_rank4(x.shape(), "conv2d input");
  require_rank4(k.shape(), "conv2d kernel");
  if (k.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(k.dim(1)) + " input channels, input has " +
                     std::to_string(x.dim(1)));
  }
  if (k.dim(2) % 2 == 0 || k.dim(3) % 2 == 0) {
    throw ShapeError("conv2d: same padding requires odd kernel extents, got " + to_string(k.shape()));
  }
  if (b.rank() != 1 || b.dim(0) != k.dim(0)) {
    throw ShapeError("conv2d: bias shape " + to_string(b.shape()) + " does not match kernel " + to_string(k.shape()));
  }
  const ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3)};
  const bool pointwise = g.kh == 1 && g.kw == 1;

  Tensor<T> y({g.batch, g.out_channels, g.height, g.width});
  Eigen::Map<const RowMatrix<T>> weights(k.data(), g.out_channels, g.patch());
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias_vec(b.data(), g.out_channels);
  RowMatrix<T> col;
  if (!pointwise) col.resize(g.patch(), g.plane());
  for (Index n = 0; n < g.batch; ++n) {
    const T* image = x.data() + n * g.in_channels * g.plane();
    Eigen::Map<RowMatrix<T>> out(y.data() + n * g.out_channels * g.plane(), g.out_channels, g.plane());
    if (pointwise) {
      out.noalias() = weights * Eigen::Map<const RowMatrix<T>>(image, g.in_channels, g.plane());
    } else {
      im2col(image, g, col);
      out.noalias() = weights * col;
    }
    out.colwise() += bias_vec;
  }

  return tape.record(std::move(y), {input, kernel, bias}, [input, kernel, bias, g, pointwise](Tape<T>& t, Var self) {
    const Tensor<T>& gy = t.grad_ref(self);
    const Tensor<T>& xv = t.value(input);
    Eigen::Map<const RowMatrix<T>> w(t.value(kernel).data(), g.out_channels, g.patch());
    const bool need_x = t.requires_grad(input);
    const bool need_k = t.requires_grad(kernel);
    const bool need_b = t.requires_grad(bias);
    T* gx = need_x ? t.grad_buffer(input).data() : nullptr;
    T* gk = need_k ? t.grad_buffer(kernel).data() : nullptr;
    T* gb = need_b ? t.grad_buffer(bias).data() : nullptr;
    RowMatrix<T> col;
    if (!pointwise) col.resize(g.patch(), g.plane());
    for (Index n = 0; n < g.batch; ++n) {
      const T* image = xv.data() + n * g.in_channels * g.plane();
      Eigen::Map<const RowMatrix<T>> dy(gy.data() + n * g.out_channels * g.plane(), g.out_channels, g.plane());
      if (need_b) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb, g.out_channels) += dy.rowwise().sum();
      }
      if (need_k) {
        Eigen::Map<RowMatrix<T>> dk(gk, g.out_channels, g.patch());
        if (pointwise) {
          dk.noalias() += dy * Eigen::Map<const RowMatrix<T>>(image, g.in_channels, g.plane()).transpose();
        } else {
          im2col(image, g, col);
          dk.noalias() += dy * col.transpose();
        }
      }
      if (need_x) {
        T* dx_image = gx + n * g.in_channels * g.plane();
        if (pointwise) {
          Eigen::Map<RowMatrix<T>>(dx_image, g.in_channels, g.plane()).noalias() += w.transpose() * dy;
        } else {
          col.noalias() = w.transpose() * dy;
          col2im_add(col, g, dx_image);
        }
      }
    }
  });
}

template <typename T>
Var batchnorm2d(Tape<T>& tape, Var input, Var gamma, Var beta, Mode mode, BatchNormStats<T>& stats,
                const BatchNormOptions& options) {
  const Tensor<T>& x = tape.value(input);
  require_rank4(x.shape(), "batchnorm2d input");
  const Index batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  const Index count = batch * plane;
  const std::initializer_list<const Tensor<T>*> per_channel{&tape.value(gamma), &tape.value(beta),
                                                            &stats.running_mean, &stats.running_var};
  for (const Tensor<T>* p : per_channel) {
    if (p->rank() != 1 || p->dim(0) != channels) {
      throw ShapeError("batchnorm2d: per-channel parameter shape " + to_string(p->shape()) + " does not match " +
                       std::to_string(channels) + " channels");
    }
  }
  if (mode == Mode::train && count < 2) {
    throw ShapeError("batchnorm2d: train mode needs at least 2 values per channel");
  }

  // Per-channel mean and inverse standard deviation used for this forward pass.
  auto mean = std::make_shared<std::vector<double>>(channels);
  auto inv_std = std::make_shared<std::vector<double>>(channels);
  for (Index c = 0; c < channels; ++c) {
    if (mode == Mode::train) {
      double s = 0.0;
      for (Index n = 0; n < batch; ++n) {
        const T* p = x.data() + (n * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (Index n = 0; n < batch; ++n) {
        const T* p = x.data() + (n * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      (*mean)[c] = mu;
      (*inv_std)[c] = 1.0 / std::sqrt(var + options.eps);
      const double m = options.momentum;
      const double unbiased = ss / static_cast<double>(count - 1);
      stats.running_mean[c] = static_cast<T>((1.0 - m) * stats.running_mean[c] + m * mu);
      stats.running_var[c] = static_cast<T>((1.0 - m) * stats.running_var[c] + m * unbiased);
    } else {
      (*mean)[c] = stats.running_mean[c];
      (*inv_std)[c] = 1.0 / std::sqrt(static_cast<double>(stats.running_var[c]) + options.eps);
    }
  }

  const Tensor<T>& gm = tape.value(gamma);
  const Tensor<T>& bt = tape.value(beta);
  Tensor<T> y(x.shape());
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const T* p = x.data() + (n * channels + c) * plane;
      T* q = y.data() + (n * channels + c) * plane;
      const T mu = static_cast<T>((*mean)[c]);
      const T scale = static_cast<T>(gm[c] * (*inv_std)[c]);
      for (Index i = 0; i < plane; ++i) q[i] = (p[i] - mu) * scale + bt[c];
    }
  }

  const bool batch_stats = mode == Mode::train;
  return tape.record(std::move(y), {input, gamma, beta},
                     [=](Tape<T>& t, Var self) {
                       const Tensor<T>& gy = t.grad_ref(self);
                       const Tensor<T>& xv = t.value(input);
                       const Tensor<T>& gmv = t.value(gamma);
                       const bool need_x = t.requires_grad(input);
                       for (Index c = 0; c < channels; ++c) {
                         const double mu = (*mean)[c], is = (*inv_std)[c];
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (Index n = 0; n < batch; ++n) {
                           const T* p = xv.data() + (n * channels + c) * plane;
                           const T* d = gy.data() + (n * channels + c) * plane;
                           for (Index i = 0; i < plane; ++i) {
                             sum_dy += d[i];
                             sum_dy_xhat += d[i] * (p[i] - mu) * is;
                           }
                         }
                         if (t.requires_grad(gamma)) t.grad_buffer(gamma)[c] += static_cast<T>(sum_dy_xhat);
                         if (t.requires_grad(beta)) t.grad_buffer(beta)[c] += static_cast<T>(sum_dy);
                         if (!need_x) continue;
                         T* gx = t.grad_buffer(input).data();
                         const double g_is = gmv[c] * is;
                         const double mean_dy = batch_stats ? sum_dy / static_cast<double>(count) : 0.0;
                         const double mean_dy_xhat = batch_stats ? sum_dy_xhat / static_cast<double>(count) : 0.0;
                         for (Index n = 0; n < batch; ++n) {
                           const T* p = xv.data() + (n * channels + c) * plane;
                           const T* d = gy.data() + (n * channels + c) * plane;
                           T* out = gx + (n * channels + c) * plane;
                           for (Index i = 0; i < plane; ++i) {
                             const double xhat = (p[i] - mu) * is;
                             out[i] += static_cast<T>(g_is * (d[i] - mean_dy - xhat * mean_dy_xhat));
                           }
                         }
                       }
                     });
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  Tensor<T> y = tape.value(input);
  for (T& v : y.values()) v = v > T(0) ? v : T(0);
  return tape.record(std::move(y), {input}, [input](Tape<T>& t, Var self) {
    const Tensor<T>& gy = t.grad_ref(self);
    const Tensor<T>& x = t.value(input);
    Tensor<T>& gx = t.grad_buffer(input);
    for (Index i = 0; i < x.size(); ++i) {
      if (x[i] > T(0)) gx[i] += gy[i];
    }
  });
}

template <typename T>
std::pair<Var, PoolIndices> maxpool2x2(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  require_rank4(x.shape(), "maxpool2x2 input");
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("maxpool2x2: spatial extents must be even (pad the input), got " + to_string(x.shape()));
  }
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / 2, ow = w / 2;
  PoolIndices idx{x.shape(), {x.dim(0), x.dim(1), oh, ow}, {}};
  idx.argmax.resize(static_cast<std::size_t>(planes * oh * ow));
  Tensor<T> y(idx.output_shape);
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        const Index base = p * h * w + 2 * i * w + 2 * j;
        // Candidates in increasing flat-index order; strict > keeps the first on ties.
        const Index cells[4] = {base, base + 1, base + w, base + w + 1};
        Index best = cells[0];
        for (int c = 1; c < 4; ++c) {
          if (x[cells[c]] > x[best]) best = cells[c];
        }
        const Index o = (p * oh + i) * ow + j;
        y[o] = x[best];
        idx.argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  auto shared = std::make_shared<const std::vector<Index>>(idx.argmax);
  Var out = tape.record(std::move(y), {input}, [input, shared](Tape<T>& t, Var self) {
    const Tensor<T>& gy = t.grad_ref(self);
    Tensor<T>& gx = t.grad_buffer(input);
    for (std::size_t o = 0; o < shared->size(); ++o) gx[(*shared)[o]] += gy[static_cast<Index>(o)];
  });
  return {out, std::move(idx)};
}

template <typename T>
Var unpool2x2(Tape<T>& tape, Var input, const PoolIndices& indices) {
  const Tensor<T>& x = tape.value(input);
  if (x.shape() != indices.output_shape) {
    throw ShapeError("unpool2x2: input shape " + to_string(x.shape()) + " does not match pooled shape " +
                     to_string(indices.output_shape));
  }
  if (static_cast<Index>(indices.argmax.size()) != x.size()) {
    throw ShapeError("unpool2x2: index table has wrong length");
  }
  const Index total = numel(indices.input_shape);
  Tensor<T> y(indices.input_shape);
  for (Index o = 0; o < x.size(); ++o) {
    const Index at = indices.argmax[static_cast<std::size_t>(o)];
    if (at < 0 || at >= total) throw ShapeError("unpool2x2: index out of range");
    y[at] = x[o];
  }
  auto shared = std::make_shared<const std::vector<Index>>(indices.argmax);
  return tape.record(std::move(y), {input}, [input, shared](Tape<T>& t, Var self) {
    const Tensor<T>& gy = t.grad_ref(self);
    Tensor<T>& gx = t.grad_buffer(input);
    for (std::size_t o = 0; o < shared->size(); ++o) gx[static_cast<Index>(o)] += gy[(*shared)[o]];
  });
}

template <typename T>
Var concat_channels(Tape<T>& tape, std::span<const Var> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels needs at least one input");
  const Shape& first = tape.value(inputs[0]).shape();
  require_rank4(first, "concat_channels input");
  Index channels = 0;
  for (Var v : inputs) {
    const Shape& s = tape.value(v).shape();
    require_rank4(s, "concat_channels input");
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
      throw ShapeError("concat_channels: batch/spatial mismatch " + to_string(s) + " vs " + to_string(first));
    }
    channels += s[1];
  }
  const Index batch = first[0], plane = first[2] * first[3];
  Tensor<T> y({batch, channels, first[2], first[3]});
  Index c0 = 0;
  std::vector<Var> vars(inputs.begin(), inputs.end());
  std::vector<Index> offsets;
  for (Var v : inputs) {
    const Tensor<T>& x = tape.value(v);
    const Index c = x.dim(1);
    for (Index n = 0; n < batch; ++n) {
      std::copy_n(x.data() + n * c * plane, c * plane, y.data() + (n * channels + c0) * plane);
    }
    offsets.push_back(c0);
    c0 += c;
  }
  return tape.record(std::move(y), vars, [vars, offsets, batch, channels, plane](Tape<T>& t, Var self) {
    const Tensor<T>& gy = t.grad_ref(self);
    for (std::size_t k = 0; k < vars.size(); ++k) {
      if (!t.requires_grad(vars[k])) continue;
      Tensor<T>& gx = t.grad_buffer(vars[k]);
      const Index c = gx.dim(1);
      for (Index n = 0; n < batch; ++n) {
        const T* src = gy.data() + (n * channels + offsets[k]) * plane;
        T* dst = gx.data() + n * c * plane;
        for (Index i = 0; i < c * plane; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var softmax_channels(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  require_rank4(x.shape(), "softmax_channels input");
  const Index batch = x.dim(0), classes = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> y(x.shape());
  std::vector<T> peak(static_cast<std::size_t>(plane));
  std::vector<T> total(static_cast<std::size_t>(plane));
  for (Index n = 0; n < batch; ++n) {
    const T* xb = x.data() + n * classes * plane;
    T* yb = y.data() + n * classes * plane;
    std::copy_n(xb, plane, peak.begin());
    for (Index c = 1; c < classes; ++c) {
      for (Index i = 0; i < plane; ++i) peak[i] = std::max(peak[i], xb[c * plane + i]);
    }
    std::fill(total.begin(), total.end(), T(0));
    for (Index c = 0; c < classes; ++c) {
      for (Index i = 0; i < plane; ++i) {
        const T e = std::exp(xb[c * plane + i] - peak[i]);
        yb[c * plane + i] = e;
        total[i] += e;
      }
    }
    for (Index c = 0; c < classes; ++c) {
      for (Index i = 0; i < plane; ++i) yb[c * plane + i] /= total[i];
    }
  }
  return tape.record(std::move(y), {input}, [input, batch, classes, plane](Tape<T>& t, Var self) {
    const Tensor<T>& gy = t.grad_ref(self);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad_buffer(input);
    std::vector<T> dot(static_cast<std::size_t>(plane));
    for (Index n = 0; n < batch; ++n) {
      const Index base = n * classes * plane;
      std::fill(dot.begin(), dot.end(), T(0));
      for (Index c = 0; c < classes; ++c) {
        for (Index i = 0; i < plane; ++i) dot[i] += gy[base + c * plane + i] * yv[base + c * plane + i];
      }
      for (Index c = 0; c < classes; ++c) {
        for (Index i = 0; i < plane; ++i) {
          const Index k = base + c * plane + i;
          gx[k] += yv[k] * (gy[k] - dot[i]);
        }
      }
    }
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var input) {
  Tensor<T> y({1}, tape.value(input).array().sum());
  return tape.record(std::move(y), {input}, [input](Tape<T>& t, Var self) {
    t.grad_buffer(input).array() += t.grad_ref(self)[0];
  });
}

template <typename T>
Var mean(Tape<T>& tape, Var input) {
  const Index n = tape.value(input).size();
  Tensor<T> y({1}, tape.value(input).array().sum() / static_cast<T>(n));
  return tape.record(std::move(y), {input}, [input, n](Tape<T>& t, Var self) {
    t.grad_buffer(input).array() += t.grad_ref(self)[0] / static_cast<T>(n);
  });
}

template <typename T>
Var square(Tape<T>& tape, Var input) {
  Tensor<T> y = tape.value(input);
  y.array() = y.array().square();
  return tape.record(std::move(y), {input}, [input](Tape<T>& t, Var self) {
    t.grad_buffer(input).array() += T(2) * t.value(input).array() * t.grad_ref(self).array();
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  if (tape.value(a).shape() != tape.value(b).shape()) {
    throw ShapeError("add: shape mismatch " + to_string(tape.value(a).shape()) + " vs " +
                     to_string(tape.value(b).shape()));
  }
  Tensor<T> y = tape.value(a);
  y.array() += tape.value(b).array();
  return tape.record(std::move(y), {a, b}, [a, b](Tape<T>& t, Var self) {
    if (t.requires_grad(a)) t.grad_buffer(a).array() += t.grad_ref(self).array();
    if (t.requires_grad(b)) t.grad_buffer(b).array() += t.grad_ref(self).array();
  });
}

template <typename T>
Var weighted_sum(Tape<T>& tape, Var input, const Tensor<T>& weights) {
  if (tape.value(input).shape() != weights.shape()) {
    throw ShapeError("weighted_sum: weight shape " + to_string(weights.shape()) + " does not match input " +
                     to_string(tape.value(input).shape()));
  }
  Tensor<T> y({1}, (tape.value(input).array() * weights.array()).sum());
  auto w = std::make_shared<const Tensor<T>>(weights);
  return tape.record(std::move(y), {input}, [input, w](Tape<T>& t, Var self) {
    t.grad_buffer(input).array() += t.grad_ref(self)[0] * w->array();
  });
}

#define QUICKNAT_INSTANTIATE_OPS(T)                                                                              \
  template Var conv2d<T>(Tape<T>&, Var, Var, Var);                                                               \
  template Var batchnorm2d<T>(Tape<T>&, Var, Var, Var, Mode, BatchNormStats<T>&, const BatchNormOptions&);       \
  template Var relu<T>(Tape<T>&, Var);                                                                           \
  template std::pair<Var, PoolIndices> maxpool2x2<T>(Tape<T>&, Var);                                             \
  template Var unpool2x2<T>(Tape<T>&, Var, const PoolIndices&);                                                  \
  template Var concat_channels<T>(Tape<T>&, std::span<const Var>);                                               \
  template Var softmax_channels<T>(Tape<T>&, Var);                                                               \
  template Var sum<T>(Tape<T>&, Var);                                                                            \
  template Var mean<T>(Tape<T>&, Var);                                                                           \
  template Var square<T>(Tape<T>&, Var);                                                                         \
  template Var add<T>(Tape<T>&, Var, Var);                                                                       \
  template Var weighted_sum<T>(Tape<T>&, Var, const Tensor<T>&);

QUICKNAT_INSTANTIATE_OPS(float)
QUICKNAT_INSTANTIATE_OPS(double)

}  // namespace quicknat
