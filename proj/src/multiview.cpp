#include "quicknat/multiview.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "quicknat/log.hpp"

namespace quicknat {

int slice_axis(View view) {
  switch (view) {
    case View::coronal: return 0;
    case View::axial: return 1;
    case View::sagittal: return 2;
  }
  throw std::invalid_argument("unknown view");
}

std::array<Index, 3> slice_coordinates(View view, Index d, Index h, Index w) {
  switch (slice_axis(view)) {
    case 0: return {d, h, w};
    case 1: return {h, d, w};
    default: return {w, d, h};
  }
}

namespace {

void require_rank3(const Shape& s, const char* what) {
  if (s.size() != 3) throw ShapeError(std::string(what) + " expects a rank-3 tensor, got " + to_string(s));
}

// Volume dims -> slice stack dims for a view.
std::array<Index, 3> stack_dims(View view, Index D, Index H, Index W) { return slice_coordinates(view, D, H, W); }

}  // namespace

template <typename T>
Tensor<T> slice_volume(const Tensor<T>& volume, View view) {
  require_rank3(volume.shape(), "slice_volume");
  const Index D = volume.dim(0), H = volume.dim(1), W = volume.dim(2);
  const auto sd = stack_dims(view, D, H, W);
  Tensor<T> out({sd[0], sd[1], sd[2]});
  for (Index d = 0; d < D; ++d) {
    for (Index h = 0; h < H; ++h) {
      for (Index w = 0; w < W; ++w) {
        const auto c = slice_coordinates(view, d, h, w);
        out[(c[0] * sd[1] + c[1]) * sd[2] + c[2]] = volume[(d * H + h) * W + w];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> stack_slices(const Tensor<T>& slices, View view) {
  require_rank3(slices.shape(), "stack_slices");
  const Index S = slices.dim(0), R = slices.dim(1), C = slices.dim(2);
  // The volume dims are the stack dims with the axis permutation undone.
  Index D = 0, H = 0, W = 0;
  switch (slice_axis(view)) {
    case 0: D = S, H = R, W = C; break;
    case 1: H = S, D = R, W = C; break;
    default: W = S, D = R, H = C; break;
  }
  Tensor<T> out({D, H, W});
  for (Index d = 0; d < D; ++d) {
    for (Index h = 0; h < H; ++h) {
      for (Index w = 0; w < W; ++w) {
        const auto c = slice_coordinates(view, d, h, w);
        out[(d * H + h) * W + w] = slices[(c[0] * R + c[1]) * C + c[2]];
      }
    }
  }
  return out;
}

Padding padding_for(Index rows, Index cols, Index multiple) {
  const Index pr = (multiple - rows % multiple) % multiple;
  const Index pc = (multiple - cols % multiple) % multiple;
  return {pr / 2, pr - pr / 2, pc / 2, pc - pc / 2};
}

template <typename T>
Tensor<T> pad_slices(const Tensor<T>& slices, const Padding& pad) {
  if (slices.rank() != 4) throw ShapeError("pad_slices expects [S,C,H,W], got " + to_string(slices.shape()));
  const Index S = slices.dim(0), C = slices.dim(1), H = slices.dim(2), W = slices.dim(3);
  const Index Ho = H + pad.top + pad.bottom, Wo = W + pad.left + pad.right;
  Tensor<T> out({S, C, Ho, Wo});
  for (Index p = 0; p < S * C; ++p) {
    for (Index h = 0; h < H; ++h) {
      std::copy_n(slices.data() + (p * H + h) * W, W, out.data() + (p * Ho + h + pad.top) * Wo + pad.left);
    }
  }
  return out;
}

template <typename T>
Tensor<T> crop_slices(const Tensor<T>& slices, const Padding& pad) {
  if (slices.rank() != 4) throw ShapeError("crop_slices expects [S,C,H,W], got " + to_string(slices.shape()));
  const Index S = slices.dim(0), C = slices.dim(1), H = slices.dim(2), W = slices.dim(3);
  const Index Ho = H - pad.top - pad.bottom, Wo = W - pad.left - pad.right;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("crop_slices: padding exceeds the slice size");
  Tensor<T> out({S, C, Ho, Wo});
  for (Index p = 0; p < S * C; ++p) {
    for (Index h = 0; h < Ho; ++h) {
      std::copy_n(slices.data() + (p * H + h + pad.top) * W + pad.left, Wo, out.data() + (p * Ho + h) * Wo);
    }
  }
  return out;
}

std::vector<std::int32_t> LabelMerge::representatives() const {
  std::vector<std::int32_t> rep(static_cast<std::size_t>(merged_classes), -1);
  for (std::size_t s = 0; s < to_merged.size(); ++s) {
    auto& r = rep[static_cast<std::size_t>(to_merged[s])];
    if (r < 0) r = static_cast<std::int32_t>(s);
  }
  return rep;
}

LabelMerge LabelMerge::from_table(std::vector<std::int32_t> to_merged) {
  if (to_merged.empty()) throw DataError("label merge table is empty");
  std::int32_t hi = -1;
  for (std::int32_t m : to_merged) {
    if (m < 0) throw DataError("label merge table has a negative target");
    hi = std::max(hi, m);
  }
  std::vector<bool> hit(static_cast<std::size_t>(hi) + 1, false);
  for (std::int32_t m : to_merged) hit[static_cast<std::size_t>(m)] = true;
  if (std::find(hit.begin(), hit.end(), false) != hit.end()) {
    throw DataError("label merge table leaves merged ids unused");
  }
  return {std::move(to_merged), hi + 1};
}

LabelMerge LabelMerge::identity(Index classes) {
  std::vector<std::int32_t> t(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<std::int32_t>(i);
  return from_table(std::move(t));
}

LabelMerge LabelMerge::quicknat() {
  // Right-hemisphere id -> left-hemisphere partner.
  constexpr std::array<std::pair<int, int>, 12> pairs{{{1, 3}, {2, 4}, {5, 18}, {6, 19}, {7, 20}, {8, 21},
                                                         {9, 22}, {10, 23}, {11, 24}, {15, 25}, {16, 26}, {17, 27}}};
  std::vector<std::int32_t> t(kQuickNatClasses, -1);
  std::int32_t next = 0;
  for (int s = 0; s < kQuickNatClasses; ++s) {
    const auto right = std::find_if(pairs.begin(), pairs.end(), [s](const auto& p) { return p.second == s; });
    t[static_cast<std::size_t>(s)] = right != pairs.end() ? t[static_cast<std::size_t>(right->first)] : next++;
  }
  return from_table(std::move(t));
}

LabelTensor merge_labels(const LabelTensor& labels, const LabelMerge& merge) {
  LabelTensor out(labels.shape());
  for (Index i = 0; i < labels.size(); ++i) {
    const std::int32_t l = labels[i];
    if (l < 0 || l >= merge.source_classes()) {
      throw DataError("merge_labels: label " + std::to_string(l) + " outside [0," +
                      std::to_string(merge.source_classes()) + ")");
    }
    out[i] = merge.to_merged[static_cast<std::size_t>(l)];
  }
  return out;
}

LabelVolume sagittal_merge_labels(const LabelVolume& labels, const LabelMerge& merge) {
  return {merge_labels(labels.voxels, merge), labels.spacing};
}

template <typename T>
ProbVolume<T> sagittal_expand_probs(const ProbVolume<T>& p_merged, const LabelMerge& merge) {
  if (p_merged.rank() != 4 || p_merged.dim(3) != merge.merged_classes) {
    throw ShapeError("sagittal_expand_probs: expected [D,H,W," + std::to_string(merge.merged_classes) + "], got " +
                     to_string(p_merged.shape()));
  }
  const Index N = merge.source_classes(), M = merge.merged_classes;
  const Index voxels = p_merged.size() / M;
  ProbVolume<T> out({p_merged.dim(0), p_merged.dim(1), p_merged.dim(2), N});
  for (Index v = 0; v < voxels; ++v) {
    for (Index c = 0; c < N; ++c) out[v * N + c] = p_merged[v * M + merge.to_merged[static_cast<std::size_t>(c)]];
  }
  return out;
}

void AggregationWeights::validate() const {
  if (!(axial >= 0.0) || !(coronal >= 0.0) || !(sagittal >= 0.0)) {
    throw std::invalid_argument("aggregation weights must be non-negative");
  }
}

template <typename T>
LabelVolume argmax_labels(const ProbVolume<T>& probs, std::array<double, 3> spacing) {
  if (probs.rank() != 4) throw ShapeError("argmax_labels expects [D,H,W,N], got " + to_string(probs.shape()));
  const Index N = probs.dim(3);
  LabelVolume out({probs.dim(0), probs.dim(1), probs.dim(2)}, 0, spacing);
  for (Index v = 0; v < out.size(); ++v) {
    const T* p = probs.data() + v * N;
    out.voxels[v] = static_cast<std::int32_t>(std::max_element(p, p + N) - p);
  }
  return out;
}

template <typename T>
LabelVolume aggregate(const ProbVolume<T>* p_axial, const ProbVolume<T>* p_coronal, const ProbVolume<T>* p_sagittal,
                      const AggregationWeights& weights) {
  weights.validate();
  const std::array<std::pair<const ProbVolume<T>*, double>, 3> terms{
      {{p_axial, weights.axial}, {p_coronal, weights.coronal}, {p_sagittal, weights.sagittal}}};
  const ProbVolume<T>* first = nullptr;
  for (const auto& [p, w] : terms) {
    if (p == nullptr) continue;
    if (p->rank() != 4) throw ShapeError("aggregate expects [D,H,W,N] probabilities, got " + to_string(p->shape()));
    if (first == nullptr) first = p;
    if (p->shape() != first->shape()) {
      throw ShapeError("aggregate: probability volumes " + to_string(first->shape()) + " and " +
                       to_string(p->shape()) + " differ");
    }
  }
  if (first == nullptr) throw std::invalid_argument("aggregate needs at least one view");
  const Index N = first->dim(3);
  LabelVolume out({first->dim(0), first->dim(1), first->dim(2)});
  std::vector<double> score(static_cast<std::size_t>(N));
  for (Index v = 0; v < out.size(); ++v) {
    std::fill(score.begin(), score.end(), 0.0);
    for (const auto& [p, w] : terms) {
      if (p == nullptr) continue;
      const T* pv = p->data() + v * N;
      for (Index c = 0; c < N; ++c) score[static_cast<std::size_t>(c)] += w * static_cast<double>(pv[c]);
    }
    out.voxels[v] = static_cast<std::int32_t>(std::max_element(score.begin(), score.end()) - score.begin());
  }
  return out;
}

template <typename T>
ProbVolume<T> predict_view(ViewNetwork<T>& net, const IntensityVolume& volume, Index batch_size) {
  const View view = net.view();
  const Tensor<float> stack = slice_volume(volume.voxels, view);
  const Index S = stack.dim(0), R = stack.dim(1), C = stack.dim(2), N = net.num_classes();
  const Padding pad = padding_for(R, C);
  const Tensor<T> padded = pad_slices(stack.template cast<T>().reshaped({S, 1, R, C}), pad);
  const Index Rp = padded.dim(2), Cp = padded.dim(3);
  const auto [D, H, W] = volume.dims();
  ProbVolume<T> out({D, H, W, N});
  const Mode saved = net.mode();
  net.set_mode(Mode::eval);
  for (Index start = 0; start < S; start += batch_size) {
    const Index b = std::min(batch_size, S - start);
    Tensor<T> batch({b, 1, Rp, Cp});
    std::copy_n(padded.data() + start * Rp * Cp, b * Rp * Cp, batch.data());
    const Tensor<T> probs = crop_slices(net.predict(batch), pad);
    for (Index i = 0; i < b; ++i) {
      const Index s = start + i;
      for (Index r = 0; r < R; ++r) {
        for (Index c = 0; c < C; ++c) {
          Index d = 0, h = 0, w = 0;
          switch (slice_axis(view)) {
            case 0: d = s, h = r, w = c; break;
            case 1: h = s, d = r, w = c; break;
            default: w = s, d = r, h = c; break;
          }
          T* dst = out.data() + ((d * H + h) * W + w) * N;
          for (Index k = 0; k < N; ++k) dst[k] = probs[((i * N + k) * R + r) * C + c];
        }
      }
    }
  }
  net.set_mode(saved);
  return out;
}

template <typename T>
LabelVolume segment_volume(ViewEnsemble<T>& nets, const IntensityVolume& volume, const AggregationWeights& weights) {
  const auto start = std::chrono::steady_clock::now();
  std::optional<ProbVolume<T>> pc, pa, ps;
  if (nets.coronal) pc = predict_view(*nets.coronal, volume);
  if (nets.axial) pa = predict_view(*nets.axial, volume);
  if (nets.sagittal) {
    const ProbVolume<T> merged = predict_view(*nets.sagittal, volume);
    ps = merged.dim(3) == nets.sagittal_merge.merged_classes && merged.dim(3) != nets.sagittal_merge.source_classes()
             ? sagittal_expand_probs(merged, nets.sagittal_merge)
             : merged;
  }
  LabelVolume out = aggregate<T>(pa ? &*pa : nullptr, pc ? &*pc : nullptr, ps ? &*ps : nullptr, weights);
  out.spacing = volume.spacing;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ostringstream msg;
  msg << "segment_volume: " << volume.dims()[0] << 'x' << volume.dims()[1] << 'x' << volume.dims()[2] << " in "
      << secs << " s";
  log_info(msg.str());
  return out;
}

#define QUICKNAT_INSTANTIATE_SLICING(T)                                 \
  template Tensor<T> slice_volume<T>(const Tensor<T>&, View);           \
  template Tensor<T> stack_slices<T>(const Tensor<T>&, View);           \
  template Tensor<T> pad_slices<T>(const Tensor<T>&, const Padding&);   \
  template Tensor<T> crop_slices<T>(const Tensor<T>&, const Padding&);

QUICKNAT_INSTANTIATE_SLICING(float)
QUICKNAT_INSTANTIATE_SLICING(double)
QUICKNAT_INSTANTIATE_SLICING(std::int32_t)

#define QUICKNAT_INSTANTIATE_VIEWS(T)                                                                           \
  template ProbVolume<T> sagittal_expand_probs<T>(const ProbVolume<T>&, const LabelMerge&);                     \
  template LabelVolume argmax_labels<T>(const ProbVolume<T>&, std::array<double, 3>);                          \
  template LabelVolume aggregate<T>(const ProbVolume<T>*, const ProbVolume<T>*, const ProbVolume<T>*,          \
                                    const AggregationWeights&);                                                 \
  template ProbVolume<T> predict_view<T>(ViewNetwork<T>&, const IntensityVolume&, Index);                       \
  template LabelVolume segment_volume<T>(ViewEnsemble<T>&, const IntensityVolume&, const AggregationWeights&);

QUICKNAT_INSTANTIATE_VIEWS(float)
QUICKNAT_INSTANTIATE_VIEWS(double)

}  // namespace quicknat
