#include "quicknat/loss.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "quicknat/fileio.hpp"
#include "quicknat/log.hpp"

namespace quicknat {

double ClassFrequencies::median() const {
  std::vector<double> present;
  for (double v : f) {
    if (v > 0.0) present.push_back(v);
  }
  if (present.empty()) throw DataError("class frequencies are all zero");
  std::sort(present.begin(), present.end());
  const std::size_t n = present.size();
  return n % 2 == 1 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
}

double ClassFrequencies::min_present() const {
  double lo = 0.0;
  for (double v : f) {
    if (v > 0.0 && (lo == 0.0 || v < lo)) lo = v;
  }
  if (lo == 0.0) throw DataError("class frequencies are all zero");
  return lo;
}

ClassFrequencies class_frequencies(std::span<const LabelTensor> labels, Index num_classes) {
  if (labels.empty()) throw DataError("class_frequencies: no label data");
  ClassFrequencies out;
  out.counts.assign(static_cast<std::size_t>(num_classes), 0);
  std::int64_t total = 0;
  for (const LabelTensor& t : labels) {
    for (std::int32_t v : t.values()) {
      if (v < 0 || v >= num_classes) {
        throw DataError("class_frequencies: label " + std::to_string(v) + " outside [0," +
                        std::to_string(num_classes) + ")");
      }
      ++out.counts[static_cast<std::size_t>(v)];
    }
    total += t.size();
  }
  if (total == 0) throw DataError("class_frequencies: no label data");
  out.f.resize(out.counts.size());
  for (std::size_t l = 0; l < out.counts.size(); ++l) {
    out.f[l] = static_cast<double>(out.counts[l]) / static_cast<double>(total);
  }
  return out;
}

void write_frequencies(const ClassFrequencies& freq, const std::filesystem::path& path) {
  atomic_write(path, [&](std::ostream& os) {
    os << std::setprecision(17);
    for (std::size_t l = 0; l < freq.f.size(); ++l) os << l << ' ' << freq.f[l] << '\n';
  });
}

ClassFrequencies read_frequencies(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  ClassFrequencies out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Index label = -1;
    double value = 0.0;
    if (!(ls >> label >> value) || label != static_cast<Index>(out.f.size()) || value < 0.0) {
      throw DataError("malformed frequency table line '" + line + "' in " + path.string());
    }
    out.f.push_back(value);
  }
  if (out.f.empty()) throw DataError("empty frequency table " + path.string());
  // Counts are not stored; presence is all the table needs to convey.
  for (double v : out.f) out.counts.push_back(v > 0.0 ? 1 : 0);
  return out;
}

Tensor<std::uint8_t> boundary_mask(const LabelTensor& labels) {
  const Shape& s = labels.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("boundary_mask expects [H,W] or [B,H,W], got " + to_string(s));
  const Index h = s[s.size() - 2], w = s[s.size() - 1];
  const Index planes = s.size() == 3 ? s[0] : 1;
  Tensor<std::uint8_t> mask(s);
  for (Index p = 0; p < planes; ++p) {
    const std::int32_t* S = labels.data() + p * h * w;
    std::uint8_t* m = mask.data() + p * h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const std::int32_t v = S[y * w + x];
        const bool edge = (x + 1 < w && S[y * w + x + 1] != v) || (x > 0 && S[y * w + x - 1] != v) ||
                          (y + 1 < h && S[(y + 1) * w + x] != v) || (y > 0 && S[(y - 1) * w + x] != v);
        m[y * w + x] = edge ? 1 : 0;
      }
    }
  }
  return mask;
}

Tensor<double> weight_map(const LabelTensor& labels, const ClassFrequencies& freq) {
  const double med = freq.median();
  const double w0 = freq.boundary_weight();
  const Tensor<std::uint8_t> edges = boundary_mask(labels);
  Tensor<double> weights(labels.shape());
  for (Index i = 0; i < labels.size(); ++i) {
    const std::int32_t l = labels[i];
    if (l < 0 || l >= freq.num_classes()) {
      throw DataError("weight_map: label " + std::to_string(l) + " outside the frequency table");
    }
    const double fl = freq.f[static_cast<std::size_t>(l)];
    if (fl <= 0.0) {
      throw DataError("weight_map: label " + std::to_string(l) +
                      " occurs in the slice but has zero training frequency");
    }
    weights[i] = med / fl + (edges[i] ? w0 : 0.0);
  }
  return weights;
}

namespace {

struct LossGeometry {
  Index batch, classes, plane;
};

template <typename T>
LossGeometry check_loss_inputs(const Tensor<T>& probs, const LabelTensor& labels, const Tensor<T>& weights) {
  const Shape& s = probs.shape();
  if (s.size() != 4) throw ShapeError("loss expects probabilities [B,N,H,W], got " + to_string(s));
  const Shape want{s[0], s[2], s[3]};
  if (labels.shape() != want) {
    throw ShapeError("loss: labels " + to_string(labels.shape()) + " do not match " + to_string(want));
  }
  if (weights.shape() != want) {
    throw ShapeError("loss: weights " + to_string(weights.shape()) + " do not match " + to_string(want));
  }
  for (std::int32_t v : labels.values()) {
    if (v < 0 || v >= s[1]) throw DataError("loss: label " + std::to_string(v) + " outside [0," + std::to_string(s[1]) + ")");
  }
  return {s[0], s[1], s[2] * s[3]};
}

// Per-class soft Dice sums over the whole batch.
struct DiceSums {
  std::vector<double> intersection, prob_sq, truth;
};

template <typename T>
DiceSums dice_sums(const Tensor<T>& probs, const LabelTensor& labels, const LossGeometry& g) {
  DiceSums d{std::vector<double>(g.classes), std::vector<double>(g.classes), std::vector<double>(g.classes)};
  for (Index n = 0; n < g.batch; ++n) {
    for (Index c = 0; c < g.classes; ++c) {
      const T* p = probs.data() + (n * g.classes + c) * g.plane;
      const std::int32_t* lab = labels.data() + n * g.plane;
      double inter = 0.0, sq = 0.0, truth = 0.0;
      for (Index i = 0; i < g.plane; ++i) {
        sq += static_cast<double>(p[i]) * p[i];
        if (lab[i] == c) {
          inter += p[i];
          truth += 1.0;
        }
      }
      d.intersection[c] += inter;
      d.prob_sq[c] += sq;
      d.truth[c] += truth;
    }
  }
  return d;
}

}  // namespace

template <typename T>
LossParts evaluate_loss(const Tensor<T>& probs, const LabelTensor& labels, const Tensor<T>& weights) {
  const LossGeometry g = check_loss_inputs(probs, labels, weights);
  LossParts parts;
  double logistic = 0.0;
  for (Index n = 0; n < g.batch; ++n) {
    for (Index i = 0; i < g.plane; ++i) {
      const Index c = labels[n * g.plane + i];
      double p = probs[(n * g.classes + c) * g.plane + i];
      if (p < kProbabilityFloor) {
        p = kProbabilityFloor;
        ++parts.clamped;
      }
      logistic -= weights[n * g.plane + i] * std::log(p);
    }
  }
  parts.logistic = logistic / static_cast<double>(g.batch * g.plane);
  const DiceSums d = dice_sums(probs, labels, g);
  Index present = 0;
  double dice = 0.0;
  for (Index c = 0; c < g.classes; ++c) {
    if (d.truth[c] == 0.0) continue;
    dice += 2.0 * d.intersection[c] / (d.prob_sq[c] + d.truth[c]);
    ++present;
  }
  parts.dice = present > 0 ? dice / static_cast<double>(present) : 0.0;
  return parts;
}

template <typename T>
Var combined_loss(Tape<T>& tape, Var probs, const LabelTensor& labels, const Tensor<T>& weights) {
  const Tensor<T>& p = tape.value(probs);
  const LossParts parts = evaluate_loss(p, labels, weights);
  if (parts.clamped > 0) {
    log_warning("combined_loss: " + std::to_string(parts.clamped) + " true-class probabilities clamped to 1e-12");
  }
  const LossGeometry g = check_loss_inputs(p, labels, weights);
  auto lab = std::make_shared<const LabelTensor>(labels);
  auto wts = std::make_shared<const Tensor<T>>(weights);
  Tensor<T> out({1}, static_cast<T>(parts.total()));
  return tape.record(std::move(out), {probs}, [probs, lab, wts, g](Tape<T>& t, Var self) {
    const double upstream = t.grad_ref(self)[0];
    const Tensor<T>& pv = t.value(probs);
    Tensor<T>& gp = t.grad_buffer(probs);
    const double pixels = static_cast<double>(g.batch * g.plane);
    for (Index n = 0; n < g.batch; ++n) {
      for (Index i = 0; i < g.plane; ++i) {
        const Index c = (*lab)[n * g.plane + i];
        const Index k = (n * g.classes + c) * g.plane + i;
        const double pk = pv[k];
        if (pk >= kProbabilityFloor) gp[k] += static_cast<T>(-upstream * (*wts)[n * g.plane + i] / (pixels * pk));
      }
    }
    const DiceSums d = dice_sums(pv, *lab, g);
    Index present = 0;
    for (Index c = 0; c < g.classes; ++c) present += d.truth[c] > 0.0 ? 1 : 0;
    if (present == 0) return;
    for (Index c = 0; c < g.classes; ++c) {
      if (d.truth[c] == 0.0) continue;
      const double denom = d.prob_sq[c] + d.truth[c];
      const double a = 2.0 / denom;
      const double b = 4.0 * d.intersection[c] / (denom * denom);
      const double scale = -upstream / static_cast<double>(present);
      for (Index n = 0; n < g.batch; ++n) {
        const std::int32_t* lb = lab->data() + n * g.plane;
        const Index base = (n * g.classes + c) * g.plane;
        for (Index i = 0; i < g.plane; ++i) {
          const double truth = lb[i] == c ? 1.0 : 0.0;
          gp[base + i] += static_cast<T>(scale * (a * truth - b * pv[base + i]));
        }
      }
    }
  });
}

template LossParts evaluate_loss<float>(const Tensor<float>&, const LabelTensor&, const Tensor<float>&);
template LossParts evaluate_loss<double>(const Tensor<double>&, const LabelTensor&, const Tensor<double>&);
template Var combined_loss<float>(Tape<float>&, Var, const LabelTensor&, const Tensor<float>&);
template Var combined_loss<double>(Tape<double>&, Var, const LabelTensor&, const Tensor<double>&);

}  // namespace quicknat
