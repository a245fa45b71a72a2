#include "quicknat/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace quicknat {

bool Ellipsoid::contains(const std::array<double, 3>& u) const {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double t = (u[a] - center[a]) / radii[a];
    s += t * t;
  }
  return s <= 1.0;
}

double Ellipsoid::volume() const { return 4.0 / 3.0 * std::numbers::pi * radii[0] * radii[1] * radii[2]; }

namespace {

// Nominal layout on (D,H,W) = (posterior-anterior, superior-inferior, right-left).
const std::array<Ellipsoid, 5> kNominal{{
    {{0.0, 0.0, 0.0}, {0.86, 0.90, 0.88}, 1},
    {{0.0, 0.08, 0.0}, {0.45, 0.30, 0.24}, 2},
    {{0.0, -0.05, 0.52}, {0.20, 0.22, 0.18}, 3},
    {{0.0, -0.05, -0.52}, {0.20, 0.22, 0.18}, 4},
    {{0.0, -0.55, 0.0}, {0.25, 0.14, 0.20}, 5},
}};

constexpr double kCenterJitter = 0.04;
constexpr double kRadiusJitter = 0.08;
constexpr int kMaxGeometryDraws = 1000;
constexpr double kMinOccupancy = 0.002;

// Sufficient condition for `inner` to lie inside `outer`.
bool nested(const Ellipsoid& inner, const Ellipsoid& outer) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double t = (std::abs(inner.center[a] - outer.center[a]) + inner.radii[a]) / outer.radii[a];
    s += t * t;
  }
  return s <= 1.0;
}

// Sufficient condition: bounding intervals separate along some axis.
bool disjoint(const Ellipsoid& a, const Ellipsoid& b) {
  for (int k = 0; k < 3; ++k) {
    if (std::abs(a.center[k] - b.center[k]) > a.radii[k] + b.radii[k]) return true;
  }
  return false;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double unit_hash(std::uint64_t seed, std::uint64_t key, std::uint64_t stream) {
  const std::uint64_t h = splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ key);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace

std::vector<Ellipsoid> phantom_geometry(const PhantomSpec& spec) {
  if (spec.classes < 2 || spec.classes > kPhantomClasses) {
    throw DataError("phantom class count must be in [2," + std::to_string(kPhantomClasses) + "], got " +
                    std::to_string(spec.classes));
  }
  std::seed_seq seq{spec.seed, std::uint64_t{0x67656f6d}};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> shift(-kCenterJitter, kCenterJitter);
  std::uniform_real_distribution<double> scale(1.0 - kRadiusJitter, 1.0 + kRadiusJitter);
  for (int draw = 0; draw < kMaxGeometryDraws; ++draw) {
    std::vector<Ellipsoid> out;
    for (const Ellipsoid& e : kNominal) {
      if (e.label >= spec.classes) break;
      Ellipsoid j = e;
      if (e.label == 4 && out.size() == 3) {
        // Mirror image of structure 3 across the midsagittal plane.
        j = out[2];
        j.center[2] = -j.center[2];
        j.label = 4;
      } else {
        for (int a = 0; a < 3; ++a) {
          j.center[a] += shift(rng);
          j.radii[a] *= scale(rng);
        }
      }
      out.push_back(j);
    }
    bool valid = true;
    for (std::size_t i = 1; i < out.size() && valid; ++i) {
      valid = nested(out[i], out[0]);
      for (std::size_t k = 1; k < i && valid; ++k) valid = disjoint(out[i], out[k]);
    }
    if (valid) return out;
  }
  throw DataError("phantom geometry: no valid layout found for seed " + std::to_string(spec.seed));
}

Phantom generate_phantom(const PhantomSpec& spec) {
  if (spec.size < 4) throw DataError("phantom grid size must be at least 4");
  if (static_cast<Index>(spec.means.size()) < spec.classes) {
    throw DataError("phantom spec lists " + std::to_string(spec.means.size()) + " class means for " +
                    std::to_string(spec.classes) + " classes");
  }
  if (!(spec.noise_sd >= 0.0)) throw DataError("phantom noise SD must be non-negative");
  if (!(spec.gain_jitter >= 0.0 && spec.gain_jitter < 1.0) || !(spec.contrast_jitter >= 0.0 && spec.contrast_jitter < 1.0) || !(spec.bias_field >= 0.0 && spec.bias_field < 1.0 / 3.0)) {
    throw DataError("phantom gain and contrast jitter must lie in [0,1) and bias amplitude in [0,1/3)");
  }
  Phantom p;
  p.structures = phantom_geometry(spec);
  const Index n = spec.size;
  p.labels = LabelVolume({n, n, n});
  p.image = IntensityVolume({n, n, n});
  for (Index d = 0; d < n; ++d) {
    for (Index h = 0; h < n; ++h) {
      for (Index w = 0; w < n; ++w) {
        const std::array<double, 3> u{voxel_coordinate(d, n), voxel_coordinate(h, n), voxel_coordinate(w, n)};
        std::int32_t label = 0;
        for (const Ellipsoid& e : p.structures) {
          if (e.contains(u)) label = e.label;
        }
        p.labels.at(d, h, w) = label;
      }
    }
  }
  std::vector<Index> counts(static_cast<std::size_t>(spec.classes), 0);
  for (std::int32_t l : p.labels.voxels.values()) ++counts[static_cast<std::size_t>(l)];
  for (Index c = 0; c < spec.classes; ++c) {
    const double frac = static_cast<double>(counts[static_cast<std::size_t>(c)]) / static_cast<double>(n * n * n);
    if (frac < kMinOccupancy) {
      std::ostringstream msg;
      msg << "phantom class " << c << " covers " << 100.0 * frac << "% of a " << n
          << "^3 grid (minimum 0.2%); use a larger grid";
      throw DataError(msg.str());
    }
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double gain = 1.0 + spec.gain_jitter * unit(rng);
  std::array<double, 3> bias{};
  for (double& b : bias) b = spec.bias_field * unit(rng);
  std::vector<double> means(spec.means.begin(), spec.means.begin() + spec.classes);
  for (double& m : means) m *= gain * (1.0 + spec.contrast_jitter * unit(rng));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (Index d = 0; d < n; ++d) {
    for (Index h = 0; h < n; ++h) {
      for (Index w = 0; w < n; ++w) {
        const Index i = p.labels.index(d, h, w);
        const double field = 1.0 + bias[0] * voxel_coordinate(d, n) + bias[1] * voxel_coordinate(h, n) +
                             bias[2] * voxel_coordinate(w, n);
        const double mean = field * means[static_cast<std::size_t>(p.labels.voxels[i])];
        p.image.voxels[i] = static_cast<float>(mean + (spec.noise_sd > 0.0 ? spec.noise_sd * noise(rng) : 0.0));
      }
    }
  }
  return p;
}

LabelMerge phantom_sagittal_merge(Index classes) {
  std::vector<std::int32_t> t;
  for (Index c = 0; c < classes; ++c) t.push_back(static_cast<std::int32_t>(c <= 3 ? c : c - 1));
  if (classes < 5) return LabelMerge::identity(classes);
  return LabelMerge::from_table(std::move(t));
}

LabelVolume corrupt_labels(const LabelVolume& labels, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 0.5)) throw std::invalid_argument("corruption rate must lie in [0, 0.5]");
  LabelVolume out = labels;
  if (rate == 0.0) return out;
  const auto [D, H, W] = labels.dims();
  // Per-structure bias: true = dilate (grow into neighbours), false = erode.
  auto dilates = [seed](std::int32_t l) { return l > 0 && unit_hash(seed, static_cast<std::uint64_t>(l), 1) < 0.5; };
  auto erodes = [seed](std::int32_t l) { return l > 0 && unit_hash(seed, static_cast<std::uint64_t>(l), 1) >= 0.5; };
  std::vector<std::int32_t> neighbours, preferred;
  for (Index d = 0; d < D; ++d) {
    for (Index h = 0; h < H; ++h) {
      for (Index w = 0; w < W; ++w) {
        const Index v = labels.index(d, h, w);
        if (unit_hash(seed, static_cast<std::uint64_t>(v), 2) >= rate) continue;
        const std::int32_t a = labels.voxels[v];
        neighbours.clear();
        const auto consider = [&](Index dd, Index hh, Index ww) {
          if (dd < 0 || hh < 0 || ww < 0 || dd >= D || hh >= H || ww >= W) return;
          const std::int32_t b = labels.at(dd, hh, ww);
          if (b != a && std::find(neighbours.begin(), neighbours.end(), b) == neighbours.end()) neighbours.push_back(b);
        };
        consider(d - 1, h, w);
        consider(d + 1, h, w);
        consider(d, h - 1, w);
        consider(d, h + 1, w);
        consider(d, h, w - 1);
        consider(d, h, w + 1);
        if (neighbours.empty()) continue;
        std::sort(neighbours.begin(), neighbours.end());
        preferred.clear();
        for (std::int32_t b : neighbours) {
          if (erodes(a) || dilates(b)) preferred.push_back(b);
        }
        const auto& pool = preferred.empty() ? neighbours : preferred;
        const double pick = unit_hash(seed, static_cast<std::uint64_t>(v), 3);
        out.voxels[v] = pool[static_cast<std::size_t>(pick * static_cast<double>(pool.size()))];
      }
    }
  }
  return out;
}

}  // namespace quicknat
