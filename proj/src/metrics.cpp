#include "quicknat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <iomanip>
#include <set>
#include <sstream>

#include <Eigen/LU>
#include <Eigen/QR>
#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "quicknat/fileio.hpp"
#include "quicknat/log.hpp"

namespace quicknat {

double dice_score(const LabelTensor& a, const LabelTensor& b, std::int32_t label) {
  if (a.shape() != b.shape()) {
    throw ShapeError("dice_score: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  std::int64_t na = 0, nb = 0, both = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const bool x = a[i] == label, y = b[i] == label;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dice_score(const LabelVolume& a, const LabelVolume& b, std::int32_t label) {
  return dice_score(a.voxels, b.voxels, label);
}

double volume_of(const LabelVolume& v, std::int32_t label) {
  const auto n = std::count(v.voxels.values().begin(), v.voxels.values().end(), label);
  return static_cast<double>(n) * v.voxel_volume_mm3() / 1000.0;
}

double volume_distance(double va, double ve) {
  if (va < 0.0 || ve < 0.0) throw std::invalid_argument("volume_distance: volumes must be non-negative");
  if (va + ve == 0.0) {
    log_warning("volume_distance: both volumes are zero; distance defined as 0");
    return 0.0;
  }
  return 2.0 * std::abs(va - ve) / (va + ve);
}

double coefficient_of_variation(std::span<const double> values) {
  if (values.size() < 2) throw std::invalid_argument("coefficient of variation needs at least 2 values");
  const double n = static_cast<double>(values.size());
  const double mu = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (!(mu > 0.0)) throw DataError("coefficient of variation needs a positive mean");
  double ss = 0.0;
  for (double v : values) ss += (v - mu) * (v - mu);
  return std::sqrt(ss / n) / mu;
}

double cv_total(std::span<const double> volumes) { return coefficient_of_variation(volumes); }

double cv_intra_session(std::span<const std::pair<double, double>> sessions) {
  if (sessions.empty()) throw std::invalid_argument("cv_intra_session needs at least one session");
  double sum_sq = 0.0;
  for (const auto& [a, b] : sessions) {
    const double pair[2] = {a, b};
    const double cv = coefficient_of_variation(pair);
    sum_sq += cv * cv;
  }
  return std::sqrt(sum_sq / static_cast<double>(sessions.size()));
}

namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // sample variance
  std::size_t n = 0;
};

Moments moments(std::span<const double> x, const char* what) {
  if (x.size() < 2) throw std::invalid_argument(std::string(what) + " needs at least 2 values");
  Moments m;
  m.n = x.size();
  m.mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(m.n);
  for (double v : x) m.var += (v - m.mean) * (v - m.mean);
  m.var /= static_cast<double>(m.n - 1);
  return m;
}

constexpr double kZ95 = 1.959963984540054;

EffectSize with_ci(double value, double se) { return {value, value - kZ95 * se, value + kZ95 * se, se}; }

double normal_upper_tail(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

double hedges_correction(std::size_t n1, std::size_t n2) {
  return 1.0 - 3.0 / (4.0 * static_cast<double>(n1 + n2) - 9.0);
}

EffectSize hedges_g(std::span<const double> group1, std::span<const double> group2) {
  const Moments a = moments(group1, "hedges_g"), b = moments(group2, "hedges_g");
  const double n1 = static_cast<double>(a.n), n2 = static_cast<double>(b.n);
  const double pooled = std::sqrt(((n1 - 1.0) * a.var + (n2 - 1.0) * b.var) / (n1 + n2 - 2.0));
  if (!(pooled > 0.0)) throw DataError("hedges_g: pooled standard deviation is zero");
  const double g = hedges_correction(a.n, b.n) * (a.mean - b.mean) / pooled;
  const double se = std::sqrt((n1 + n2) / (n1 * n2) + g * g / (2.0 * (n1 + n2)));
  return with_ci(g, se);
}

EffectSize glass_delta(std::span<const double> group1, std::span<const double> control) {
  const Moments a = moments(group1, "glass_delta"), c = moments(control, "glass_delta");
  const double sd = std::sqrt(c.var);
  if (!(sd > 0.0)) throw DataError("glass_delta: control standard deviation is zero");
  const double delta = (a.mean - c.mean) / sd;
  const double n1 = static_cast<double>(a.n), nc = static_cast<double>(c.n);
  const double se = std::sqrt((n1 + nc) / (n1 * nc) + delta * delta / (2.0 * (nc - 1.0)));
  return with_ci(delta, se);
}

RankSumResult wilcoxon_ranksum(std::span<const double> x, std::span<const double> y) {
  if (x.size() < 2 || y.size() < 2) throw std::invalid_argument("wilcoxon_ranksum needs at least 2 values per sample");
  const std::size_t n1 = x.size(), n2 = y.size(), N = n1 + n2;
  std::vector<std::pair<double, int>> pooled;
  for (double v : x) pooled.emplace_back(v, 0);
  for (double v : y) pooled.emplace_back(v, 1);
  for (const auto& [v, g] : pooled) {
    if (!std::isfinite(v)) throw DataError("wilcoxon_ranksum: non-finite observation");
  }
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pooled[a].first < pooled[b].first; });
  // Doubled midranks keep tied ranks integral.
  std::vector<std::int64_t> rank2(N);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < N;) {
    std::size_t j = i;
    while (j < N && pooled[order[j]].first == pooled[order[i]].first) ++j;
    const std::int64_t r2 = static_cast<std::int64_t>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) rank2[order[k]] = r2;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  std::int64_t w2 = 0;
  for (std::size_t i = 0; i < n1; ++i) w2 += rank2[i];
  RankSumResult out;
  out.statistic = static_cast<double>(w2) / 2.0;
  if (tie_term == static_cast<double>(N) * N * N - static_cast<double>(N)) return out;  // all values tied

  if (std::min(n1, n2) < 10) {
    // dp[k][s]: number of k-subsets with doubled rank sum s.
    const std::int64_t total2 = std::accumulate(rank2.begin(), rank2.end(), std::int64_t{0});
    std::vector<std::vector<double>> dp(n1 + 1, std::vector<double>(static_cast<std::size_t>(total2) + 1, 0.0));
    dp[0][0] = 1.0;
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t r = static_cast<std::size_t>(rank2[i]);
      for (std::size_t k = std::min(i + 1, n1); k >= 1; --k) {
        const auto& prev = dp[k - 1];
        auto& cur = dp[k];
        for (std::size_t s = cur.size(); s-- > r;) cur[s] += prev[s - r];
      }
    }
    const auto& dist = dp[n1];
    const double count = std::accumulate(dist.begin(), dist.end(), 0.0);
    double lower = 0.0, upper = 0.0;
    for (std::size_t s = 0; s < dist.size(); ++s) {
      if (static_cast<std::int64_t>(s) <= w2) lower += dist[s];
      if (static_cast<std::int64_t>(s) >= w2) upper += dist[s];
    }
    out.exact = true;
    out.p = std::min(1.0, 2.0 * std::min(lower, upper) / count);
    return out;
  }
  const double dn1 = static_cast<double>(n1), dn2 = static_cast<double>(n2), dN = static_cast<double>(N);
  const double mean = dn1 * (dN + 1.0) / 2.0;
  const double var = dn1 * dn2 / 12.0 * ((dN + 1.0) - tie_term / (dN * (dN - 1.0)));
  const double z = std::max(0.0, std::abs(out.statistic - mean) - 0.5) / std::sqrt(var);
  out.p = std::min(1.0, 2.0 * normal_upper_tail(z));
  return out;
}

OlsFit ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const std::vector<std::string>& column_names) {
  const Index n = X.rows(), k = X.cols();
  if (y.size() != n) throw ShapeError("ols: design has " + std::to_string(n) + " rows but response has " + std::to_string(y.size()));
  if (static_cast<Index>(column_names.size()) != k) throw std::invalid_argument("ols: one name per column required");
  if (n <= k) throw DataError("ols: need more rows (" + std::to_string(n) + ") than coefficients (" + std::to_string(k) + ")");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < k) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(X);
    lu.setThreshold(1e-10);
    const Eigen::MatrixXd kernel = lu.kernel();
    std::set<std::string> involved;
    for (Index c = 0; c < kernel.cols(); ++c) {
      for (Index r = 0; r < k; ++r) {
        if (std::abs(kernel(r, c)) > 1e-8) involved.insert(column_names[static_cast<std::size_t>(r)]);
      }
    }
    std::string list;
    for (const auto& name : involved) list += (list.empty() ? "" : ", ") + name;
    throw DataError("ols: design matrix is rank deficient; collinear columns: " + list);
  }
  OlsFit fit;
  fit.coefficients = qr.solve(y);
  fit.dof = n - k;
  const Eigen::VectorXd resid = y - X * fit.coefficients;
  fit.residual_variance = resid.squaredNorm() / static_cast<double>(fit.dof);
  const Eigen::MatrixXd cov = (X.transpose() * X).inverse() * fit.residual_variance;
  fit.standard_errors = cov.diagonal().cwiseSqrt();
  fit.t.resize(k);
  fit.p.resize(k);
  const boost::math::students_t dist(static_cast<double>(fit.dof));
  for (Index j = 0; j < k; ++j) {
    const double se = fit.standard_errors(j);
    fit.t(j) = se > 0.0 ? fit.coefficients(j) / se : (fit.coefficients(j) == 0.0 ? 0.0 : INFINITY);
    fit.p(j) = std::isfinite(fit.t(j)) ? 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(fit.t(j)))) : 0.0;
  }
  return fit;
}

namespace {

Eigen::VectorXd standardize(std::span<const double> v, const std::string& name) {
  const Moments m = moments(v, "linear_model");
  if (!(m.var > 0.0)) throw DataError("linear_model: column '" + name + "' is constant (collinear with the intercept)");
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Index>(i)) = (v[i] - m.mean) / std::sqrt(m.var);
  return out;
}

}  // namespace

LinearModelResult linear_model(std::span<const double> volume, std::span<const double> age,
                               std::span<const double> sex, std::span<const double> diagnosis) {
  const std::size_t n = volume.size();
  if (age.size() != n || sex.size() != n || diagnosis.size() != n) {
    throw ShapeError("linear_model: all columns must have the same length");
  }
  if (n <= 4) throw DataError("linear_model: need more than 4 subjects");
  Eigen::MatrixXd X(static_cast<Index>(n), 4);
  X.col(0).setOnes();
  X.col(1) = standardize(age, "age");
  X.col(2) = standardize(sex, "sex");
  X.col(3) = standardize(diagnosis, "diagnosis");
  const Eigen::VectorXd y = standardize(volume, "volume");
  LinearModelResult out;
  out.fit = ols(X, y, {"intercept", "age", "sex", "diagnosis"});
  out.diagnosis_coefficient = out.fit.coefficients(3);
  out.diagnosis_p = out.fit.p(3);
  return out;
}

double icc(std::span<const double> rater1, std::span<const double> rater2) {
  if (rater1.size() != rater2.size()) throw ShapeError("icc: raters must score the same subjects");
  const std::size_t n = rater1.size();
  if (n < 3) throw std::invalid_argument("icc needs at least 3 subjects");
  constexpr double k = 2.0;
  const double dn = static_cast<double>(n);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i) grand += rater1[i] + rater2[i];
  grand /= dn * k;
  double ss_rows = 0.0, ss_total = 0.0;
  double col1 = 0.0, col2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double row = (rater1[i] + rater2[i]) / k;
    ss_rows += k * (row - grand) * (row - grand);
    ss_total += (rater1[i] - grand) * (rater1[i] - grand) + (rater2[i] - grand) * (rater2[i] - grand);
    col1 += rater1[i];
    col2 += rater2[i];
  }
  if (!(ss_total > 0.0)) throw DataError("icc: total variance is zero");
  col1 /= dn;
  col2 /= dn;
  const double ss_cols = dn * ((col1 - grand) * (col1 - grand) + (col2 - grand) * (col2 - grand));
  const double ss_err = std::max(0.0, ss_total - ss_rows - ss_cols);
  const double msr = ss_rows / (dn - 1.0);
  const double msc = ss_cols / (k - 1.0);
  const double mse = ss_err / ((dn - 1.0) * (k - 1.0));
  return (msr - mse) / (msr + (k - 1.0) * mse + k / dn * (msc - mse));
}

std::vector<StructureRow> compare_segmentations(const std::string& subject, const LabelVolume& predicted,
                                                const LabelVolume& reference,
                                                const std::map<std::int32_t, std::string>& names) {
  if (predicted.voxels.shape() != reference.voxels.shape()) {
    throw ShapeError("compare_segmentations: volumes " + to_string(predicted.voxels.shape()) + " and " +
                     to_string(reference.voxels.shape()) + " differ");
  }
  std::set<std::int32_t> labels(predicted.voxels.values().begin(), predicted.voxels.values().end());
  labels.insert(reference.voxels.values().begin(), reference.voxels.values().end());
  std::vector<StructureRow> rows;
  for (std::int32_t l : labels) {
    if (l == 0) continue;
    StructureRow r;
    r.subject = subject;
    r.label = l;
    const auto it = names.find(l);
    r.structure = it != names.end() ? it->second : "label_" + std::to_string(l);
    r.dice = dice_score(predicted, reference, l);
    r.volume_ml = volume_of(predicted, l);
    r.reference_volume_ml = volume_of(reference, l);
    r.volume_distance = volume_distance(r.volume_ml, r.reference_volume_ml);
    rows.push_back(std::move(r));
  }
  return rows;
}

double mean_foreground_dice(const LabelVolume& predicted, const LabelVolume& reference, Index classes) {
  if (classes < 2) throw std::invalid_argument("mean_foreground_dice needs at least one foreground class");
  double sum = 0.0;
  for (Index c = 1; c < classes; ++c) sum += dice_score(predicted, reference, static_cast<std::int32_t>(c));
  return sum / static_cast<double>(classes - 1);
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "subject,label,structure,dice,volume_ml,reference_volume_ml,volume_distance\n";
  for (const StructureRow& r : rows) {
    os << csv_field(r.subject) << ',' << r.label << ',' << csv_field(r.structure) << ',' << r.dice << ','
       << r.volume_ml << ',' << r.reference_volume_ml << ',' << r.volume_distance << '\n';
  }
  return os.str();
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["structures"] = rows.size();
  j["mean_dice"] = rows.empty() ? 0.0 : mean_dice();
  j["subjects"] = nlohmann::json::array();
  for (const SubjectInfo& s : subjects) {
    j["subjects"].push_back({{"subject", s.subject}, {"age", s.age}, {"sex", s.sex}, {"diagnosis", s.diagnosis}});
  }
  j["statistics"] = nlohmann::json::array();
  for (const GroupStatistic& s : statistics) {
    nlohmann::json e{{"name", s.name}, {"value", s.value}};
    if (s.ci_low) e["ci_low"] = *s.ci_low;
    if (s.ci_high) e["ci_high"] = *s.ci_high;
    if (s.p) e["p"] = *s.p;
    j["statistics"].push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
  const std::string text = to_csv();
  atomic_write(path, [&](std::ostream& os) { os << text; });
}

void MetricsReport::write_json(const std::filesystem::path& path) const {
  const std::string text = to_json();
  atomic_write(path, [&](std::ostream& os) { os << text; });
}

double MetricsReport::mean_dice() const {
  if (rows.empty()) throw DataError("metrics report has no rows");
  double s = 0.0;
  for (const StructureRow& r : rows) s += r.dice;
  return s / static_cast<double>(rows.size());
}

}  // namespace quicknat
