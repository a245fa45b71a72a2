#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "quicknat/multiview.hpp"

namespace quicknat {

/// 2|A∩B| / (|A|+|B|) for the masks of `label`; 1 when both are empty.
double dice_score(const LabelVolume& a, const LabelVolume& b, std::int32_t label);
double dice_score(const LabelTensor& a, const LabelTensor& b, std::int32_t label);

/// Voxel count of `label` times the voxel volume, in millilitres.
double volume_of(const LabelVolume& v, std::int32_t label);

/// 2|Va - Ve| / (Va + Ve); 0 (with a warning) when both volumes are 0.
double volume_distance(double va, double ve);

/// Coefficient of variation sigma/mu with the population SD.
double coefficient_of_variation(std::span<const double> values);
/// CV over one series of repeated measurements.
double cv_total(std::span<const double> volumes);
/// Root mean square of per-session CVs, each over that session's two scans.
double cv_intra_session(std::span<const std::pair<double, double>> sessions);

struct EffectSize {
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double standard_error = 0.0;
};

/// Small-sample correction J = 1 - 3 / (4(n1+n2) - 9).
double hedges_correction(std::size_t n1, std::size_t n2);
/// J * (mean1 - mean2) / pooled sample SD, with a 95% normal-approximation CI.
EffectSize hedges_g(std::span<const double> group1, std::span<const double> group2);
/// (mean1 - mean_control) / control sample SD, with a 95% normal-approximation CI.
EffectSize glass_delta(std::span<const double> group1, std::span<const double> control);

struct RankSumResult {
  double statistic = 0.0;  ///< rank sum of the first sample (midranks)
  double p = 1.0;          ///< two-sided
  bool exact = false;
};

/// Two-sided Wilcoxon rank-sum test. Exact permutation distribution when the
/// smaller sample has fewer than 10 values, else the normal approximation with
/// continuity and tie corrections.
RankSumResult wilcoxon_ranksum(std::span<const double> x, std::span<const double> y);

struct OlsFit {
  Eigen::VectorXd coefficients;
  Eigen::VectorXd standard_errors;
  Eigen::VectorXd t;
  Eigen::VectorXd p;
  double residual_variance = 0.0;
  Index dof = 0;
};

/// Ordinary least squares on a full design matrix (intercept included by the
/// caller). Throws DataError naming collinear columns when X is rank deficient.
OlsFit ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const std::vector<std::string>& column_names);

struct LinearModelResult {
  double diagnosis_coefficient = 0.0;  ///< standardized
  double diagnosis_p = 1.0;
  OlsFit fit;  ///< columns: intercept, age, sex, diagnosis
};

/// volume ~ age + sex + diagnosis with every variable standardized to zero
/// mean and unit sample variance before fitting.
LinearModelResult linear_model(std::span<const double> volume, std::span<const double> age,
                               std::span<const double> sex, std::span<const double> diagnosis);

/// Two-way, single-measure, absolute-agreement intraclass correlation for two raters.
double icc(std::span<const double> rater1, std::span<const double> rater2);

struct StructureRow {
  std::string subject;
  std::int32_t label = 0;
  std::string structure;
  double dice = 0.0;
  double volume_ml = 0.0;
  double reference_volume_ml = 0.0;
  double volume_distance = 0.0;
};

struct SubjectInfo {
  std::string subject;
  double age = 0.0;
  std::string sex;
  std::string diagnosis;
};

struct GroupStatistic {
  std::string name;
  double value = 0.0;
  std::optional<double> ci_low, ci_high, p;
};

/// Evaluation output: one CSV row per subject x structure and a JSON summary.
struct MetricsReport {
  std::vector<StructureRow> rows;
  std::vector<SubjectInfo> subjects;
  std::vector<GroupStatistic> statistics;

  std::string to_csv() const;
  std::string to_json() const;
  void write_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
  double mean_dice() const;
};

/// Rows for every non-background label present in either volume.
std::vector<StructureRow> compare_segmentations(const std::string& subject, const LabelVolume& predicted,
                                                const LabelVolume& reference,
                                                const std::map<std::int32_t, std::string>& names = {});

/// Mean Dice over labels 1..classes-1.
double mean_foreground_dice(const LabelVolume& predicted, const LabelVolume& reference, Index classes);

}  // namespace quicknat
