#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quicknat/gradcheck.hpp"

namespace quicknat {

/// Relative-error bound for ops that are linear in their inputs.
inline constexpr double kLinearGradTolerance = 1e-5;
/// Relative-error bound for everything else.
inline constexpr double kGradTolerance = 1e-4;

struct GradSuiteEntry {
  std::string name;
  GradCheckReport report;
};

/// Finite-difference checks at 64-bit over every tensor op, one dense block,
/// the full miniature network (16x16, 3 classes) and the composite loss.
/// Inputs are drawn from `seed`; each entry carries its own tolerance.
std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed);

bool all_passed(const std::vector<GradSuiteEntry>& suite);

}  // namespace quicknat
