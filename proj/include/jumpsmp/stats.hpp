#pragma once

#include <cmath>
#include <span>

namespace jumpsmp {

struct MeanEstimate {
  double mean = 0.0;
  double se = 0.0;
};

/// Sample mean and its standard error (n - 1 denominator).
inline MeanEstimate estimate_mean(std::span<const double> values) {
  const auto n = static_cast<double>(values.size());
  if (values.empty()) return {};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

}  // namespace jumpsmp
