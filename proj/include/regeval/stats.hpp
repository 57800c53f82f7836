#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace regeval::stats {

struct Summary {
  double mean = 0.0;
  double median = 0.0;
  double std = 0.0;  ///< sample std (n - 1); 0 when n == 1
  std::size_t n = 0;
  bool single_sample = false;
};

Summary summary(std::span<const double> scores);

/// Quantile by linear interpolation between closest ranks:
/// h = (n - 1) q, x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h]).
double quantile(std::span<const double> scores, double q);

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double incomplete_beta(double a, double b, double x);
/// Student-t cumulative distribution with `dof` degrees of freedom.
double student_t_cdf(double t, double dof);

struct TTest {
  double t_statistic = 0.0;
  double p_value = 1.0;  ///< two-sided
  double dof = 0.0;
  bool degenerate = false;  ///< zero-variance differences
};

/// Paired t-test on d = a - b.
TTest paired_t_test(std::span<const double> a, std::span<const double> b);

enum class CohensVariant { Pooled, Paired };
const char* to_string(CohensVariant v);
CohensVariant parse_cohens_variant(const std::string& s);

struct EffectSize {
  double d = 0.0;
  bool degenerate = false;
};

/// Pooled: (mean a - mean b) / s_pooled. Paired: mean(d) / std(d).
/// Zero variance with equal means gives d = 0 (degenerate); with unequal means
/// the effect is unbounded and std::domain_error is thrown.
EffectSize cohens_d(std::span<const double> a, std::span<const double> b, CohensVariant variant = CohensVariant::Pooled);

struct EffectSizeReport {
  std::string method_a, method_b;
  std::size_t n = 0;
  double mean_a = 0, mean_b = 0, median_a = 0, median_b = 0, std_a = 0, std_b = 0;
  double t_statistic = 0, p_value = 1, cohens_d = 0;
  CohensVariant variant = CohensVariant::Pooled;
  bool practical = false;    ///< |d| > 0.2
  bool significant = false;  ///< p < 0.05
  bool degenerate = false;
};

inline constexpr double kPracticalThreshold = 0.2;
inline constexpr double kSignificanceLevel = 0.05;

/// Paired comparison of two methods' scores (same pair order in both).
EffectSizeReport compare(const std::string& method_a, std::span<const double> a, const std::string& method_b,
                         std::span<const double> b, CohensVariant variant = CohensVariant::Pooled);

struct ViolinData {
  std::string method;
  double bandwidth = 0.0;
  std::vector<double> kde_support;
  std::vector<double> kde_density;
  double q1 = 0, median = 0, q3 = 0;
};

inline constexpr int kKdePoints = 256;

/// Silverman's rule of thumb: 0.9 min(sd, IQR/1.34) n^(-1/5).
double silverman_bandwidth(std::span<const double> scores);

/// Gaussian KDE on 256 points over [min - 3h, max + 3h], renormalized so the
/// trapezoid integral over the support is 1.
ViolinData violin(std::span<const double> scores, std::optional<double> bandwidth = std::nullopt,
                  std::string method = "");

}  // namespace regeval::stats
