#include "regeval/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace regeval::stats {

namespace {

double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

double sample_var(std::span<const double> x, double mean) {
  if (x.size() < 2) return 0.0;
  double s = 0.0;
  for (double v : x) s += (v - mean) * (v - mean);
  return s / static_cast<double>(x.size() - 1);
}

std::vector<double> sorted_copy(std::span<const double> x) {
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  return s;
}

double quantile_sorted(const std::vector<double>& s, double q) {
  const double h = (static_cast<double>(s.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

// Modified Lentz evaluation of the incomplete-beta continued fraction.
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

Summary summary(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("summary: empty input");
  Summary s;
  s.n = scores.size();
  s.mean = mean_of(scores);
  s.median = quantile(scores, 0.5);
  s.single_sample = s.n == 1;
  s.std = std::sqrt(sample_var(scores, s.mean));
  return s;
}

double quantile(std::span<const double> scores, double q) {
  if (scores.empty()) throw std::invalid_argument("quantile: empty input");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile: q must lie in [0, 1]");
  return quantile_sorted(sorted_copy(scores), q);
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw std::invalid_argument("incomplete_beta: a, b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0)) throw std::invalid_argument("student_t_cdf: dof must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * incomplete_beta(dof / 2.0, 0.5, x);
  return t > 0 ? 1.0 - tail : tail;
}

TTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("paired_t_test: need at least 2 pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double md = mean_of(d);
  const double sd = std::sqrt(sample_var(d, md));
  TTest r;
  r.dof = static_cast<double>(n - 1);
  if (sd == 0.0) {
    r.degenerate = true;
    if (md == 0.0) {
      r.t_statistic = 0.0;
      r.p_value = 1.0;
    } else {
      r.t_statistic = md > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p_value = 0.0;
    }
    return r;
  }
  r.t_statistic = md / (sd / std::sqrt(static_cast<double>(n)));
  const double tail = 0.5 * incomplete_beta(r.dof / 2.0, 0.5, r.dof / (r.dof + r.t_statistic * r.t_statistic));
  r.p_value = std::min(1.0, 2.0 * tail);
  return r;
}

const char* to_string(CohensVariant v) { return v == CohensVariant::Pooled ? "pooled" : "paired"; }

CohensVariant parse_cohens_variant(const std::string& s) {
  if (s == "pooled") return CohensVariant::Pooled;
  if (s == "paired") return CohensVariant::Paired;
  throw std::invalid_argument("unknown Cohen's d variant '" + s + "'");
}

EffectSize cohens_d(std::span<const double> a, std::span<const double> b, CohensVariant variant) {
  EffectSize r;
  double num = 0.0, denom = 0.0;
  if (variant == CohensVariant::Paired) {
    if (a.size() != b.size()) throw std::invalid_argument("cohens_d (paired): length mismatch");
    if (a.size() < 2) throw std::invalid_argument("cohens_d (paired): need at least 2 pairs");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    num = mean_of(d);
    denom = std::sqrt(sample_var(d, num));
  } else {
    if (a.empty() || b.empty() || a.size() + b.size() < 3)
      throw std::invalid_argument("cohens_d (pooled): need n_a + n_b >= 3");
    const double ma = mean_of(a), mb = mean_of(b);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double pooled = ((na - 1) * sample_var(a, ma) + (nb - 1) * sample_var(b, mb)) / (na + nb - 2);
    num = ma - mb;
    denom = std::sqrt(pooled);
  }
  if (denom == 0.0) {
    r.degenerate = true;
    if (num != 0.0) throw std::domain_error("cohens_d: zero variance with unequal means");
    return r;
  }
  r.d = num / denom;
  return r;
}

EffectSizeReport compare(const std::string& method_a, std::span<const double> a, const std::string& method_b,
                         std::span<const double> b, CohensVariant variant) {
  if (a.size() != b.size()) throw std::invalid_argument("compare: paired samples must have equal length");
  EffectSizeReport r;
  r.method_a = method_a;
  r.method_b = method_b;
  r.n = a.size();
  r.variant = variant;
  const Summary sa = summary(a), sb = summary(b);
  r.mean_a = sa.mean;
  r.mean_b = sb.mean;
  r.median_a = sa.median;
  r.median_b = sb.median;
  r.std_a = sa.std;
  r.std_b = sb.std;
  if (r.n >= 2) {
    const TTest t = paired_t_test(a, b);
    r.t_statistic = t.t_statistic;
    r.p_value = t.p_value;
    r.degenerate = t.degenerate;
    try {
      const EffectSize e = cohens_d(a, b, variant);
      r.cohens_d = e.d;
      r.degenerate = r.degenerate || e.degenerate;
    } catch (const std::domain_error&) {
      r.cohens_d = std::numeric_limits<double>::quiet_NaN();
      r.degenerate = true;
    }
  }
  r.practical = std::abs(r.cohens_d) > kPracticalThreshold;
  r.significant = r.p_value < kSignificanceLevel;
  return r;
}

double silverman_bandwidth(std::span<const double> scores) {
  if (scores.size() < 2) throw std::invalid_argument("silverman_bandwidth: need n >= 2");
  const auto s = sorted_copy(scores);
  const double sd = std::sqrt(sample_var(s, mean_of(s)));
  const double iqr = quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (spread <= 0.0) spread = sd;
  if (spread <= 0.0) spread = 1e-3 * std::max(1.0, std::abs(s.front()));
  return 0.9 * spread * std::pow(static_cast<double>(s.size()), -0.2);
}

ViolinData violin(std::span<const double> scores, std::optional<double> bandwidth, std::string method) {
  if (scores.size() < 2) throw std::invalid_argument("violin: need n >= 2");
  ViolinData v;
  v.method = std::move(method);
  v.bandwidth = bandwidth ? *bandwidth : silverman_bandwidth(scores);
  if (!(v.bandwidth > 0.0)) throw std::invalid_argument("violin: bandwidth must be positive");
  const auto s = sorted_copy(scores);
  const double h = v.bandwidth;
  const double lo = s.front() - 3.0 * h, hi = s.back() + 3.0 * h;
  const double step = (hi - lo) / (kKdePoints - 1);
  const double norm = 1.0 / (static_cast<double>(s.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  v.kde_support.resize(kKdePoints);
  v.kde_density.resize(kKdePoints);
  for (int i = 0; i < kKdePoints; ++i) {
    const double x = lo + step * i;
    double acc = 0.0;
    for (double xi : s) {
      const double z = (x - xi) / h;
      acc += std::exp(-0.5 * z * z);
    }
    v.kde_support[i] = x;
    v.kde_density[i] = acc * norm;
  }
  double integral = 0.0;
  for (int i = 1; i < kKdePoints; ++i) integral += 0.5 * step * (v.kde_density[i] + v.kde_density[i - 1]);
  for (double& d : v.kde_density) d /= integral;
  v.q1 = quantile_sorted(s, 0.25);
  v.median = quantile_sorted(s, 0.5);
  v.q3 = quantile_sorted(s, 0.75);
  return v;
}

}  // namespace regeval::stats
