#include "regeval/metrics.hpp"
#include "regeval/orientation.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <numeric>
#include <set>

using namespace regeval;
using regeval::testing::random_labels;

TEST_CASE("dice of a volume with itself is 1 for every label") {
  std::mt19937_64 rng(21);
  const LabelVolume a = random_labels(GridSpec::axis_aligned({6, 6, 6}, Vec3::Ones()), rng, 3);
  const DiceRecord r = dice(a, a);
  CHECK(r.per_label.size() == 3);
  for (const auto& [l, d] : r.per_label) CHECK(d == 1.0);
  CHECK(r.macro_mean == 1.0);
}

TEST_CASE("disjoint masks score 0; hand-counted overlap scores 2*6/18") {
  const GridSpec g = GridSpec::axis_aligned({10, 2, 1}, Vec3::Ones());
  LabelVolume a(g), b(g);
  for (int i = 0; i < 10; ++i) a(i, 0, 0) = 1;
  for (int i = 0; i < 10; ++i) b(i, 1, 0) = 1;
  CHECK(dice(a, b).per_label.at(1) == 0.0);

  LabelVolume c(g);
  for (int i = 0; i < 6; ++i) c(i, 0, 0) = 1;
  c(0, 1, 0) = c(1, 1, 0) = 1;
  const DiceRecord r = dice(a, c);
  CHECK(r.per_label.at(1) == doctest::Approx(12.0 / 18.0).epsilon(1e-15));
}

TEST_CASE("labels missing from both are excluded; from one, they score 0") {
  const GridSpec g = GridSpec::axis_aligned({4, 1, 1}, Vec3::Ones());
  LabelVolume a(g), b(g);
  a[0] = 1;
  b[0] = 1;
  a[1] = 2;
  const DiceRecord r = dice(a, b, {1, 2, 3});
  CHECK(r.per_label.size() == 2);
  CHECK(r.per_label.at(2) == 0.0);
  CHECK(r.macro_mean == 0.5);
  CHECK(r.weighted_mean == doctest::Approx(2.0 / 3.0));
  const DiceRecord sub = dice(a, b, {1}, "one");
  CHECK(sub.per_label.size() == 1);
  CHECK(sub.macro_mean == 1.0);
  CHECK(sub.label_group == "one");
}

TEST_CASE("dice matches a voxel-set oracle and is symmetric") {
  std::mt19937_64 rng(22);
  for (int t = 0; t < 20; ++t) {
    const GridSpec g = GridSpec::axis_aligned({5, 4, 3}, Vec3::Ones());
    const LabelVolume a = random_labels(g, rng, 4), b = random_labels(g, rng, 4);
    const DiceRecord r = dice(a, b), s = dice(b, a);
    CHECK(r.macro_mean == s.macro_mean);
    for (const auto& [l, d] : r.per_label) {
      std::set<std::int64_t> sa, sb, both;
      for (std::int64_t n = 0; n < a.size(); ++n) {
        if (a[n] == l) sa.insert(n);
        if (b[n] == l) sb.insert(n);
        if (a[n] == l && b[n] == l) both.insert(n);
      }
      CHECK(d == 2.0 * double(both.size()) / double(sa.size() + sb.size()));
      CHECK(s.per_label.at(l) == d);
    }
  }
}

TEST_CASE("dice is invariant under consistent reorientation") {
  std::mt19937_64 rng(23);
  const GridSpec g = GridSpec::axis_aligned({7, 5, 6}, Vec3(1, 1.2, 0.8));
  const LabelVolume a = random_labels(g, rng, 3), b = random_labels(g, rng, 3);
  const double base = dice(a, b).macro_mean;
  for (const std::string code : {"LPS", "PIL", "SAR"})
    CHECK(std::abs(dice(reorient(a, code), reorient(b, code)).macro_mean - base) < 1e-12);
}

TEST_CASE("dice rejects mismatched grids") {
  LabelVolume a(GridSpec::axis_aligned({3, 3, 3}, Vec3::Ones())), b(GridSpec::axis_aligned({3, 3, 2}, Vec3::Ones()));
  CHECK_THROWS_AS(dice(a, b), std::invalid_argument);
}

TEST_CASE("trim 1..100 at 5 percent keeps 6..100") {
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 1.0);
  std::shuffle(v.begin(), v.end(), std::mt19937_64(24));
  const auto out = trim_lower_percentile(v, 5.0);
  CHECK(out.size() == 95);
  std::vector<double> sorted = out;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted.front() == 6.0);
  CHECK(sorted.back() == 100.0);
  // Survivors keep their input order.
  std::vector<double> expect;
  for (double x : v)
    if (x > 5.0) expect.push_back(x);
  CHECK(out == expect);
}

TEST_CASE("trim edge cases") {
  const std::vector<double> v{0.3, 0.1, 0.2};
  CHECK(trim_lower_percentile(v, 0.0) == v);
  CHECK(trim_lower_percentile(v, 5.0) == std::vector<double>{0.3, 0.2});  // ceil(0.15) = 1
  const std::vector<double> same(100, 0.7);
  CHECK(trim_lower_percentile(same, 5.0) == std::vector<double>(95, 0.7));
  CHECK_THROWS_AS(trim_lower_percentile(std::vector<double>{}, 5.0), std::invalid_argument);
  CHECK_THROWS_AS(trim_lower_percentile(v, 100.0), std::invalid_argument);
  CHECK_THROWS_AS(trim_lower_percentile(v, -1.0), std::invalid_argument);
  std::vector<double> twenty(20, 1.0);
  CHECK(trim_lower_percentile(twenty, 5.0).size() == 19);
}

TEST_CASE("trimmed mean never falls and the length follows the ceiling rule") {
  std::mt19937_64 rng(25);
  std::uniform_int_distribution<int> len(1, 300);
  std::uniform_real_distribution<double> u(0.0, 1.0), pct(0.0, 50.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(static_cast<std::size_t>(len(rng)));
    for (auto& x : v) x = u(rng);
    const double p = pct(rng);
    const auto out = trim_lower_percentile(v, p);
    CHECK(out.size() == v.size() - static_cast<std::size_t>(std::ceil(p * double(v.size()) / 100.0 - 1e-9)));
    if (out.empty()) continue;
    const double m0 = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    const double m1 = std::accumulate(out.begin(), out.end(), 0.0) / double(out.size());
    CHECK(m1 >= m0 - 1e-12);
  }
}
