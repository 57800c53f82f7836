#include "regeval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace regeval {

DiceRecord dice(const LabelVolume& a, const LabelVolume& b, const std::vector<Label>& label_group,
                std::string group_name, std::string pair_id) {
  if (!a.grid().same_lattice(b.grid(), 1e-6)) throw std::invalid_argument("dice: volumes are on different grids");

  const std::set<Label> group(label_group.begin(), label_group.end());
  const auto counted = [&](Label l) { return l != 0 && (group.empty() || group.count(l) > 0); };

  std::map<Label, std::int64_t> size_a, size_b, inter;
  for (std::int64_t v = 0; v < a.size(); ++v) {
    const Label x = a[v], y = b[v];
    if (counted(x)) ++size_a[x];
    if (counted(y)) ++size_b[y];
    if (x == y && counted(x)) ++inter[x];
  }

  DiceRecord rec;
  rec.pair_id = std::move(pair_id);
  rec.label_group = std::move(group_name);
  std::set<Label> present;
  for (const auto& [l, _] : size_a) present.insert(l);
  for (const auto& [l, _] : size_b) present.insert(l);

  double sum = 0.0, wsum = 0.0, wtot = 0.0;
  for (Label l : present) {
    const double na = static_cast<double>(size_a[l]), nb = static_cast<double>(size_b[l]);
    const double d = 2.0 * static_cast<double>(inter[l]) / (na + nb);
    rec.per_label[l] = d;
    sum += d;
    wsum += d * (na + nb);
    wtot += na + nb;
  }
  if (!present.empty()) {
    rec.macro_mean = sum / static_cast<double>(present.size());
    rec.weighted_mean = wsum / wtot;
  }
  return rec;
}

std::vector<std::size_t> trim_kept_indices(std::span<const double> scores, double percent) {
  if (scores.empty()) throw std::invalid_argument("trim_lower_percentile: empty input");
  if (!(percent >= 0.0 && percent < 100.0)) throw std::invalid_argument("trim percent must lie in [0, 100)");
  const std::size_t n = scores.size();
  const auto drop = static_cast<std::size_t>(std::ceil(percent * static_cast<double>(n) / 100.0 - 1e-9));
  std::vector<std::size_t> kept;
  kept.reserve(n - drop);
  if (drop == 0) {
    for (std::size_t i = 0; i < n; ++i) kept.push_back(i);
    return kept;
  }

  // Rank by (value, position) so equal values drop earliest-first.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] < scores[y]; });
  std::vector<bool> removed(n, false);
  for (std::size_t r = 0; r < drop; ++r) removed[order[r]] = true;
  for (std::size_t i = 0; i < n; ++i)
    if (!removed[i]) kept.push_back(i);
  return kept;
}

std::vector<double> trim_lower_percentile(std::span<const double> scores, double percent) {
  std::vector<double> out;
  for (std::size_t i : trim_kept_indices(scores, percent)) out.push_back(scores[i]);
  return out;
}

}  // namespace regeval
