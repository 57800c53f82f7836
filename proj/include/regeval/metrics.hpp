#pragma once

#include "regeval/volume.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace regeval {

struct DiceRecord {
  std::string pair_id;
  std::string label_group = "all";
  /// Labels present in at least one input. Labels absent from both are not
  /// listed; a label present in only one scores 0.
  std::map<Label, double> per_label;
  double macro_mean = 0.0;
  /// Voxel-count-weighted mean over the same labels.
  double weighted_mean = 0.0;
};

/// Per-label Dice 2|A∩B|/(|A|+|B|) over the label_group subset (all labels
/// when empty). Throws std::invalid_argument on a grid mismatch.
DiceRecord dice(const LabelVolume& a, const LabelVolume& b, const std::vector<Label>& label_group = {},
                std::string group_name = "all", std::string pair_id = "");

/// Removes the ceil(p/100 * n) lowest values; survivors keep input order.
std::vector<double> trim_lower_percentile(std::span<const double> scores, double percent);
/// Positions kept by trim_lower_percentile, ascending.
std::vector<std::size_t> trim_kept_indices(std::span<const double> scores, double percent);

}  // namespace regeval
