#pragma once

#include "regeval/geometry.hpp"

#include <map>

namespace regeval {

enum class TransportMode { Probabilistic, Nearest };

const char* to_string(TransportMode m);
TransportMode parse_transport_mode(const std::string& s);

struct LabelTransportConfig {
  TransportMode mode = TransportMode::Probabilistic;
  /// Background is assigned when the best label probability is <= floor, or
  /// when the complement 1 - sum(p) strictly exceeds it. 0 makes background a
  /// plain competitor in the argmax.
  double background_probability_floor = 0.0;

  void validate() const;
};

/// Label transform: optional field (on its own grid) followed by an affine
/// from fixed world to the labels' world.
struct LabelTransform {
  AffineTransform affine;
  const DisplacementField* field = nullptr;
};

/// Transports a segmentation onto `target`.
///
/// Probabilistic mode warps each label's binary mask with trilinear
/// interpolation and keeps a running (best probability, best label) pair per
/// voxel; labels are visited in ascending code order and a later label only
/// wins on a strictly larger probability, so ties go to the lowest code.
/// Peak extra memory is two scalar volumes regardless of label count.
LabelVolume warp_labels(const LabelVolume& lv, const LabelTransform& transform, const GridSpec& target,
                        const LabelTransportConfig& cfg = {});

struct LabelModeComparison {
  Label label = 0;
  double dice_between_modes = 1.0;
  double input_volume_mm3 = 0.0;
  double probabilistic_volume_mm3 = 0.0;
  double nearest_volume_mm3 = 0.0;
  double probabilistic_ratio = 1.0;  ///< output/input physical volume
  double nearest_ratio = 1.0;
  bool dropped_probabilistic = false;
  bool dropped_nearest = false;
  bool distorted = false;  ///< either ratio outside [0.5, 1.5]
};

struct TransportComparison {
  std::vector<LabelModeComparison> per_label;
  std::int64_t disagreement_voxels = 0;
  LabelVolume probabilistic;
  LabelVolume nearest;
};

/// Runs both transport modes and reports per-label agreement and volume
/// preservation.
TransportComparison compare_transport_modes(const LabelVolume& lv, const LabelTransform& transform,
                                            const GridSpec& target);

}  // namespace regeval
