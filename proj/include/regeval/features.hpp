#pragma once

#include "regeval/geometry.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace regeval {

struct MindConfig {
  int patch_radius = 1;
  /// Gaussian patch weight sigma in voxels; defaults to patch_radius.
  double patch_sigma = 0.0;
  /// Relative floor on the local variance estimate, as a fraction of the
  /// image's global intensity variance.
  double variance_floor = 1e-6;

  void validate() const;
};

/// The six face-neighbour offsets, in channel order.
const std::array<Index3, 6>& mind_offsets();

/// One channel per neighbourhood offset, on the source image's grid.
struct MindFeatures {
  std::vector<Image> channels;
  GridSpec grid() const { return channels.front().grid(); }
};

/// Self-similarity descriptor: exp(-D_r(x) / V(x)) per offset r, where D_r is
/// the Gaussian-weighted patch SSD between x and x + r and V is the mean of D
/// over the neighbourhood, floored. Each voxel is scaled so its largest
/// channel equals 1.
MindFeatures mind(const Image& v, const MindConfig& cfg = {});

/// Mean over voxels and channels of the squared descriptor difference.
/// Both images must share a lattice.
double mind_ssd(const Image& a, const Image& b, const MindConfig& cfg = {});

struct PointLoss {
  double loss = 0.0;
  /// d loss / d point, in moving voxel coordinates, per fixed voxel.
  std::vector<Vec3, TrackedAllocator<Vec3>> grad;
};

/// MIND-SSD with the moving descriptors sampled at `points` (moving voxel
/// coordinates, one per fixed voxel). Descriptors are frozen: they are
/// computed on the unwarped moving image and interpolated, so the gradient is
/// the exact derivative of this sampled loss.
PointLoss mind_ssd_at_points(const MindFeatures& fixed, const MindFeatures& moving,
                             std::span<const Vec3> points);

struct MindSsdResult {
  double loss = 0.0;
  DisplacementField gradient;  ///< d loss / d u, voxel units of the fixed grid
};

/// MIND-SSD between fixed and moving warped by u (fixed-grid displacement,
/// moving looked up through world coordinates).
MindSsdResult mind_ssd(const Image& fixed, const Image& moving, const DisplacementField& u, const MindConfig& cfg = {});

enum class ModalityGuess { Unimodal, Multimodal };
const char* to_string(ModalityGuess g);

struct HistogramPeak {
  int bin = 0;
  double prominence = 0.0;
};

struct HistogramProfile {
  std::vector<double> bin_edges;      ///< 257 edges over the robust range
  std::vector<std::int64_t> counts;   ///< 256 bins
  std::vector<HistogramPeak> peaks;   ///< by prominence, descending
  ModalityGuess modality_guess = ModalityGuess::Unimodal;
  double robust_low = 0.0, robust_high = 0.0;
};

inline constexpr int kHistogramBins = 256;
/// Heuristic thresholds: peak prominence as a fraction of the tallest
/// smoothed bin, and the outer fraction of bins counted as "extreme".
inline constexpr double kPeakProminence = 0.02;
inline constexpr double kOuterFraction = 0.15;

/// 256-bin histogram over the 0.5-99.5 percentile range of the in-mask
/// voxels (values outside the range land in the edge bins).
HistogramProfile histogram_profile(const Image& v, const LabelVolume* mask = nullptr);

}  // namespace regeval
