#pragma once

#include "regeval/volume.hpp"

#include <vector>

namespace regeval {

/// One shell of a nested-ellipsoid phantom. A voxel belongs to the innermost
/// layer whose scaled ellipsoid contains its centre.
struct PhantomLayer {
  double scale = 1.0;  ///< fraction of the outer semi-axes
  Label label = 1;
  double intensity = 100.0;
};

struct PhantomSpec {
  Vec3 centre = Vec3::Zero();           ///< world mm
  Vec3 semi_axes = Vec3(16, 16, 16);    ///< world mm
  std::vector<PhantomLayer> layers{{1.0, 1, 100.0}};  ///< outermost first
  double edge_width = 1.0;              ///< mm, half-width of the smooth edge
  double background = 0.0;
};

struct Phantom {
  Image image;
  LabelVolume labels;
};

/// Rasterizes the analytic phantom on a grid. Intensities step between layers
/// with a quintic smoothstep across +-edge_width mm of (approximate) signed
/// distance, so the image is exactly flat away from edges; labels are hard
/// membership at voxel centres.
Phantom make_phantom(const GridSpec& grid, const PhantomSpec& spec);

/// Centred axis-aligned grid of `dims` voxels with world origin at its centre.
GridSpec centred_grid(const Index3& dims, double spacing);

/// Applies a strictly increasing remap to every voxel: 50 + 150 * sqrt(x / max).
Image monotone_remap(const Image& v);

}  // namespace regeval
