#pragma once

#include "regeval/volume.hpp"

namespace regeval {

/// Signed axis permutation taking a volume in one orientation to another.
/// New voxel axis t reads source axis `source_axis[t]`, flipped when
/// `flip[t]` is set.
struct AxisPermutation {
  std::array<int, 3> source_axis{0, 1, 2};
  std::array<bool, 3> flip{false, false, false};
  Index3 new_dims{1, 1, 1};
  /// Maps new voxel coordinates to source voxel coordinates.
  Mat4 new_to_source = Mat4::Identity();
};

AxisPermutation axis_permutation(const GridSpec& grid, const std::string& target);

/// Reorients to the target anatomical code by permuting/flipping voxel axes.
/// Data moves without interpolation, so values are preserved bit-exactly and
/// every voxel keeps its world position.
template <typename Scalar>
Volume<Scalar> reorient(const Volume<Scalar>& v, const std::string& target) {
  const AxisPermutation p = axis_permutation(v.grid(), target);
  VolumeHeader h = v.header();
  h.grid = GridSpec::from_affine(p.new_dims, v.grid().voxel_to_world * p.new_to_source);
  typename Volume<Scalar>::Storage data(static_cast<std::size_t>(v.size()));
  const Index3& sd = v.dims();
  for_each_voxel(p.new_dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    const std::int64_t idx[3] = {i, j, k};
    std::int64_t src[3];
    for (int t = 0; t < 3; ++t) {
      const int s = p.source_axis[t];
      src[s] = p.flip[t] ? sd[s] - 1 - idx[t] : idx[t];
    }
    data[n] = v(src[0], src[1], src[2]);
  });
  return Volume<Scalar>(h, std::move(data));
}

}  // namespace regeval
