#include "regeval/orientation.hpp"

namespace regeval {

namespace {

int world_axis(char c) {
  switch (c) {
    case 'R': case 'L': return 0;
    case 'A': case 'P': return 1;
    default: return 2;
  }
}

}  // namespace

AxisPermutation axis_permutation(const GridSpec& grid, const std::string& target) {
  if (!valid_orientation_code(target)) throw std::invalid_argument("malformed orientation code '" + target + "'");
  const std::string current = orientation_code(grid.voxel_to_world);
  AxisPermutation p;
  for (int t = 0; t < 3; ++t) {
    int s = 0;
    while (world_axis(current[s]) != world_axis(target[t])) ++s;
    p.source_axis[t] = s;
    p.flip[t] = current[s] != target[t];
    p.new_dims[t] = grid.dims[s];
  }
  p.new_to_source = Mat4::Zero();
  p.new_to_source(3, 3) = 1.0;
  for (int t = 0; t < 3; ++t) {
    const int s = p.source_axis[t];
    p.new_to_source(s, t) = p.flip[t] ? -1.0 : 1.0;
    p.new_to_source(s, 3) = p.flip[t] ? static_cast<double>(grid.dims[s] - 1) : 0.0;
  }
  return p;
}

}  // namespace regeval
