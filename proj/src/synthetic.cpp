#include "regeval/synthetic.hpp"

#include <algorithm>
#include <cmath>

namespace regeval {

GridSpec centred_grid(const Index3& dims, double spacing) {
  const Vec3 origin(-0.5 * (dims[0] - 1) * spacing, -0.5 * (dims[1] - 1) * spacing, -0.5 * (dims[2] - 1) * spacing);
  return GridSpec::axis_aligned(dims, Vec3::Constant(spacing), origin);
}

Phantom make_phantom(const GridSpec& grid, const PhantomSpec& spec) {
  if (spec.layers.empty()) throw std::invalid_argument("phantom needs at least one layer");
  if (!(spec.edge_width > 0.0)) throw std::invalid_argument("phantom edge width must be positive");
  if ((spec.semi_axes.array() <= 0.0).any()) throw std::invalid_argument("phantom semi-axes must be positive");
  Phantom p{Image(grid), LabelVolume(grid)};
  for_each_voxel(grid.dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    const Vec3 x = grid.to_world(Vec3(double(i), double(j), double(k)));
    const Eigen::Array3d q = (x - spec.centre).array() / spec.semi_axes.array();
    const double rho = q.matrix().norm();
    // First-order signed distance to the level set rho = scale.
    const double grad = rho > 0.0 ? (q / spec.semi_axes.array()).matrix().norm() / rho : 1.0 / spec.semi_axes.maxCoeff();
    double value = spec.background, prev = spec.background;
    Label lab = 0;
    for (const auto& layer : spec.layers) {
      const double sd = (rho - layer.scale) / grad;
      const double t = std::clamp((spec.edge_width - sd) / (2.0 * spec.edge_width), 0.0, 1.0);
      value += (layer.intensity - prev) * t * t * t * (t * (6.0 * t - 15.0) + 10.0);
      prev = layer.intensity;
      if (rho <= layer.scale) lab = layer.label;
    }
    p.image[n] = value;
    p.labels[n] = lab;
  });
  return p;
}

Image monotone_remap(const Image& v) {
  double mx = 0.0;
  for (double x : v.data()) mx = std::max(mx, x);
  if (!(mx > 0.0)) mx = 1.0;
  Image out = v;
  for (double& x : out.data()) x = 50.0 + 150.0 * std::sqrt(std::max(0.0, x) / mx);
  return out;
}

}  // namespace regeval
