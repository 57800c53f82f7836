#pragma once

#include "regeval/parallel.hpp"
#include "regeval/volume.hpp"

#include <filesystem>
#include <optional>

namespace regeval {

enum class Interp { Trilinear, Nearest };

/// Out-of-bounds policy for samplers. Zero is the default for intensities;
/// label sampling is always Zero (background).
enum class Border { Zero, Clamp };

namespace detail {

inline std::int64_t clamp_index(std::int64_t i, std::int64_t n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

template <typename Scalar>
double fetch(const Volume<Scalar>& v, std::int64_t i, std::int64_t j, std::int64_t k, Border b) {
  const auto& d = v.dims();
  if (b == Border::Clamp) return static_cast<double>(v(clamp_index(i, d[0]), clamp_index(j, d[1]), clamp_index(k, d[2])));
  if (!v.contains(i, j, k)) return 0.0;
  return static_cast<double>(v(i, j, k));
}

}  // namespace detail

/// Trilinear blend of the 8 lattice neighbours of continuous voxel point p.
template <typename Scalar>
double sample_trilinear(const Volume<Scalar>& v, const Vec3& p, Border border = Border::Zero) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto i = static_cast<std::int64_t>(fx), j = static_cast<std::int64_t>(fy), k = static_cast<std::int64_t>(fz);
  const double tx = p.x() - fx, ty = p.y() - fy, tz = p.z() - fz;
  const double sx = 1.0 - tx, sy = 1.0 - ty, sz = 1.0 - tz;
  const auto& d = v.dims();
  if (i >= 0 && j >= 0 && k >= 0 && i + 1 < d[0] && j + 1 < d[1] && k + 1 < d[2]) {
    const std::int64_t n = v.index(i, j, k), sj = d[0], sk = d[0] * d[1];
    const auto at = [&](std::int64_t off) { return static_cast<double>(v[n + off]); };
    return sz * (sy * (sx * at(0) + tx * at(1)) + ty * (sx * at(sj) + tx * at(sj + 1))) +
           tz * (sy * (sx * at(sk) + tx * at(sk + 1)) + ty * (sx * at(sk + sj) + tx * at(sk + sj + 1)));
  }
  using detail::fetch;
  return sz * (sy * (sx * fetch(v, i, j, k, border) + tx * fetch(v, i + 1, j, k, border)) +
               ty * (sx * fetch(v, i, j + 1, k, border) + tx * fetch(v, i + 1, j + 1, k, border))) +
         tz * (sy * (sx * fetch(v, i, j, k + 1, border) + tx * fetch(v, i + 1, j, k + 1, border)) +
               ty * (sx * fetch(v, i, j + 1, k + 1, border) + tx * fetch(v, i + 1, j + 1, k + 1, border)));
}

/// Trilinear value and its exact derivative with respect to p.
template <typename Scalar>
double sample_trilinear_grad(const Volume<Scalar>& v, const Vec3& p, Border border, Vec3& grad) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto i = static_cast<std::int64_t>(fx), j = static_cast<std::int64_t>(fy), k = static_cast<std::int64_t>(fz);
  const double tx = p.x() - fx, ty = p.y() - fy, tz = p.z() - fz;
  const double sx = 1.0 - tx, sy = 1.0 - ty, sz = 1.0 - tz;
  using detail::fetch;
  const double c000 = fetch(v, i, j, k, border), c100 = fetch(v, i + 1, j, k, border);
  const double c010 = fetch(v, i, j + 1, k, border), c110 = fetch(v, i + 1, j + 1, k, border);
  const double c001 = fetch(v, i, j, k + 1, border), c101 = fetch(v, i + 1, j, k + 1, border);
  const double c011 = fetch(v, i, j + 1, k + 1, border), c111 = fetch(v, i + 1, j + 1, k + 1, border);
  const double x00 = sx * c000 + tx * c100, x10 = sx * c010 + tx * c110;
  const double x01 = sx * c001 + tx * c101, x11 = sx * c011 + tx * c111;
  const double y0 = sy * x00 + ty * x10, y1 = sy * x01 + ty * x11;
  grad.x() = sz * (sy * (c100 - c000) + ty * (c110 - c010)) + tz * (sy * (c101 - c001) + ty * (c111 - c011));
  grad.y() = sz * (x10 - x00) + tz * (x11 - x01);
  grad.z() = y1 - y0;
  return sz * y0 + tz * y1;
}

/// Nearest lattice value. Exact .5 ties round toward the lower index.
template <typename Scalar>
Scalar sample_nearest(const Volume<Scalar>& v, const Vec3& p, Border border = Border::Zero) {
  std::int64_t idx[3];
  for (int a = 0; a < 3; ++a) idx[a] = static_cast<std::int64_t>(std::ceil(p[a] - 0.5));
  const auto& d = v.dims();
  if (border == Border::Clamp) {
    for (int a = 0; a < 3; ++a) idx[a] = detail::clamp_index(idx[a], d[a]);
  } else if (!v.contains(idx[0], idx[1], idx[2])) {
    return Scalar(0);
  }
  return v(idx[0], idx[1], idx[2]);
}

/// World-space transform mapping fixed-world points to moving-world points.
struct AffineTransform {
  Mat4 matrix = Mat4::Identity();

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(const Vec3& t) {
    AffineTransform a;
    a.matrix.topRightCorner<3, 1>() = t;
    return a;
  }

  Vec3 operator()(const Vec3& x) const { return matrix.topLeftCorner<3, 3>() * x + matrix.topRightCorner<3, 1>(); }
  AffineTransform inverse() const;
  /// Throws std::invalid_argument unless the last row is (0,0,0,1) and the
  /// linear block is invertible.
  void validate() const;
};

/// Dense displacement in voxel units of its own grid: x -> x + u(x).
struct DisplacementField {
  using Storage = std::vector<Vec3, TrackedAllocator<Vec3>>;

  GridSpec grid;
  Storage vectors;

  DisplacementField() = default;
  explicit DisplacementField(const GridSpec& g) : grid(g), vectors(static_cast<std::size_t>(g.size()), Vec3::Zero()) {}

  std::int64_t size() const { return static_cast<std::int64_t>(vectors.size()); }
  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return i + grid.dims[0] * (j + grid.dims[1] * k);
  }
  const Vec3& operator()(std::int64_t i, std::int64_t j, std::int64_t k) const { return vectors[index(i, j, k)]; }
  Vec3& operator()(std::int64_t i, std::int64_t j, std::int64_t k) { return vectors[index(i, j, k)]; }

  bool finite() const;
  /// Throws TransformIntegrityError on any non-finite component.
  void validate() const;
  /// Root-mean-square displacement magnitude in voxels.
  double rms() const;
};

/// Trilinear lookup of a displacement field with edge clamping.
Vec3 sample_field(const DisplacementField& u, const Vec3& p);

/// Maps target-grid voxels to continuous source-grid voxel coordinates through
/// an optional displacement field (on its own grid) followed by an affine.
class PointMap {
 public:
  PointMap(const GridSpec& target, const GridSpec& source, const AffineTransform& affine,
           const DisplacementField* field = nullptr);

  Vec3 operator()(std::int64_t i, std::int64_t j, std::int64_t k) const;

 private:
  Mat3 linear_;
  Vec3 offset_;
  const DisplacementField* field_;
  bool field_on_target_ = true;
  Mat3 target_to_field_linear_;
  Vec3 target_to_field_offset_;
};

template <typename Scalar>
Volume<Scalar> sample_through(const Volume<Scalar>& v, const GridSpec& target, const PointMap& map, Interp mode,
                              Border border = Border::Zero) {
  if constexpr (std::is_integral_v<Scalar>) {
    if (mode == Interp::Trilinear)
      throw std::invalid_argument("label volumes need nearest sampling or probabilistic label transport");
    border = Border::Zero;
  }
  VolumeHeader h = v.header();
  h.grid = target;
  typename Volume<Scalar>::Storage data(static_cast<std::size_t>(target.size()));
  const Index3 d = target.dims;
  parallel_for(d[2], [&](std::int64_t k0, std::int64_t k1) {
    for (std::int64_t k = k0; k < k1; ++k)
      for (std::int64_t j = 0; j < d[1]; ++j)
        for (std::int64_t i = 0; i < d[0]; ++i) {
          const Vec3 p = map(i, j, k);
          const std::int64_t n = i + d[0] * (j + d[1] * k);
          if constexpr (std::is_integral_v<Scalar>) {
            data[n] = sample_nearest(v, p, border);
          } else {
            data[n] = mode == Interp::Trilinear ? static_cast<Scalar>(sample_trilinear(v, p, border))
                                                : sample_nearest(v, p, border);
          }
        }
  });
  return Volume<Scalar>(h, std::move(data));
}

/// Samples v on the target grid at each target voxel's world position.
template <typename Scalar>
Volume<Scalar> resample(const Volume<Scalar>& v, const GridSpec& target, Interp mode, Border border = Border::Zero) {
  target.validate();
  return sample_through(v, target, PointMap(target, v.grid(), AffineTransform::identity()), mode, border);
}

/// Output voxel at world x takes the value of v at world a(x).
template <typename Scalar>
Volume<Scalar> apply_affine(const Volume<Scalar>& v, const AffineTransform& a, const GridSpec& target, Interp mode,
                            Border border = Border::Zero) {
  a.validate();
  target.validate();
  return sample_through(v, target, PointMap(target, v.grid(), a), mode, border);
}

/// output(x) = v(x + phi(x)) on phi's grid.
template <typename Scalar>
Volume<Scalar> apply_warp(const Volume<Scalar>& v, const DisplacementField& phi, Interp mode,
                          Border border = Border::Zero) {
  phi.validate();
  return sample_through(v, phi.grid, PointMap(phi.grid, v.grid(), AffineTransform::identity(), &phi), mode, border);
}

/// Field (on its own grid, possibly different from target) followed by affine.
template <typename Scalar>
Volume<Scalar> apply_transform(const Volume<Scalar>& v, const AffineTransform& a, const DisplacementField* phi,
                               const GridSpec& target, Interp mode, Border border = Border::Zero) {
  a.validate();
  if (phi) phi->validate();
  return sample_through(v, target, PointMap(target, v.grid(), a, phi), mode, border);
}

/// Window of target_dims starting at voxel `start` of v (may be negative or
/// extend past the end; uncovered voxels are 0). World positions of retained
/// voxels are preserved.
template <typename Scalar>
Volume<Scalar> crop_or_pad_at(const Volume<Scalar>& v, const Index3& target_dims, const Index3& start) {
  for (auto t : target_dims)
    if (t < 1) throw std::invalid_argument("crop/pad target dims must be positive");
  Mat4 shift = Mat4::Identity();
  for (int a = 0; a < 3; ++a) shift(a, 3) = static_cast<double>(start[a]);
  VolumeHeader h = v.header();
  h.grid = GridSpec::from_affine(target_dims, v.grid().voxel_to_world * shift);
  typename Volume<Scalar>::Storage data(static_cast<std::size_t>(voxel_count(target_dims)), Scalar(0));
  for_each_voxel(target_dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    const std::int64_t si = i + start[0], sj = j + start[1], sk = k + start[2];
    if (v.contains(si, sj, sk)) data[n] = v(si, sj, sk);
  });
  return Volume<Scalar>(h, std::move(data));
}

/// Intensity-weighted centroid in voxel coordinates (labels: nonzero voxels
/// weighted 1). Falls back to the geometric center for an all-zero volume.
template <typename Scalar>
Vec3 intensity_centroid(const Volume<Scalar>& v) {
  Vec3 acc = Vec3::Zero();
  double w = 0.0;
  for_each_voxel(v.dims(), [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    double x;
    if constexpr (std::is_integral_v<Scalar>) {
      x = v[n] != 0 ? 1.0 : 0.0;
    } else {
      x = std::abs(static_cast<double>(v[n]));
    }
    acc += x * Vec3(double(i), double(j), double(k));
    w += x;
  });
  if (w <= 0.0) return Vec3((v.dims()[0] - 1) / 2.0, (v.dims()[1] - 1) / 2.0, (v.dims()[2] - 1) / 2.0);
  return acc / w;
}

/// Start index of a target_dims window centered on `center`. On axes being
/// cropped the window stays inside the volume; on padded axes the volume stays
/// inside the window.
Index3 crop_window_start(const Index3& dims, const Index3& target_dims, const Vec3& center);

/// Crops or zero-pads to target_dims around `center` (voxel coordinates), or
/// around the intensity centroid when no center is given.
template <typename Scalar>
Volume<Scalar> crop_or_pad(const Volume<Scalar>& v, const Index3& target_dims,
                           const std::optional<Vec3>& center = std::nullopt) {
  for (auto t : target_dims)
    if (t < 1) throw std::invalid_argument("crop/pad target dims must be positive");
  const Vec3 c = center ? *center : intensity_centroid(v);
  return crop_or_pad_at(v, target_dims, crop_window_start(v.dims(), target_dims, c));
}

/// Separable convolution with odd-length, centred kernels per axis (edge
/// voxels replicated). An empty or single-tap {1} kernel leaves the axis alone.
Image convolve_separable(const Image& v, const std::array<std::vector<double>, 3>& kernels);

/// det(I + grad u) per voxel; central differences inside, one-sided at borders.
Image jacobian_determinant(const DisplacementField& phi);

/// Right composition: returns w with x + w(x) = y + u(y), y = x + v(x).
DisplacementField compose(const DisplacementField& u, const DisplacementField& v);

/// Scaling and squaring exponential of a stationary velocity field.
DisplacementField exp_velocity(const DisplacementField& velocity, int squarings = 6);

/// Displacement fields on disk: 5D NIfTI (nx, ny, nz, 1, 3), intent VECTOR
/// (1007), components stored as world-space (RAS+) millimetres.
void write_displacement_field(const DisplacementField& phi, const std::filesystem::path& path,
                              DataType datatype = DataType::Float32);
DisplacementField read_displacement_field(const std::filesystem::path& path);

}  // namespace regeval
