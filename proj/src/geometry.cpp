#include "regeval/geometry.hpp"

#include "regeval/nifti.hpp"

#include <algorithm>

namespace regeval {

AffineTransform AffineTransform::inverse() const {
  validate();
  AffineTransform out;
  const Mat3 r = matrix.topLeftCorner<3, 3>().inverse();
  out.matrix.topLeftCorner<3, 3>() = r;
  out.matrix.topRightCorner<3, 1>() = -r * matrix.topRightCorner<3, 1>();
  return out;
}

void AffineTransform::validate() const {
  if (!matrix.allFinite()) throw std::invalid_argument("affine contains non-finite entries");
  if (matrix.row(3) != Eigen::RowVector4d(0, 0, 0, 1)) throw std::invalid_argument("affine last row must be (0,0,0,1)");
  if (std::abs(matrix.topLeftCorner<3, 3>().determinant()) < 1e-12) throw std::invalid_argument("affine is singular");
}

bool DisplacementField::finite() const {
  return std::all_of(vectors.begin(), vectors.end(), [](const Vec3& v) { return v.allFinite(); });
}

void DisplacementField::validate() const {
  if (size() != grid.size()) throw TransformIntegrityError("displacement count does not match grid");
  if (!finite()) throw TransformIntegrityError("displacement field contains non-finite values");
}

double DisplacementField::rms() const {
  if (vectors.empty()) return 0.0;
  const double s = ordered_sum(size(), [&](std::int64_t n) { return vectors[n].squaredNorm(); });
  return std::sqrt(s / static_cast<double>(size()));
}

Vec3 sample_field(const DisplacementField& u, const Vec3& p) {
  const auto& d = u.grid.dims;
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto i = static_cast<std::int64_t>(fx), j = static_cast<std::int64_t>(fy), k = static_cast<std::int64_t>(fz);
  const double tx = p.x() - fx, ty = p.y() - fy, tz = p.z() - fz;
  using detail::clamp_index;
  const std::int64_t i0 = clamp_index(i, d[0]), i1 = clamp_index(i + 1, d[0]);
  const std::int64_t j0 = clamp_index(j, d[1]), j1 = clamp_index(j + 1, d[1]);
  const std::int64_t k0 = clamp_index(k, d[2]), k1 = clamp_index(k + 1, d[2]);
  const Vec3 x00 = (1 - tx) * u(i0, j0, k0) + tx * u(i1, j0, k0);
  const Vec3 x10 = (1 - tx) * u(i0, j1, k0) + tx * u(i1, j1, k0);
  const Vec3 x01 = (1 - tx) * u(i0, j0, k1) + tx * u(i1, j0, k1);
  const Vec3 x11 = (1 - tx) * u(i0, j1, k1) + tx * u(i1, j1, k1);
  return (1 - tz) * ((1 - ty) * x00 + ty * x10) + tz * ((1 - ty) * x01 + ty * x11);
}

PointMap::PointMap(const GridSpec& target, const GridSpec& source, const AffineTransform& affine,
                   const DisplacementField* field)
    : field_(field) {
  const GridSpec& pre = field ? field->grid : target;
  Mat4 m = source.world_to_voxel() * affine.matrix * pre.voxel_to_world;
  // Round-trip residue on matching lattices; snapping keeps lattice-aligned
  // maps exact.
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      if (std::abs(m(r, c) - std::round(m(r, c))) < 1e-12) m(r, c) = std::round(m(r, c));
  linear_ = m.topLeftCorner<3, 3>();
  offset_ = m.topRightCorner<3, 1>();
  if (field) {
    field_on_target_ = field->grid.same_lattice(target, 1e-9);
    const Mat4 t2f = field->grid.world_to_voxel() * target.voxel_to_world;
    target_to_field_linear_ = t2f.topLeftCorner<3, 3>();
    target_to_field_offset_ = t2f.topRightCorner<3, 1>();
  }
}

Vec3 PointMap::operator()(std::int64_t i, std::int64_t j, std::int64_t k) const {
  Vec3 q(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k));
  if (field_) {
    if (field_on_target_) {
      q += (*field_)(i, j, k);
    } else {
      q = target_to_field_linear_ * q + target_to_field_offset_;
      q += sample_field(*field_, q);
    }
  }
  return linear_ * q + offset_;
}

Index3 crop_window_start(const Index3& dims, const Index3& target_dims, const Vec3& center) {
  Index3 start{};
  for (int a = 0; a < 3; ++a) {
    const auto n = dims[a], t = target_dims[a];
    auto s = static_cast<std::int64_t>(std::floor(center[a] - (t - 1) / 2.0 + 0.5));
    if (t <= n) {
      s = std::clamp<std::int64_t>(s, 0, n - t);
    } else {
      s = std::clamp<std::int64_t>(s, n - t, 0);
    }
    start[a] = s;
  }
  return start;
}

Image convolve_separable(const Image& v, const std::array<std::vector<double>, 3>& kernels) {
  Image cur = v;
  const Index3 d = v.dims();
  const std::int64_t stride[3] = {1, d[0], d[0] * d[1]};
  for (int a = 0; a < 3; ++a) {
    const auto& w = kernels[a];
    if (w.size() <= 1 && (w.empty() || w[0] == 1.0)) continue;
    if (w.size() % 2 == 0) throw std::invalid_argument("convolve_separable: kernel length must be odd");
    const auto r = static_cast<std::int64_t>(w.size() / 2);
    Image next(cur.grid());
    next.header() = cur.header();
    const std::int64_t n_lines = cur.size() / d[a];
    parallel_for(n_lines, [&](std::int64_t l0, std::int64_t l1) {
      std::vector<double> line(static_cast<std::size_t>(d[a]));
      for (std::int64_t l = l0; l < l1; ++l) {
        // Line l enumerates the voxels with coordinate 0 along axis a.
        std::int64_t base;
        if (a == 0) {
          base = l * d[0];
        } else if (a == 1) {
          base = (l % d[0]) + (l / d[0]) * d[0] * d[1];
        } else {
          base = l;
        }
        for (std::int64_t t = 0; t < d[a]; ++t) line[t] = cur[base + t * stride[a]];
        for (std::int64_t t = 0; t < d[a]; ++t) {
          double acc = 0.0;
          for (std::int64_t q = -r; q <= r; ++q) acc += w[q + r] * line[detail::clamp_index(t + q, d[a])];
          next[base + t * stride[a]] = acc;
        }
      }
    });
    cur = std::move(next);
  }
  return cur;
}

Image jacobian_determinant(const DisplacementField& phi) {
  const Index3 d = phi.grid.dims;
  Image out(phi.grid, 1.0);
  out.header().datatype = DataType::Float32;
  parallel_for(d[2], [&](std::int64_t k0, std::int64_t k1) {
    for (std::int64_t k = k0; k < k1; ++k)
      for (std::int64_t j = 0; j < d[1]; ++j)
        for (std::int64_t i = 0; i < d[0]; ++i) {
          const std::int64_t idx[3] = {i, j, k};
          Mat3 jac = Mat3::Identity();
          for (int a = 0; a < 3; ++a) {
            if (d[a] < 2) continue;
            std::int64_t lo[3] = {i, j, k}, hi[3] = {i, j, k};
            double h = 2.0;
            if (idx[a] == 0) {
              hi[a] = 1;
              h = 1.0;
            } else if (idx[a] == d[a] - 1) {
              lo[a] = d[a] - 2;
              h = 1.0;
            } else {
              --lo[a];
              ++hi[a];
            }
            jac.col(a) += (phi(hi[0], hi[1], hi[2]) - phi(lo[0], lo[1], lo[2])) / h;
          }
          out(i, j, k) = jac.determinant();
        }
  });
  return out;
}

DisplacementField compose(const DisplacementField& u, const DisplacementField& v) {
  if (!u.grid.same_lattice(v.grid)) throw std::invalid_argument("compose: fields must share a grid");
  DisplacementField w(v.grid);
  const Index3 d = v.grid.dims;
  parallel_for(d[2], [&](std::int64_t k0, std::int64_t k1) {
    for (std::int64_t k = k0; k < k1; ++k)
      for (std::int64_t j = 0; j < d[1]; ++j)
        for (std::int64_t i = 0; i < d[0]; ++i) {
          const Vec3& vx = v(i, j, k);
          const Vec3 y = Vec3(double(i), double(j), double(k)) + vx;
          w(i, j, k) = vx + sample_field(u, y);
        }
  });
  return w;
}

DisplacementField exp_velocity(const DisplacementField& velocity, int squarings) {
  if (squarings < 0) throw std::invalid_argument("squarings must be >= 0");
  DisplacementField u = velocity;
  const double scale = std::ldexp(1.0, -squarings);
  for (auto& x : u.vectors) x *= scale;
  for (int s = 0; s < squarings; ++s) u = compose(u, u);
  return u;
}

void write_displacement_field(const DisplacementField& phi, const std::filesystem::path& path, DataType datatype) {
  phi.validate();
  RawNifti raw;
  raw.header.grid = phi.grid;
  raw.header.datatype = datatype;
  raw.header.description = "displacement (mm, RAS world)";
  raw.intent_code = 1007;
  raw.dims = {phi.grid.dims[0], phi.grid.dims[1], phi.grid.dims[2], 1, 3};
  const Mat3 a = phi.grid.voxel_to_world.topLeftCorner<3, 3>();
  const std::int64_t n = phi.size();
  raw.values.resize(static_cast<std::size_t>(3 * n));
  for (std::int64_t v = 0; v < n; ++v) {
    const Vec3 w = a * phi.vectors[v];
    for (int c = 0; c < 3; ++c) raw.values[c * n + v] = w[c];
  }
  write_nifti_raw(raw, path);
}

DisplacementField read_displacement_field(const std::filesystem::path& path) {
  RawNifti raw = read_nifti_raw(path);
  if (raw.dims[3] != 1 || raw.dims[4] != 3)
    throw FormatError("displacement field must have dims (nx, ny, nz, 1, 3)");
  DisplacementField phi(raw.header.grid);
  const Mat3 inv = phi.grid.voxel_to_world.topLeftCorner<3, 3>().inverse();
  const std::int64_t n = phi.size();
  for (std::int64_t v = 0; v < n; ++v) {
    const Vec3 w(raw.values[v], raw.values[n + v], raw.values[2 * n + v]);
    phi.vectors[v] = inv * w;
  }
  phi.validate();
  return phi;
}

}  // namespace regeval
