#include "regeval/volume.hpp"

#include <algorithm>
#include <set>

namespace regeval {

int datatype_bytes(DataType t) {
  switch (t) {
    case DataType::UInt8:
    case DataType::Int8: return 1;
    case DataType::Int16:
    case DataType::UInt16: return 2;
    case DataType::Int32:
    case DataType::UInt32:
    case DataType::Float32: return 4;
    case DataType::Float64:
    case DataType::Int64:
    case DataType::UInt64: return 8;
  }
  return 0;
}

bool datatype_is_integer(DataType t) { return t != DataType::Float32 && t != DataType::Float64; }

bool datatype_known(std::int16_t code) {
  switch (code) {
    case 2: case 4: case 8: case 16: case 64: case 256: case 512: case 768: case 1024: case 1280: return true;
    default: return false;
  }
}

const char* to_string(AffineSource s) {
  switch (s) {
    case AffineSource::SForm: return "sform";
    case AffineSource::QForm: return "qform";
    case AffineSource::Spacing: return "spacing";
    case AffineSource::Constructed: return "constructed";
  }
  return "unknown";
}

GridSpec GridSpec::from_affine(const Index3& dims, const Mat4& voxel_to_world) {
  GridSpec g;
  g.dims = dims;
  g.voxel_to_world = voxel_to_world;
  g.spacing = voxel_to_world.topLeftCorner<3, 3>().colwise().norm().transpose();
  return g;
}

GridSpec GridSpec::axis_aligned(const Index3& dims, const Vec3& spacing, const Vec3& origin) {
  Mat4 a = Mat4::Identity();
  a.topLeftCorner<3, 3>() = spacing.asDiagonal();
  a.topRightCorner<3, 1>() = origin;
  GridSpec g;
  g.dims = dims;
  g.spacing = spacing;
  g.voxel_to_world = a;
  return g;
}

Mat4 GridSpec::world_to_voxel() const {
  Mat4 inv = Mat4::Identity();
  const Mat3 r = voxel_to_world.topLeftCorner<3, 3>().inverse();
  inv.topLeftCorner<3, 3>() = r;
  inv.topRightCorner<3, 1>() = -r * voxel_to_world.topRightCorner<3, 1>();
  return inv;
}

Vec3 GridSpec::to_voxel(const Vec3& world) const {
  const Mat3 a = voxel_to_world.topLeftCorner<3, 3>();
  return a.partialPivLu().solve(world - voxel_to_world.topRightCorner<3, 1>());
}

void GridSpec::validate() const {
  for (auto d : dims)
    if (d < 1) throw std::invalid_argument("grid dims must be >= 1");
  for (int a = 0; a < 3; ++a)
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) throw std::invalid_argument("grid spacing must be positive");
  const Mat3 r = voxel_to_world.topLeftCorner<3, 3>();
  const double det = r.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12) throw std::invalid_argument("grid affine is singular");
  if (voxel_to_world.row(3) != Eigen::RowVector4d(0, 0, 0, 1))
    throw std::invalid_argument("grid affine last row must be (0,0,0,1)");
}

bool GridSpec::same_lattice(const GridSpec& o, double tol) const {
  return dims == o.dims && (voxel_to_world - o.voxel_to_world).cwiseAbs().maxCoeff() <= tol;
}

std::string orientation_code(const Mat4& voxel_to_world) {
  static constexpr char pos[3] = {'R', 'A', 'S'};
  static constexpr char neg[3] = {'L', 'P', 'I'};
  Mat3 r = voxel_to_world.topLeftCorner<3, 3>();
  for (int c = 0; c < 3; ++c) {
    const double n = r.col(c).norm();
    if (n > 0) r.col(c) /= n;
  }
  std::array<int, 3> perm{0, 1, 2};
  std::array<int, 3> best = perm;
  double best_score = -1.0;
  do {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += std::abs(r(perm[c], c));
    if (s > best_score + 1e-12) {
      best_score = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  std::string code(3, '?');
  for (int c = 0; c < 3; ++c) code[c] = r(best[c], c) >= 0 ? pos[best[c]] : neg[best[c]];
  return code;
}

bool valid_orientation_code(const std::string& code) {
  if (code.size() != 3) return false;
  std::set<int> axes;
  for (char ch : code) {
    switch (ch) {
      case 'R': case 'L': axes.insert(0); break;
      case 'A': case 'P': axes.insert(1); break;
      case 'S': case 'I': axes.insert(2); break;
      default: return false;
    }
  }
  return axes.size() == 3;
}

std::vector<Label> label_set(const LabelVolume& lv) {
  std::vector<Label> out(lv.data().begin(), lv.data().end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  out.erase(std::remove(out.begin(), out.end(), Label{0}), out.end());
  return out;
}

}  // namespace regeval
