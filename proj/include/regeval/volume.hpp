#pragma once

#include "regeval/common.hpp"
#include "regeval/memory.hpp"

#include <cmath>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

namespace regeval {

/// NIfTI-1 datatype codes supported on disk.
enum class DataType : std::int16_t {
  UInt8 = 2,
  Int16 = 4,
  Int32 = 8,
  Float32 = 16,
  Float64 = 64,
  Int8 = 256,
  UInt16 = 512,
  UInt32 = 768,
  Int64 = 1024,
  UInt64 = 1280,
};

int datatype_bytes(DataType t);
bool datatype_is_integer(DataType t);
bool datatype_known(std::int16_t code);

/// Which header field the voxel-to-world transform came from.
enum class AffineSource { SForm, QForm, Spacing, Constructed };
const char* to_string(AffineSource s);

/// Sampling lattice: dims, spacing and a voxel-to-world affine (RAS+ world, mm).
struct GridSpec {
  Index3 dims{1, 1, 1};
  Vec3 spacing = Vec3::Ones();
  Mat4 voxel_to_world = Mat4::Identity();

  /// Grid whose spacing is taken from the column norms of the affine.
  static GridSpec from_affine(const Index3& dims, const Mat4& voxel_to_world);
  /// Axis-aligned grid with the given spacing and world origin of voxel 0.
  static GridSpec axis_aligned(const Index3& dims, const Vec3& spacing, const Vec3& origin = Vec3::Zero());

  std::int64_t size() const { return voxel_count(dims); }
  Mat4 world_to_voxel() const;
  Vec3 to_world(const Vec3& voxel) const {
    return voxel_to_world.topLeftCorner<3, 3>() * voxel + voxel_to_world.topRightCorner<3, 1>();
  }
  Vec3 to_voxel(const Vec3& world) const;

  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;
  bool same_lattice(const GridSpec& o, double tol = 1e-9) const;
};

/// Three-letter anatomical code naming the direction each voxel axis points
/// (e.g. "RAS", "LPS"), extracted by dominant-axis assignment.
std::string orientation_code(const Mat4& voxel_to_world);
bool valid_orientation_code(const std::string& code);

struct VolumeHeader {
  GridSpec grid;
  DataType datatype = DataType::Float64;
  std::string description;
  AffineSource affine_source = AffineSource::Constructed;
  std::vector<char> extension_bytes;  ///< raw NIfTI extensions, passed through

  std::string orientation() const { return orientation_code(grid.voxel_to_world); }
};

/// Dense 3D scalar grid in x-fastest order.
template <typename Scalar>
class Volume {
 public:
  using value_type = Scalar;
  using Storage = std::vector<Scalar, TrackedAllocator<Scalar>>;

  Volume() = default;
  explicit Volume(const GridSpec& grid, Scalar fill = Scalar(0)) : data_(static_cast<std::size_t>(grid.size()), fill) {
    header_.grid = grid;
    header_.datatype = default_datatype();
  }
  Volume(const VolumeHeader& header, Storage data) : header_(header), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != header_.grid.size())
      throw std::invalid_argument("volume data length does not match dims");
  }

  const VolumeHeader& header() const { return header_; }
  VolumeHeader& header() { return header_; }
  const GridSpec& grid() const { return header_.grid; }
  const Index3& dims() const { return header_.grid.dims; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  std::span<const Scalar> data() const { return data_; }
  std::span<Scalar> data() { return data_; }

  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    const auto& d = dims();
    return i + d[0] * (j + d[1] * k);
  }
  bool contains(std::int64_t i, std::int64_t j, std::int64_t k) const {
    const auto& d = dims();
    return i >= 0 && j >= 0 && k >= 0 && i < d[0] && j < d[1] && k < d[2];
  }
  Scalar operator()(std::int64_t i, std::int64_t j, std::int64_t k) const { return data_[index(i, j, k)]; }
  Scalar& operator()(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[index(i, j, k)]; }
  Scalar operator[](std::int64_t n) const { return data_[n]; }
  Scalar& operator[](std::int64_t n) { return data_[n]; }

  static DataType default_datatype() {
    if constexpr (std::is_floating_point_v<Scalar>) {
      return DataType::Float64;
    } else {
      return DataType::Int32;
    }
  }

 private:
  VolumeHeader header_;
  Storage data_;
};

using Image = Volume<double>;
/// Integer segmentation; 0 is background.
using LabelVolume = Volume<Label>;

/// Sorted distinct nonzero label codes present in the volume.
std::vector<Label> label_set(const LabelVolume& lv);

template <typename Scalar>
bool all_finite(const Volume<Scalar>& v) {
  if constexpr (std::is_floating_point_v<Scalar>) {
    for (Scalar x : v.data())
      if (!std::isfinite(x)) return false;
  }
  return true;
}

/// Calls fn(i, j, k, linear_index) for every voxel in storage order.
template <typename Fn>
void for_each_voxel(const Index3& dims, Fn&& fn) {
  std::int64_t n = 0;
  for (std::int64_t k = 0; k < dims[2]; ++k)
    for (std::int64_t j = 0; j < dims[1]; ++j)
      for (std::int64_t i = 0; i < dims[0]; ++i, ++n) fn(i, j, k, n);
}

}  // namespace regeval
