#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace regeval {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Index3 = std::array<std::int64_t, 3>;
using Label = std::int32_t;

// Error taxonomy. Argument errors use std::invalid_argument directly.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LabelIntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TransformIntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ManifestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::int64_t voxel_count(const Index3& dims) { return dims[0] * dims[1] * dims[2]; }

}  // namespace regeval
