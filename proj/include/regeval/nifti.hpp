#pragma once

#include "regeval/volume.hpp"

#include <filesystem>

namespace regeval {

struct ReadOptions {
  /// Replace NaN/Inf voxels with 0 instead of failing.
  bool allow_nonfinite = false;
};

struct ReadInfo {
  std::int64_t nonfinite_replaced = 0;
  bool byte_swapped = false;
  bool gzipped = false;
};

struct WriteOptions {
  /// Big-endian output exists only to exercise the reader; default is little.
  bool big_endian = false;
};

/// Reads a single-file NIfTI-1 scalar volume (.nii or .nii.gz).
///
/// The affine comes from the s-form when its code is nonzero and its 3x3 is
/// nonsingular, else from the q-form, else from pixdim; the choice is stored
/// in header().affine_source. scl_slope/scl_inter are applied when they are
/// not the identity, in which case the in-memory datatype becomes Float64.
Image read_image(const std::filesystem::path& path, const ReadOptions& opts = {}, ReadInfo* info = nullptr);

/// Reads an integer-coded segmentation. Float files are accepted when every
/// value lies within 1e-6 of an integer; anything else throws
/// LabelIntegrityError.
LabelVolume read_labels(const std::filesystem::path& path, ReadInfo* info = nullptr);

void write_image(const Image& v, const std::filesystem::path& path, const WriteOptions& opts = {});
void write_labels(const LabelVolume& v, const std::filesystem::path& path, const WriteOptions& opts = {});

/// Raw decoded file: header plus voxel data as doubles, with up to five dims.
/// Shared by scalar volumes and the 5D vector layout used for displacement
/// fields.
struct RawNifti {
  VolumeHeader header;
  std::array<std::int64_t, 5> dims{1, 1, 1, 1, 1};
  std::int16_t intent_code = 0;
  double vox_offset = 352.0;
  double scl_slope = 0.0;
  double scl_inter = 0.0;
  std::vector<double> values;
};

RawNifti read_nifti_raw(const std::filesystem::path& path, ReadInfo* info = nullptr);
void write_nifti_raw(const RawNifti& raw, const std::filesystem::path& path, const WriteOptions& opts = {});

/// Parses the fixed 348-byte header only (exposed for format tests).
RawNifti parse_nifti_header(std::span<const unsigned char> bytes, bool* swapped = nullptr);

}  // namespace regeval
