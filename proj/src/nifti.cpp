#include "regeval/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace regeval {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kNifti2HeaderSize = 540;

template <typename T>
T byteswap_value(T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  std::reverse(b, b + sizeof(T));
  std::memcpy(&v, b, sizeof(T));
  return v;
}

template <typename T>
T get(std::span<const unsigned char> bytes, std::size_t off, bool swap) {
  T v;
  std::memcpy(&v, bytes.data() + off, sizeof(T));
  return swap ? byteswap_value(v) : v;
}

template <typename T>
void put(std::vector<unsigned char>& bytes, std::size_t off, T v, bool swap) {
  if (swap) v = byteswap_value(v);
  std::memcpy(bytes.data() + off, &v, sizeof(T));
}

std::string get_string(std::span<const unsigned char> bytes, std::size_t off, std::size_t len) {
  std::string s(reinterpret_cast<const char*>(bytes.data() + off), len);
  auto nul = s.find('\0');
  if (nul != std::string::npos) s.resize(nul);
  return s;
}

std::vector<unsigned char> slurp(const std::filesystem::path& path, bool* gzipped) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path.string());
  unsigned char magic[2] = {0, 0};
  probe.read(reinterpret_cast<char*>(magic), 2);
  if (gzipped) *gzipped = probe.gcount() == 2 && magic[0] == 0x1f && magic[1] == 0x8b;
  probe.close();

  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> out;
  std::vector<unsigned char> buf(1 << 16);
  for (;;) {
    int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      gzclose(f);
      throw CorruptionError("decompression failed for " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

bool has_gz_suffix(const std::filesystem::path& p) { return p.extension() == ".gz"; }

void spill(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb6");
    if (!f) throw IoError("cannot write " + path.string());
    std::size_t done = 0;
    while (done < bytes.size()) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
      if (gzwrite(f, bytes.data() + done, chunk) != static_cast<int>(chunk)) {
        gzclose(f);
        throw IoError("write failed for " + path.string());
      }
      done += chunk;
    }
    if (gzclose(f) != Z_OK) throw IoError("write failed for " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Mat4 qform_matrix(double b, double c, double d, double qx, double qy, double qz, const Vec3& pix, double qfac) {
  double a = 1.0 - (b * b + c * c + d * d);
  if (a < 1e-7) {
    const double n = 1.0 / std::sqrt(b * b + c * c + d * d);
    b *= n;
    c *= n;
    d *= n;
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  Mat3 r;
  r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
      2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
      2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
  Vec3 s = pix;
  s[2] *= qfac;
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = r * s.asDiagonal();
  m.topRightCorner<3, 1>() = Vec3(qx, qy, qz);
  return m;
}

double decode_one(const unsigned char* p, DataType t, bool swap) {
  auto rd = [&](auto tag) {
    using T = decltype(tag);
    T v;
    std::memcpy(&v, p, sizeof(T));
    if (swap) v = byteswap_value(v);
    return static_cast<double>(v);
  };
  switch (t) {
    case DataType::UInt8: return rd(std::uint8_t{});
    case DataType::Int8: return rd(std::int8_t{});
    case DataType::Int16: return rd(std::int16_t{});
    case DataType::UInt16: return rd(std::uint16_t{});
    case DataType::Int32: return rd(std::int32_t{});
    case DataType::UInt32: return rd(std::uint32_t{});
    case DataType::Int64: return rd(std::int64_t{});
    case DataType::UInt64: return rd(std::uint64_t{});
    case DataType::Float32: return rd(float{});
    case DataType::Float64: return rd(double{});
  }
  return 0.0;
}

template <typename T>
void encode_int(unsigned char* p, double v, bool swap) {
  if (v != std::floor(v) || v < static_cast<double>(std::numeric_limits<T>::lowest()) ||
      v > static_cast<double>(std::numeric_limits<T>::max()))
    throw std::invalid_argument("value not representable in the declared integer datatype");
  T x = static_cast<T>(v);
  if (swap) x = byteswap_value(x);
  std::memcpy(p, &x, sizeof(T));
}

void encode_one(unsigned char* p, double v, DataType t, bool swap) {
  switch (t) {
    case DataType::UInt8: return encode_int<std::uint8_t>(p, v, swap);
    case DataType::Int8: return encode_int<std::int8_t>(p, v, swap);
    case DataType::Int16: return encode_int<std::int16_t>(p, v, swap);
    case DataType::UInt16: return encode_int<std::uint16_t>(p, v, swap);
    case DataType::Int32: return encode_int<std::int32_t>(p, v, swap);
    case DataType::UInt32: return encode_int<std::uint32_t>(p, v, swap);
    case DataType::Int64: return encode_int<std::int64_t>(p, v, swap);
    case DataType::UInt64: return encode_int<std::uint64_t>(p, v, swap);
    case DataType::Float32: {
      float x = static_cast<float>(v);
      if (swap) x = byteswap_value(x);
      std::memcpy(p, &x, 4);
      return;
    }
    case DataType::Float64: {
      double x = swap ? byteswap_value(v) : v;
      std::memcpy(p, &x, 8);
      return;
    }
  }
}

// Quaternion parameters for a rotation-times-spacing affine; false when the
// 3x3 block is not a scaled rotation (the q-form cannot represent it).
bool affine_to_quaternion(const Mat4& a, const Vec3& spacing, Eigen::Vector4d& quat, double& qfac) {
  Mat3 r = a.topLeftCorner<3, 3>() * spacing.cwiseInverse().asDiagonal();
  qfac = 1.0;
  if (r.determinant() < 0) {
    r.col(2) = -r.col(2);
    qfac = -1.0;
  }
  if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-5) return false;
  Eigen::Quaterniond q(r);
  q.normalize();
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  quat = Eigen::Vector4d(q.w(), q.x(), q.y(), q.z());
  return true;
}

}  // namespace

RawNifti parse_nifti_header(std::span<const unsigned char> bytes, bool* swapped) {
  if (bytes.size() < 4) throw CorruptionError("truncated NIfTI header");
  std::int32_t sizeof_hdr = get<std::int32_t>(bytes, 0, false);
  if (sizeof_hdr == kNifti2HeaderSize || byteswap_value(sizeof_hdr) == kNifti2HeaderSize)
    throw FormatError("NIfTI-2 files are not supported (only NIfTI-1)");
  if (bytes.size() < static_cast<std::size_t>(kHeaderSize)) throw CorruptionError("truncated NIfTI header");

  const std::string magic = get_string(bytes, 344, 4);
  if (magic == "ni1") throw FormatError("split .hdr/.img NIfTI pairs are not supported");
  if (magic != "n+1") throw FormatError("bad NIfTI magic bytes");

  std::int16_t dim0 = get<std::int16_t>(bytes, 40, false);
  bool swap = false;
  if (dim0 < 1 || dim0 > 7) {
    swap = true;
    dim0 = byteswap_value(dim0);
    if (dim0 < 1 || dim0 > 7) throw FormatError("cannot determine byte order: dim[0] out of range");
  }
  if (get<std::int32_t>(bytes, 0, swap) != kHeaderSize) throw FormatError("sizeof_hdr is not 348");
  if (swapped) *swapped = swap;
  if (dim0 > 5) throw FormatError("more than 5 dimensions is not supported");

  RawNifti raw;
  for (int d = 0; d < dim0; ++d) {
    const std::int16_t n = get<std::int16_t>(bytes, 42 + 2 * d, swap);
    if (n < 1) throw FormatError("non-positive dimension size");
    raw.dims[d] = n;
  }
  const std::int16_t dt = get<std::int16_t>(bytes, 70, swap);
  if (!datatype_known(dt)) throw FormatError("unsupported NIfTI datatype code " + std::to_string(dt));
  raw.header.datatype = static_cast<DataType>(dt);
  raw.intent_code = get<std::int16_t>(bytes, 68, swap);

  std::array<double, 8> pixdim{};
  for (int d = 0; d < 8; ++d) pixdim[d] = get<float>(bytes, 76 + 4 * d, swap);
  raw.vox_offset = get<float>(bytes, 108, swap);
  raw.scl_slope = get<float>(bytes, 112, swap);
  raw.scl_inter = get<float>(bytes, 116, swap);
  raw.header.description = get_string(bytes, 148, 80);

  Vec3 spacing;
  for (int a = 0; a < 3; ++a) spacing[a] = pixdim[a + 1] > 0 ? pixdim[a + 1] : 1.0;

  const std::int16_t qform_code = get<std::int16_t>(bytes, 252, swap);
  const std::int16_t sform_code = get<std::int16_t>(bytes, 254, swap);
  Mat4 affine = Mat4::Identity();
  AffineSource source = AffineSource::Spacing;
  if (sform_code > 0) {
    Mat4 s = Mat4::Identity();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) s(r, c) = get<float>(bytes, 280 + 16 * r + 4 * c, swap);
    const double det = s.topLeftCorner<3, 3>().determinant();
    if (std::isfinite(det) && std::abs(det) > 1e-12) {
      affine = s;
      source = AffineSource::SForm;
    }
  }
  if (source == AffineSource::Spacing && qform_code > 0) {
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    affine = qform_matrix(get<float>(bytes, 256, swap), get<float>(bytes, 260, swap), get<float>(bytes, 264, swap),
                          get<float>(bytes, 268, swap), get<float>(bytes, 272, swap), get<float>(bytes, 276, swap),
                          spacing, qfac);
    source = AffineSource::QForm;
  }
  if (source == AffineSource::Spacing) affine.topLeftCorner<3, 3>() = spacing.asDiagonal();

  raw.header.grid = GridSpec::from_affine({raw.dims[0], raw.dims[1], raw.dims[2]}, affine);
  raw.header.affine_source = source;

  if (!swap && raw.vox_offset > kHeaderSize + 4 && bytes.size() >= static_cast<std::size_t>(raw.vox_offset) &&
      bytes[348] != 0) {
    const auto* b = reinterpret_cast<const char*>(bytes.data());
    raw.header.extension_bytes.assign(b + kHeaderSize + 4, b + static_cast<std::size_t>(raw.vox_offset));
  }
  return raw;
}

RawNifti read_nifti_raw(const std::filesystem::path& path, ReadInfo* info) {
  bool gz = false;
  const std::vector<unsigned char> bytes = slurp(path, &gz);
  bool swap = false;
  RawNifti raw = parse_nifti_header(bytes, &swap);
  if (info) {
    info->gzipped = gz;
    info->byte_swapped = swap;
  }

  std::int64_t count = 1;
  for (auto d : raw.dims) count *= d;
  const int bpv = datatype_bytes(raw.header.datatype);
  const auto offset = static_cast<std::size_t>(raw.vox_offset < kHeaderSize ? 352 : raw.vox_offset);
  const std::size_t need = offset + static_cast<std::size_t>(count) * bpv;
  if (bytes.size() < need) throw CorruptionError("truncated NIfTI data section in " + path.string());

  raw.values.resize(static_cast<std::size_t>(count));
  const bool scaled = raw.scl_slope != 0.0 && !(raw.scl_slope == 1.0 && raw.scl_inter == 0.0);
  for (std::int64_t n = 0; n < count; ++n) {
    double v = decode_one(bytes.data() + offset + n * bpv, raw.header.datatype, swap);
    if (scaled) v = v * raw.scl_slope + raw.scl_inter;
    raw.values[n] = v;
  }
  if (scaled) {
    raw.header.datatype = DataType::Float64;
    raw.scl_slope = 1.0;
    raw.scl_inter = 0.0;
  }
  return raw;
}

void write_nifti_raw(const RawNifti& raw, const std::filesystem::path& path, const WriteOptions& opts) {
  raw.header.grid.validate();
  int ndim = 5;
  while (ndim > 1 && raw.dims[ndim - 1] == 1) --ndim;
  ndim = std::max(ndim, 3);
  std::int64_t count = 1;
  for (auto d : raw.dims) {
    if (d < 1 || d > std::numeric_limits<std::int16_t>::max()) throw std::invalid_argument("dimension out of NIfTI-1 range");
    count *= d;
  }
  if (static_cast<std::int64_t>(raw.values.size()) != count) throw std::invalid_argument("value count does not match dims");

  const bool swap = opts.big_endian;
  const auto& ext = raw.header.extension_bytes;
  const std::size_t vox_offset = kHeaderSize + 4 + ext.size();
  const DataType dt = raw.header.datatype;
  const int bpv = datatype_bytes(dt);
  std::vector<unsigned char> bytes(vox_offset + static_cast<std::size_t>(count) * bpv, 0);

  const GridSpec& g = raw.header.grid;
  put<std::int32_t>(bytes, 0, kHeaderSize, swap);
  put<char>(bytes, 38, 'r', false);
  put<std::int16_t>(bytes, 40, static_cast<std::int16_t>(ndim), swap);
  for (int d = 0; d < 7; ++d)
    put<std::int16_t>(bytes, 42 + 2 * d, static_cast<std::int16_t>(d < 5 ? raw.dims[d] : 1), swap);
  put<std::int16_t>(bytes, 68, raw.intent_code, swap);
  put<std::int16_t>(bytes, 70, static_cast<std::int16_t>(dt), swap);
  put<std::int16_t>(bytes, 72, static_cast<std::int16_t>(8 * bpv), swap);

  Eigen::Vector4d quat;
  double qfac = 1.0;
  const bool has_q = affine_to_quaternion(g.voxel_to_world, g.spacing, quat, qfac);
  put<float>(bytes, 76, static_cast<float>(qfac), swap);
  for (int a = 0; a < 3; ++a) put<float>(bytes, 80 + 4 * a, static_cast<float>(g.spacing[a]), swap);
  for (int a = 3; a < 7; ++a) put<float>(bytes, 80 + 4 * a, 1.0f, swap);
  put<float>(bytes, 108, static_cast<float>(vox_offset), swap);
  put<float>(bytes, 112, 1.0f, swap);
  put<float>(bytes, 116, 0.0f, swap);
  put<char>(bytes, 123, 2, false);  // mm

  const std::string desc = raw.header.description.substr(0, 79);
  std::memcpy(bytes.data() + 148, desc.data(), desc.size());

  put<std::int16_t>(bytes, 252, static_cast<std::int16_t>(has_q ? 1 : 0), swap);
  put<std::int16_t>(bytes, 254, 1, swap);
  if (has_q) {
    for (int q = 0; q < 3; ++q) put<float>(bytes, 256 + 4 * q, static_cast<float>(quat[q + 1]), swap);
    for (int a = 0; a < 3; ++a) put<float>(bytes, 268 + 4 * a, static_cast<float>(g.voxel_to_world(a, 3)), swap);
  }
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) put<float>(bytes, 280 + 16 * r + 4 * c, static_cast<float>(g.voxel_to_world(r, c)), swap);
  std::memcpy(bytes.data() + 344, "n+1\0", 4);

  if (!ext.empty()) {
    bytes[348] = 1;
    std::memcpy(bytes.data() + kHeaderSize + 4, ext.data(), ext.size());
  }
  for (std::int64_t n = 0; n < count; ++n) encode_one(bytes.data() + vox_offset + n * bpv, raw.values[n], dt, swap);
  spill(path, bytes);
}

Image read_image(const std::filesystem::path& path, const ReadOptions& opts, ReadInfo* info) {
  ReadInfo local;
  RawNifti raw = read_nifti_raw(path, &local);
  if (raw.dims[3] != 1 || raw.dims[4] != 1) throw FormatError("expected a 3D volume, got extra dimensions");
  Image::Storage data(raw.values.begin(), raw.values.end());
  for (auto& x : data) {
    if (!std::isfinite(x)) {
      if (!opts.allow_nonfinite) throw CorruptionError("non-finite voxel value in " + path.string());
      x = 0.0;
      ++local.nonfinite_replaced;
    }
  }
  if (info) *info = local;
  return Image(raw.header, std::move(data));
}

LabelVolume read_labels(const std::filesystem::path& path, ReadInfo* info) {
  RawNifti raw = read_nifti_raw(path, info);
  if (raw.dims[3] != 1 || raw.dims[4] != 1) throw FormatError("expected a 3D label volume, got extra dimensions");
  LabelVolume::Storage data(raw.values.size());
  for (std::size_t n = 0; n < raw.values.size(); ++n) {
    const double v = raw.values[n];
    const double r = std::round(v);
    if (!std::isfinite(v) || std::abs(v - r) > 1e-6 || r < std::numeric_limits<Label>::min() ||
        r > std::numeric_limits<Label>::max())
      throw LabelIntegrityError("non-integer label value in " + path.string());
    data[n] = static_cast<Label>(r);
  }
  VolumeHeader h = raw.header;
  if (!datatype_is_integer(h.datatype)) h.datatype = DataType::Int32;
  return LabelVolume(h, std::move(data));
}

namespace {

template <typename Scalar>
RawNifti to_raw(const Volume<Scalar>& v) {
  RawNifti raw;
  raw.header = v.header();
  raw.dims = {v.dims()[0], v.dims()[1], v.dims()[2], 1, 1};
  raw.values.assign(v.data().begin(), v.data().end());
  return raw;
}

}  // namespace

void write_image(const Image& v, const std::filesystem::path& path, const WriteOptions& opts) {
  if (!all_finite(v)) throw std::invalid_argument("refusing to write a volume containing NaN/Inf");
  write_nifti_raw(to_raw(v), path, opts);
}

void write_labels(const LabelVolume& v, const std::filesystem::path& path, const WriteOptions& opts) {
  RawNifti raw = to_raw(v);
  if (!datatype_is_integer(raw.header.datatype)) raw.header.datatype = DataType::Int32;
  write_nifti_raw(raw, path, opts);
}

}  // namespace regeval
