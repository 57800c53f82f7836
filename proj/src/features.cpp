#include "regeval/features.hpp"

#include "regeval/stats.hpp"

#include <algorithm>
#include <cmath>

namespace regeval {

void MindConfig::validate() const {
  if (patch_radius < 1) throw std::invalid_argument("MIND patch_radius must be >= 1");
  if (!(variance_floor > 0.0)) throw std::invalid_argument("MIND variance_floor must be positive");
  if (patch_sigma < 0.0) throw std::invalid_argument("MIND patch_sigma must be >= 0");
}

const std::array<Index3, 6>& mind_offsets() {
  static const std::array<Index3, 6> offsets = {{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  return offsets;
}

namespace {

constexpr double kAbsoluteVarianceFloor = 1e-30;

std::vector<double> patch_kernel(const MindConfig& cfg) {
  const double sigma = cfg.patch_sigma > 0 ? cfg.patch_sigma : static_cast<double>(cfg.patch_radius);
  std::vector<double> w(2 * cfg.patch_radius + 1);
  double s = 0.0;
  for (int q = -cfg.patch_radius; q <= cfg.patch_radius; ++q) {
    w[q + cfg.patch_radius] = std::exp(-0.5 * q * q / (sigma * sigma));
    s += w[q + cfg.patch_radius];
  }
  for (double& x : w) x /= s;
  return w;
}

double intensity_variance(const Image& v) {
  const double n = static_cast<double>(v.size());
  const double mean = ordered_sum(v.size(), [&](std::int64_t i) { return v[i]; }) / n;
  return ordered_sum(v.size(), [&](std::int64_t i) { return (v[i] - mean) * (v[i] - mean); }) / n;
}

}  // namespace

MindFeatures mind(const Image& v, const MindConfig& cfg) {
  cfg.validate();
  if (!all_finite(v)) throw std::invalid_argument("mind: image contains non-finite values");
  const Index3 d = v.dims();
  const auto kernel = patch_kernel(cfg);
  const std::array<std::vector<double>, 3> kernels{kernel, kernel, kernel};
  const double floor = std::max(cfg.variance_floor * intensity_variance(v), kAbsoluteVarianceFloor);

  MindFeatures out;
  out.channels.reserve(6);
  for (const Index3& r : mind_offsets()) {
    Image sq(v.grid());
    for_each_voxel(d, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
      const double nb = v(detail::clamp_index(i + r[0], d[0]), detail::clamp_index(j + r[1], d[1]),
                          detail::clamp_index(k + r[2], d[2]));
      const double diff = v[n] - nb;
      sq[n] = diff * diff;
    });
    out.channels.push_back(convolve_separable(sq, kernels));
  }

  const std::int64_t n = v.size();
  parallel_for(n, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t x = b; x < e; ++x) {
      double var = 0.0;
      for (const auto& c : out.channels) var += c[x];
      var = std::max(var / 6.0, floor);
      double mx = 0.0;
      for (auto& c : out.channels) {
        c[x] = std::exp(-c[x] / var);
        mx = std::max(mx, c[x]);
      }
      for (auto& c : out.channels) c[x] /= mx;
    }
  });
  for (auto& c : out.channels) c.header().description = "MIND";
  return out;
}

double mind_ssd(const Image& a, const Image& b, const MindConfig& cfg) {
  if (!a.grid().same_lattice(b.grid(), 1e-9)) throw std::invalid_argument("mind_ssd: grid mismatch");
  const MindFeatures fa = mind(a, cfg), fb = mind(b, cfg);
  const std::int64_t n = a.size();
  const double s = ordered_sum(n, [&](std::int64_t x) {
    double acc = 0.0;
    for (std::size_t c = 0; c < fa.channels.size(); ++c) {
      const double diff = fa.channels[c][x] - fb.channels[c][x];
      acc += diff * diff;
    }
    return acc;
  });
  return s / static_cast<double>(n * static_cast<std::int64_t>(fa.channels.size()));
}

PointLoss mind_ssd_at_points(const MindFeatures& fixed, const MindFeatures& moving, std::span<const Vec3> points) {
  const std::int64_t n = fixed.channels.front().size();
  if (static_cast<std::int64_t>(points.size()) != n) throw std::invalid_argument("mind_ssd: one point per fixed voxel");
  const std::size_t channels = fixed.channels.size();
  const double scale = 1.0 / static_cast<double>(n * static_cast<std::int64_t>(channels));
  PointLoss out;
  out.grad.assign(static_cast<std::size_t>(n), Vec3::Zero());
  std::vector<double> per_voxel(static_cast<std::size_t>(n));
  parallel_for(n, [&](std::int64_t b, std::int64_t e) {
    Vec3 g;
    for (std::int64_t x = b; x < e; ++x) {
      double acc = 0.0;
      Vec3 grad = Vec3::Zero();
      for (std::size_t c = 0; c < channels; ++c) {
        const double m = sample_trilinear_grad(moving.channels[c], points[x], Border::Clamp, g);
        const double diff = m - fixed.channels[c][x];
        acc += diff * diff;
        grad += (2.0 * diff * scale) * g;
      }
      per_voxel[x] = acc;
      out.grad[x] = grad;
    }
  });
  out.loss = ordered_sum(n, [&](std::int64_t x) { return per_voxel[x]; }) * scale;
  return out;
}

MindSsdResult mind_ssd(const Image& fixed, const Image& moving, const DisplacementField& u, const MindConfig& cfg) {
  if (!u.grid.same_lattice(fixed.grid(), 1e-9)) throw std::invalid_argument("mind_ssd: field must live on the fixed grid");
  u.validate();
  const MindFeatures ff = mind(fixed, cfg), fm = mind(moving, cfg);
  const PointMap map(fixed.grid(), moving.grid(), AffineTransform::identity(), &u);
  std::vector<Vec3> points(static_cast<std::size_t>(fixed.size()));
  for_each_voxel(fixed.dims(), [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    points[n] = map(i, j, k);
  });
  PointLoss pl = mind_ssd_at_points(ff, fm, points);
  const Mat3 lin = (moving.grid().world_to_voxel() * fixed.grid().voxel_to_world).topLeftCorner<3, 3>();
  MindSsdResult r;
  r.loss = pl.loss;
  r.gradient = DisplacementField(fixed.grid());
  for (std::int64_t n = 0; n < fixed.size(); ++n) r.gradient.vectors[n] = lin.transpose() * pl.grad[n];
  return r;
}

const char* to_string(ModalityGuess g) { return g == ModalityGuess::Unimodal ? "unimodal" : "multimodal"; }

HistogramProfile histogram_profile(const Image& v, const LabelVolume* mask) {
  if (!all_finite(v)) throw std::invalid_argument("histogram_profile: image contains non-finite values");
  if (mask && !mask->grid().same_lattice(v.grid(), 1e-6))
    throw std::invalid_argument("histogram_profile: mask grid mismatch");
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(v.size()));
  for (std::int64_t n = 0; n < v.size(); ++n)
    if (!mask || (*mask)[n] != 0) values.push_back(v[n]);
  if (values.empty()) throw std::invalid_argument("histogram_profile: empty mask");

  HistogramProfile p;
  p.robust_low = stats::quantile(values, 0.005);
  p.robust_high = stats::quantile(values, 0.995);
  const double width = p.robust_high - p.robust_low;
  p.bin_edges.resize(kHistogramBins + 1);
  for (int b = 0; b <= kHistogramBins; ++b)
    p.bin_edges[b] = p.robust_low + (width > 0 ? width : 1.0) * b / kHistogramBins;
  p.counts.assign(kHistogramBins, 0);
  for (double x : values) {
    int b = 0;
    if (width > 0) {
      const double pos = std::floor((x - p.robust_low) / width * kHistogramBins);
      b = static_cast<int>(std::clamp(pos, 0.0, double(kHistogramBins - 1)));
    }
    ++p.counts[b];
  }

  std::vector<double> smooth(kHistogramBins);
  for (int b = 0; b < kHistogramBins; ++b) {
    double s = 0.0;
    int c = 0;
    for (int q = std::max(0, b - 1); q <= std::min(kHistogramBins - 1, b + 1); ++q, ++c) s += double(p.counts[q]);
    smooth[b] = s / c;
  }
  const double tallest = *std::max_element(smooth.begin(), smooth.end());

  // Topographic prominence: height above the higher of the two lowest points
  // reached on each side before climbing above the peak (or hitting an edge).
  for (int b = 0; b < kHistogramBins; ++b) {
    const double h = smooth[b];
    if (h <= 0.0) continue;
    if (b > 0 && !(h > smooth[b - 1])) continue;
    if (b + 1 < kHistogramBins && h < smooth[b + 1]) continue;
    double left_min = h, right_min = h;
    for (int q = b - 1; q >= 0 && smooth[q] <= h; --q) left_min = std::min(left_min, smooth[q]);
    for (int q = b + 1; q < kHistogramBins && smooth[q] <= h; ++q) right_min = std::min(right_min, smooth[q]);
    const double prominence = h - std::max(left_min, right_min);
    if (prominence > 0.0 && prominence >= kPeakProminence * tallest) p.peaks.push_back({b, prominence});
  }
  std::stable_sort(p.peaks.begin(), p.peaks.end(),
                   [](const HistogramPeak& x, const HistogramPeak& y) { return x.prominence > y.prominence; });

  bool low = false, high = false;
  for (const auto& pk : p.peaks) {
    const double centre = (pk.bin + 0.5) / kHistogramBins;
    if (centre < kOuterFraction) low = true;
    if (centre > 1.0 - kOuterFraction) high = true;
  }
  p.modality_guess = p.peaks.size() >= 2 && low && high ? ModalityGuess::Multimodal : ModalityGuess::Unimodal;
  return p;
}

}  // namespace regeval
