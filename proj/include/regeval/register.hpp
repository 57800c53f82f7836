#pragma once

#include "regeval/features.hpp"
#include "regeval/geometry.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace regeval {

enum class Similarity { SSD, LNCC, MIND };
const char* to_string(Similarity s);
Similarity parse_similarity(const std::string& s);

/// Normalized sampled Gaussian, radius ceil(3 sigma); {1} for sigma == 0.
std::vector<double> gaussian_kernel(double sigma_voxels);

/// Separable Gaussian with sigma given in mm (converted per axis through the
/// grid spacing). sigma == 0 returns the input unchanged.
Image gaussian_smooth(const Image& v, double sigma_mm);
DisplacementField gaussian_smooth(const DisplacementField& u, double sigma_mm);

/// Gaussian pre-smoothing (sigma = 0.5 factor voxels) then subsampling every
/// `factor` voxels. Voxel 0 keeps its world position.
Image downsample(const Image& v, int factor);

struct LnccResult {
  double loss = 0.0;  ///< minus the mean local squared correlation
  Image gradient;     ///< d loss / d moving intensity
};

/// Local normalized cross-correlation over (2 radius + 1)^3 windows clipped to
/// the volume. Per voxel cc = (A^2 + eps) / (B C + eps) with A the windowed
/// covariance and B, C the windowed variances; flat windows give cc = 1.
LnccResult lncc(const Image& fixed, const Image& moving, int radius);

inline constexpr double kLnccEpsilon = 1e-9;

/// Similarity of fixed against moving sampled at one point per fixed voxel
/// (moving voxel coordinates), with d loss / d point.
class SimilarityEvaluator {
 public:
  SimilarityEvaluator(const Image& fixed, const Image& moving, Similarity kind, int lncc_radius = 2,
                      const MindConfig& mind_cfg = {});

  PointLoss evaluate(std::span<const Vec3> points) const;
  Similarity kind() const { return kind_; }

 private:
  const Image& fixed_;
  const Image& moving_;
  Similarity kind_;
  int lncc_radius_;
  MindFeatures fixed_mind_, moving_mind_;
};

struct RegistrationLevel {
  int factor = 1;
  int iterations = 0;
};

struct RegistrationConfig {
  std::vector<RegistrationLevel> levels{{4, 100}, {2, 100}, {1, 50}};
  Similarity similarity = Similarity::LNCC;
  int lncc_radius = 2;
  double step_size = 1.0;  ///< max update magnitude per iteration, level voxels
  double field_smoothing_sigma = 1.0;   ///< mm
  double update_smoothing_sigma = 2.0;  ///< mm
  double convergence_tol = 1e-6;        ///< relative loss change per accepted step
  int max_backtracks = 5;
  /// Accumulate a stationary velocity field and exponentiate it (scaling and
  /// squaring) instead of composing displacements directly.
  bool velocity_mode = false;
  int squarings = 6;
  MindConfig mind;

  void validate() const;
};

nlohmann::json to_json(const RegistrationConfig& cfg);
/// Missing keys keep their defaults.
RegistrationConfig registration_config_from_json(const nlohmann::json& j);

struct LossSample {
  int level = 0;
  int iteration = 0;
  double loss = 0.0;
};

struct RegistrationResult {
  AffineTransform affine;
  DisplacementField field;  ///< on the fixed grid, fixed voxel units
  std::vector<LossSample> loss_trace;
  double min_jacobian = 1.0;
  std::size_t peak_memory_bytes = 0;
  RegistrationConfig config;
};

struct OptimizationError : std::runtime_error {
  OptimizationError(const std::string& what, std::vector<double> trace)
      : std::runtime_error(what), loss_trace(std::move(trace)) {}
  std::vector<double> loss_trace;
};

struct AffineOptions {
  std::vector<int> factors{4, 2, 1};
  int lncc_radius = 2;
  MindConfig mind;
};

/// Gradient descent with backtracking on 12 affine parameters (linear part
/// about the fixed image centre, plus translation) over a coarse pyramid.
/// Returns the fixed-world to moving-world transform.
AffineTransform affine_register(const Image& fixed, const Image& moving, Similarity similarity, int iterations,
                                const AffineOptions& opts = {});

/// Multi-resolution greedy registration: per iteration the similarity
/// gradient is smoothed, scaled to step_size, composed into the field, and
/// the field is smoothed; an update is accepted only if the loss decreases
/// (up to max_backtracks halvings of the step).
RegistrationResult greedy_register(const Image& fixed, const Image& moving, const AffineTransform& init,
                                   const RegistrationConfig& cfg);

}  // namespace regeval
