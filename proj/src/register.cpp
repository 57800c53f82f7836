#include "regeval/register.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

namespace regeval {

const char* to_string(Similarity s) {
  switch (s) {
    case Similarity::SSD: return "ssd";
    case Similarity::LNCC: return "lncc";
    case Similarity::MIND: return "mind";
  }
  return "?";
}

Similarity parse_similarity(const std::string& s) {
  if (s == "ssd" || s == "SSD") return Similarity::SSD;
  if (s == "lncc" || s == "LNCC") return Similarity::LNCC;
  if (s == "mind" || s == "MIND" || s == "mind-ssd" || s == "MIND-SSD") return Similarity::MIND;
  throw std::invalid_argument("unknown similarity '" + s + "' (expected ssd, lncc or mind)");
}

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma < 0.0 || !std::isfinite(sigma)) throw std::invalid_argument("gaussian sigma must be finite and >= 0");
  if (sigma == 0.0) return {1.0};
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> w(2 * r + 1);
  double s = 0.0;
  for (int k = -r; k <= r; ++k) s += w[k + r] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (double& x : w) x /= s;
  return w;
}

namespace {

std::array<std::vector<double>, 3> kernels_mm(const GridSpec& g, double sigma_mm) {
  std::array<std::vector<double>, 3> k;
  for (int a = 0; a < 3; ++a) k[a] = gaussian_kernel(sigma_mm / g.spacing[a]);
  return k;
}

Image component(const DisplacementField& u, int c) {
  Image out(u.grid);
  for (std::int64_t n = 0; n < u.size(); ++n) out[n] = u.vectors[n][c];
  return out;
}

// Sums over the window [t - r, t + r] along each axis, clipped to the volume.
Image box_sum(const Image& v, int r) {
  Image cur = v;
  const Index3 d = v.dims();
  const std::int64_t stride[3] = {1, d[0], d[0] * d[1]};
  for (int a = 0; a < 3; ++a) {
    Image next(cur.grid());
    const std::int64_t n_lines = cur.size() / d[a];
    parallel_for(n_lines, [&](std::int64_t l0, std::int64_t l1) {
      std::vector<double> prefix(static_cast<std::size_t>(d[a] + 1));
      for (std::int64_t l = l0; l < l1; ++l) {
        std::int64_t base;
        if (a == 0) {
          base = l * d[0];
        } else if (a == 1) {
          base = (l % d[0]) + (l / d[0]) * d[0] * d[1];
        } else {
          base = l;
        }
        prefix[0] = 0.0;
        for (std::int64_t t = 0; t < d[a]; ++t) prefix[t + 1] = prefix[t] + cur[base + t * stride[a]];
        for (std::int64_t t = 0; t < d[a]; ++t) {
          const std::int64_t lo = std::max<std::int64_t>(0, t - r), hi = std::min<std::int64_t>(d[a] - 1, t + r);
          next[base + t * stride[a]] = prefix[hi + 1] - prefix[lo];
        }
      }
    });
    cur = std::move(next);
  }
  return cur;
}

// Upsamples a displacement from a coarse level grid onto a finer one, through
// world coordinates.
DisplacementField resample_field(const DisplacementField& u, const GridSpec& target) {
  DisplacementField out(target);
  const Mat4 t2c = u.grid.world_to_voxel() * target.voxel_to_world;
  const Mat3 c2t = (target.world_to_voxel() * u.grid.voxel_to_world).topLeftCorner<3, 3>();
  const Mat3 lin = t2c.topLeftCorner<3, 3>();
  const Vec3 off = t2c.topRightCorner<3, 1>();
  for_each_voxel(target.dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    const Vec3 q = lin * Vec3(double(i), double(j), double(k)) + off;
    out.vectors[n] = c2t * sample_field(u, q);
  });
  return out;
}

}  // namespace

Image gaussian_smooth(const Image& v, double sigma_mm) {
  if (sigma_mm == 0.0) return v;
  return convolve_separable(v, kernels_mm(v.grid(), sigma_mm));
}

DisplacementField gaussian_smooth(const DisplacementField& u, double sigma_mm) {
  if (sigma_mm == 0.0) return u;
  const auto k = kernels_mm(u.grid, sigma_mm);
  DisplacementField out(u.grid);
  for (int c = 0; c < 3; ++c) {
    const Image s = convolve_separable(component(u, c), k);
    for (std::int64_t n = 0; n < u.size(); ++n) out.vectors[n][c] = s[n];
  }
  return out;
}

Image downsample(const Image& v, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
  if (factor == 1) return v;
  const auto w = gaussian_kernel(0.5 * factor);
  const Image s = convolve_separable(v, {w, w, w});
  Index3 dims;
  for (int a = 0; a < 3; ++a) dims[a] = (v.dims()[a] + factor - 1) / factor;
  Mat4 scale = Mat4::Identity();
  for (int a = 0; a < 3; ++a) scale(a, a) = factor;
  Image out(GridSpec::from_affine(dims, v.grid().voxel_to_world * scale));
  out.header().description = v.header().description;
  for_each_voxel(dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    out[n] = s(i * factor, j * factor, k * factor);
  });
  return out;
}

LnccResult lncc(const Image& fixed, const Image& moving, int radius) {
  if (radius < 1) throw std::invalid_argument("lncc radius must be >= 1");
  if (!fixed.grid().same_lattice(moving.grid(), 1e-9)) throw std::invalid_argument("lncc: grid mismatch");
  const std::int64_t n = fixed.size();
  // Centring on the global means limits cancellation in the window variances.
  auto centred = [n](const Image& v) {
    const double mean = ordered_sum(n, [&](std::int64_t x) { return v[x]; }) / static_cast<double>(n);
    Image out = v;
    for (auto& x : out.data()) x -= mean;
    return out;
  };
  const Image f = centred(fixed), m = centred(moving);
  Image ones(f.grid(), 1.0), ff(f.grid()), mm(f.grid()), fm(f.grid());
  for (std::int64_t x = 0; x < n; ++x) {
    ff[x] = f[x] * f[x];
    mm[x] = m[x] * m[x];
    fm[x] = f[x] * m[x];
  }
  const Image cnt = box_sum(ones, radius), sf = box_sum(f, radius), sm = box_sum(m, radius);
  const Image sff = box_sum(ff, radius), smm = box_sum(mm, radius), sfm = box_sum(fm, radius);

  // Reuse the product buffers for the per-window coefficients.
  Image& alpha = ff;
  Image& beta = mm;
  Image& alpha_fbar = fm;
  Image beta_mbar(f.grid()), cc(f.grid());
  for (std::int64_t x = 0; x < n; ++x) {
    const double c = cnt[x];
    const double a = sfm[x] - sf[x] * sm[x] / c;
    const double b = std::max(0.0, sff[x] - sf[x] * sf[x] / c);
    const double v = std::max(0.0, smm[x] - sm[x] * sm[x] / c);
    if (a * a > b * v) {
      // Rounding pushed the window past the Cauchy-Schwarz bound: saturate.
      cc[x] = 1.0;
      alpha[x] = beta[x] = alpha_fbar[x] = beta_mbar[x] = 0.0;
      continue;
    }
    const double den = b * v + kLnccEpsilon;
    const double num = a * a + kLnccEpsilon;
    cc[x] = num / den;
    alpha[x] = 2.0 * a / den;
    beta[x] = 2.0 * num * b / (den * den);
    alpha_fbar[x] = alpha[x] * sf[x] / c;
    beta_mbar[x] = beta[x] * sm[x] / c;
  }
  LnccResult r;
  r.loss = -ordered_sum(n, [&](std::int64_t x) { return cc[x]; }) / static_cast<double>(n);
  const Image ba = box_sum(alpha, radius), bb = box_sum(beta, radius);
  const Image baf = box_sum(alpha_fbar, radius), bbm = box_sum(beta_mbar, radius);
  r.gradient = Image(f.grid());
  const double scale = -1.0 / static_cast<double>(n);
  for (std::int64_t x = 0; x < n; ++x)
    r.gradient[x] = scale * (f[x] * ba[x] - baf[x] - m[x] * bb[x] + bbm[x]);
  return r;
}

SimilarityEvaluator::SimilarityEvaluator(const Image& fixed, const Image& moving, Similarity kind, int lncc_radius,
                                         const MindConfig& mind_cfg)
    : fixed_(fixed), moving_(moving), kind_(kind), lncc_radius_(lncc_radius) {
  if (kind == Similarity::MIND) {
    fixed_mind_ = mind(fixed, mind_cfg);
    moving_mind_ = mind(moving, mind_cfg);
  }
}

PointLoss SimilarityEvaluator::evaluate(std::span<const Vec3> points) const {
  const std::int64_t n = fixed_.size();
  if (static_cast<std::int64_t>(points.size()) != n) throw std::invalid_argument("one point per fixed voxel expected");
  if (kind_ == Similarity::MIND) return mind_ssd_at_points(fixed_mind_, moving_mind_, points);

  PointLoss out;
  out.grad.assign(static_cast<std::size_t>(n), Vec3::Zero());
  Image warped(fixed_.grid());
  parallel_for(n, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t x = b; x < e; ++x) warped[x] = sample_trilinear_grad(moving_, points[x], Border::Clamp, out.grad[x]);
  });
  if (kind_ == Similarity::SSD) {
    const double inv = 1.0 / static_cast<double>(n);
    out.loss = ordered_sum(n, [&](std::int64_t x) {
                 const double d = warped[x] - fixed_[x];
                 return d * d;
               }) * inv;
    for (std::int64_t x = 0; x < n; ++x) out.grad[x] *= 2.0 * (warped[x] - fixed_[x]) * inv;
    return out;
  }
  const LnccResult l = lncc(fixed_, warped, lncc_radius_);
  out.loss = l.loss;
  for (std::int64_t x = 0; x < n; ++x) out.grad[x] *= l.gradient[x];
  return out;
}

void RegistrationConfig::validate() const {
  if (levels.empty()) throw std::invalid_argument("registration config needs at least one level");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i].factor < 1) throw std::invalid_argument("level factors must be >= 1");
    if (levels[i].iterations < 0) throw std::invalid_argument("level iterations must be >= 0");
    if (i > 0 && levels[i].factor > levels[i - 1].factor)
      throw std::invalid_argument("level factors must be non-increasing");
  }
  if (levels.back().factor != 1) throw std::invalid_argument("the last level must have factor 1");
  if (lncc_radius < 1) throw std::invalid_argument("lncc_radius must be >= 1");
  if (!(step_size > 0.0)) throw std::invalid_argument("step_size must be positive");
  if (field_smoothing_sigma < 0.0 || update_smoothing_sigma < 0.0)
    throw std::invalid_argument("smoothing sigmas must be >= 0");
  if (convergence_tol < 0.0) throw std::invalid_argument("convergence_tol must be >= 0");
  if (max_backtracks < 0) throw std::invalid_argument("max_backtracks must be >= 0");
  if (squarings < 0) throw std::invalid_argument("squarings must be >= 0");
  mind.validate();
}

nlohmann::json to_json(const RegistrationConfig& c) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : c.levels) levels.push_back({l.factor, l.iterations});
  return {{"levels", levels},
          {"similarity", to_string(c.similarity)},
          {"lncc_radius", c.lncc_radius},
          {"step_size", c.step_size},
          {"field_smoothing_sigma", c.field_smoothing_sigma},
          {"update_smoothing_sigma", c.update_smoothing_sigma},
          {"convergence_tol", c.convergence_tol},
          {"max_backtracks", c.max_backtracks},
          {"velocity_mode", c.velocity_mode},
          {"squarings", c.squarings},
          {"mind",
           {{"patch_radius", c.mind.patch_radius},
            {"patch_sigma", c.mind.patch_sigma},
            {"variance_floor", c.mind.variance_floor}}}};
}

RegistrationConfig registration_config_from_json(const nlohmann::json& j) {
  RegistrationConfig c;
  if (!j.is_object()) throw std::invalid_argument("registration config must be a JSON object");
  if (j.contains("levels")) {
    c.levels.clear();
    for (const auto& l : j.at("levels")) {
      if (l.is_array() && l.size() == 2) {
        c.levels.push_back({l[0].get<int>(), l[1].get<int>()});
      } else {
        c.levels.push_back({l.at("factor").get<int>(), l.at("iterations").get<int>()});
      }
    }
  }
  if (j.contains("similarity")) c.similarity = parse_similarity(j.at("similarity").get<std::string>());
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  get("lncc_radius", c.lncc_radius);
  get("step_size", c.step_size);
  get("field_smoothing_sigma", c.field_smoothing_sigma);
  get("update_smoothing_sigma", c.update_smoothing_sigma);
  get("convergence_tol", c.convergence_tol);
  get("max_backtracks", c.max_backtracks);
  get("velocity_mode", c.velocity_mode);
  get("squarings", c.squarings);
  if (j.contains("mind")) {
    const auto& m = j.at("mind");
    if (m.contains("patch_radius")) c.mind.patch_radius = m.at("patch_radius").get<int>();
    if (m.contains("patch_sigma")) c.mind.patch_sigma = m.at("patch_sigma").get<double>();
    if (m.contains("variance_floor")) c.mind.variance_floor = m.at("variance_floor").get<double>();
  }
  c.validate();
  return c;
}

namespace {

void check_inputs(const Image& fixed, const Image& moving) {
  fixed.grid().validate();
  moving.grid().validate();
  if (!all_finite(fixed) || !all_finite(moving)) throw std::invalid_argument("registration inputs must be finite");
}

// Affine parameters: linear perturbation (scaled by radius) and translation.
struct AffineParams {
  Eigen::Matrix<double, 12, 1> theta = Eigen::Matrix<double, 12, 1>::Zero();

  AffineTransform to_transform(const Vec3& centre, double radius) const {
    Mat3 m;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m(r, c) = theta[3 * r + c] / radius;
    const Mat3 a = Mat3::Identity() + m;
    AffineTransform t;
    t.matrix.topLeftCorner<3, 3>() = a;
    t.matrix.topRightCorner<3, 1>() = centre - a * centre + theta.tail<3>();
    return t;
  }
};

}  // namespace

AffineTransform affine_register(const Image& fixed, const Image& moving, Similarity similarity, int iterations,
                                const AffineOptions& opts) {
  check_inputs(fixed, moving);
  if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (opts.factors.empty()) throw std::invalid_argument("affine pyramid needs at least one level");

  const Index3 d = fixed.dims();
  const Vec3 centre = fixed.grid().to_world(Vec3((d[0] - 1) / 2.0, (d[1] - 1) / 2.0, (d[2] - 1) / 2.0));
  double radius = 0.0;
  for (int a = 0; a < 3; ++a) radius = std::max(radius, 0.5 * d[a] * fixed.grid().spacing[a]);
  AffineParams params;
  std::vector<double> trace;

  for (int factor : opts.factors) {
    const Image f = downsample(fixed, factor), m = downsample(moving, factor);
    const SimilarityEvaluator eval(f, m, similarity, opts.lncc_radius, opts.mind);
    const Mat4 f2w = f.grid().voxel_to_world, w2m = m.grid().world_to_voxel();
    const Mat3 w2m_lin = w2m.topLeftCorner<3, 3>();
    std::vector<Vec3> points(static_cast<std::size_t>(f.size())), world(points.size());
    for_each_voxel(f.dims(), [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
      world[n] = (f2w * Eigen::Vector4d(double(i), double(j), double(k), 1.0)).head<3>();
    });

    auto evaluate = [&](const AffineParams& p, Eigen::Matrix<double, 12, 1>* grad) {
      const AffineTransform t = p.to_transform(centre, radius);
      const Mat4 m4 = w2m * t.matrix;
      for (std::size_t n = 0; n < points.size(); ++n)
        points[n] = m4.topLeftCorner<3, 3>() * world[n] + m4.topRightCorner<3, 1>();
      const PointLoss pl = eval.evaluate(points);
      if (!std::isfinite(pl.loss)) throw OptimizationError("affine registration produced a non-finite loss", trace);
      if (grad) {
        Mat3 gm = Mat3::Zero();
        Vec3 gt = Vec3::Zero();
        for (std::size_t n = 0; n < points.size(); ++n) {
          const Vec3 gw = w2m_lin.transpose() * pl.grad[n];
          // d T / d A at x is (x - centre) per row; A = I + M.
          gm += gw * (world[n] - centre).transpose();
          gt += gw;
        }
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) (*grad)[3 * r + c] = gm(r, c) / radius;
        grad->tail<3>() = gt;
      }
      return pl.loss;
    };

    // L-BFGS directions; the first step of a level moves half a voxel, and a
    // step is accepted only if the loss decreases (up to 12 halvings).
    using Vec12 = Eigen::Matrix<double, 12, 1>;
    const double min_spacing = f.grid().spacing.minCoeff();
    const double max_step = 2.0 * min_spacing;
    std::deque<std::pair<Vec12, Vec12>> history;
    Vec12 g;
    double loss = evaluate(params, &g);
    trace.push_back(loss);
    for (int it = 0; it < iterations; ++it) {
      if (!(g.norm() > 0.0)) break;
      Vec12 q = g;
      std::vector<double> alpha(history.size());
      for (std::size_t h = history.size(); h-- > 0;) {
        const auto& [sv, yv] = history[h];
        alpha[h] = sv.dot(q) / yv.dot(sv);
        q -= alpha[h] * yv;
      }
      if (history.empty()) {
        q *= 0.5 * min_spacing / g.norm();
      } else {
        const auto& [sv, yv] = history.back();
        q *= sv.dot(yv) / yv.dot(yv);
      }
      for (std::size_t h = 0; h < history.size(); ++h) {
        const auto& [sv, yv] = history[h];
        q += sv * (alpha[h] - yv.dot(q) / yv.dot(sv));
      }
      Vec12 dir = -q;
      if (dir.dot(g) >= 0.0) {
        history.clear();
        dir = -(0.5 * min_spacing / g.norm()) * g;
      }
      // Parameter units move points by at most about one mm each.
      if (dir.norm() > max_step) dir *= max_step / dir.norm();
      bool accepted = false;
      double t = 1.0;
      for (int bt = 0; bt < 12 && !accepted; ++bt, t *= 0.5) {
        AffineParams trial = params;
        trial.theta += t * dir;
        Vec12 tg;
        const double tl = evaluate(trial, &tg);
        if (tl < loss) {
          const Vec12 sv = trial.theta - params.theta, yv = tg - g;
          if (sv.dot(yv) > 1e-12 * sv.norm() * yv.norm()) {
            history.emplace_back(sv, yv);
            if (history.size() > 7) history.pop_front();
          }
          params = trial;
          loss = tl;
          g = tg;
          accepted = true;
          if ((t * dir).norm() < 1e-5 * min_spacing) it = iterations;
        }
      }
      if (!accepted) break;
      trace.push_back(loss);
    }
  }
  return params.to_transform(centre, radius);
}

RegistrationResult greedy_register(const Image& fixed, const Image& moving, const AffineTransform& init,
                                   const RegistrationConfig& cfg) {
  cfg.validate();
  check_inputs(fixed, moving);
  init.validate();
  MemoryTracker& mem = MemoryTracker::local();
  const std::size_t base = mem.current();
  mem.reset_peak();

  RegistrationResult result;
  result.affine = init;
  result.config = cfg;
  DisplacementField u, vel;

  for (std::size_t li = 0; li < cfg.levels.size(); ++li) {
    const RegistrationLevel& level = cfg.levels[li];
    const Image f = downsample(fixed, level.factor), m = downsample(moving, level.factor);
    if (u.vectors.empty()) {
      u = DisplacementField(f.grid());
      if (cfg.velocity_mode) vel = DisplacementField(f.grid());
    } else if (!u.grid.same_lattice(f.grid(), 1e-9)) {
      u = resample_field(u, f.grid());
      if (cfg.velocity_mode) vel = resample_field(vel, f.grid());
    }
    const SimilarityEvaluator eval(f, m, cfg.similarity, cfg.lncc_radius, cfg.mind);
    const Mat3 lin = (m.grid().world_to_voxel() * init.matrix * f.grid().voxel_to_world).topLeftCorner<3, 3>();
    std::vector<Vec3> points(static_cast<std::size_t>(f.size()));

    auto evaluate = [&](const DisplacementField& field) {
      const PointMap map(f.grid(), m.grid(), init, &field);
      for_each_voxel(f.dims(), [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
        points[n] = map(i, j, k);
      });
      return eval.evaluate(points);
    };

    PointLoss current = evaluate(u);
    result.loss_trace.push_back({static_cast<int>(li), 0, current.loss});
    for (int it = 1; it <= level.iterations; ++it) {
      auto context = [&] {
        std::ostringstream os;
        os << " at level " << li << " (factor " << level.factor << "), iteration " << it;
        return os.str();
      };
      DisplacementField grad(f.grid());
      for (std::int64_t n = 0; n < grad.size(); ++n) grad.vectors[n] = lin.transpose() * current.grad[n];
      if (!grad.finite()) throw NumericalError("non-finite similarity gradient" + context());
      grad = gaussian_smooth(grad, cfg.update_smoothing_sigma);
      double gmax = 0.0;
      for (const Vec3& g : grad.vectors) gmax = std::max(gmax, g.norm());
      if (!(gmax > 0.0)) break;

      double step = cfg.step_size;
      bool accepted = false;
      for (int bt = 0; bt <= cfg.max_backtracks && !accepted; ++bt, step *= 0.5) {
        DisplacementField update(f.grid());
        const double s = -step / gmax;
        for (std::int64_t n = 0; n < update.size(); ++n) update.vectors[n] = s * grad.vectors[n];
        DisplacementField cand_vel;
        DisplacementField cand;
        if (cfg.velocity_mode) {
          cand_vel = vel;
          for (std::int64_t n = 0; n < cand_vel.size(); ++n) cand_vel.vectors[n] += update.vectors[n];
          cand_vel = gaussian_smooth(cand_vel, cfg.field_smoothing_sigma);
          cand = exp_velocity(cand_vel, cfg.squarings);
        } else {
          cand = gaussian_smooth(compose(u, update), cfg.field_smoothing_sigma);
        }
        if (!cand.finite()) throw NumericalError("non-finite displacement" + context());
        PointLoss trial = evaluate(cand);
        if (!std::isfinite(trial.loss)) throw NumericalError("non-finite loss" + context());
        if (trial.loss < current.loss) {
          const double rel = (current.loss - trial.loss) / std::max(std::abs(current.loss), 1e-300);
          u = std::move(cand);
          if (cfg.velocity_mode) vel = std::move(cand_vel);
          current = std::move(trial);
          result.loss_trace.push_back({static_cast<int>(li), it, current.loss});
          accepted = true;
          if (rel < cfg.convergence_tol) it = level.iterations;
        }
      }
      if (!accepted) break;
    }
  }

  result.field = u.grid.same_lattice(fixed.grid(), 1e-9) ? std::move(u) : resample_field(u, fixed.grid());
  result.field.grid = fixed.grid();
  const Image jac = jacobian_determinant(result.field);
  result.min_jacobian = *std::min_element(jac.data().begin(), jac.data().end());
  result.peak_memory_bytes = mem.peak() - base;
  return result;
}

}  // namespace regeval
