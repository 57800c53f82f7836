#include "regeval/label_transport.hpp"
#include "regeval/metrics.hpp"
#include "regeval/register.hpp"
#include "regeval/synthetic.hpp"

#include "test_util.hpp"

#include <doctest.h>

using namespace regeval;
using regeval::testing::random_image;
using regeval::testing::smooth_random_image;

namespace {

Image asymmetric_phantom(const GridSpec& g, const Vec3& shift = Vec3::Zero()) {
  PhantomSpec s;
  s.centre = shift;
  s.semi_axes = Vec3(13, 8, 6);
  s.layers = {{1.0, 1, 100.0}, {0.5, 2, 180.0}};
  s.edge_width = 2.0;
  Image img = make_phantom(g, s).image;
  PhantomSpec b;
  b.centre = shift + Vec3(6, 5, 0);
  b.semi_axes = Vec3(3, 3, 3);
  b.layers = {{1.0, 3, 60.0}};
  b.edge_width = 2.0;
  const Image blob = make_phantom(g, b).image;
  for (std::int64_t n = 0; n < img.size(); ++n) img[n] += blob[n];
  return img;
}

RegistrationConfig quick_config(Similarity s) {
  RegistrationConfig c;
  c.levels = {{2, 30}, {1, 20}};
  c.similarity = s;
  return c;
}

}  // namespace

TEST_CASE("gaussian kernel: sigma 0, normalization, radius") {
  CHECK(gaussian_kernel(0.0) == std::vector<double>{1.0});
  const auto k = gaussian_kernel(1.3);
  CHECK(k.size() == 2 * 4 + 1);
  double s = 0;
  for (double x : k) s += x;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(gaussian_kernel(0.1).size() == 3);
  CHECK_THROWS_AS(gaussian_kernel(-1.0), std::invalid_argument);
}

TEST_CASE("gaussian_smooth: identity, impulse response and constancy") {
  std::mt19937_64 rng(51);
  const GridSpec g = GridSpec::axis_aligned({15, 15, 15}, Vec3(1.0, 2.0, 0.5));
  const Image v = random_image(g, rng);
  const Image same = gaussian_smooth(v, 0.0);
  CHECK(std::memcmp(same.data().data(), v.data().data(), v.size() * sizeof(double)) == 0);

  Image impulse(g);
  impulse(7, 7, 7) = 1.0;
  const double sigma_mm = 1.2;
  const Image r = gaussian_smooth(impulse, sigma_mm);
  std::array<std::vector<double>, 3> w;
  for (int a = 0; a < 3; ++a) {
    const double sv = sigma_mm / g.spacing[a];
    const int rad = std::max(1, int(std::ceil(3 * sv)));
    double s = 0;
    for (int q = -rad; q <= rad; ++q) s += std::exp(-q * q / (2 * sv * sv));
    for (int q = -7; q <= 7; ++q) w[a].push_back(std::abs(q) <= rad ? std::exp(-q * q / (2 * sv * sv)) / s : 0.0);
  }
  for_each_voxel(g.dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    CHECK(std::abs(r[n] - w[0][i] * w[1][j] * w[2][k]) < 1e-9);
  });

  const Image c(g, 4.25);
  const Image cs = gaussian_smooth(c, 2.5);
  for (std::int64_t n = 0; n < cs.size(); ++n) CHECK(std::abs(cs[n] - 4.25) < 1e-12);

  DisplacementField u(g);
  for (auto& x : u.vectors) x = Vec3(0.5, -1.0, 2.0);
  const DisplacementField us = gaussian_smooth(u, 1.5);
  for (const auto& x : us.vectors) CHECK((x - Vec3(0.5, -1.0, 2.0)).norm() < 1e-12);
}

TEST_CASE("downsample keeps voxel 0 in place and scales spacing") {
  const GridSpec g = GridSpec::axis_aligned({9, 8, 7}, Vec3(1.0, 1.5, 2.0), Vec3(3, 4, 5));
  const Image d = downsample(Image(g, 2.0), 2);
  CHECK(d.dims() == Index3{5, 4, 4});
  CHECK((d.grid().spacing - Vec3(2.0, 3.0, 4.0)).norm() < 1e-12);
  CHECK((d.grid().to_world(Vec3::Zero()) - g.to_world(Vec3::Zero())).norm() < 1e-12);
  for (double x : d.data()) CHECK(x == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("LNCC: self-similarity minimum and local affine invariance") {
  std::mt19937_64 rng(52);
  const GridSpec g = GridSpec::axis_aligned({12, 12, 12}, Vec3::Ones());
  const Image a = smooth_random_image(g, rng), b = random_image(g, rng);
  const double self = lncc(a, a, 2).loss;
  CHECK(self == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(lncc(a, b, 2).loss > self);
  Image a2 = a;
  for (auto& x : a2.data()) x = 2 * x + 3;
  CHECK(std::abs(lncc(a, a2, 2).loss - self) < 1e-9);
  CHECK_THROWS_AS(lncc(a, a, 0), std::invalid_argument);
}

TEST_CASE("LNCC stays within [-1, 0] on nearly flat windows with large offsets") {
  std::mt19937_64 rng(57);
  const GridSpec g = GridSpec::axis_aligned({16, 16, 16}, Vec3::Ones());
  std::uniform_real_distribution<double> tiny(-1e-7, 1e-7);
  Image flat(g, 100.0);
  for (auto& x : flat.data()) x += tiny(rng);
  const Image busy = random_image(g, rng, 0.0, 150.0);
  const LnccResult r = lncc(flat, busy, 2);
  CHECK(r.loss >= -1.0 - 1e-12);
  CHECK(r.loss <= 0.0);
  for (double x : r.gradient.data()) CHECK(std::isfinite(x));
}

TEST_CASE("LNCC gradient agrees with central differences on a 9^3 pair") {
  std::mt19937_64 rng(53);
  const GridSpec g = GridSpec::axis_aligned({9, 9, 9}, Vec3::Ones());
  const Image f = random_image(g, rng);
  Image m = random_image(g, rng);
  const LnccResult r = lncc(f, m, 2);
  double gmax = 0;
  for (double x : r.gradient.data()) gmax = std::max(gmax, std::abs(x));
  const double h = 1e-5;
  double worst = 0;
  for (std::int64_t n = 0; n < m.size(); n += 7) {
    const double keep = m[n];
    m[n] = keep + h;
    const double up = lncc(f, m, 2).loss;
    m[n] = keep - h;
    const double dn = lncc(f, m, 2).loss;
    m[n] = keep;
    const double fd = (up - dn) / (2 * h);
    worst = std::max(worst, std::abs(fd - r.gradient[n]) / std::max({std::abs(fd), std::abs(r.gradient[n]), 1e-3 * gmax}));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("affine: identity on identical images") {
  const GridSpec g = centred_grid({32, 32, 32}, 1.0);
  const Image f = asymmetric_phantom(g);
  const AffineTransform t = affine_register(f, f, Similarity::SSD, 50);
  CHECK((t.matrix - Mat4::Identity()).norm() < 1e-3);
}

TEST_CASE("affine: 4-voxel translation is recovered") {
  const GridSpec g = centred_grid({40, 40, 40}, 1.0);
  const Image f = asymmetric_phantom(g), m = asymmetric_phantom(g, Vec3(4, 0, 0));
  const AffineTransform t = affine_register(f, m, Similarity::SSD, 100);
  // Fixed-world to moving-world: the centre should land 4 mm along +x.
  const Vec3 c = t(Vec3::Zero());
  CHECK(std::abs(c.x() - 4.0) < 0.25);
  CHECK(std::abs(c.y()) < 0.25);
  CHECK(std::abs(c.z()) < 0.25);
}

TEST_CASE("affine: 5 degree rotation about z is recovered") {
  const GridSpec g = centred_grid({40, 40, 40}, 1.0);
  const Image f = asymmetric_phantom(g);
  const double th = 5.0 * M_PI / 180.0;
  AffineTransform rot;
  rot.matrix.topLeftCorner<3, 3>() = Eigen::AngleAxisd(th, Vec3::UnitZ()).toRotationMatrix();
  // moving(y) = fixed(R y), so fixed-to-moving maps x to R^-1 x.
  const Image m = apply_affine(f, rot, g, Interp::Trilinear);
  const AffineTransform t = affine_register(f, m, Similarity::SSD, 150);
  const double got = std::atan2(t.matrix(1, 0), t.matrix(0, 0));
  CHECK(std::abs(got * 180.0 / M_PI + 5.0) < 0.5);
}

TEST_CASE("greedy: registering an image to itself leaves the field near zero") {
  const GridSpec g = centred_grid({24, 24, 24}, 1.0);
  const Image f = asymmetric_phantom(g);
  for (Similarity s : {Similarity::SSD, Similarity::LNCC, Similarity::MIND}) {
    CAPTURE(to_string(s));
    const RegistrationResult r = greedy_register(f, f, AffineTransform::identity(), quick_config(s));
    CHECK(r.field.rms() < 0.05);
    CHECK(r.min_jacobian > 0.0);
  }
}

TEST_CASE("greedy: accepted steps decrease the loss within each level") {
  const GridSpec g = centred_grid({32, 32, 32}, 1.0);
  PhantomSpec fs, ms;
  fs.semi_axes = Vec3(13, 10, 8);
  ms.semi_axes = Vec3(10, 10, 10);
  const Phantom fixed = make_phantom(g, fs), moving = make_phantom(g, ms);
  const RegistrationResult r = greedy_register(fixed.image, moving.image, AffineTransform::identity(),
                                               quick_config(Similarity::SSD));
  REQUIRE(r.loss_trace.size() > 3);
  for (std::size_t i = 1; i < r.loss_trace.size(); ++i)
    if (r.loss_trace[i].level == r.loss_trace[i - 1].level) CHECK(r.loss_trace[i].loss < r.loss_trace[i - 1].loss);
  const LabelVolume warped = warp_labels(moving.labels, {AffineTransform::identity(), &r.field}, g);
  CHECK(dice(fixed.labels, warped).macro_mean > dice(fixed.labels, moving.labels).macro_mean + 0.05);
  CHECK(r.peak_memory_bytes > 0);
}

TEST_CASE("velocity mode: zero and constant velocities; composition oracle") {
  const GridSpec g = GridSpec::axis_aligned({16, 16, 16}, Vec3::Ones());
  DisplacementField v(g);
  const DisplacementField z = exp_velocity(v, 6);
  for (const auto& x : z.vectors) CHECK(x == Vec3::Zero());

  const Vec3 c(0.7, -0.4, 0.3);
  for (auto& x : v.vectors) x = c;
  const DisplacementField t = exp_velocity(v, 6);
  for_each_voxel(g.dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    if (i < 2 || j < 2 || k < 2 || i > 13 || j > 13 || k > 13) return;
    CHECK((t.vectors[n] - c).norm() < 1e-9);
  });

  // Smooth velocity: scaling and squaring against 64 explicit small steps.
  for_each_voxel(g.dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    v.vectors[n] = Vec3(0.8 * std::sin(0.3 * j), 0.6 * std::cos(0.25 * k), 0.5 * std::sin(0.2 * i));
  });
  const DisplacementField e = exp_velocity(v, 6);
  DisplacementField small(g), acc(g);
  for (std::int64_t n = 0; n < g.size(); ++n) small.vectors[n] = v.vectors[n] / 64.0;
  for (int s = 0; s < 64; ++s) acc = compose(small, acc);
  double worst = 0;
  for_each_voxel(g.dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
    if (i < 3 || j < 3 || k < 3 || i > 12 || j > 12 || k > 12) return;
    worst = std::max(worst, (e.vectors[n] - acc.vectors[n]).norm());
  });
  CHECK(worst < 0.05);

  const GridSpec pg = centred_grid({32, 32, 32}, 1.0);
  PhantomSpec fs, ms;
  fs.semi_axes = Vec3(13, 10, 8);
  ms.semi_axes = Vec3(10, 10, 10);
  const Phantom fixed = make_phantom(pg, fs), moving = make_phantom(pg, ms);
  RegistrationConfig cfg = quick_config(Similarity::SSD);
  cfg.velocity_mode = true;
  const RegistrationResult r = greedy_register(fixed.image, moving.image, AffineTransform::identity(), cfg);
  CHECK(r.min_jacobian > 0.0);
  const LabelVolume warped = warp_labels(moving.labels, {AffineTransform::identity(), &r.field}, pg);
  CHECK(dice(fixed.labels, warped).macro_mean > dice(fixed.labels, moving.labels).macro_mean + 0.05);
}

TEST_CASE("config validation and JSON round trip") {
  RegistrationConfig c;
  CHECK_NOTHROW(c.validate());
  c.levels = {{2, 10}, {4, 10}, {1, 5}};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.levels = {{4, 10}, {2, 10}};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.levels = {{1, 10}};
  c.step_size = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.step_size = 0.5;
  c.field_smoothing_sigma = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.field_smoothing_sigma = 1.5;
  c.similarity = Similarity::MIND;
  c.velocity_mode = true;
  const RegistrationConfig back = registration_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(parse_similarity("mind-ssd") == Similarity::MIND);
  CHECK_THROWS_AS(parse_similarity("mi"), std::invalid_argument);
  const auto partial = registration_config_from_json(nlohmann::json::parse(R"({"similarity":"ssd"})"));
  CHECK(partial.levels.size() == 3);
  CHECK(partial.similarity == Similarity::SSD);
}

TEST_CASE("registration is deterministic across thread counts") {
  const GridSpec g = centred_grid({24, 24, 24}, 1.0);
  PhantomSpec fs, ms;
  fs.semi_axes = Vec3(10, 8, 6);
  ms.semi_axes = Vec3(8, 8, 8);
  const Phantom fixed = make_phantom(g, fs), moving = make_phantom(g, ms);
  set_inner_threads(1);
  const auto a = greedy_register(fixed.image, moving.image, AffineTransform::identity(), quick_config(Similarity::LNCC));
  set_inner_threads(4);
  const auto b = greedy_register(fixed.image, moving.image, AffineTransform::identity(), quick_config(Similarity::LNCC));
  REQUIRE(a.loss_trace.size() == b.loss_trace.size());
  for (std::size_t i = 0; i < a.loss_trace.size(); ++i) CHECK(a.loss_trace[i].loss == b.loss_trace[i].loss);
  for (std::int64_t n = 0; n < a.field.size(); ++n) CHECK(a.field.vectors[n] == b.field.vectors[n]);
}
