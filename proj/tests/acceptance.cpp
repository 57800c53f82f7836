// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include "regeval/features.hpp"
#include "regeval/harness.hpp"
#include "regeval/nifti.hpp"
#include "regeval/orientation.hpp"
#include "regeval/synthetic.hpp"

#include "golden_run.hpp"
#include "test_util.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>

using namespace regeval;
using regeval::testing::data_dir;
using regeval::testing::random_image;
using regeval::testing::random_labels;
using regeval::testing::scratch_dir;

namespace {

int failures = 0;

void report(int id, const char* desc, bool ok, const std::string& detail) {
  std::printf("%s %d %s [%s]\n", ok ? "PASS" : "FAIL", id, desc, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void criterion(int id, const char* desc, const std::function<bool(std::string&)>& body) {
  std::string detail;
  bool ok = false;
  try {
    ok = body(detail);
  } catch (const std::exception& e) {
    detail += std::string(" exception: ") + e.what();
  }
  report(id, desc, ok, detail);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<SubjectEntry> subjects(int n_mprage, int n_mp2rage = 0) {
  std::vector<SubjectEntry> out;
  for (int i = 0; i < n_mprage + n_mp2rage; ++i) {
    SubjectEntry s;
    s.subject_id = "s" + std::to_string(i);
    s.sequence = i < n_mprage ? "MPRAGE" : "MP2RAGE";
    out.push_back(s);
  }
  return out;
}

// 1 ---------------------------------------------------------------------------

bool pair_counts(std::string& d) {
  const auto a = enumerate_pairs(subjects(100), SplitRule::None).pairs.size();
  const auto b = enumerate_pairs(subjects(116), SplitRule::None).pairs.size();
  const auto c = enumerate_pairs(subjects(438), SplitRule::None).pairs.size();
  const auto s = enumerate_pairs(subjects(3, 9), SplitRule::BySequence).split_counts();
  const auto at = [&](const char* k) { return s.count(k) ? s.at(k) : 0; };
  d = fmt("%g/%g/%g", double(a), double(b), double(c)) +
      fmt(" splits %g/%g/%g/%g", double(at("MPRAGE-MPRAGE")), double(at("MP2RAGE-MP2RAGE")), double(at("cross")),
          double(at("all")));
  return a == 9900 && b == 13340 && c == 191406 && at("MPRAGE-MPRAGE") == 6 && at("MP2RAGE-MP2RAGE") == 72 &&
         at("cross") == 54 && at("all") == 132;
}

// 2 ---------------------------------------------------------------------------

LabelVolume oracle_warp(const LabelVolume& lv, const AffineTransform& a, const DisplacementField* u,
                        const GridSpec& target) {
  const auto labels = label_set(lv);
  std::vector<Image> probs;
  for (Label l : labels) {
    Image mask(lv.grid());
    for (std::int64_t n = 0; n < lv.size(); ++n) mask[n] = lv[n] == l ? 1.0 : 0.0;
    probs.push_back(apply_transform(mask, a, u, target, Interp::Trilinear));
  }
  LabelVolume out(target, 0);
  for (std::int64_t n = 0; n < out.size(); ++n) {
    double best = 0.0, sum = 0.0;
    Label arg = 0;
    for (std::size_t t = 0; t < labels.size(); ++t) {
      sum += probs[t][n];
      if (probs[t][n] > best) {
        best = probs[t][n];
        arg = labels[t];
      }
    }
    out[n] = (best <= 0.0 || 1.0 - sum > best) ? 0 : arg;
  }
  return out;
}

bool transport_oracle(std::string& d) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> dim(2, 8), nl(1, 5);
  std::uniform_real_distribution<double> u(-1.0, 1.0), ph(0.0, 6.28);
  int agree = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const GridSpec src = GridSpec::axis_aligned({dim(rng), dim(rng), dim(rng)}, Vec3(1.0, 1.2, 0.9));
    LabelVolume lv = random_labels(src, rng, nl(rng));
    if (label_set(lv).empty()) lv[0] = 1;
    const GridSpec tgt = GridSpec::axis_aligned({dim(rng), dim(rng), dim(rng)}, Vec3(1.1, 0.8, 1.0), Vec3(0.3, -0.2, 0.1));
    AffineTransform a;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) a.matrix(r, c) += 0.1 * u(rng);
      a.matrix(r, 3) = u(rng);
    }
    DisplacementField f(tgt);
    const double p0 = ph(rng), p1 = ph(rng);
    for_each_voxel(tgt.dims, [&](std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t n) {
      f.vectors[n] = 0.6 * Vec3(std::sin(0.7 * j + p0), std::cos(0.6 * k + p1), std::sin(0.5 * i + 0.4 * j));
    });
    const DisplacementField* fp = trial % 2 ? &f : nullptr;
    const LabelVolume got = warp_labels(lv, {a, fp}, tgt, {TransportMode::Probabilistic, 0.0});
    const LabelVolume want = oracle_warp(lv, a, fp, tgt);
    agree += std::equal(got.data().begin(), got.data().end(), want.data().begin());
  }
  d = std::to_string(agree) + "/200 trials identical";
  return agree == 200;
}

// 3 ---------------------------------------------------------------------------

double quadrature_p(double t, double dof) {
  const double c = std::exp(std::lgamma((dof + 1) / 2) - std::lgamma(dof / 2)) / std::sqrt(dof * M_PI);
  const auto f = [&](double x) { return c * std::pow(1 + x * x / dof, -(dof + 1) / 2); };
  const int m = 20000;
  const double h = std::abs(t) / m;
  double s = f(0) + f(std::abs(t));
  for (int i = 1; i < m; ++i) s += (i % 2 ? 4 : 2) * f(i * h);
  return 1.0 - 2.0 * s * h / 3.0;
}

bool statistics(std::string& d) {
  const auto j = nlohmann::json::parse(std::ifstream(data_dir() / "stats_oracle.json"));
  double worst = 0.0;
  std::size_t n = 0;
  for (const auto& e : j["random_ttests"]) {
    const auto a = e["a"].get<std::vector<double>>(), b = e["b"].get<std::vector<double>>();
    const auto t = stats::paired_t_test(a, b);
    worst = std::max(worst, std::abs(t.t_statistic - e["t"].get<double>()));
    worst = std::max(worst, std::abs(t.p_value - e["p"].get<double>()));
    worst = std::max(worst, std::abs(t.p_value - quadrature_p(t.t_statistic, t.dof)));
    worst = std::max(worst, std::abs(stats::cohens_d(a, b, stats::CohensVariant::Paired).d - e["d_paired"].get<double>()));
    if (!e["d_pooled"].is_null())
      worst = std::max(worst, std::abs(stats::cohens_d(a, b).d - e["d_pooled"].get<double>()));
    ++n;
  }

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.7, 0.1);
  std::vector<double> a(40), b(40);
  for (auto& x : a) x = g(rng);
  for (auto& x : b) x = g(rng) + 0.03;
  const double d_same = stats::cohens_d(a, a).d;
  const double d0 = stats::cohens_d(a, b).d;
  double scale_err = 0.0;
  for (double k : {0.001, 3.0, 1000.0}) {
    auto sa = a, sb = b;
    for (auto& x : sa) x *= k;
    for (auto& x : sb) x *= k;
    scale_err = std::max(scale_err, std::abs(stats::cohens_d(sa, sb).d - d0));
  }
  d = fmt("%g samples, max oracle err %.3g, d(a,a)=%g, scale err %.3g", double(n), worst, d_same, scale_err);
  return n >= 100 && worst < 1e-6 && d_same == 0.0 && scale_err < 1e-12;
}

// 4 ---------------------------------------------------------------------------

bool trim_rule(std::string& d) {
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 1.0);
  std::mt19937_64 rng(4);
  std::shuffle(v.begin(), v.end(), rng);
  const auto kept = trim_lower_percentile(v, 5.0);
  std::multiset<double> ks(kept.begin(), kept.end());
  bool exact = kept.size() == 95;
  for (double x = 1; x <= 5; ++x) exact = exact && !ks.count(x);
  for (double x = 6; x <= 100; ++x) exact = exact && ks.count(x) == 1;

  std::uniform_int_distribution<int> len(1, 200);
  std::uniform_real_distribution<double> u(0.0, 1.0), pct(0.0, 50.0);
  int bad = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> s(len(rng));
    for (auto& x : s) x = u(rng);
    const double p = pct(rng);
    const auto k = trim_lower_percentile(s, p);
    if (k.empty()) continue;
    const double m0 = std::accumulate(s.begin(), s.end(), 0.0) / double(s.size());
    const double m1 = std::accumulate(k.begin(), k.end(), 0.0) / double(k.size());
    if (m1 < m0 - 1e-12) ++bad;
  }
  d = std::string(exact ? "5 lowest removed" : "wrong removal") + ", " + std::to_string(bad) + " mean decreases";
  return exact && bad == 0;
}

// 5 ---------------------------------------------------------------------------

bool sphere_to_ellipsoid(std::string& d) {
  const GridSpec g = centred_grid({64, 64, 64}, 1.0);
  PhantomSpec sphere, ellipsoid;
  sphere.semi_axes = Vec3(16, 16, 16);
  ellipsoid.semi_axes = Vec3(22, 16, 11.6);
  const Phantom fixed = make_phantom(g, sphere);
  const Phantom moving = make_phantom(g, ellipsoid);
  const double before = dice(fixed.labels, moving.labels).macro_mean;

  auto run = [&](Similarity sim, const Image& mov, double& dsc, double& jac, double& secs) {
    RegistrationConfig cfg;
    cfg.similarity = sim;
    const auto t0 = std::chrono::steady_clock::now();
    const RegistrationResult r = greedy_register(fixed.image, mov, AffineTransform{}, cfg);
    secs = seconds_since(t0);
    const LabelVolume warped = warp_labels(moving.labels, {r.affine, &r.field}, g);
    dsc = dice(fixed.labels, warped).macro_mean;
    jac = r.min_jacobian;
  };
  double d_ssd, j_ssd, t_ssd, d_mind, j_mind, t_mind;
  run(Similarity::SSD, moving.image, d_ssd, j_ssd, t_ssd);
  run(Similarity::MIND, monotone_remap(moving.image), d_mind, j_mind, t_mind);
  d = fmt("before %.4f, SSD %.4f (minJ %.3f, %.1fs), ", before, d_ssd, j_ssd, t_ssd) +
      fmt("MIND %.4f (minJ %.3f, %.1fs), gap %.4f", d_mind, j_mind, t_mind, std::abs(d_ssd - d_mind));
  return std::abs(before - 0.80) < 0.03 && d_ssd >= 0.95 && d_mind >= 0.95 && j_ssd > 0 && j_mind > 0 &&
         std::abs(d_ssd - d_mind) <= 0.03 && t_ssd < 120 && t_mind < 120;
}

// 6 ---------------------------------------------------------------------------

bool gradients(std::string& d) {
  std::mt19937_64 rng(6);
  const GridSpec g = GridSpec::axis_aligned({9, 9, 9}, Vec3::Ones());

  const Image f = random_image(g, rng);
  Image m = random_image(g, rng);
  const LnccResult lr = lncc(f, m, 2);
  double gmax = 0, worst_lncc = 0;
  for (double x : lr.gradient.data()) gmax = std::max(gmax, std::abs(x));
  for (std::int64_t n = 0; n < m.size(); n += 5) {
    const double h = 1e-5, keep = m[n];
    m[n] = keep + h;
    const double up = lncc(f, m, 2).loss;
    m[n] = keep - h;
    const double dn = lncc(f, m, 2).loss;
    m[n] = keep;
    const double fd = (up - dn) / (2 * h), an = lr.gradient[n];
    worst_lncc = std::max(worst_lncc, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3 * gmax}));
  }

  const Image mf = random_image(g, rng), mm = random_image(g, rng);
  DisplacementField u(g);
  std::uniform_real_distribution<double> du(0.1, 0.4);
  for (auto& x : u.vectors) x = Vec3(du(rng), -du(rng), du(rng));
  const MindSsdResult mr = mind_ssd(mf, mm, u);
  gmax = 0;
  for (const auto& x : mr.gradient.vectors) gmax = std::max(gmax, x.cwiseAbs().maxCoeff());
  double worst_mind = 0;
  std::uniform_int_distribution<std::int64_t> pick(0, g.size() - 1);
  for (int t = 0; t < 60; ++t) {
    const std::int64_t n = pick(rng);
    for (int a = 0; a < 3; ++a) {
      const double h = 1e-6;
      DisplacementField up = u, dn = u;
      up.vectors[n][a] += h;
      dn.vectors[n][a] -= h;
      const double fd = (mind_ssd(mf, mm, up).loss - mind_ssd(mf, mm, dn).loss) / (2 * h);
      const double an = mr.gradient.vectors[n][a];
      worst_mind = std::max(worst_mind, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3 * gmax}));
    }
  }
  d = fmt("LNCC rel err %.2e, MIND rel err %.2e", worst_lncc, worst_mind);
  return worst_lncc < 1e-4 && worst_mind < 1e-4;
}

// 7 ---------------------------------------------------------------------------

bool cross_sequence_mind(std::string& d) {
  const Dataset ds = load_dataset(write_synthetic_dataset(scratch_dir("acc_mixed"), 4, 17, SyntheticKind::Blobs, true));
  const PairManifest m = enumerate_pairs(ds.subjects, SplitRule::BySequence);
  RunConfig cfg;
  cfg.registration.levels = {{2, 10}, {1, 5}};
  cfg.affine_iterations = 10;
  const auto recs = run_protocol(ds, m, {"affine", "greedy"}, {"coarse"}, cfg);
  std::size_t cross = 0, with_mind = 0;
  for (const auto& r : recs) {
    if (r.pair.split != "cross") continue;
    ++cross;
    with_mind += r.cross_modality && r.similarity == "mind" && r.ok();
  }
  const auto v = similarity_violations(recs);
  d = std::to_string(with_mind) + "/" + std::to_string(cross) + " cross records with MIND, " + std::to_string(v) +
      " violations";
  return cross > 0 && with_mind == cross && v == 0;
}

// 8 ---------------------------------------------------------------------------

bool orientation(std::string& d) {
  const auto dir = scratch_dir("acc_orient");
  const Dataset ds = load_dataset(write_synthetic_dataset(dir, 3, 8));
  const PairManifest m = enumerate_pairs(ds.subjects, SplitRule::None);

  double worst_flip = 0;
  for (const auto& p : m.pairs) {
    const LabelVolume a = read_labels(ds.subject(p.fixed_id).label_paths.at("fine"));
    const LabelVolume b = read_labels(ds.subject(p.moving_id).label_paths.at("fine"));
    const double ras = dice(a, b).macro_mean;
    const double lps = dice(reorient(a, "LPS"), reorient(b, "LPS")).macro_mean;
    const double back = dice(reorient(reorient(a, "LPS"), "RAS"), reorient(reorient(b, "LPS"), "RAS")).macro_mean;
    worst_flip = std::max({worst_flip, std::abs(ras - lps), std::abs(ras - back)});
  }

  RunConfig cfg;
  cfg.registration.levels = {{2, 20}, {1, 10}};
  cfg.affine_iterations = 20;
  const auto variants = std::vector{AblationVariant::parse("orient=RAS"), AblationVariant::parse("orient=LPS")};
  const AblationReport r = run_ablation(ds, m, {"greedy"}, {"coarse"}, variants, cfg);
  double gap = 0;
  bool all_ok = true;
  for (std::size_t i = 0; i < r.records[0].size(); ++i) {
    all_ok = all_ok && r.records[0][i].ok() && r.records[1][i].ok();
    gap = std::max(gap, std::abs(r.records[0][i].dice.macro_mean - r.records[1][i].dice.macro_mean));
  }
  d = fmt("reorientation Dice diff %.2e, engine RAS/LPS gap %.2e", worst_flip, gap);
  return all_ok && worst_flip < 1e-9 && gap < 1e-6;
}

// 9 ---------------------------------------------------------------------------

bool resolution_and_memory(std::string& d) {
  const Dataset ds = load_dataset(write_synthetic_dataset(scratch_dir("acc_fine"), 3, 9, SyntheticKind::FineStructure));
  const PairManifest m = enumerate_pairs(ds.subjects, SplitRule::None);
  RunConfig cfg;
  cfg.registration.levels = {{2, 30}, {1, 20}};
  cfg.affine_iterations = 20;
  const auto variants = std::vector{AblationVariant::parse("iso=0.6"), AblationVariant::parse("iso=1.0")};
  const AblationReport r = run_ablation(ds, m, {"greedy"}, {"coarse"}, variants, cfg);
  auto mean_dice = [](const std::vector<EvalRecord>& recs) {
    double s = 0;
    for (const auto& x : recs) s += x.ok() ? x.dice.macro_mean : std::nan("");
    return s / double(recs.size());
  };
  const double fine = mean_dice(r.records[0]), coarse = mean_dice(r.records[1]);

  RegistrationConfig rc;
  rc.levels = {{2, 3}, {1, 2}};
  rc.similarity = Similarity::LNCC;
  std::vector<double> per_voxel;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::int64_t n : {32, 64, 128}) {
    PhantomSpec a, b;
    a.semi_axes = Vec3(0.3, 0.25, 0.2) * double(n);
    b.semi_axes = Vec3(0.27, 0.27, 0.22) * double(n);
    const GridSpec g = centred_grid({n, n, n}, 1.0);
    const Image f = make_phantom(g, a).image, mv = make_phantom(g, b).image;
    const RegistrationResult res = greedy_register(f, mv, AffineTransform{}, rc);
    per_voxel.push_back(double(res.peak_memory_bytes) / double(n * n * n));
  }
  const double secs = seconds_since(t0);
  const double spread_lo = std::min({per_voxel[1], per_voxel[2]}) / per_voxel[0];
  const double spread_hi = std::max({per_voxel[1], per_voxel[2]}) / per_voxel[0];
  d = fmt("Dice 0.6mm %.4f vs 1mm %.4f; ", fine, coarse) +
      fmt("bytes/voxel %.1f %.1f %.1f in %.1fs", per_voxel[0], per_voxel[1], per_voxel[2], secs);
  return std::isfinite(fine) && std::isfinite(coarse) && fine >= coarse && spread_lo >= 0.8 && spread_hi <= 1.2 &&
         secs < 180;
}

// 10 --------------------------------------------------------------------------

bool format_fidelity(std::string& d) {
  const auto dir = scratch_dir("acc_nifti");
  int files = 0, exact = 0;
  for (DataType dt : {DataType::UInt8, DataType::Int16, DataType::Int32, DataType::Float32, DataType::Float64}) {
    for (bool gz : {false, true}) {
      for (bool be : {false, true}) {
        Image v(GridSpec::axis_aligned({7, 5, 3}, Vec3(0.8, 1.25, 2.0), Vec3(-10, 4.5, 0.125)));
        for (std::int64_t n = 0; n < v.size(); ++n) {
          double x = double((n * 37) % 101);
          if (dt == DataType::Int16 || dt == DataType::Int32) x -= 50;
          if (dt == DataType::Float32) x = static_cast<float>(x * 0.173);
          if (dt == DataType::Float64) x = x * 0.173 + 1e-9 * double(n);
          v[n] = x;
        }
        v.header().datatype = dt;
        const auto p1 = dir / ("a" + std::to_string(files) + (gz ? ".nii.gz" : ".nii"));
        const auto p2 = dir / ("b" + std::to_string(files) + (gz ? ".nii.gz" : ".nii"));
        write_image(v, p1, WriteOptions{be});
        const Image back = read_image(p1);
        write_image(back, p2, WriteOptions{be});
        const RawNifti r1 = read_nifti_raw(p1), r2 = read_nifti_raw(p2);
        const bool same = back.size() == v.size() &&
                          std::memcmp(back.data().data(), v.data().data(), v.size() * sizeof(double)) == 0 &&
                          back.header().datatype == dt && back.grid().same_lattice(v.grid(), 1e-6) &&
                          r1.values == r2.values && testing::read_text(p1) == testing::read_text(p2);
        exact += same;
        ++files;
      }
    }
  }
  const bool golden = testing::golden_matches(testing::golden_csv(scratch_dir("acc_golden")));
  d = std::to_string(exact) + "/" + std::to_string(files) + " files bit-exact, golden CSV " +
      (golden ? "identical" : "differs");
  return files == 20 && exact == 20 && golden;
}

// 11 --------------------------------------------------------------------------

bool mind_invariance(std::string& d) {
  std::mt19937_64 rng(11);
  const Image v = testing::smooth_random_image(GridSpec::axis_aligned({14, 12, 10}, Vec3(1, 1.1, 0.9)), rng);
  const MindFeatures f = mind(v);
  double worst = 0;
  for (const auto& [a, b] : {std::pair{2.0, 5.0}, std::pair{0.05, -3.0}, std::pair{40.0, 1000.0}}) {
    Image w = v;
    for (auto& x : w.data()) x = a * x + b;
    const MindFeatures g = mind(w);
    for (std::size_t c = 0; c < f.channels.size(); ++c)
      for (std::int64_t n = 0; n < v.size(); ++n) worst = std::max(worst, std::abs(f.channels[c][n] - g.channels[c][n]));
  }
  Image w = v;
  for (auto& x : w.data()) x = 2 * x + 5;
  const double s = mind_ssd(v, w);
  d = fmt("max descriptor diff %.2e, mind_ssd(a, 2a+5) %.2e", worst, s);
  return worst < 1e-9 && s < 1e-9;
}

}  // namespace

int main() {
  criterion(1, "pair counts and sequence splits", pair_counts);
  criterion(2, "probabilistic transport equals brute-force oracle", transport_oracle);
  criterion(3, "t-test and Cohen's d oracles, identity, scale invariance", statistics);
  criterion(4, "trim rule", trim_rule);
  criterion(5, "sphere to ellipsoid at 64^3 with SSD and MIND", sphere_to_ellipsoid);
  criterion(6, "LNCC and MIND gradients vs finite differences", gradients);
  criterion(7, "cross-sequence records use MIND", cross_sequence_mind);
  criterion(8, "orientation invariance of Dice and engine", orientation);
  criterion(9, "resolution ordering and linear memory scaling", resolution_and_memory);
  criterion(10, "NIfTI round trip corpus and golden CSV", format_fidelity);
  criterion(11, "MIND intensity invariance", mind_invariance);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
