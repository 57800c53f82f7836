// regeval command-line front end.
#include "regeval/harness.hpp"
#include "regeval/nifti.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace regeval;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  return json::parse(in);
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

json affine_json(const AffineTransform& a) {
  json rows = json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({a.matrix(r, 0), a.matrix(r, 1), a.matrix(r, 2), a.matrix(r, 3)});
  return {{"matrix", rows}, {"maps", "fixed world (RAS mm) to moving world"}};
}

AffineTransform affine_from_json(const json& j) {
  AffineTransform a;
  const auto& m = j.at("matrix");
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) a.matrix(r, c) = m.at(r).at(c).get<double>();
  a.validate();
  return a;
}

RunConfig load_run_config(const std::string& path) {
  return path.empty() ? RunConfig{} : run_config_from_json(read_json(path));
}

PairManifest pairs_for(const Dataset& d, const std::string& pairs_path, const std::string& split) {
  if (!pairs_path.empty()) return pair_manifest_from_json(read_json(pairs_path));
  return enumerate_pairs(d.subjects, parse_split_rule(split));
}

void print_counts(const PairManifest& m) {
  for (const auto& [split, n] : m.split_counts()) std::cout << split << "\t" << n << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Registration evaluation harness"};
  app.require_subcommand(1);

  // pairs
  auto* pairs = app.add_subcommand("pairs", "Enumerate ordered image pairs with split tags");
  std::string manifest, split = "by-sequence", out;
  int n_subjects = 0;
  pairs->add_option("--manifest", manifest, "Dataset manifest JSON");
  pairs->add_option("--subjects", n_subjects, "Count pairs for N placeholder subjects instead of a manifest");
  pairs->add_option("--split", split, "none | by-sequence")->check(CLI::IsMember({"none", "by-sequence"}));
  pairs->add_option("--out", out, "Write the pair manifest JSON here");

  // subset
  auto* subset = app.add_subcommand("subset", "Seeded subset of a pair manifest");
  std::string pairs_path;
  std::size_t subset_n = 0;
  std::uint64_t seed = 0;
  subset->add_option("--pairs", pairs_path, "Pair manifest JSON")->required();
  subset->add_option("--n", subset_n, "Number of pairs")->required();
  subset->add_option("--seed", seed, "Seed");
  subset->add_option("--out", out, "Output pair manifest JSON")->required();

  // run
  auto* run = app.add_subcommand("run", "Evaluate methods on a pair manifest");
  std::string methods = "identity,greedy", protocols, config_path, external_root, outdir = "regeval-out";
  std::string transport, trim_scope;
  double trim = -1.0;
  int workers = 0;
  run->add_option("--manifest", manifest, "Dataset manifest JSON")->required();
  run->add_option("--pairs", pairs_path, "Pair manifest JSON (default: all ordered pairs)");
  run->add_option("--split", split, "Split rule when enumerating")->check(CLI::IsMember({"none", "by-sequence"}));
  run->add_option("--methods", methods, "Comma-separated: identity, affine, greedy or external method names");
  run->add_option("--protocols", protocols, "Comma-separated label protocols")->required();
  run->add_option("--config", config_path, "Run config JSON");
  run->add_option("--trim", trim, "Lower-percentile trim applied before summaries");
  run->add_option("--trim-scope", trim_scope, "group | method")->check(CLI::IsMember({"group", "method"}));
  run->add_option("--transport", transport, "prob | nearest")->check(CLI::IsMember({"prob", "nearest"}));
  run->add_option("--external-root", external_root, "Directory holding <method>/<fixed>__<moving>.nii.gz");
  run->add_option("--workers", workers, "Pair workers (default REGEVAL_THREADS)");
  run->add_option("--out", outdir, "Report directory");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Rerun the protocol under preprocessing variants");
  std::vector<std::string> variants;
  ablate->add_option("--manifest", manifest, "Dataset manifest JSON")->required();
  ablate->add_option("--pairs", pairs_path, "Pair manifest JSON");
  ablate->add_option("--split", split, "Split rule when enumerating")->check(CLI::IsMember({"none", "by-sequence"}));
  ablate->add_option("--variant", variants, "native | crop=XxYxZ[:pad] | orient=CODE | iso=MM (repeatable)")->required();
  ablate->add_option("--methods", methods, "Comma-separated methods");
  ablate->add_option("--protocols", protocols, "Comma-separated label protocols")->required();
  ablate->add_option("--config", config_path, "Run config JSON");
  ablate->add_option("--trim", trim, "Lower-percentile trim");
  ablate->add_option("--workers", workers, "Pair workers");
  ablate->add_option("--out", outdir, "Output directory");

  // report
  auto* report = app.add_subcommand("report", "Rebuild summaries and CSV from records.json");
  std::string records_path;
  report->add_option("--records", records_path, "records.json from a previous run")->required();
  report->add_option("--config", config_path, "Run config JSON (trim, effect-size variant)");
  report->add_option("--trim", trim, "Lower-percentile trim");
  report->add_option("--out", outdir, "Report directory")->required();

  // warp-labels
  auto* warp = app.add_subcommand("warp-labels", "Transport a labelmap through a transform");
  std::string mode = "prob", transform_path, labels_path, like_path;
  warp->add_option("--mode", mode, "prob | nearest")->check(CLI::IsMember({"prob", "nearest"}));
  warp->add_option("--transform", transform_path, "Displacement field (.nii/.nii.gz) or affine JSON")->required();
  warp->add_option("--labels", labels_path, "Labelmap to transport")->required();
  warp->add_option("--like", like_path, "Image defining the output grid")->required();
  warp->add_option("--out", out, "Output labelmap")->required();

  // register
  auto* reg = app.add_subcommand("register", "Affine + greedy deformable registration");
  std::string fixed_path, moving_path, similarity = "lncc", out_field, out_affine;
  int affine_iterations = 50;
  bool no_affine = false;
  reg->add_option("--fixed", fixed_path, "Fixed image")->required();
  reg->add_option("--moving", moving_path, "Moving image")->required();
  reg->add_option("--similarity", similarity, "ssd | lncc | mind")->check(CLI::IsMember({"ssd", "lncc", "mind"}));
  reg->add_option("--out-field", out_field, "Output displacement field (.nii.gz)")->required();
  reg->add_option("--out-affine", out_affine, "Output affine JSON");
  reg->add_option("--config", config_path, "Registration config JSON");
  reg->add_option("--affine-iterations", affine_iterations, "Affine iterations per pyramid level");
  reg->add_flag("--no-affine", no_affine, "Skip affine pre-alignment");

  // profile
  auto* profile = app.add_subcommand("profile", "Intensity histogram profile and modality guess");
  std::string image_path, mask_path;
  profile->add_option("--image", image_path, "Image")->required();
  profile->add_option("--mask", mask_path, "Optional labelmap; nonzero voxels are profiled");
  profile->add_option("--out", out, "Output JSON")->required();

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic phantom dataset");
  std::string kind = "blobs";
  int synth_n = 4;
  bool mixed = false;
  synth->add_option("--out", outdir, "Output directory")->required();
  synth->add_option("--n", synth_n, "Number of subjects");
  synth->add_option("--seed", seed, "Seed");
  synth->add_option("--kind", kind, "blobs | fine")->check(CLI::IsMember({"blobs", "fine"}));
  synth->add_flag("--mixed", mixed, "Alternate MPRAGE / MP2RAGE-like intensities");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pairs) {
      PairManifest m;
      if (n_subjects > 0) {
        std::vector<SubjectEntry> subjects(static_cast<std::size_t>(n_subjects));
        for (int i = 0; i < n_subjects; ++i) subjects[i].subject_id = "s" + std::to_string(i);
        m = enumerate_pairs(subjects, SplitRule::None);
      } else {
        if (manifest.empty()) throw std::invalid_argument("pairs needs --manifest or --subjects");
        m = enumerate_pairs(load_dataset(manifest, false).subjects, parse_split_rule(split));
      }
      print_counts(m);
      if (!out.empty()) write_json(out, to_json(m));
    } else if (*subset) {
      const PairManifest m = select_subset(pair_manifest_from_json(read_json(pairs_path)), subset_n, seed);
      write_json(out, to_json(m));
      print_counts(m);
    } else if (*run) {
      RunConfig cfg = load_run_config(config_path);
      if (trim >= 0) cfg.trim_percent = trim;
      if (!trim_scope.empty()) cfg.trim_scope = trim_scope;
      if (!transport.empty()) cfg.transport.mode = parse_transport_mode(transport);
      if (!external_root.empty()) cfg.external_root = external_root;
      if (workers > 0) cfg.workers = workers;
      cfg.validate();
      const Dataset d = load_dataset(manifest);
      const PairManifest m = pairs_for(d, pairs_path, split);
      const auto records = run_protocol(d, m, split_list(methods), split_list(protocols), cfg);
      emit_report(build_report(records, cfg, &m), outdir);
      std::size_t failed = 0;
      for (const auto& r : records) failed += r.ok() ? 0 : 1;
      std::cout << records.size() << " records (" << failed << " failed), similarity violations: "
                << similarity_violations(records) << "\nreport written to " << outdir << "\n";
    } else if (*ablate) {
      RunConfig cfg = load_run_config(config_path);
      if (trim >= 0) cfg.trim_percent = trim;
      if (workers > 0) cfg.workers = workers;
      const Dataset d = load_dataset(manifest);
      const PairManifest m = pairs_for(d, pairs_path, split);
      std::vector<AblationVariant> vs;
      for (const auto& v : variants) vs.push_back(AblationVariant::parse(v));
      const AblationReport r = run_ablation(d, m, split_list(methods), split_list(protocols), vs, cfg);
      emit_ablation(r, outdir);
      for (const auto& s : r.summaries)
        if (s.split == "all" && s.summary.n > 0)
          std::cout << s.variant << "\t" << s.method << "\t" << s.protocol << "\tmean " << s.summary.mean << "\n";
      std::cout << "ablation written to " << outdir << "\n";
    } else if (*report) {
      RunConfig cfg = load_run_config(config_path);
      if (trim >= 0) cfg.trim_percent = trim;
      std::vector<EvalRecord> records;
      for (const auto& j : read_json(records_path)) records.push_back(eval_record_from_json(j));
      emit_report(build_report(records, cfg), outdir);
      std::cout << "report written to " << outdir << "\n";
    } else if (*warp) {
      const LabelVolume labels = read_labels(labels_path);
      const Image like = read_image(like_path);
      LabelTransportConfig tc;
      tc.mode = parse_transport_mode(mode);
      std::optional<DisplacementField> field;
      LabelTransform t;
      const std::string ext = fs::path(transform_path).extension().string();
      if (ext == ".json") {
        t.affine = affine_from_json(read_json(transform_path));
      } else {
        field = read_displacement_field(transform_path);
        t.field = &*field;
      }
      write_labels(warp_labels(labels, t, like.grid(), tc), out);
    } else if (*reg) {
      RegistrationConfig cfg =
          config_path.empty() ? RegistrationConfig{} : registration_config_from_json(read_json(config_path));
      cfg.similarity = parse_similarity(similarity);
      const Image fixed = read_image(fixed_path), moving = read_image(moving_path);
      const AffineTransform a = no_affine ? AffineTransform::identity()
                                          : affine_register(fixed, moving, cfg.similarity, affine_iterations);
      const RegistrationResult r = greedy_register(fixed, moving, a, cfg);
      write_displacement_field(r.field, out_field);
      if (!out_affine.empty()) write_json(out_affine, affine_json(a));
      json trace = json::array();
      for (const auto& s : r.loss_trace) trace.push_back({{"level", s.level}, {"iteration", s.iteration}, {"loss", s.loss}});
      fs::path trace_path = out_field;
      trace_path.replace_filename(trace_path.filename().string() + ".trace.json");
      write_json(trace_path, {{"config", to_json(r.config)},
                              {"loss_trace", trace},
                              {"min_jacobian", r.min_jacobian},
                              {"peak_memory_bytes", r.peak_memory_bytes}});
      std::cout << "final loss " << r.loss_trace.back().loss << ", min jacobian " << r.min_jacobian << "\n";
    } else if (*profile) {
      const Image img = read_image(image_path);
      std::optional<LabelVolume> mask;
      if (!mask_path.empty()) mask = read_labels(mask_path);
      const HistogramProfile p = histogram_profile(img, mask ? &*mask : nullptr);
      json peaks = json::array();
      for (const auto& pk : p.peaks)
        peaks.push_back({{"bin", pk.bin},
                         {"centre", 0.5 * (p.bin_edges[pk.bin] + p.bin_edges[pk.bin + 1])},
                         {"prominence", pk.prominence}});
      write_json(out, {{"bin_edges", p.bin_edges},
                       {"counts", p.counts},
                       {"peaks", peaks},
                       {"robust_range", {p.robust_low, p.robust_high}},
                       {"modality_guess", to_string(p.modality_guess)},
                       {"heuristic", true}});
      std::cout << to_string(p.modality_guess) << " (" << p.peaks.size() << " peaks)\n";
    } else if (*synth) {
      const fs::path path = write_synthetic_dataset(
          outdir, synth_n, seed, kind == "fine" ? SyntheticKind::FineStructure : SyntheticKind::Blobs, mixed);
      std::cout << path.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
