#include "regeval/harness.hpp"

#include "regeval/nifti.hpp"
#include "regeval/orientation.hpp"
#include "regeval/synthetic.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

namespace regeval {

namespace fs = std::filesystem;

const std::vector<std::string>& contrast_vocabulary() {
  static const std::vector<std::string> v{"T1w", "T2w", "T2*", "FLAIR"};
  return v;
}

const std::vector<std::string>& sequence_vocabulary() {
  static const std::vector<std::string> v{"MPRAGE", "MP2RAGE", "other", "unknown"};
  return v;
}

const SubjectEntry& Dataset::subject(const std::string& id) const {
  for (const auto& s : subjects)
    if (s.subject_id == id) return s;
  throw ManifestError("unknown subject id '" + id + "'");
}

namespace {

bool in_vocab(const std::vector<std::string>& v, const std::string& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

}  // namespace

void validate_subjects(const std::vector<SubjectEntry>& subjects, bool check_paths) {
  std::set<std::string> seen;
  for (const auto& s : subjects) {
    if (s.subject_id.empty()) throw ManifestError("subject with empty id");
    if (!seen.insert(s.subject_id).second) throw ManifestError("duplicate subject id '" + s.subject_id + "'");
    if (!in_vocab(contrast_vocabulary(), s.contrast))
      throw ManifestError("subject '" + s.subject_id + "': unknown contrast tag '" + s.contrast + "'");
    if (!in_vocab(sequence_vocabulary(), s.sequence))
      throw ManifestError("subject '" + s.subject_id + "': unknown sequence tag '" + s.sequence + "'");
    if (!(s.native_spacing.array() > 0.0).all())
      throw ManifestError("subject '" + s.subject_id + "': native_spacing must be positive");
    if (check_paths) {
      if (!fs::exists(s.image_path)) throw ManifestError("missing image " + s.image_path.string());
      for (const auto& [protocol, path] : s.label_paths)
        if (!fs::exists(path)) throw ManifestError("missing " + protocol + " labels " + path.string());
    }
  }
}

Dataset dataset_from_json(const json& j, const fs::path& base_dir, bool check_paths) {
  Dataset d;
  try {
    d.name = j.value("name", std::string("dataset"));
    for (const auto& e : j.at("subjects")) {
      SubjectEntry s;
      s.subject_id = e.at("subject_id").get<std::string>();
      auto resolve = [&](const std::string& p) {
        const fs::path path(p);
        return path.is_absolute() ? path : base_dir / path;
      };
      s.image_path = resolve(e.at("image").get<std::string>());
      if (e.contains("labels"))
        for (const auto& [protocol, path] : e.at("labels").items()) s.label_paths[protocol] = resolve(path.get<std::string>());
      s.contrast = e.value("contrast", std::string("T1w"));
      s.sequence = e.value("sequence", std::string("unknown"));
      if (e.contains("native_spacing")) {
        const auto sp = e.at("native_spacing").get<std::vector<double>>();
        if (sp.size() != 3) throw ManifestError("native_spacing needs 3 values");
        s.native_spacing = Vec3(sp[0], sp[1], sp[2]);
      }
      d.subjects.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what());
  }
  validate_subjects(d.subjects, check_paths);
  return d;
}

Dataset load_dataset(const fs::path& manifest, bool check_paths) {
  std::ifstream in(manifest);
  if (!in) throw ManifestError("cannot open manifest " + manifest.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ManifestError("manifest " + manifest.string() + " is not valid JSON: " + e.what());
  }
  return dataset_from_json(j, manifest.parent_path(), check_paths);
}

json to_json(const Dataset& d) {
  json subjects = json::array();
  for (const auto& s : d.subjects) {
    json labels = json::object();
    for (const auto& [protocol, path] : s.label_paths) labels[protocol] = path.generic_string();
    subjects.push_back({{"subject_id", s.subject_id},
                        {"image", s.image_path.generic_string()},
                        {"labels", labels},
                        {"contrast", s.contrast},
                        {"sequence", s.sequence},
                        {"native_spacing", {s.native_spacing[0], s.native_spacing[1], s.native_spacing[2]}}});
  }
  return {{"name", d.name}, {"subjects", subjects}};
}

const char* to_string(SplitRule r) { return r == SplitRule::BySequence ? "by-sequence" : "none"; }

SplitRule parse_split_rule(const std::string& s) {
  if (s == "none") return SplitRule::None;
  if (s == "by-sequence") return SplitRule::BySequence;
  throw std::invalid_argument("unknown split rule '" + s + "' (expected none or by-sequence)");
}

std::string split_tag(const SubjectEntry& fixed, const SubjectEntry& moving, SplitRule rule) {
  if (rule == SplitRule::None) return "all";
  if (fixed.sequence == moving.sequence) return fixed.sequence + "-" + moving.sequence;
  return "cross";
}

std::map<std::string, std::size_t> PairManifest::split_counts() const {
  std::map<std::string, std::size_t> c;
  for (const auto& p : pairs)
    if (p.split != "all") ++c[p.split];
  c["all"] = pairs.size();
  return c;
}

json to_json(const PairManifest& m) {
  json pairs = json::array();
  for (const auto& p : m.pairs) pairs.push_back({{"fixed", p.fixed_id}, {"moving", p.moving_id}, {"split", p.split}});
  return {{"split_rule", to_string(m.split_rule)}, {"seed", m.seed}, {"selection", m.selection}, {"pairs", pairs}};
}

PairManifest pair_manifest_from_json(const json& j) {
  PairManifest m;
  try {
    m.split_rule = parse_split_rule(j.value("split_rule", std::string("none")));
    m.seed = j.value("seed", std::uint64_t{0});
    m.selection = j.value("selection", std::string("all"));
    for (const auto& p : j.at("pairs"))
      m.pairs.push_back({p.at("fixed").get<std::string>(), p.at("moving").get<std::string>(),
                         p.value("split", std::string("all"))});
  } catch (const json::exception& e) {
    throw ManifestError(std::string("malformed pair manifest: ") + e.what());
  }
  for (const auto& p : m.pairs)
    if (p.fixed_id == p.moving_id) throw ManifestError("self-pair " + p.id() + " in pair manifest");
  return m;
}

PairManifest enumerate_pairs(const std::vector<SubjectEntry>& subjects, SplitRule rule) {
  if (subjects.size() < 2) throw std::invalid_argument("enumerate_pairs needs at least 2 subjects");
  validate_subjects(subjects, false);
  PairManifest m;
  m.split_rule = rule;
  m.pairs.reserve(subjects.size() * (subjects.size() - 1));
  for (const auto& f : subjects)
    for (const auto& mv : subjects)
      if (&f != &mv) m.pairs.push_back({f.subject_id, mv.subject_id, split_tag(f, mv, rule)});
  return m;
}

std::uint64_t SplitMix64::next() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t SplitMix64::below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("SplitMix64::below: bound must be positive");
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = next();
    if (r >= threshold) return r % bound;
  }
}

PairManifest select_subset(const PairManifest& m, std::size_t n, std::uint64_t seed) {
  if (n > m.pairs.size())
    throw std::invalid_argument("subset size " + std::to_string(n) + " exceeds " + std::to_string(m.pairs.size()) +
                                " pairs");
  std::vector<std::size_t> idx(m.pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  SplitMix64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  PairManifest out;
  out.split_rule = m.split_rule;
  out.seed = seed;
  out.selection = "subset(" + std::to_string(n) + ")";
  for (std::size_t i : idx) out.pairs.push_back(m.pairs[i]);
  return out;
}

bool is_builtin_method(const std::string& method) {
  return method == "identity" || method == "affine" || method == "greedy";
}

bool method_supports_features(const std::string& method) { return method == "affine" || method == "greedy"; }

void RunConfig::validate() const {
  registration.validate();
  transport.validate();
  if (affine_iterations < 0) throw std::invalid_argument("affine_iterations must be >= 0");
  if (!(trim_percent >= 0.0 && trim_percent < 100.0)) throw std::invalid_argument("trim must lie in [0, 100)");
  if (trim_scope != "group" && trim_scope != "method") throw std::invalid_argument("trim_scope must be group or method");
  if (workers < 0) throw std::invalid_argument("workers must be >= 0");
}

json to_json(const RunConfig& c) {
  return {{"registration", to_json(c.registration)},
          {"affine_iterations", c.affine_iterations},
          {"multimodal_similarity", to_string(c.multimodal_similarity)},
          {"transport",
           {{"mode", to_string(c.transport.mode)},
            {"background_probability_floor", c.transport.background_probability_floor}}},
          {"external_root", c.external_root.generic_string()},
          {"memory_budget_bytes", c.memory_budget_bytes},
          {"trim_percent", c.trim_percent},
          {"trim_scope", c.trim_scope},
          {"cohens_variant", stats::to_string(c.cohens_variant)}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  if (!j.is_object()) throw std::invalid_argument("run config must be a JSON object");
  if (j.contains("registration")) c.registration = registration_config_from_json(j.at("registration"));
  c.affine_iterations = j.value("affine_iterations", c.affine_iterations);
  if (j.contains("multimodal_similarity"))
    c.multimodal_similarity = parse_similarity(j.at("multimodal_similarity").get<std::string>());
  if (j.contains("transport")) {
    const auto& t = j.at("transport");
    if (t.contains("mode")) c.transport.mode = parse_transport_mode(t.at("mode").get<std::string>());
    c.transport.background_probability_floor =
        t.value("background_probability_floor", c.transport.background_probability_floor);
  }
  if (j.contains("external_root")) c.external_root = j.at("external_root").get<std::string>();
  c.memory_budget_bytes = j.value("memory_budget_bytes", c.memory_budget_bytes);
  c.trim_percent = j.value("trim_percent", c.trim_percent);
  c.trim_scope = j.value("trim_scope", c.trim_scope);
  if (j.contains("cohens_variant")) c.cohens_variant = stats::parse_cohens_variant(j.at("cohens_variant"));
  c.workers = j.value("workers", c.workers);
  c.validate();
  return c;
}

json to_json(const EvalRecord& r) {
  json per_label = json::object();
  for (const auto& [label, d] : r.dice.per_label) per_label[std::to_string(label)] = d;
  json j = {{"fixed", r.pair.fixed_id},
            {"moving", r.pair.moving_id},
            {"split", r.pair.split},
            {"method", r.method},
            {"protocol", r.protocol},
            {"contrast", r.contrast},
            {"similarity", r.similarity},
            {"cross_modality", r.cross_modality},
            {"transport", to_string(r.transport)},
            {"label_group", r.dice.label_group},
            {"dice", per_label},
            {"macro_dice", r.dice.macro_mean},
            {"weighted_dice", r.dice.weighted_mean},
            {"runtime_seconds", r.runtime_seconds},
            {"peak_memory_bytes", r.peak_memory_bytes},
            {"status", r.status}};
  j["min_jacobian"] = r.min_jacobian ? json(*r.min_jacobian) : json(nullptr);
  if (!r.ok()) {
    j["failure_reason"] = r.failure_reason;
    j["failure_message"] = r.failure_message;
  }
  return j;
}

EvalRecord eval_record_from_json(const json& j) {
  EvalRecord r;
  r.pair = {j.at("fixed").get<std::string>(), j.at("moving").get<std::string>(), j.value("split", std::string("all"))};
  r.method = j.at("method").get<std::string>();
  r.protocol = j.at("protocol").get<std::string>();
  r.contrast = j.value("contrast", std::string());
  r.similarity = j.value("similarity", std::string("none"));
  r.cross_modality = j.value("cross_modality", false);
  r.transport = parse_transport_mode(j.value("transport", std::string("prob")));
  r.dice.pair_id = r.pair.id();
  r.dice.label_group = j.value("label_group", std::string("all"));
  if (j.contains("dice"))
    for (const auto& [label, d] : j.at("dice").items()) r.dice.per_label[std::stoi(label)] = d.get<double>();
  r.dice.macro_mean = j.value("macro_dice", 0.0);
  r.dice.weighted_mean = j.value("weighted_dice", 0.0);
  r.runtime_seconds = j.value("runtime_seconds", 0.0);
  r.peak_memory_bytes = j.value("peak_memory_bytes", std::size_t{0});
  if (j.contains("min_jacobian") && !j.at("min_jacobian").is_null()) r.min_jacobian = j.at("min_jacobian").get<double>();
  r.status = j.value("status", std::string("ok"));
  r.failure_reason = j.value("failure_reason", std::string());
  r.failure_message = j.value("failure_message", std::string());
  return r;
}

bool is_cross_modality(const SubjectEntry& fixed, const SubjectEntry& moving, const Image& fixed_image,
                       const Image& moving_image) {
  if (fixed.contrast != moving.contrast) return true;
  if (fixed.sequence != "unknown" && moving.sequence != "unknown") return fixed.sequence != moving.sequence;
  return histogram_profile(fixed_image).modality_guess != histogram_profile(moving_image).modality_guess;
}

namespace {

struct Failure : std::runtime_error {
  Failure(std::string c, const std::string& what) : std::runtime_error(what), code(std::move(c)) {}
  std::string code;
};

std::pair<std::string, std::string> classify(std::exception_ptr e) {
  try {
    std::rethrow_exception(e);
  } catch (const Failure& f) {
    return {f.code, f.what()};
  } catch (const std::bad_alloc&) {
    return {"resource-exhausted", "memory budget exceeded"};
  } catch (const NumericalError& x) {
    return {"numerical-error", x.what()};
  } catch (const OptimizationError& x) {
    return {"optimization-failure", x.what()};
  } catch (const TransformIntegrityError& x) {
    return {"invalid-transform", x.what()};
  } catch (const FormatError& x) {
    return {"input-error", x.what()};
  } catch (const CorruptionError& x) {
    return {"input-error", x.what()};
  } catch (const IoError& x) {
    return {"input-error", x.what()};
  } catch (const LabelIntegrityError& x) {
    return {"input-error", x.what()};
  } catch (const std::exception& x) {
    return {"error", x.what()};
  } catch (...) {
    return {"error", "unknown failure"};
  }
}

SubjectVolumes load_subject(const SubjectEntry& s, const std::vector<std::string>& protocols,
                            const Preprocess& preprocess) {
  SubjectVolumes v;
  v.image = read_image(s.image_path);
  for (const auto& p : protocols) {
    const auto it = s.label_paths.find(p);
    if (it != s.label_paths.end()) v.labels.emplace(p, read_labels(it->second));
  }
  if (preprocess) preprocess(v);
  return v;
}

SubjectVolumes canonical(const SubjectVolumes& v) {
  SubjectVolumes c;
  c.image = reorient(v.image, "RAS");
  for (const auto& [p, lv] : v.labels) c.labels.emplace(p, reorient(lv, "RAS"));
  return c;
}

std::string pair_contrast(const SubjectEntry& f, const SubjectEntry& m) {
  return f.contrast == m.contrast ? f.contrast : f.contrast + "/" + m.contrast;
}

constexpr double kGridTolerance = 1e-4;

struct PairJob {
  const Dataset& dataset;
  const std::vector<std::string>& methods;
  const std::vector<std::string>& protocols;
  const RunConfig& cfg;
  const Preprocess& preprocess;

  std::vector<EvalRecord> run(const PairEntry& pair) const {
    const SubjectEntry& fe = dataset.subject(pair.fixed_id);
    const SubjectEntry& me = dataset.subject(pair.moving_id);
    std::vector<EvalRecord> out;
    auto base = [&](const std::string& method, const std::string& protocol) {
      EvalRecord r;
      r.pair = pair;
      r.method = method;
      r.protocol = protocol;
      r.contrast = pair_contrast(fe, me);
      r.transport = cfg.transport.mode;
      r.dice.pair_id = pair.id();
      return r;
    };
    auto failed = [&](EvalRecord r, const std::pair<std::string, std::string>& why) {
      r.status = "failed";
      r.failure_reason = why.first;
      r.failure_message = why.second;
      r.dice.per_label.clear();
      r.dice.macro_mean = r.dice.weighted_mean = 0.0;
      return r;
    };

    SubjectVolumes fv, mv;
    bool cross = false;
    try {
      fv = load_subject(fe, protocols, preprocess);
      mv = load_subject(me, protocols, preprocess);
      cross = is_cross_modality(fe, me, fv.image, mv.image);
    } catch (...) {
      const auto why = classify(std::current_exception());
      for (const auto& m : methods)
        for (const auto& p : protocols) out.push_back(failed(base(m, p), why));
      return out;
    }
    const Similarity sim = cross ? cfg.multimodal_similarity : cfg.registration.similarity;
    std::optional<SubjectVolumes> fc, mc;

    for (const auto& method : methods) {
      MemoryTracker& mem = MemoryTracker::local();
      const std::size_t mem_base = mem.current();
      mem.reset_peak();
      if (cfg.memory_budget_bytes) mem.set_budget(mem_base + cfg.memory_budget_bytes);
      const auto t0 = std::chrono::steady_clock::now();
      std::string similarity = "external";
      if (is_builtin_method(method)) similarity = method_supports_features(method) ? to_string(sim) : "none";
      try {
        AffineTransform affine;
        std::optional<DisplacementField> field;
        std::optional<double> min_jac;
        const SubjectVolumes* F = &fv;
        const SubjectVolumes* M = &mv;
        if (is_builtin_method(method)) {
          // The engine works in RAS voxel order so that results do not depend
          // on the storage orientation; Dice is invariant to the permutation.
          if (!fc) {
            fc = canonical(fv);
            mc = canonical(mv);
          }
          F = &*fc;
          M = &*mc;
          if (method != "identity") affine = affine_register(F->image, M->image, sim, cfg.affine_iterations);
          if (method == "greedy") {
            RegistrationConfig rc = cfg.registration;
            rc.similarity = sim;
            RegistrationResult res = greedy_register(F->image, M->image, affine, rc);
            field = std::move(res.field);
            min_jac = res.min_jacobian;
          }
        } else {
          const fs::path path = cfg.external_root / method / (pair.id() + ".nii.gz");
          if (!fs::exists(path)) throw Failure("missing-transform", "no transform at " + path.string());
          field = read_displacement_field(path);
          if (!field->grid.same_lattice(F->image.grid(), kGridTolerance))
            throw Failure("grid-mismatch", "transform grid differs from the fixed image grid");
        }
        const double reg_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        for (const auto& protocol : protocols) {
          EvalRecord r = base(method, protocol);
          r.similarity = similarity;
          r.cross_modality = cross;
          const auto t1 = std::chrono::steady_clock::now();
          try {
            const auto fl = F->labels.find(protocol);
            const auto ml = M->labels.find(protocol);
            if (fl == F->labels.end() || ml == M->labels.end())
              throw Failure("missing-labels", "no " + protocol + " labels for this pair");
            if (!fl->second.grid().same_lattice(F->image.grid(), kGridTolerance) ||
                !ml->second.grid().same_lattice(M->image.grid(), kGridTolerance))
              throw Failure("grid-mismatch", "labelmap grid differs from its image grid");
            const LabelVolume warped =
                warp_labels(ml->second, {affine, field ? &*field : nullptr}, fl->second.grid(), cfg.transport);
            r.dice = dice(fl->second, warped, {}, "all", pair.id());
            r.min_jacobian = min_jac;
            r.runtime_seconds =
                reg_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
            r.peak_memory_bytes = mem.peak() - mem_base;
            out.push_back(std::move(r));
          } catch (...) {
            out.push_back(failed(std::move(r), classify(std::current_exception())));
          }
        }
      } catch (...) {
        const auto why = classify(std::current_exception());
        for (const auto& p : protocols) {
          EvalRecord r = base(method, p);
          r.similarity = similarity;
          r.cross_modality = cross;
          r.peak_memory_bytes = mem.peak() - mem_base;
          out.push_back(failed(std::move(r), why));
        }
      }
      mem.set_budget(0);
    }
    return out;
  }
};

}  // namespace

std::vector<EvalRecord> run_protocol(const Dataset& dataset, const PairManifest& manifest,
                                     const std::vector<std::string>& methods,
                                     const std::vector<std::string>& protocols, const RunConfig& cfg,
                                     const Preprocess& preprocess) {
  cfg.validate();
  if (methods.empty()) throw std::invalid_argument("run_protocol needs at least one method");
  if (protocols.empty()) throw std::invalid_argument("run_protocol needs at least one label protocol");
  for (const auto& p : manifest.pairs) {
    dataset.subject(p.fixed_id);
    dataset.subject(p.moving_id);
    if (p.fixed_id == p.moving_id) throw ManifestError("self-pair " + p.id());
  }

  const PairJob job{dataset, methods, protocols, cfg, preprocess};
  const std::size_t n = manifest.pairs.size();
  std::vector<std::vector<EvalRecord>> per_pair(n);
  const int workers =
      static_cast<int>(std::min<std::size_t>(n, static_cast<std::size_t>(cfg.workers > 0 ? cfg.workers : worker_threads())));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) per_pair[i] = job.run(manifest.pairs[i]);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        set_inner_threads(1);
        for (std::size_t i = next++; i < n; i = next++) per_pair[i] = job.run(manifest.pairs[i]);
      });
    for (auto& t : pool) t.join();
  }
  std::vector<EvalRecord> out;
  for (auto& v : per_pair)
    for (auto& r : v) out.push_back(std::move(r));
  return out;
}

std::size_t similarity_violations(const std::vector<EvalRecord>& records) {
  std::size_t n = 0;
  for (const auto& r : records)
    if (r.cross_modality && method_supports_features(r.method) && r.similarity != to_string(Similarity::MIND)) ++n;
  return n;
}

namespace {

using GroupKey = std::tuple<std::string, std::string, std::string, std::string>;  // method, protocol, contrast, split

std::vector<std::string> split_keys(const EvalRecord& r) {
  if (r.pair.split == "all") return {"all"};
  return {r.pair.split, "all"};
}

// Record indices kept after trimming, per summary group.
std::map<GroupKey, std::vector<std::size_t>> trimmed_groups(const std::vector<EvalRecord>& records,
                                                            const RunConfig& cfg) {
  std::map<GroupKey, std::vector<std::size_t>> groups;
  auto trim = [&](const std::vector<std::size_t>& members) {
    if (cfg.trim_percent <= 0.0 || members.empty()) return members;
    std::vector<double> scores;
    for (std::size_t i : members) scores.push_back(records[i].dice.macro_mean);
    std::vector<std::size_t> kept;
    for (std::size_t k : trim_kept_indices(scores, cfg.trim_percent)) kept.push_back(members[k]);
    return kept;
  };
  if (cfg.trim_scope == "method") {
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<std::size_t>> pools;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].ok()) pools[{records[i].method, records[i].protocol, records[i].contrast}].push_back(i);
    for (auto& [key, members] : pools)
      for (std::size_t i : trim(members))
        for (const auto& s : split_keys(records[i]))
          groups[{records[i].method, records[i].protocol, records[i].contrast, s}].push_back(i);
  } else {
    std::map<GroupKey, std::vector<std::size_t>> raw;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].ok())
        for (const auto& s : split_keys(records[i]))
          raw[{records[i].method, records[i].protocol, records[i].contrast, s}].push_back(i);
    for (auto& [key, members] : raw) groups[key] = trim(members);
  }
  return groups;
}

std::vector<std::string> methods_in_order(const std::vector<EvalRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records)
    if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
  return out;
}

}  // namespace

ReportBundle build_report(const std::vector<EvalRecord>& records, const RunConfig& cfg,
                          const PairManifest* manifest) {
  if (records.empty()) throw std::invalid_argument("build_report: no records");
  ReportBundle b;
  b.records = records;

  std::map<GroupKey, std::size_t> n_input, failures;
  for (const auto& r : records)
    for (const auto& s : split_keys(r)) {
      const GroupKey key{r.method, r.protocol, r.contrast, s};
      (r.ok() ? n_input[key] : failures[key])++;
      n_input.try_emplace(key, 0);
    }
  const auto kept = trimmed_groups(records, cfg);

  for (const auto& [key, n] : n_input) {
    GroupSummary g;
    std::tie(g.method, g.protocol, g.contrast, g.split) = key;
    g.n_input = n;
    g.excluded_failures = failures.count(key) ? failures.at(key) : 0;
    g.trim_percent = cfg.trim_percent;
    const auto it = kept.find(key);
    std::vector<double> scores;
    if (it != kept.end())
      for (std::size_t i : it->second) scores.push_back(records[i].dice.macro_mean);
    g.n_trimmed = n - scores.size();
    if (!scores.empty()) g.summary = stats::summary(scores);
    b.summaries.push_back(g);
    if (scores.size() >= 2) {
      const auto sorted = std::minmax_element(scores.begin(), scores.end());
      if (*sorted.second > *sorted.first && stats::silverman_bandwidth(scores) > 0.0)
        b.violins.push_back({"", g.method, g.protocol, g.contrast, g.split, stats::violin(scores, std::nullopt, g.method)});
    }
  }

  const auto methods = methods_in_order(records);
  std::set<std::tuple<std::string, std::string, std::string>> slices;
  for (const auto& [key, n] : n_input) slices.insert({std::get<1>(key), std::get<2>(key), std::get<3>(key)});
  for (const auto& [protocol, contrast, split] : slices)
    for (std::size_t a = 0; a < methods.size(); ++a)
      for (std::size_t c = a + 1; c < methods.size(); ++c) {
        const auto ia = kept.find({methods[a], protocol, contrast, split});
        const auto ib = kept.find({methods[c], protocol, contrast, split});
        if (ia == kept.end() || ib == kept.end()) continue;
        std::map<std::string, double> scores_b;
        for (std::size_t i : ib->second) scores_b[records[i].pair.id()] = records[i].dice.macro_mean;
        std::vector<double> xa, xb;
        for (std::size_t i : ia->second) {
          const auto f = scores_b.find(records[i].pair.id());
          if (f == scores_b.end()) continue;
          xa.push_back(records[i].dice.macro_mean);
          xb.push_back(f->second);
        }
        if (xa.size() < 2) continue;
        b.comparisons.push_back({protocol, contrast, split, stats::compare(methods[a], xa, methods[c], xb, cfg.cohens_variant)});
      }

  std::size_t n_failed = 0;
  for (const auto& r : records) n_failed += r.ok() ? 0 : 1;
  b.provenance = {{"software", "regeval"},
                  {"version", REGEVAL_VERSION},
                  {"run_config", to_json(cfg)},
                  {"methods", methods},
                  {"n_records", records.size()},
                  {"n_failed", n_failed},
                  {"summary_statistic", "macro Dice per record"}};
  if (manifest) {
    b.provenance["seed"] = manifest->seed;
    b.provenance["selection"] = manifest->selection;
    b.provenance["split_rule"] = to_string(manifest->split_rule);
    b.provenance["n_pairs"] = manifest->pairs.size();
  }
  return b;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt_dice(double d) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9f", d);
  return buf;
}

json summary_json(const GroupSummary& g) {
  json j = {{"method", g.method},
            {"protocol", g.protocol},
            {"contrast", g.contrast},
            {"split", g.split},
            {"n_input", g.n_input},
            {"n_trimmed", g.n_trimmed},
            {"n", g.summary.n},
            {"excluded_failures", g.excluded_failures},
            {"trim_percent", g.trim_percent}};
  if (!g.variant.empty()) j["variant"] = g.variant;
  if (g.summary.n > 0) {
    j["mean"] = g.summary.mean;
    j["median"] = g.summary.median;
    j["std"] = g.summary.std;
  }
  return j;
}

json comparison_json(const Comparison& c) {
  const auto& r = c.report;
  return {{"protocol", c.protocol},
          {"contrast", c.contrast},
          {"split", c.split},
          {"method_a", r.method_a},
          {"method_b", r.method_b},
          {"n", r.n},
          {"mean_a", r.mean_a},
          {"mean_b", r.mean_b},
          {"median_a", r.median_a},
          {"median_b", r.median_b},
          {"std_a", r.std_a},
          {"std_b", r.std_b},
          {"t_statistic", r.t_statistic},
          {"p_value", r.p_value},
          {"cohens_d", r.cohens_d},
          {"cohens_variant", stats::to_string(r.variant)},
          {"practical", r.practical},
          {"significant", r.significant},
          {"degenerate", r.degenerate}};
}

json violin_json(const ViolinEntry& v) {
  json j = {{"method", v.method},
            {"protocol", v.protocol},
            {"contrast", v.contrast},
            {"split", v.split},
            {"bandwidth", v.data.bandwidth},
            {"support", v.data.kde_support},
            {"density", v.data.kde_density},
            {"q1", v.data.q1},
            {"median", v.data.median},
            {"q3", v.data.q3}};
  if (!v.variant.empty()) j["variant"] = v.variant;
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::string records_csv(const std::vector<EvalRecord>& records) {
  std::ostringstream os;
  os << "pair_id,fixed_id,moving_id,split,method,protocol,contrast,similarity,transport,label_group,label,dice,status,"
        "reason\n";
  for (const auto& r : records) {
    const std::string prefix = csv_field(r.pair.id()) + "," + csv_field(r.pair.fixed_id) + "," +
                               csv_field(r.pair.moving_id) + "," + csv_field(r.pair.split) + "," +
                               csv_field(r.method) + "," + csv_field(r.protocol) + "," + csv_field(r.contrast) + "," +
                               csv_field(r.similarity) + "," + to_string(r.transport) + "," +
                               csv_field(r.dice.label_group) + ",";
    if (!r.ok()) {
      os << prefix << ",," << r.status << "," << csv_field(r.failure_reason) << "\n";
      continue;
    }
    for (const auto& [label, d] : r.dice.per_label) os << prefix << label << "," << fmt_dice(d) << ",ok,\n";
    os << prefix << "__macro__," << fmt_dice(r.dice.macro_mean) << ",ok,\n";
  }
  return os.str();
}

json report_json(const ReportBundle& b) {
  json summaries = json::array(), comparisons = json::array(), violins = json::array();
  for (const auto& s : b.summaries) summaries.push_back(summary_json(s));
  for (const auto& c : b.comparisons) comparisons.push_back(comparison_json(c));
  for (const auto& v : b.violins) violins.push_back(violin_json(v));
  return {{"provenance", b.provenance}, {"summaries", summaries}, {"comparisons", comparisons}, {"violins", violins}};
}

void emit_report(const ReportBundle& b, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "records.csv", records_csv(b.records));
  json records = json::array();
  for (const auto& r : b.records) records.push_back(to_json(r));
  write_text(dir / "records.json", records.dump(2) + "\n");
  write_text(dir / "report.json", report_json(b).dump(2) + "\n");
}

AblationVariant AblationVariant::parse(const std::string& s) {
  AblationVariant v;
  if (s == "native") return v;
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("ablation variant '" + s + "' must look like key=value");
  const std::string key = s.substr(0, eq);
  std::string value = s.substr(eq + 1);
  if (key == "crop") {
    v.kind = Kind::Crop;
    if (value.size() > 4 && value.substr(value.size() - 4) == ":pad") {
      v.allow_padding = true;
      value.resize(value.size() - 4);
    }
    long long a = 0, b = 0, c = 0;
    char x1 = 0, x2 = 0, extra = 0;
    if (std::sscanf(value.c_str(), "%lld%c%lld%c%lld%c", &a, &x1, &b, &x2, &c, &extra) != 5 || x1 != 'x' || x2 != 'x' ||
        a < 1 || b < 1 || c < 1)
      throw std::invalid_argument("crop variant needs positive NxNxN dims, got '" + value + "'");
    v.dims = {a, b, c};
  } else if (key == "orient") {
    v.kind = Kind::Orient;
    if (!valid_orientation_code(value)) throw std::invalid_argument("invalid orientation code '" + value + "'");
    v.orientation = value;
  } else if (key == "iso") {
    v.kind = Kind::Iso;
    std::size_t used = 0;
    v.spacing = std::stod(value, &used);
    if (used != value.size() || !(v.spacing > 0.0)) throw std::invalid_argument("iso variant needs a positive spacing");
  } else {
    throw std::invalid_argument("unknown ablation variant '" + key + "' (expected crop, orient or iso)");
  }
  return v;
}

std::string AblationVariant::name() const {
  switch (kind) {
    case Kind::Native: return "native";
    case Kind::Crop:
      return "crop=" + std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + "x" + std::to_string(dims[2]) +
             (allow_padding ? ":pad" : "");
    case Kind::Orient: return "orient=" + orientation;
    case Kind::Iso: {
      char buf[32];
      std::snprintf(buf, sizeof buf, "iso=%g", spacing);
      return buf;
    }
  }
  return "?";
}

namespace {

void check_variant(const AblationVariant& v, const Index3& dims) {
  if (v.kind != AblationVariant::Kind::Crop || v.allow_padding) return;
  for (int a = 0; a < 3; ++a)
    if (v.dims[a] > dims[a])
      throw std::invalid_argument(v.name() + " exceeds the volume (" + std::to_string(dims[0]) + "x" +
                                  std::to_string(dims[1]) + "x" + std::to_string(dims[2]) +
                                  ") and padding is not allowed");
}

GridSpec isotropic_grid(const GridSpec& g, double s) {
  Index3 dims;
  Mat4 a = Mat4::Identity();
  for (int ax = 0; ax < 3; ++ax) {
    dims[ax] = std::max<std::int64_t>(1, std::llround(g.dims[ax] * g.spacing[ax] / s));
    a.col(ax).head<3>() = g.voxel_to_world.col(ax).head<3>() / g.spacing[ax] * s;
  }
  const Vec3 centre = g.to_world(Vec3((g.dims[0] - 1) / 2.0, (g.dims[1] - 1) / 2.0, (g.dims[2] - 1) / 2.0));
  const Vec3 half((dims[0] - 1) / 2.0, (dims[1] - 1) / 2.0, (dims[2] - 1) / 2.0);
  a.topRightCorner<3, 1>() = centre - a.topLeftCorner<3, 3>() * half;
  return GridSpec::from_affine(dims, a);
}

}  // namespace

void AblationVariant::apply(SubjectVolumes& v) const {
  switch (kind) {
    case Kind::Native: return;
    case Kind::Crop: {
      check_variant(*this, v.image.dims());
      const Index3 start = crop_window_start(v.image.dims(), dims, intensity_centroid(v.image));
      v.image = crop_or_pad_at(v.image, dims, start);
      for (auto& [p, lv] : v.labels) lv = crop_or_pad_at(lv, dims, start);
      return;
    }
    case Kind::Orient:
      v.image = reorient(v.image, orientation);
      for (auto& [p, lv] : v.labels) lv = reorient(lv, orientation);
      return;
    case Kind::Iso: {
      const GridSpec g = isotropic_grid(v.image.grid(), spacing);
      v.image = resample(v.image, g, Interp::Trilinear);
      for (auto& [p, lv] : v.labels) lv = warp_labels(lv, {}, g);
      return;
    }
  }
}

AblationReport run_ablation(const Dataset& dataset, const PairManifest& manifest,
                            const std::vector<std::string>& methods, const std::vector<std::string>& protocols,
                            const std::vector<AblationVariant>& variants, const RunConfig& cfg) {
  if (variants.empty()) throw std::invalid_argument("run_ablation needs at least one variant");
  std::set<std::string> used;
  for (const auto& p : manifest.pairs) {
    used.insert(p.fixed_id);
    used.insert(p.moving_id);
  }
  for (const auto& id : used) {
    const Image img = read_image(dataset.subject(id).image_path);
    for (const auto& v : variants) check_variant(v, img.dims());
  }

  AblationReport rep;
  for (const auto& v : variants) {
    rep.variants.push_back(v.name());
    rep.records.push_back(run_protocol(dataset, manifest, methods, protocols, cfg, [&v](SubjectVolumes& s) { v.apply(s); }));
    const ReportBundle b = build_report(rep.records.back(), cfg, &manifest);
    for (auto s : b.summaries) {
      s.variant = v.name();
      rep.summaries.push_back(s);
    }
  }

  for (std::size_t k = 1; k < variants.size(); ++k) {
    const auto base = trimmed_groups(rep.records[0], cfg);
    const auto other = trimmed_groups(rep.records[k], cfg);
    for (const auto& [key, idx] : base) {
      const auto it = other.find(key);
      if (it == other.end()) continue;
      std::map<std::string, double> scores_b;
      for (std::size_t i : it->second) scores_b[rep.records[k][i].pair.id()] = rep.records[k][i].dice.macro_mean;
      std::vector<double> xa, xb;
      for (std::size_t i : idx) {
        const auto f = scores_b.find(rep.records[0][i].pair.id());
        if (f == scores_b.end()) continue;
        xa.push_back(rep.records[0][i].dice.macro_mean);
        xb.push_back(f->second);
      }
      if (xa.size() < 2) continue;
      const auto& [method, protocol, contrast, split] = key;
      rep.comparisons.push_back({protocol, contrast, split,
                                 stats::compare(method + "@" + rep.variants[0], xa, method + "@" + rep.variants[k], xb,
                                                cfg.cohens_variant)});
    }
  }
  rep.provenance = {{"software", "regeval"},
                    {"version", REGEVAL_VERSION},
                    {"run_config", to_json(cfg)},
                    {"variants", rep.variants},
                    {"methods", methods},
                    {"protocols", protocols},
                    {"seed", manifest.seed},
                    {"selection", manifest.selection},
                    {"n_pairs", manifest.pairs.size()}};
  return rep;
}

json ablation_json(const AblationReport& r) {
  json summaries = json::array(), comparisons = json::array();
  for (const auto& s : r.summaries) summaries.push_back(summary_json(s));
  for (const auto& c : r.comparisons) comparisons.push_back(comparison_json(c));
  return {{"provenance", r.provenance}, {"summaries", summaries}, {"comparisons", comparisons}};
}

void emit_ablation(const AblationReport& r, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < r.variants.size(); ++k) {
    std::string name = r.variants[k];
    std::replace_if(name.begin(), name.end(), [](char c) { return c == '=' || c == ':' || c == '/'; }, '_');
    write_text(dir / ("records_" + name + ".csv"), records_csv(r.records[k]));
  }
  write_text(dir / "ablation.json", ablation_json(r).dump(2) + "\n");
}

fs::path write_synthetic_dataset(const fs::path& dir, int n, std::uint64_t seed, SyntheticKind kind,
                                 bool mixed_sequences) {
  if (n < 1) throw std::invalid_argument("synthetic dataset needs at least one subject");
  fs::create_directories(dir);
  const bool fine = kind == SyntheticKind::FineStructure;
  const GridSpec grid = fine ? centred_grid({64, 64, 64}, 0.6) : centred_grid({48, 48, 48}, 1.0);
  const Vec3 base_axes = fine ? Vec3(13.0, 11.5, 10.0) : Vec3(15.0, 13.0, 11.0);
  json subjects = json::array();
  for (int i = 0; i < n; ++i) {
    SplitMix64 rng(seed * 1000003ull + static_cast<std::uint64_t>(i));
    auto uniform = [&] { return static_cast<double>(rng.next() >> 11) * 0x1.0p-53 * 2.0 - 1.0; };
    PhantomSpec spec;
    for (int a = 0; a < 3; ++a) spec.semi_axes[a] = base_axes[a] * (1.0 + 0.12 * uniform());
    for (int a = 0; a < 3; ++a) spec.centre[a] = 1.5 * uniform();
    const bool mp2 = mixed_sequences && i % 2 == 1;
    if (fine) {
      spec.edge_width = 0.4;
      spec.layers = {{1.0, 1, 100.0}, {0.94, 2, 30.0}, {0.88, 1, 100.0}, {0.45, 3, 150.0}};
    } else {
      spec.layers = {{1.0, 1, mp2 ? 180.0 : 100.0}, {0.55, 2, mp2 ? 60.0 : 160.0}};
    }
    Phantom ph = make_phantom(grid, spec);
    ph.image.header().datatype = DataType::Float32;
    const std::string id = "sub-" + std::string(i < 9 ? "0" : "") + std::to_string(i + 1);
    write_image(ph.image, dir / (id + "_T1w.nii.gz"));
    write_labels(ph.labels, dir / (id + "_coarse.nii.gz"));
    json labels = {{"coarse", id + "_coarse.nii.gz"}};
    if (!fine) {
      // Finer protocol: split the core by hemisphere and the shell front/back.
      LabelVolume fl = ph.labels;
      for_each_voxel(grid.dims, [&](std::int64_t x, std::int64_t y, std::int64_t z, std::int64_t v) {
        const Vec3 w = grid.to_world(Vec3(double(x), double(y), double(z)));
        if (fl[v] == 2 && w.x() < spec.centre.x()) fl[v] = 3;
        if (fl[v] == 1 && w.y() < spec.centre.y()) fl[v] = 4;
      });
      write_labels(fl, dir / (id + "_fine.nii.gz"));
      labels["fine"] = id + "_fine.nii.gz";
    }
    const double sp = grid.spacing[0];
    subjects.push_back({{"subject_id", id},
                        {"image", id + "_T1w.nii.gz"},
                        {"labels", labels},
                        {"contrast", "T1w"},
                        {"sequence", mp2 ? "MP2RAGE" : "MPRAGE"},
                        {"native_spacing", {sp, sp, sp}}});
  }
  const json manifest = {{"name", fine ? "synthetic-fine" : "synthetic-blobs"}, {"subjects", subjects}};
  const fs::path path = dir / "manifest.json";
  write_text(path, manifest.dump(2) + "\n");
  return path;
}

}  // namespace regeval
