#pragma once

#include "regeval/label_transport.hpp"
#include "regeval/metrics.hpp"
#include "regeval/register.hpp"
#include "regeval/stats.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace regeval {

using json = nlohmann::json;

const std::vector<std::string>& contrast_vocabulary();  ///< T1w, T2w, T2*, FLAIR
/// MPRAGE, MP2RAGE, other, unknown. "unknown" defers to the histogram profile.
const std::vector<std::string>& sequence_vocabulary();

struct SubjectEntry {
  std::string subject_id;
  std::filesystem::path image_path;
  std::map<std::string, std::filesystem::path> label_paths;  ///< protocol -> path
  std::string contrast = "T1w";
  std::string sequence = "unknown";
  Vec3 native_spacing = Vec3::Ones();
};

struct Dataset {
  std::string name;
  std::vector<SubjectEntry> subjects;

  const SubjectEntry& subject(const std::string& id) const;
};

/// Duplicate ids, out-of-vocabulary tags and (optionally) missing files raise
/// ManifestError.
void validate_subjects(const std::vector<SubjectEntry>& subjects, bool check_paths);

/// Manifest JSON: {"name": ..., "subjects": [{"subject_id", "image",
/// "labels": {protocol: path}, "contrast", "sequence", "native_spacing"}]}.
/// Relative paths resolve against base_dir.
Dataset dataset_from_json(const json& j, const std::filesystem::path& base_dir, bool check_paths = true);
Dataset load_dataset(const std::filesystem::path& manifest, bool check_paths = true);
json to_json(const Dataset& d);

enum class SplitRule { None, BySequence };
const char* to_string(SplitRule r);
SplitRule parse_split_rule(const std::string& s);

/// "all" without a rule; "<seq>-<seq>" for same-sequence pairs and "cross"
/// otherwise under the by-sequence rule.
std::string split_tag(const SubjectEntry& fixed, const SubjectEntry& moving, SplitRule rule);

struct PairEntry {
  std::string fixed_id, moving_id, split = "all";
  std::string id() const { return fixed_id + "__" + moving_id; }
  bool operator==(const PairEntry&) const = default;
};

struct PairManifest {
  std::vector<PairEntry> pairs;
  SplitRule split_rule = SplitRule::None;
  std::uint64_t seed = 0;
  std::string selection = "all";  ///< "all" or "subset(n)"

  /// Pair count per split tag, plus the total under "all".
  std::map<std::string, std::size_t> split_counts() const;
};

json to_json(const PairManifest& m);
PairManifest pair_manifest_from_json(const json& j);

/// All ordered (fixed, moving) pairs without self-pairs, in subject order.
PairManifest enumerate_pairs(const std::vector<SubjectEntry>& subjects, SplitRule rule = SplitRule::BySequence);

/// SplitMix64 (Steele, Lea, Flood 2014). Seed 0 yields 0xE220A8397B1DCDAF,
/// 0x6E789E6AA1B965F4, 0x06C45D188009454F, ...
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  /// Unbiased draw from [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound);

 private:
  std::uint64_t state_;
};

/// n pairs drawn without replacement (partial Fisher-Yates over pair
/// indices), returned in manifest order.
PairManifest select_subset(const PairManifest& m, std::size_t n, std::uint64_t seed);

/// Built-in methods run on the in-repo engine; any other name is ingested from
/// <external_root>/<method>/<fixed>__<moving>.nii.gz.
bool is_builtin_method(const std::string& method);
/// Methods that optimize a similarity and can switch to MIND features.
bool method_supports_features(const std::string& method);

struct RunConfig {
  RegistrationConfig registration;  ///< similarity used for same-modality pairs
  int affine_iterations = 50;
  Similarity multimodal_similarity = Similarity::MIND;
  LabelTransportConfig transport;
  std::filesystem::path external_root;
  std::size_t memory_budget_bytes = 0;  ///< per job, tracked buffers; 0 = unlimited
  double trim_percent = 0.0;
  std::string trim_scope = "group";  ///< "group" or "method"
  stats::CohensVariant cohens_variant = stats::CohensVariant::Pooled;
  int workers = 0;  ///< 0 = REGEVAL_THREADS / hardware

  void validate() const;
};

json to_json(const RunConfig& c);
RunConfig run_config_from_json(const json& j);

struct EvalRecord {
  PairEntry pair;
  std::string method, protocol, contrast;
  std::string similarity = "none";  ///< ssd, lncc, mind; none / external otherwise
  bool cross_modality = false;
  TransportMode transport = TransportMode::Probabilistic;
  DiceRecord dice;
  double runtime_seconds = 0.0;
  std::size_t peak_memory_bytes = 0;
  std::optional<double> min_jacobian;
  std::string status = "ok";
  std::string failure_reason, failure_message;

  bool ok() const { return status == "ok"; }
};

json to_json(const EvalRecord& r);
EvalRecord eval_record_from_json(const json& j);

struct SubjectVolumes {
  Image image;
  std::map<std::string, LabelVolume> labels;
};
using Preprocess = std::function<void(SubjectVolumes&)>;

/// True when the pair needs a multimodal similarity: sequence or contrast tags
/// differ; with an unknown sequence tag the histogram profiles decide.
bool is_cross_modality(const SubjectEntry& fixed, const SubjectEntry& moving, const Image& fixed_image,
                       const Image& moving_image);

/// Evaluates every pair x method x protocol. Failures become records with a
/// reason code (missing-transform, grid-mismatch, resource-exhausted, ...).
/// Records come back in manifest order, then method, then protocol order.
std::vector<EvalRecord> run_protocol(const Dataset& dataset, const PairManifest& manifest,
                                     const std::vector<std::string>& methods,
                                     const std::vector<std::string>& protocols, const RunConfig& cfg,
                                     const Preprocess& preprocess = {});

/// Records of feature-capable methods on cross-modality pairs whose similarity
/// is not MIND.
std::size_t similarity_violations(const std::vector<EvalRecord>& records);

struct GroupSummary {
  std::string variant;  ///< empty outside ablations
  std::string method, protocol, contrast, split;
  std::size_t n_input = 0, n_trimmed = 0, excluded_failures = 0;
  double trim_percent = 0.0;
  stats::Summary summary;
};

struct Comparison {
  std::string protocol, contrast, split;
  stats::EffectSizeReport report;
};

struct ViolinEntry {
  std::string variant, method, protocol, contrast, split;
  stats::ViolinData data;
};

struct ReportBundle {
  std::vector<EvalRecord> records;
  std::vector<GroupSummary> summaries;
  std::vector<Comparison> comparisons;
  std::vector<ViolinEntry> violins;
  json provenance;
};

/// Summaries per method x protocol x contrast x split (plus an "all" roll-up),
/// computed on macro Dice after trimming; paired comparisons between every two
/// methods on the pairs both kept; violin data per summary group.
ReportBundle build_report(const std::vector<EvalRecord>& records, const RunConfig& cfg,
                          const PairManifest* manifest = nullptr);

/// pair_id,fixed_id,moving_id,split,method,protocol,contrast,similarity,
/// transport,label_group,label,dice,status,reason. One row per label plus a
/// __macro__ row per record; failed records get a single row.
std::string records_csv(const std::vector<EvalRecord>& records);
json report_json(const ReportBundle& b);
/// Writes records.csv, records.json and report.json into dir.
void emit_report(const ReportBundle& b, const std::filesystem::path& dir);

struct AblationVariant {
  enum class Kind { Native, Crop, Orient, Iso };
  Kind kind = Kind::Native;
  Index3 dims{0, 0, 0};
  bool allow_padding = false;
  std::string orientation;
  double spacing = 0.0;

  /// "native", "crop=192x160x224" (":pad" allows padding), "orient=LPS", "iso=1.0".
  static AblationVariant parse(const std::string& s);
  std::string name() const;
  void apply(SubjectVolumes& v) const;
};

struct AblationReport {
  std::vector<std::string> variants;
  std::vector<std::vector<EvalRecord>> records;  ///< per variant
  std::vector<GroupSummary> summaries;
  std::vector<Comparison> comparisons;  ///< first variant against each other
  json provenance;
};

AblationReport run_ablation(const Dataset& dataset, const PairManifest& manifest,
                            const std::vector<std::string>& methods, const std::vector<std::string>& protocols,
                            const std::vector<AblationVariant>& variants, const RunConfig& cfg);
json ablation_json(const AblationReport& r);
void emit_ablation(const AblationReport& r, const std::filesystem::path& dir);

enum class SyntheticKind { Blobs, FineStructure };

/// Writes n phantom subjects (image and "coarse"/"fine" label protocols) plus
/// manifest.json into dir and returns the manifest path. Subjects alternate
/// between MPRAGE-like and MP2RAGE-like intensities when mixed_sequences is set.
std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, int n, std::uint64_t seed,
                                              SyntheticKind kind = SyntheticKind::Blobs,
                                              bool mixed_sequences = false);

}  // namespace regeval
