#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "medres/dataset.hpp"
#include "medres/experts.hpp"
#include "medres/gateway.hpp"
#include "medres/metrics.hpp"
#include "medres/orchestrator.hpp"
#include "medres/prompting.hpp"

namespace medres {

// ---- learner scripts -----------------------------------------------------------

// Canned learner replies per (study, difference question). An entry without
// a question applies to every question of its study.
class ScriptBook {
 public:
  void add(std::string study_id, std::optional<std::string> question, std::vector<std::string> responses);

  // Line-delimited {study_id, question?, responses: [..]}.
  static ScriptBook parse(std::istream& in);
  static ScriptBook load(const std::filesystem::path& path);
  void write(std::ostream& out) const;

  // Throws FixtureMiss when no entry matches.
  const std::vector<std::string>& responses(const std::string& study_id, std::string_view question) const;
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  struct Entry {
    std::string study_id;
    std::optional<std::string> question;
    std::vector<std::string> responses;
  };
  std::vector<Entry> entries_;
};

// Scripts whose finals equal each test difference question's gold answer.
ScriptBook identity_scripts(const DatasetManifest& manifest, Split split = Split::Test);

// ---- evaluation ----------------------------------------------------------------

// A fresh learner per conversation, so scripted replies never interleave
// across parallel conversations.
using LearnerFactory = std::function<std::unique_ptr<ChatBackend>(const StudyPair&, const QuestionRecord&)>;

LearnerFactory scripted_learners(std::shared_ptr<const ScriptBook> book);
LearnerFactory heuristic_learners();

// Oracle answers from the manifest golds: the fixture expert on every
// question slot plus the detector on the detector slot.
ExpertPool oracle_pool(const DatasetManifest& manifest);

// The oracle pool with the general slot replaced by a NoisyExpert that
// corrupts `fraction` of its answers.
ExpertPool degraded_general_pool(const DatasetManifest& manifest, double fraction, std::uint64_t seed);

struct EvalOptions {
  LoopConfig loop;
  Split split = Split::Test;
  int parallel = 1;
  metrics::CiderVariant cider = metrics::CiderVariant::CiderD;
};

struct EvalResult {
  std::vector<Transcript> transcripts;
  std::optional<metrics::MetricReport> report;
  std::size_t evaluated = 0;
  std::size_t scored = 0;
  std::size_t failed = 0;
  std::map<StopReason, std::size_t> stop_reasons;
  std::vector<std::string> warnings;
};

// Runs one conversation per difference question of the split. A
// conversation that throws is recorded with stop reason "failed" and left
// out of scoring; the run continues. Transcripts keep manifest order for
// any parallelism.
EvalResult evaluate(const DatasetManifest& manifest, const ExpertPool& experts, const LearnerFactory& learners,
                    const EvalOptions& options);

// Scores non-failed transcripts that have a gold answer in the manifest.
std::optional<metrics::MetricReport> score_transcripts(std::span<const Transcript> transcripts,
                                                       const DatasetManifest& manifest,
                                                       metrics::CiderVariant cider = metrics::CiderVariant::CiderD);

// ---- run configuration -------------------------------------------------------------

enum class LearnerKind { Scripted, Heuristic, Remote };

std::string_view to_string(LearnerKind kind) noexcept;
std::optional<LearnerKind> parse_learner_kind(std::string_view text) noexcept;

enum class ExpertKind { Oracle, Fixture, Remote };

std::string_view to_string(ExpertKind kind) noexcept;
std::optional<ExpertKind> parse_expert_kind(std::string_view text) noexcept;

struct RunConfig {
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> templates_dir;
  TemplateVariant template_variant = TemplateVariant::Gpt;

  LearnerKind learner = LearnerKind::Scripted;
  std::optional<std::filesystem::path> scripts;
  RemoteChatConfig remote_learner;

  ExpertKind experts = ExpertKind::Oracle;
  std::optional<std::filesystem::path> expert_fixture;
  RemoteExpertConfig remote_expert;
  // Fraction of general-slot answers to corrupt (ablation studies).
  double general_noise = 0.0;

  RoutingMode routing = RoutingMode::PerType;
  bool abnormality_detector = true;
  int max_rounds = 10;
  int repeat_limit = 3;
  std::size_t context_examples = 2;
  double temperature = kDefaultTemperature;
  metrics::CiderVariant cider = metrics::CiderVariant::CiderD;

  std::filesystem::path out_dir = "medres-out";
  int parallel = 1;
  std::uint64_t seed = 0;
};

// Throws InvalidArgument on bad values.
void validate(const RunConfig& config);

// Reads a JSON config file over `base`; keys are listed in docs/report.md.
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

struct RunSetup {
  DatasetManifest manifest;
  ExpertPool experts;
  LearnerFactory learners;
  EvalOptions options;
};

// Loads and wires everything a RunConfig names.
RunSetup prepare_run(const RunConfig& config);

struct RunOutput {
  EvalResult result;
  std::filesystem::path transcripts_path;
  std::filesystem::path report_path;
};

// evaluate() on the configured setup, then writes
// <out_dir>/transcripts.jsonl and <out_dir>/report.json.
RunOutput run_eval(const RunConfig& config);

std::string report_to_json(const EvalResult& result, const RunConfig& config);
// The human-readable stdout table.
std::string format_report_table(const EvalResult& result);

// ---- bias ------------------------------------------------------------------------

struct StratumRow {
  std::string family;  // "gender" or "age"
  std::string label;
  std::size_t size = 0;
  std::optional<metrics::MetricReport> report;
};

// Rows for every non-empty stratum; sizes within a family sum to `total`.
struct BiasReport {
  std::size_t total = 0;
  std::vector<StratumRow> rows;
};

BiasReport bias_report(std::span<const Transcript> transcripts, const DatasetManifest& manifest,
                       metrics::CiderVariant cider = metrics::CiderVariant::CiderD);
std::string bias_report_to_json(const BiasReport& report, int indent = 2);
std::string format_bias_table(const BiasReport& report);

// ---- chatlog augmentation ------------------------------------------------------

struct AugmentedRecord {
  std::string study_id;
  std::string question;
  std::string chatlog_text;
  std::optional<std::string> gold_answer;
};

// Picks round(fraction * S) of the S studies behind the non-failed
// transcripts (seeded Fisher-Yates over sorted study ids) and emits every
// transcript of a picked study, in transcript order.
std::vector<AugmentedRecord> export_augmented(std::span<const Transcript> transcripts,
                                              const DatasetManifest& manifest, double fraction, std::uint64_t seed);

void write_augmented(std::span<const AugmentedRecord> records, std::ostream& out);
std::size_t save_augmented(std::span<const AugmentedRecord> records, const std::filesystem::path& path);

// ---- ablation ------------------------------------------------------------------------

struct AblationRow {
  std::string label;
  RoutingMode routing = RoutingMode::PerType;
  bool abnormality_detector = true;
  EvalResult result;
};

inline constexpr std::string_view kAblationFull = "full";
inline constexpr std::string_view kAblationMonolithic = "w/o divide-and-conquer";
inline constexpr std::string_view kAblationNoDetector = "w/o abnormality detection";

// Evaluates the same setup under full routing, monolithic routing and
// detector-off routing.
std::vector<AblationRow> ablation_matrix(const DatasetManifest& manifest, const ExpertPool& experts,
                                         const LearnerFactory& learners, const EvalOptions& options);
std::string format_ablation_table(std::span<const AblationRow> rows);
std::string ablation_to_json(std::span<const AblationRow> rows, int indent = 2);

}  // namespace medres
