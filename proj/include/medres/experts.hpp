#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "medres/core.hpp"
#include "medres/gateway.hpp"

namespace medres {

struct DatasetManifest;

// A single-image question for one study. study_id lets a local expert find
// the right image; only the alias travels with it.
struct ExpertQuery {
  std::string study_id;
  ImageAlias image_alias = ImageAlias::Main;
  QuestionType qtype = QuestionType::Presence;
  std::string question_text;
};

void validate(const ExpertQuery& query);

struct ExpertAnswer {
  std::string text;
  std::string expert_id;
  std::optional<double> confidence;
};

class ExpertBackend {
 public:
  virtual ~ExpertBackend() = default;
  virtual std::string id() const = 0;
  virtual ExpertAnswer ask(const ExpertQuery& query) const = 0;
};

// ---- routing ---------------------------------------------------------------

enum class RoutingMode { PerType, Monolithic };

std::string_view to_string(RoutingMode mode) noexcept;

namespace slots {
inline constexpr std::string_view kGeneral = "general-vqa";
inline constexpr std::string_view kDetector = "abnormality-detector";
inline constexpr std::string_view kRestricted = "abnormality-restricted-vqa";
inline constexpr std::string_view kPresence = "presence-vqa";
inline constexpr std::string_view kView = "view-vqa";
inline constexpr std::string_view kLocation = "location-vqa";
inline constexpr std::string_view kType = "type-vqa";
inline constexpr std::string_view kLevel = "level-vqa";
}  // namespace slots

struct ExpertRegistry {
  RoutingMode mode = RoutingMode::PerType;
  bool abnormality_detector_enabled = true;
  std::map<QuestionType, std::string> slots;
  std::string general_slot{slots::kGeneral};

  // The seven per-type slots bound to the standard backend ids above, with
  // Abnormality bound to the detector.
  static ExpertRegistry standard(RoutingMode mode = RoutingMode::PerType, bool detector_enabled = true);
};

// Throws UnboundSlot when PerType is missing a slot or Monolithic has no
// general slot.
void validate(const ExpertRegistry& registry);

// Exactly one backend id per query. Throws InvalidArgument for Difference
// and UnboundSlot when the needed slot is empty.
std::string route(const ExpertRegistry& registry, QuestionType qtype);
inline std::string route(const ExpertRegistry& registry, const ExpertQuery& query) {
  return route(registry, query.qtype);
}

class ExpertPool {
 public:
  void bind(std::string id, std::shared_ptr<const ExpertBackend> backend);
  bool contains(const std::string& id) const { return backends_.contains(id); }
  const ExpertBackend& at(const std::string& id) const;
  std::vector<std::string> ids() const;

 private:
  std::map<std::string, std::shared_ptr<const ExpertBackend>> backends_;
};

// Looks up `backend_id` in the pool and asks it. The answer's expert_id is
// always the pool id. Throws UnboundSlot for an unknown id and
// BackendError when an expert returns empty text.
ExpertAnswer ask_expert(const ExpertPool& pool, const std::string& backend_id, const ExpertQuery& query);

// ---- fixture experts ---------------------------------------------------------

// Keyed answers: (study, alias, normalized question) first, then the same
// key with an empty study (answers shared by every study), then the raw
// question text. A miss throws FixtureMiss.
class FixtureExpert final : public ExpertBackend {
 public:
  explicit FixtureExpert(std::string id = "fixture");

  void add(std::string_view study_id, ImageAlias alias, std::string_view question, std::string answer);

  // Every single-image record with a gold answer becomes an entry.
  static std::shared_ptr<FixtureExpert> from_manifest(const DatasetManifest& manifest, std::string id = "oracle");

  // Line-delimited {study_id?, image_alias, question, answer}.
  static std::shared_ptr<FixtureExpert> load(const std::filesystem::path& path, std::string id = "fixture");
  static std::shared_ptr<FixtureExpert> parse(std::istream& in, std::string id = "fixture");

  std::string id() const override { return id_; }
  ExpertAnswer ask(const ExpertQuery& query) const override;

  std::size_t size() const noexcept { return normalized_.size(); }
  // Sorted distinct normalized answers.
  std::vector<std::string> answer_pool() const;

 private:
  std::string id_;
  std::map<std::string, std::string> normalized_;
  std::map<std::string, std::string> raw_;
};

// The fixed abnormality vocabulary the detector predicts from.
const std::array<std::string_view, 33>& abnormality_vocabulary();

// Candidate answers for region-restricted abnormality questions.
const std::array<std::string_view, 25>& restricted_abnormality_answers();

inline constexpr std::string_view kNoAbnormalities = "no abnormalities";

class AbnormalityLabelSet {
 public:
  AbnormalityLabelSet() = default;
  // Throws InvalidArgument for a label outside the vocabulary.
  explicit AbnormalityLabelSet(const std::vector<std::string>& labels);

  // Parses a detector-style answer ("a, b" or "no abnormalities").
  static AbnormalityLabelSet from_answer(std::string_view answer);

  const std::set<std::string>& labels() const noexcept { return labels_; }
  bool empty() const noexcept { return labels_.empty(); }

 private:
  std::set<std::string> labels_;
};

// Labels joined by ", " in lexicographic order; kNoAbnormalities when empty.
std::string join_labels(const AbnormalityLabelSet& labels);

// Multi-label detector stand-in: one label set per (study, image).
class AbnormalityDetector final : public ExpertBackend {
 public:
  explicit AbnormalityDetector(std::string id = std::string(slots::kDetector));

  void bind(std::string_view study_id, ImageAlias alias, AbnormalityLabelSet labels);

  // Binds every image that has an Abnormality record with a gold answer.
  static std::shared_ptr<AbnormalityDetector> from_manifest(const DatasetManifest& manifest,
                                                            std::string id = std::string(slots::kDetector));

  // Throws UnboundAlias when nothing is bound for (study, alias).
  ExpertAnswer detect(std::string_view study_id, ImageAlias alias) const;

  std::string id() const override { return id_; }
  ExpertAnswer ask(const ExpertQuery& query) const override { return detect(query.study_id, query.image_alias); }

 private:
  std::string id_;
  std::map<std::string, AbnormalityLabelSet> bound_;
};

// Restricts another expert to a candidate pool: answers outside the pool
// (after normalization) throw FixtureMiss.
class CandidatePoolExpert final : public ExpertBackend {
 public:
  CandidatePoolExpert(std::shared_ptr<const ExpertBackend> inner, std::vector<std::string> pool, std::string id);

  std::string id() const override { return id_; }
  ExpertAnswer ask(const ExpertQuery& query) const override;

 private:
  std::shared_ptr<const ExpertBackend> inner_;
  std::set<std::string> pool_;
  std::string id_;
};

// Replaces a seeded fraction of the inner expert's answers with a different
// answer from `alternatives`. Whether a query flips depends only on the seed
// and the query key, never on call order.
class NoisyExpert final : public ExpertBackend {
 public:
  NoisyExpert(std::shared_ptr<const ExpertBackend> inner, std::vector<std::string> alternatives, double fraction,
              std::uint64_t seed, std::string id);

  std::string id() const override { return id_; }
  ExpertAnswer ask(const ExpertQuery& query) const override;
  bool flips(const ExpertQuery& query) const;

 private:
  std::shared_ptr<const ExpertBackend> inner_;
  std::vector<std::string> alternatives_;
  double fraction_;
  std::uint64_t seed_;
  std::string id_;
};

// ---- remote expert -----------------------------------------------------------

struct RemoteExpertConfig {
  std::string base_url;
  std::string path = "/answer";
  RetryPolicy retry;
  int max_in_flight = 4;
  std::chrono::seconds timeout{60};
  std::string id = "remote-expert";
};

// Wire bodies of the expert protocol; see docs/expert_protocol.md.
std::string make_expert_request_body(const ExpertQuery& query);
ExpertAnswer parse_expert_response_body(std::string_view body);

class RemoteExpert final : public ExpertBackend {
 public:
  explicit RemoteExpert(RemoteExpertConfig config, Sleeper sleeper = {});
  ~RemoteExpert() override;

  std::string id() const override { return config_.id; }
  ExpertAnswer ask(const ExpertQuery& query) const override;

 private:
  struct Impl;
  RemoteExpertConfig config_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace medres
