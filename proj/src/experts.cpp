#include "medres/experts.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "hash.hpp"
#include "http_poster.hpp"
#include "medres/dataset.hpp"
#include "medres/error.hpp"
#include "medres/text.hpp"

namespace medres {

using json = nlohmann::json;

void validate(const ExpertQuery& query) {
  if (query.qtype == QuestionType::Difference) {
    throw InvalidArgument("difference questions are never sent to a single-image expert");
  }
  if (text::trim(query.question_text).empty()) throw InvalidArgument("expert query has empty question text");
}

std::string_view to_string(RoutingMode mode) noexcept {
  return mode == RoutingMode::PerType ? "per_type" : "monolithic";
}

ExpertRegistry ExpertRegistry::standard(RoutingMode mode, bool detector_enabled) {
  ExpertRegistry r;
  r.mode = mode;
  r.abnormality_detector_enabled = detector_enabled;
  r.slots = {
      {QuestionType::Abnormality, std::string(slots::kDetector)},
      {QuestionType::AbnormalityRestricted, std::string(slots::kRestricted)},
      {QuestionType::Presence, std::string(slots::kPresence)},
      {QuestionType::View, std::string(slots::kView)},
      {QuestionType::Location, std::string(slots::kLocation)},
      {QuestionType::Type, std::string(slots::kType)},
      {QuestionType::Level, std::string(slots::kLevel)},
  };
  return r;
}

void validate(const ExpertRegistry& registry) {
  if (registry.general_slot.empty() &&
      (registry.mode == RoutingMode::Monolithic || !registry.abnormality_detector_enabled)) {
    throw UnboundSlot("registry needs a general slot");
  }
  if (registry.mode == RoutingMode::PerType) {
    for (const QuestionType t : kSingleImageTypes) {
      if (t == QuestionType::Abnormality && !registry.abnormality_detector_enabled) continue;
      const auto it = registry.slots.find(t);
      if (it == registry.slots.end() || it->second.empty()) {
        throw UnboundSlot("per-type registry has no slot for " + std::string(to_string(t)));
      }
    }
  }
}

std::string route(const ExpertRegistry& registry, QuestionType qtype) {
  if (qtype == QuestionType::Difference) {
    throw InvalidArgument("difference questions cannot be routed to a single-image expert");
  }
  const bool to_general = registry.mode == RoutingMode::Monolithic ||
                          (qtype == QuestionType::Abnormality && !registry.abnormality_detector_enabled);
  if (to_general) {
    if (registry.general_slot.empty()) throw UnboundSlot("no general slot bound");
    return registry.general_slot;
  }
  const auto it = registry.slots.find(qtype);
  if (it == registry.slots.end() || it->second.empty()) {
    throw UnboundSlot("no expert bound for " + std::string(to_string(qtype)));
  }
  return it->second;
}

void ExpertPool::bind(std::string id, std::shared_ptr<const ExpertBackend> backend) {
  if (!backend) throw InvalidArgument("cannot bind a null expert to " + id);
  backends_[std::move(id)] = std::move(backend);
}

const ExpertBackend& ExpertPool::at(const std::string& id) const {
  const auto it = backends_.find(id);
  if (it == backends_.end()) throw UnboundSlot("no expert backend registered as " + id);
  return *it->second;
}

std::vector<std::string> ExpertPool::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, backend] : backends_) out.push_back(id);
  return out;
}

ExpertAnswer ask_expert(const ExpertPool& pool, const std::string& backend_id, const ExpertQuery& query) {
  validate(query);
  ExpertAnswer answer = pool.at(backend_id).ask(query);
  if (text::trim(answer.text).empty()) throw BackendError("expert " + backend_id + " returned an empty answer");
  answer.expert_id = backend_id;
  return answer;
}

// ---- FixtureExpert -------------------------------------------------------------

namespace {

std::string fixture_key(std::string_view study, ImageAlias alias, std::string_view question) {
  std::string key(study);
  key += '|';
  key += to_string(alias);
  key += '|';
  key += question;
  return key;
}

}  // namespace

FixtureExpert::FixtureExpert(std::string id) : id_(std::move(id)) {}

void FixtureExpert::add(std::string_view study_id, ImageAlias alias, std::string_view question, std::string answer) {
  if (text::trim(answer).empty()) throw InvalidArgument("fixture answer for '" + std::string(question) + "' is empty");
  raw_[fixture_key(study_id, alias, question)] = answer;
  normalized_[fixture_key(study_id, alias, normalize_answer(question))] = std::move(answer);
}

std::shared_ptr<FixtureExpert> FixtureExpert::from_manifest(const DatasetManifest& manifest, std::string id) {
  auto expert = std::make_shared<FixtureExpert>(std::move(id));
  for (const QuestionRecord& r : manifest.records) {
    if (r.qtype == QuestionType::Difference || !r.gold_answer) continue;
    expert->add(r.study_id, r.images.front().alias, r.text, *r.gold_answer);
  }
  return expert;
}

std::shared_ptr<FixtureExpert> FixtureExpert::parse(std::istream& in, std::string id) {
  auto expert = std::make_shared<FixtureExpert>(std::move(id));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SchemaError(line_no, "<line>", std::string("not valid JSON: ") + e.what());
    }
    const auto str = [&](const char* field, bool required) -> std::string {
      const auto it = obj.find(field);
      if (it == obj.end() || it->is_null()) {
        if (required) throw SchemaError(line_no, field, "missing");
        return {};
      }
      if (!it->is_string()) throw SchemaError(line_no, field, "expected a string");
      return it->get<std::string>();
    };
    const auto alias = parse_image_alias(str("image_alias", true));
    if (!alias) throw SchemaError(line_no, "image_alias", "expected 000A or 000B");
    const std::string question = str("question", true);
    const std::string answer = str("answer", true);
    if (text::trim(answer).empty()) throw SchemaError(line_no, "answer", "empty");
    expert->add(str("study_id", false), *alias, question, answer);
  }
  return expert;
}

std::shared_ptr<FixtureExpert> FixtureExpert::load(const std::filesystem::path& path, std::string id) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open expert fixture " + path.string());
  return parse(in, std::move(id));
}

ExpertAnswer FixtureExpert::ask(const ExpertQuery& query) const {
  const std::string normalized = normalize_answer(query.question_text);
  for (const std::string_view study : {std::string_view(query.study_id), std::string_view()}) {
    if (const auto it = normalized_.find(fixture_key(study, query.image_alias, normalized)); it != normalized_.end()) {
      return {it->second, id_, std::nullopt};
    }
  }
  for (const std::string_view study : {std::string_view(query.study_id), std::string_view()}) {
    if (const auto it = raw_.find(fixture_key(study, query.image_alias, query.question_text)); it != raw_.end()) {
      return {it->second, id_, std::nullopt};
    }
  }
  throw FixtureMiss("fixture " + id_ + " has no answer for (" + query.study_id + ", " +
                    std::string(to_string(query.image_alias)) + ", '" + query.question_text + "')");
}

std::vector<std::string> FixtureExpert::answer_pool() const {
  std::set<std::string> distinct;
  for (const auto& [key, answer] : normalized_) distinct.insert(normalize_answer(answer));
  return {distinct.begin(), distinct.end()};
}

// ---- abnormality detection -------------------------------------------------------

const std::array<std::string_view, 33>& abnormality_vocabulary() {
  static constexpr std::array<std::string_view, 33> kVocabulary = {
      "atelectasis",
      "blunting of the costophrenic angle",
      "calcification",
      "cardiomegaly",
      "consolidation",
      "contusion",
      "cyst",
      "edema",
      "emphysema",
      "enlargement of the cardiac silhouette",
      "fibrosis",
      "fracture",
      "granuloma",
      "heart failure",
      "hematoma",
      "hernia",
      "hilar congestion",
      "hydropneumothorax",
      "hyperaeration",
      "infiltration",
      "lung lesion",
      "lung opacity",
      "mass",
      "nodule",
      "pleural effusion",
      "pleural thickening",
      "pneumomediastinum",
      "pneumonia",
      "pneumothorax",
      "scoliosis",
      "subcutaneous emphysema",
      "tortuosity of the aorta",
      "vascular congestion",
  };
  return kVocabulary;
}

const std::array<std::string_view, 25>& restricted_abnormality_answers() {
  static constexpr std::array<std::string_view, 25> kPool = {
      "no abnormalities",
      "atelectasis",
      "blunting of the costophrenic angle",
      "calcification",
      "consolidation",
      "contusion",
      "cyst",
      "edema",
      "emphysema",
      "fibrosis",
      "granuloma",
      "hilar congestion",
      "hydropneumothorax",
      "hyperaeration",
      "infiltration",
      "lung lesion",
      "lung opacity",
      "mass",
      "nodule",
      "pleural effusion",
      "pleural thickening",
      "pneumonia",
      "pneumothorax",
      "subcutaneous emphysema",
      "vascular congestion",
  };
  return kPool;
}

AbnormalityLabelSet::AbnormalityLabelSet(const std::vector<std::string>& labels) {
  const auto& vocab = abnormality_vocabulary();
  for (const std::string& raw : labels) {
    std::string label = text::fold_words(raw);
    if (std::find(vocab.begin(), vocab.end(), label) == vocab.end()) {
      throw InvalidArgument("'" + raw + "' is not in the abnormality vocabulary");
    }
    labels_.insert(std::move(label));
  }
}

AbnormalityLabelSet AbnormalityLabelSet::from_answer(std::string_view answer) {
  const std::string normalized = normalize_answer(answer);
  if (normalized.empty() || normalized == kNoAbnormalities) return {};
  std::vector<std::string> labels;
  std::size_t start = 0;
  while (start <= normalized.size()) {
    const std::size_t comma = normalized.find(", ", start);
    labels.push_back(normalized.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 2;
  }
  return AbnormalityLabelSet(labels);
}

std::string join_labels(const AbnormalityLabelSet& labels) {
  if (labels.empty()) return std::string(kNoAbnormalities);
  // std::set iterates in lexicographic order.
  return text::join({labels.labels().begin(), labels.labels().end()}, ", ");
}

AbnormalityDetector::AbnormalityDetector(std::string id) : id_(std::move(id)) {}

void AbnormalityDetector::bind(std::string_view study_id, ImageAlias alias, AbnormalityLabelSet labels) {
  bound_[fixture_key(study_id, alias, "")] = std::move(labels);
}

std::shared_ptr<AbnormalityDetector> AbnormalityDetector::from_manifest(const DatasetManifest& manifest,
                                                                        std::string id) {
  auto detector = std::make_shared<AbnormalityDetector>(std::move(id));
  for (const QuestionRecord& r : manifest.records) {
    if (r.qtype != QuestionType::Abnormality || !r.gold_answer) continue;
    detector->bind(r.study_id, r.images.front().alias, AbnormalityLabelSet::from_answer(*r.gold_answer));
  }
  return detector;
}

ExpertAnswer AbnormalityDetector::detect(std::string_view study_id, ImageAlias alias) const {
  const auto it = bound_.find(fixture_key(study_id, alias, ""));
  if (it == bound_.end()) {
    throw UnboundAlias("no label set bound for image " + std::string(to_string(alias)) + " of study " +
                       std::string(study_id));
  }
  return {join_labels(it->second), id_, std::nullopt};
}

CandidatePoolExpert::CandidatePoolExpert(std::shared_ptr<const ExpertBackend> inner, std::vector<std::string> pool,
                                         std::string id)
    : inner_(std::move(inner)), id_(std::move(id)) {
  if (!inner_) throw InvalidArgument("candidate pool expert needs an inner expert");
  for (const std::string& p : pool) pool_.insert(normalize_answer(p));
}

ExpertAnswer CandidatePoolExpert::ask(const ExpertQuery& query) const {
  ExpertAnswer answer = inner_->ask(query);
  if (!pool_.contains(normalize_answer(answer.text))) {
    throw FixtureMiss("answer '" + answer.text + "' is outside the candidate pool of " + id_);
  }
  answer.expert_id = id_;
  return answer;
}

NoisyExpert::NoisyExpert(std::shared_ptr<const ExpertBackend> inner, std::vector<std::string> alternatives,
                         double fraction, std::uint64_t seed, std::string id)
    : inner_(std::move(inner)), fraction_(fraction), seed_(seed), id_(std::move(id)) {
  if (!inner_) throw InvalidArgument("noisy expert needs an inner expert");
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("noise fraction must lie in [0, 1]");
  for (std::string& a : alternatives) a = normalize_answer(a);
  std::sort(alternatives.begin(), alternatives.end());
  alternatives.erase(std::unique(alternatives.begin(), alternatives.end()), alternatives.end());
  alternatives_ = std::move(alternatives);
}

bool NoisyExpert::flips(const ExpertQuery& query) const {
  const std::string key =
      fixture_key(query.study_id, query.image_alias, normalize_answer(query.question_text));
  return detail::unit_interval(detail::stable_hash(key, seed_)) < fraction_;
}

ExpertAnswer NoisyExpert::ask(const ExpertQuery& query) const {
  ExpertAnswer answer = inner_->ask(query);
  answer.expert_id = id_;
  if (!flips(query)) return answer;

  const std::string original = normalize_answer(answer.text);
  std::vector<std::string> others;
  std::copy_if(alternatives_.begin(), alternatives_.end(), std::back_inserter(others),
               [&](const std::string& a) { return a != original; });
  if (others.empty()) {
    answer.text = original == kNoAbnormalities ? "unknown" : std::string(kNoAbnormalities);
    return answer;
  }
  const std::string key = fixture_key(query.study_id, query.image_alias, query.question_text) + "#pick";
  answer.text = others[detail::stable_hash(key, seed_) % others.size()];
  return answer;
}

// ---- RemoteExpert --------------------------------------------------------------

std::string make_expert_request_body(const ExpertQuery& query) {
  json body;
  body["study_id"] = query.study_id;
  body["image_alias"] = std::string(to_string(query.image_alias));
  body["qtype"] = std::string(to_string(query.qtype));
  body["question"] = query.question_text;
  return body.dump();
}

ExpertAnswer parse_expert_response_body(std::string_view body) {
  try {
    const json parsed = json::parse(body);
    ExpertAnswer answer;
    answer.text = parsed.at("answer").get<std::string>();
    if (const auto it = parsed.find("confidence"); it != parsed.end() && !it->is_null()) {
      const double c = it->get<double>();
      if (!(c >= 0.0 && c <= 1.0)) throw BackendError("expert confidence outside [0, 1]");
      answer.confidence = c;
    }
    if (text::trim(answer.text).empty()) throw BackendError("expert returned an empty answer");
    return answer;
  } catch (const json::exception& e) {
    throw BackendError(std::string("expert response has an unexpected shape: ") + e.what());
  }
}

struct RemoteExpert::Impl {
  template <typename... Args>
  explicit Impl(Args&&... args) : poster(std::forward<Args>(args)...) {}
  mutable detail::JsonPoster poster;
  PrivacyGuard guard = PrivacyGuard::with_default_sentinels();
};

RemoteExpert::RemoteExpert(RemoteExpertConfig config, Sleeper sleeper)
    : config_(std::move(config)),
      impl_(std::make_unique<Impl>(config_.base_url, config_.timeout, config_.retry, std::move(sleeper),
                                   config_.max_in_flight)) {}

RemoteExpert::~RemoteExpert() = default;

ExpertAnswer RemoteExpert::ask(const ExpertQuery& query) const {
  validate(query);
  const std::string body = make_expert_request_body(query);
  if (const GuardVerdict verdict = impl_->guard.check(body); !verdict) throw PrivacyViolation(verdict.reason);
  ExpertAnswer answer = parse_expert_response_body(impl_->poster.post(config_.path, body, {}));
  answer.expert_id = config_.id;
  return answer;
}

}  // namespace medres
