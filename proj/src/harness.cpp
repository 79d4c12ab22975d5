#include "medres/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "medres/error.hpp"
#include "medres/synthetic.hpp"
#include "medres/text.hpp"

namespace medres {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---- learner scripts -----------------------------------------------------------

void ScriptBook::add(std::string study_id, std::optional<std::string> question, std::vector<std::string> responses) {
  if (text::trim(study_id).empty()) throw InvalidArgument("script entry without a study id");
  entries_.push_back({std::move(study_id), std::move(question), std::move(responses)});
}

ScriptBook ScriptBook::parse(std::istream& in) {
  ScriptBook book;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError(line_no, "<line>", std::string("not valid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw SchemaError(line_no, "<line>", "expected an object");
    const auto id = obj.find("study_id");
    if (id == obj.end() || !id->is_string()) throw SchemaError(line_no, "study_id", "expected a string");
    std::optional<std::string> question;
    if (const auto q = obj.find("question"); q != obj.end() && !q->is_null()) {
      if (!q->is_string()) throw SchemaError(line_no, "question", "expected a string");
      question = q->get<std::string>();
    }
    const auto responses = obj.find("responses");
    if (responses == obj.end() || !responses->is_array()) {
      throw SchemaError(line_no, "responses", "expected an array of strings");
    }
    std::vector<std::string> replies;
    for (const json& r : *responses) {
      if (!r.is_string()) throw SchemaError(line_no, "responses", "expected an array of strings");
      replies.push_back(r.get<std::string>());
    }
    book.add(id->get<std::string>(), std::move(question), std::move(replies));
  }
  return book;
}

ScriptBook ScriptBook::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open script file " + path.string());
  return parse(in);
}

void ScriptBook::write(std::ostream& out) const {
  for (const Entry& e : entries_) {
    json obj;
    obj["study_id"] = e.study_id;
    if (e.question) obj["question"] = *e.question;
    obj["responses"] = e.responses;
    out << obj.dump() << '\n';
  }
}

const std::vector<std::string>& ScriptBook::responses(const std::string& study_id, std::string_view question) const {
  const Entry* fallback = nullptr;
  for (const Entry& e : entries_) {
    if (e.study_id != study_id) continue;
    if (!e.question) {
      if (!fallback) fallback = &e;
    } else if (*e.question == question) {
      return e.responses;
    }
  }
  if (fallback) return fallback->responses;
  throw FixtureMiss("no learner script for study " + study_id);
}

ScriptBook identity_scripts(const DatasetManifest& manifest, Split split) {
  ScriptBook book;
  for (const QuestionRecord* r : manifest.difference_questions(split)) {
    if (!r->gold_answer) continue;
    book.add(r->study_id, r->text, synth::identity_script(*r->gold_answer));
  }
  return book;
}

// ---- learners and experts ----------------------------------------------------------

namespace {

// Lets one thread-safe backend serve every conversation.
class SharedLearner final : public ChatBackend {
 public:
  explicit SharedLearner(std::shared_ptr<ChatBackend> inner) : inner_(std::move(inner)) {}
  std::string id() const override { return inner_->id(); }

 protected:
  ChatResponse do_complete(const ChatRequest& request) override { return inner_->complete(request); }

 private:
  std::shared_ptr<ChatBackend> inner_;
};

void bind_everywhere(ExpertPool& pool, const std::shared_ptr<const ExpertBackend>& backend) {
  for (const std::string_view id : {slots::kGeneral, slots::kDetector, slots::kRestricted, slots::kPresence,
                                    slots::kView, slots::kLocation, slots::kType, slots::kLevel}) {
    pool.bind(std::string(id), backend);
  }
}

}  // namespace

LearnerFactory scripted_learners(std::shared_ptr<const ScriptBook> book) {
  return [book = std::move(book)](const StudyPair& study, const QuestionRecord& question) {
    return std::make_unique<ScriptedBackend>(book->responses(study.study_id, question.text), "scripted");
  };
}

LearnerFactory heuristic_learners() {
  return [](const StudyPair&, const QuestionRecord&) { return std::make_unique<synth::HeuristicLearner>(); };
}

ExpertPool oracle_pool(const DatasetManifest& manifest) {
  ExpertPool pool;
  bind_everywhere(pool, FixtureExpert::from_manifest(manifest, "oracle"));
  pool.bind(std::string(slots::kDetector), AbnormalityDetector::from_manifest(manifest));
  return pool;
}

ExpertPool degraded_general_pool(const DatasetManifest& manifest, double fraction, std::uint64_t seed) {
  ExpertPool pool = oracle_pool(manifest);
  auto oracle = FixtureExpert::from_manifest(manifest, "oracle");
  std::vector<std::string> alternatives = oracle->answer_pool();
  pool.bind(std::string(slots::kGeneral),
            std::make_shared<NoisyExpert>(oracle, std::move(alternatives), fraction, seed, "noisy-general"));
  return pool;
}

// ---- evaluation ----------------------------------------------------------------

std::optional<metrics::MetricReport> score_transcripts(std::span<const Transcript> transcripts,
                                                       const DatasetManifest& manifest, metrics::CiderVariant cider) {
  std::map<std::pair<std::string, std::string>, std::string> golds;
  for (const QuestionRecord& r : manifest.records) {
    if (r.qtype == QuestionType::Difference && r.gold_answer) golds[{r.study_id, r.text}] = *r.gold_answer;
  }
  std::vector<std::string> preds, refs;
  for (const Transcript& t : transcripts) {
    if (t.stop_reason == StopReason::Failed) continue;
    const auto it = golds.find({t.study_id, t.difference_question});
    if (it == golds.end()) continue;
    preds.push_back(t.final_answer);
    refs.push_back(it->second);
  }
  if (preds.empty()) return std::nullopt;
  return metrics::score_corpus(preds, refs, cider);
}

EvalResult evaluate(const DatasetManifest& manifest, const ExpertPool& experts, const LearnerFactory& learners,
                    const EvalOptions& options) {
  validate(options.loop);
  if (options.parallel < 1) throw InvalidArgument("parallelism must be at least 1");
  const std::vector<const QuestionRecord*> questions = manifest.difference_questions(options.split);
  if (questions.empty()) {
    throw InvalidArgument("no difference questions in the " + std::string(to_string(options.split)) + " split");
  }

  PrivacyGuard guard = PrivacyGuard::with_default_sentinels();
  for (const auto& [id, study] : manifest.studies) guard.deny_study(study);

  const std::size_t n = questions.size();
  std::vector<Transcript> transcripts(n);
  std::vector<std::vector<std::string>> warnings(n);
  std::atomic<std::size_t> next{0};

  const auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const QuestionRecord& q = *questions[i];
      const StudyPair& study = manifest.study(q.study_id);
      try {
        std::unique_ptr<ChatBackend> learner = learners(study, q);
        const ConversationEnv env{
            *learner, experts,
            [&warnings, i, &study](std::string_view w) { warnings[i].push_back(study.study_id + ": " + std::string(w)); },
            {}, &guard};
        transcripts[i] = run_conversation(study, q.text, options.loop, env);
      } catch (const std::exception& e) {
        Transcript failed;
        failed.study_id = study.study_id;
        failed.difference_question = q.text;
        failed.stop_reason = StopReason::Failed;
        failed.error = e.what();
        transcripts[i] = std::move(failed);
      }
    }
  };

  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(options.parallel), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  EvalResult result;
  result.evaluated = n;
  for (std::size_t i = 0; i < n; ++i) {
    ++result.stop_reasons[transcripts[i].stop_reason];
    if (transcripts[i].stop_reason == StopReason::Failed) ++result.failed;
    for (std::string& w : warnings[i]) result.warnings.push_back(std::move(w));
  }
  result.transcripts = std::move(transcripts);
  result.report = score_transcripts(result.transcripts, manifest, options.cider);
  result.scored = result.report ? result.report->n : 0;
  return result;
}

// ---- run configuration -------------------------------------------------------------

std::string_view to_string(LearnerKind kind) noexcept {
  switch (kind) {
    case LearnerKind::Scripted: return "scripted";
    case LearnerKind::Heuristic: return "heuristic";
    case LearnerKind::Remote: return "remote";
  }
  return "scripted";
}

std::optional<LearnerKind> parse_learner_kind(std::string_view text) noexcept {
  for (const LearnerKind k : {LearnerKind::Scripted, LearnerKind::Heuristic, LearnerKind::Remote}) {
    if (text == to_string(k)) return k;
  }
  return std::nullopt;
}

std::string_view to_string(ExpertKind kind) noexcept {
  switch (kind) {
    case ExpertKind::Oracle: return "oracle";
    case ExpertKind::Fixture: return "fixture";
    case ExpertKind::Remote: return "remote";
  }
  return "oracle";
}

std::optional<ExpertKind> parse_expert_kind(std::string_view text) noexcept {
  for (const ExpertKind k : {ExpertKind::Oracle, ExpertKind::Fixture, ExpertKind::Remote}) {
    if (text == to_string(k)) return k;
  }
  return std::nullopt;
}

void validate(const RunConfig& config) {
  if (config.manifest.empty()) throw InvalidArgument("no manifest given");
  if (config.parallel < 1) throw InvalidArgument("parallelism must be at least 1");
  if (config.max_rounds < 1) throw InvalidArgument("max_rounds must be at least 1");
  if (config.repeat_limit < 1) throw InvalidArgument("repeat_limit must be at least 1");
  if (config.general_noise < 0.0 || config.general_noise > 1.0) {
    throw InvalidArgument("general_noise must lie in [0, 1]");
  }
  if (config.learner == LearnerKind::Scripted && !config.scripts) {
    throw InvalidArgument("the scripted learner needs a script file");
  }
  if (config.learner == LearnerKind::Remote && (config.remote_learner.base_url.empty() || config.remote_learner.model.empty())) {
    throw InvalidArgument("the remote learner needs base_url and model");
  }
  if (config.experts == ExpertKind::Fixture && !config.expert_fixture) {
    throw InvalidArgument("fixture experts need an expert fixture file");
  }
  if (config.experts == ExpertKind::Remote && config.remote_expert.base_url.empty()) {
    throw InvalidArgument("remote experts need base_url");
  }
  if (config.out_dir.empty()) throw InvalidArgument("no output directory given");
}

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out) {
  if (const auto it = obj.find(key); it != obj.end() && !it->is_null()) out = it->get<T>();
}

void read_retry(const json& obj, RetryPolicy& retry) {
  read_opt(obj, "max_retries", retry.max_retries);
  if (const auto it = obj.find("backoff_base_ms"); it != obj.end()) {
    retry.backoff_base = std::chrono::milliseconds(it->get<long long>());
  }
  if (const auto it = obj.find("max_backoff_ms"); it != obj.end()) {
    retry.max_backoff = std::chrono::milliseconds(it->get<long long>());
  }
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path& path, RunConfig config) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  const std::filesystem::path base = path.parent_path();
  try {
    const json obj = json::parse(in);
    if (!obj.is_object()) throw InvalidArgument("config file must hold a JSON object");
    if (const auto it = obj.find("manifest"); it != obj.end()) config.manifest = resolve(base, it->get<std::string>());
    if (const auto it = obj.find("templates"); it != obj.end()) {
      config.templates_dir = resolve(base, it->get<std::string>());
    }
    if (const auto it = obj.find("template_variant"); it != obj.end()) {
      config.template_variant = parse_template_variant(it->get<std::string>());
    }
    if (const auto it = obj.find("learner"); it != obj.end()) {
      const auto kind = parse_learner_kind(it->get<std::string>());
      if (!kind) throw InvalidArgument("unknown learner '" + it->get<std::string>() + "'");
      config.learner = *kind;
    }
    if (const auto it = obj.find("scripts"); it != obj.end()) config.scripts = resolve(base, it->get<std::string>());
    if (const auto it = obj.find("remote_learner"); it != obj.end()) {
      RemoteChatConfig& r = config.remote_learner;
      read_opt(*it, "base_url", r.base_url);
      read_opt(*it, "model", r.model);
      read_opt(*it, "api_key_env", r.api_key_env);
      read_opt(*it, "max_in_flight", r.max_in_flight);
      if (const auto t = it->find("timeout_s"); t != it->end()) r.timeout = std::chrono::seconds(t->get<long long>());
      read_retry(*it, r.retry);
    }
    if (const auto it = obj.find("experts"); it != obj.end()) {
      const auto kind = parse_expert_kind(it->get<std::string>());
      if (!kind) throw InvalidArgument("unknown expert kind '" + it->get<std::string>() + "'");
      config.experts = *kind;
    }
    if (const auto it = obj.find("expert_fixture"); it != obj.end()) {
      config.expert_fixture = resolve(base, it->get<std::string>());
    }
    if (const auto it = obj.find("remote_expert"); it != obj.end()) {
      RemoteExpertConfig& r = config.remote_expert;
      read_opt(*it, "base_url", r.base_url);
      read_opt(*it, "path", r.path);
      read_opt(*it, "max_in_flight", r.max_in_flight);
      if (const auto t = it->find("timeout_s"); t != it->end()) r.timeout = std::chrono::seconds(t->get<long long>());
      read_retry(*it, r.retry);
    }
    read_opt(obj, "general_noise", config.general_noise);
    if (const auto it = obj.find("routing"); it != obj.end()) {
      const std::string mode = it->get<std::string>();
      if (mode == to_string(RoutingMode::PerType)) {
        config.routing = RoutingMode::PerType;
      } else if (mode == to_string(RoutingMode::Monolithic)) {
        config.routing = RoutingMode::Monolithic;
      } else {
        throw InvalidArgument("unknown routing mode '" + mode + "'");
      }
    }
    read_opt(obj, "abnormality_detector", config.abnormality_detector);
    read_opt(obj, "max_rounds", config.max_rounds);
    read_opt(obj, "repeat_limit", config.repeat_limit);
    read_opt(obj, "context_examples", config.context_examples);
    read_opt(obj, "temperature", config.temperature);
    if (const auto it = obj.find("cider"); it != obj.end()) {
      const std::string v = it->get<std::string>();
      if (v != "cider-d" && v != "cider") throw InvalidArgument("cider must be \"cider-d\" or \"cider\"");
      config.cider = v == "cider" ? metrics::CiderVariant::Plain : metrics::CiderVariant::CiderD;
    }
    if (const auto it = obj.find("out_dir"); it != obj.end()) config.out_dir = resolve(base, it->get<std::string>());
    read_opt(obj, "parallel", config.parallel);
    read_opt(obj, "seed", config.seed);
  } catch (const json::exception& e) {
    throw InvalidArgument("bad config file " + path.string() + ": " + e.what());
  }
  return config;
}

RunSetup prepare_run(const RunConfig& config) {
  validate(config);
  RunSetup setup;
  setup.manifest = load_manifest(config.manifest);

  LoopConfig& loop = setup.options.loop;
  loop.max_rounds = config.max_rounds;
  loop.repeat_limit = config.repeat_limit;
  loop.registry = ExpertRegistry::standard(config.routing, config.abnormality_detector);
  loop.templates = config.templates_dir ? load_templates(*config.templates_dir) : default_templates(config.template_variant);
  loop.context_examples = select_context_examples(setup.manifest, config.context_examples);
  loop.temperature = config.temperature;
  setup.options.parallel = config.parallel;
  setup.options.cider = config.cider;

  switch (config.experts) {
    case ExpertKind::Oracle:
      setup.experts = config.general_noise > 0.0 ? degraded_general_pool(setup.manifest, config.general_noise, config.seed)
                                                 : oracle_pool(setup.manifest);
      break;
    case ExpertKind::Fixture:
      bind_everywhere(setup.experts, FixtureExpert::load(*config.expert_fixture));
      break;
    case ExpertKind::Remote:
      bind_everywhere(setup.experts, std::make_shared<RemoteExpert>(config.remote_expert));
      break;
  }

  switch (config.learner) {
    case LearnerKind::Scripted:
      setup.learners = scripted_learners(std::make_shared<ScriptBook>(ScriptBook::load(*config.scripts)));
      loop.backend_id = "scripted";
      break;
    case LearnerKind::Heuristic:
      setup.learners = heuristic_learners();
      loop.backend_id = "heuristic";
      break;
    case LearnerKind::Remote: {
      auto shared = std::make_shared<RemoteChatBackend>(config.remote_learner);
      setup.learners = [shared](const StudyPair&, const QuestionRecord&) {
        return std::make_unique<SharedLearner>(shared);
      };
      loop.backend_id = config.remote_learner.id;
      break;
    }
  }
  return setup;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("write failed for " + path.string());
}

ordered_json metrics_json(const std::optional<metrics::MetricReport>& report) {
  return report ? ordered_json::parse(metrics::to_json(*report)) : ordered_json(nullptr);
}

}  // namespace

RunOutput run_eval(const RunConfig& config) {
  const RunSetup setup = prepare_run(config);
  RunOutput output;
  output.result = evaluate(setup.manifest, setup.experts, setup.learners, setup.options);

  std::error_code ec;
  std::filesystem::create_directories(config.out_dir, ec);
  if (ec) throw IoError("cannot create " + config.out_dir.string() + ": " + ec.message());
  output.transcripts_path = config.out_dir / "transcripts.jsonl";
  output.report_path = config.out_dir / "report.json";
  std::ostringstream transcripts;
  write_transcripts(output.result.transcripts, transcripts);
  write_file(output.transcripts_path, transcripts.str());
  write_file(output.report_path, report_to_json(output.result, config) + "\n");
  return output;
}

std::string report_to_json(const EvalResult& result, const RunConfig& config) {
  ordered_json obj;
  obj["metrics"] = metrics_json(result.report);
  obj["evaluated"] = result.evaluated;
  obj["scored"] = result.scored;
  obj["failed"] = result.failed;
  ordered_json reasons = ordered_json::object();
  for (const StopReason r : {StopReason::ModelFinalized, StopReason::MaxRoundsForced, StopReason::RepetitionForced,
                             StopReason::MalformedForced, StopReason::Failed}) {
    const auto it = result.stop_reasons.find(r);
    reasons[std::string(to_string(r))] = it == result.stop_reasons.end() ? 0 : it->second;
  }
  obj["stop_reasons"] = reasons;
  obj["warnings"] = result.warnings.size();
  obj["learner"] = to_string(config.learner);
  obj["experts"] = to_string(config.experts);
  obj["routing"] = to_string(config.routing);
  obj["abnormality_detector"] = config.abnormality_detector;
  obj["max_rounds"] = config.max_rounds;
  obj["seed"] = config.seed;
  return obj.dump(2);
}

namespace {

std::string fixed(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

void metric_lines(std::ostream& os, const metrics::MetricReport& r) {
  for (int n = 0; n < 4; ++n) {
    os << std::left << std::setw(16) << ("BLEU-" + std::to_string(n + 1)) << fixed(r.bleu[n]) << "\n";
  }
  os << std::setw(16) << "METEOR" << fixed(r.meteor) << "\n";
  os << std::setw(16) << "ROUGE-L" << fixed(r.rouge_l) << "\n";
  os << std::setw(16) << (r.cider_variant == metrics::CiderVariant::CiderD ? "CIDEr-D" : "CIDEr") << fixed(r.cider_d)
     << "\n";
}

}  // namespace

std::string format_report_table(const EvalResult& result) {
  std::ostringstream os;
  if (result.report) {
    metric_lines(os, *result.report);
  } else {
    os << "no scored conversations\n";
  }
  os << std::left << std::setw(16) << "conversations" << result.evaluated << " (scored " << result.scored
     << ", failed " << result.failed << ")\n";
  os << std::setw(16) << "stop reasons";
  bool first = true;
  for (const auto& [reason, count] : result.stop_reasons) {
    os << (first ? "" : ", ") << to_string(reason) << "=" << count;
    first = false;
  }
  os << "\n";
  return os.str();
}

// ---- bias ------------------------------------------------------------------------

BiasReport bias_report(std::span<const Transcript> transcripts, const DatasetManifest& manifest,
                       metrics::CiderVariant cider) {
  std::set<std::pair<std::string, std::string>> gold_keys;
  for (const QuestionRecord& r : manifest.records) {
    if (r.qtype == QuestionType::Difference && r.gold_answer) gold_keys.insert({r.study_id, r.text});
  }
  std::vector<const Transcript*> scored;
  std::set<std::string> ids;
  for (const Transcript& t : transcripts) {
    if (t.stop_reason == StopReason::Failed || !gold_keys.contains({t.study_id, t.difference_question})) continue;
    scored.push_back(&t);
    ids.insert(t.study_id);
  }

  BiasReport report;
  report.total = scored.size();
  const Strata strata = stratify(manifest, std::vector<std::string>(ids.begin(), ids.end()));
  const auto add_row = [&](std::string family, std::string label, const std::vector<std::string>& members) {
    const std::set<std::string> in(members.begin(), members.end());
    std::vector<Transcript> subset;
    for (const Transcript* t : scored) {
      if (in.contains(t->study_id)) subset.push_back(*t);
    }
    if (subset.empty()) return;
    StratumRow row{std::move(family), std::move(label), subset.size(), std::nullopt};
    row.report = score_transcripts(subset, manifest, cider);
    report.rows.push_back(std::move(row));
  };
  for (const auto& [gender, members] : strata.gender) add_row("gender", std::string(to_string(gender)), members);
  for (const auto& [bucket, members] : strata.age) add_row("age", std::string(to_string(bucket)), members);
  return report;
}

std::string bias_report_to_json(const BiasReport& report, int indent) {
  ordered_json obj;
  obj["total"] = report.total;
  ordered_json rows = ordered_json::array();
  for (const StratumRow& row : report.rows) {
    ordered_json r;
    r["family"] = row.family;
    r["stratum"] = row.label;
    r["size"] = row.size;
    r["metrics"] = metrics_json(row.report);
    rows.push_back(std::move(r));
  }
  obj["rows"] = std::move(rows);
  return obj.dump(indent);
}

std::string format_bias_table(const BiasReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "family" << std::setw(12) << "stratum" << std::setw(7) << "size"
     << std::setw(9) << "BLEU-4" << std::setw(9) << "METEOR" << std::setw(9) << "ROUGE-L" << "CIDEr\n";
  for (const StratumRow& row : report.rows) {
    os << std::setw(8) << row.family << std::setw(12) << row.label << std::setw(7) << row.size;
    if (row.report) {
      os << std::setw(9) << fixed(row.report->bleu[3]) << std::setw(9) << fixed(row.report->meteor) << std::setw(9)
         << fixed(row.report->rouge_l) << fixed(row.report->cider_d);
    }
    os << "\n";
  }
  os << "total " << report.total << "\n";
  return os.str();
}

// ---- chatlog augmentation ------------------------------------------------------

std::vector<AugmentedRecord> export_augmented(std::span<const Transcript> transcripts,
                                              const DatasetManifest& manifest, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("fraction must lie in [0, 1]");
  std::map<std::pair<std::string, std::string>, std::string> golds;
  for (const QuestionRecord& r : manifest.records) {
    if (r.qtype == QuestionType::Difference && r.gold_answer) golds[{r.study_id, r.text}] = *r.gold_answer;
  }

  std::set<std::string> id_set;
  for (const Transcript& t : transcripts) {
    if (t.stop_reason != StopReason::Failed) id_set.insert(t.study_id);
  }
  std::vector<std::string> ids(id_set.begin(), id_set.end());
  // Hand-rolled Fisher-Yates: std::shuffle is not specified bit-for-bit
  // across standard libraries.
  std::mt19937_64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(ids[i - 1], ids[j]);
  }
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
  const std::set<std::string> picked(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep));

  std::vector<AugmentedRecord> records;
  for (const Transcript& t : transcripts) {
    if (t.stop_reason == StopReason::Failed || !picked.contains(t.study_id)) continue;
    AugmentedRecord r{t.study_id, t.difference_question, transcript_to_chatlog_text(t), std::nullopt};
    if (const auto it = golds.find({t.study_id, t.difference_question}); it != golds.end()) r.gold_answer = it->second;
    records.push_back(std::move(r));
  }
  return records;
}

void write_augmented(std::span<const AugmentedRecord> records, std::ostream& out) {
  for (const AugmentedRecord& r : records) {
    ordered_json obj;
    obj["study_id"] = r.study_id;
    obj["question"] = r.question;
    obj["chatlog_text"] = r.chatlog_text;
    obj["gold_answer"] = r.gold_answer ? ordered_json(*r.gold_answer) : ordered_json(nullptr);
    out << obj.dump() << '\n';
  }
}

std::size_t save_augmented(std::span<const AugmentedRecord> records, const std::filesystem::path& path) {
  std::ostringstream os;
  write_augmented(records, os);
  write_file(path, os.str());
  return records.size();
}

// ---- ablation ------------------------------------------------------------------------

std::vector<AblationRow> ablation_matrix(const DatasetManifest& manifest, const ExpertPool& experts,
                                         const LearnerFactory& learners, const EvalOptions& options) {
  const std::tuple<std::string_view, RoutingMode, bool> modes[] = {
      {kAblationFull, RoutingMode::PerType, true},
      {kAblationMonolithic, RoutingMode::Monolithic, true},
      {kAblationNoDetector, RoutingMode::PerType, false},
  };
  std::vector<AblationRow> rows;
  for (const auto& [label, routing, detector] : modes) {
    EvalOptions run = options;
    run.loop.registry = ExpertRegistry::standard(routing, detector);
    rows.push_back({std::string(label), routing, detector, evaluate(manifest, experts, learners, run)});
  }
  return rows;
}

std::string format_ablation_table(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "mode" << std::setw(9) << "BLEU-1" << std::setw(9) << "BLEU-4" << std::setw(9)
     << "METEOR" << std::setw(9) << "ROUGE-L" << std::setw(9) << "CIDEr" << "failed\n";
  for (const AblationRow& row : rows) {
    os << std::setw(28) << row.label;
    if (const auto& r = row.result.report) {
      os << std::setw(9) << fixed(r->bleu[0]) << std::setw(9) << fixed(r->bleu[3]) << std::setw(9) << fixed(r->meteor)
         << std::setw(9) << fixed(r->rouge_l) << std::setw(9) << fixed(r->cider_d);
    } else {
      os << std::setw(45) << "(not scored)";
    }
    os << row.result.failed << "\n";
  }
  return os.str();
}

std::string ablation_to_json(std::span<const AblationRow> rows, int indent) {
  ordered_json arr = ordered_json::array();
  for (const AblationRow& row : rows) {
    ordered_json r;
    r["mode"] = row.label;
    r["routing"] = to_string(row.routing);
    r["abnormality_detector"] = row.abnormality_detector;
    r["metrics"] = metrics_json(row.result.report);
    r["evaluated"] = row.result.evaluated;
    r["failed"] = row.result.failed;
    arr.push_back(std::move(r));
  }
  return arr.dump(indent);
}

}  // namespace medres
