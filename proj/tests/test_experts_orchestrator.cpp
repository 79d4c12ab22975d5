#include <doctest.h>

#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "medres/error.hpp"
#include "medres/experts.hpp"
#include "medres/orchestrator.hpp"
#include "medres/synthetic.hpp"
#include "medres/text.hpp"

using namespace medres;

namespace {

const std::vector<QuestionType> kRoutable = {
    QuestionType::Abnormality, QuestionType::AbnormalityRestricted, QuestionType::Presence, QuestionType::View,
    QuestionType::Location,    QuestionType::Type,                  QuestionType::Level};

StudyPair study(std::string id = "s1") {
  return {id, {ImageAlias::Main, "/img/" + id + "/a.dcm"}, {ImageAlias::Reference, "/img/" + id + "/b.dcm"},
          Gender::Unknown, std::nullopt};
}

// Answers every question with a fixed string and counts what it saw.
class EchoExpert final : public ExpertBackend {
 public:
  explicit EchoExpert(std::string answer) : answer_(std::move(answer)) {}
  std::string id() const override { return "echo"; }
  ExpertAnswer ask(const ExpertQuery& q) const override {
    std::lock_guard lock(mutex_);
    seen_.push_back(q);
    return {answer_, "echo", std::nullopt};
  }
  std::vector<ExpertQuery> seen() const {
    std::lock_guard lock(mutex_);
    return seen_;
  }

 private:
  std::string answer_;
  mutable std::mutex mutex_;
  mutable std::vector<ExpertQuery> seen_;
};

ExpertPool echo_pool(const std::shared_ptr<EchoExpert>& e) {
  ExpertPool pool;
  for (const QuestionType t : kRoutable) pool.bind(route(ExpertRegistry::standard(), t), e);
  pool.bind(std::string(slots::kGeneral), e);
  return pool;
}

}  // namespace

TEST_CASE("routing returns exactly one backend for every mode and type") {
  for (const RoutingMode mode : {RoutingMode::PerType, RoutingMode::Monolithic}) {
    for (const bool detector : {true, false}) {
      const ExpertRegistry r = ExpertRegistry::standard(mode, detector);
      CHECK_NOTHROW(validate(r));
      for (const QuestionType t : kRoutable) {
        const std::string id = route(r, t);
        CHECK_FALSE(id.empty());
        if (mode == RoutingMode::Monolithic) CHECK(id == slots::kGeneral);
      }
      CHECK_THROWS_AS(route(r, QuestionType::Difference), InvalidArgument);
    }
  }
  CHECK(route(ExpertRegistry::standard(), QuestionType::Abnormality) == slots::kDetector);
  CHECK(route(ExpertRegistry::standard(RoutingMode::PerType, false), QuestionType::Abnormality) == slots::kGeneral);
  CHECK(route(ExpertRegistry::standard(RoutingMode::PerType, false), QuestionType::Level) == slots::kLevel);

  ExpertRegistry broken = ExpertRegistry::standard();
  broken.slots.erase(QuestionType::View);
  CHECK_THROWS_AS(route(broken, QuestionType::View), UnboundSlot);
  broken.general_slot.clear();
  broken.mode = RoutingMode::Monolithic;
  CHECK_THROWS_AS(validate(broken), UnboundSlot);
}

TEST_CASE("expert pool lookups") {
  ExpertPool pool;
  CHECK_THROWS_AS(pool.bind("x", nullptr), InvalidArgument);
  pool.bind("x", std::make_shared<EchoExpert>("yes"));
  const ExpertQuery q{"s1", ImageAlias::Main, QuestionType::Presence, "is there edema?"};
  const ExpertAnswer a = ask_expert(pool, "x", q);
  CHECK(a.text == "yes");
  CHECK(a.expert_id == "x");
  CHECK_THROWS_AS(ask_expert(pool, "y", q), UnboundSlot);
  pool.bind("blank", std::make_shared<EchoExpert>("  "));
  CHECK_THROWS_AS(ask_expert(pool, "blank", q), BackendError);
}

TEST_CASE("fixture expert lookup order") {
  FixtureExpert f;
  f.add("s1", ImageAlias::Main, "Is there edema?", "yes");
  f.add("", ImageAlias::Main, "which view is this image taken in?", "ap");
  const auto ask = [&](std::string study, ImageAlias alias, std::string q) {
    return f.ask({std::move(study), alias, QuestionType::Presence, std::move(q)}).text;
  };
  CHECK(ask("s1", ImageAlias::Main, "is there edema") == "yes");
  CHECK(ask("s9", ImageAlias::Main, "which view is this image taken in?") == "ap");
  CHECK_THROWS_AS(ask("s1", ImageAlias::Reference, "is there edema?"), FixtureMiss);
  CHECK_THROWS_AS(ask("s2", ImageAlias::Main, "is there edema?"), FixtureMiss);

  std::istringstream lines(R"({"study_id":"s1","image_alias":"000B","question":"q?","answer":"no"})"
                           "\n"
                           R"({"image_alias":"000A","question":"r?","answer":"pa"})"
                           "\n");
  const auto loaded = FixtureExpert::parse(lines);
  CHECK(loaded->size() == 2);
  CHECK(loaded->ask({"s1", ImageAlias::Reference, QuestionType::Presence, "q?"}).text == "no");
  std::istringstream bad(R"({"image_alias":"000C","question":"q?","answer":"no"})");
  CHECK_THROWS_AS(FixtureExpert::parse(bad), SchemaError);
}

TEST_CASE("abnormality labels and detector") {
  CHECK(abnormality_vocabulary().size() == 33);
  CHECK(restricted_abnormality_answers().size() == 25);
  CHECK_THROWS_AS(AbnormalityLabelSet({"unicorn"}), InvalidArgument);
  const AbnormalityLabelSet s({"pleural effusion", "edema"});
  CHECK(join_labels(s) == "edema, pleural effusion");
  CHECK(join_labels(AbnormalityLabelSet{}) == kNoAbnormalities);
  CHECK(AbnormalityLabelSet::from_answer("Pleural Effusion, edema").labels() == s.labels());
  CHECK(AbnormalityLabelSet::from_answer("no abnormalities").empty());

  AbnormalityDetector d;
  d.bind("s1", ImageAlias::Main, s);
  CHECK(d.detect("s1", ImageAlias::Main).text == "edema, pleural effusion");
  CHECK_THROWS_AS(d.detect("s1", ImageAlias::Reference), UnboundAlias);

  const DatasetManifest m = synth::make_fixture({.studies = 6});
  const auto fromm = AbnormalityDetector::from_manifest(m);
  for (const QuestionRecord& r : m.records) {
    if (r.qtype != QuestionType::Abnormality || !r.gold_answer) continue;
    CHECK(normalize_answer(fromm->detect(r.study_id, r.images.front().alias).text) == normalize_answer(*r.gold_answer));
  }
}

TEST_CASE("candidate pool expert rejects answers outside its pool") {
  auto inner = std::make_shared<EchoExpert>("Edema");
  CandidatePoolExpert ok(inner, {"edema", "no abnormalities"}, "restricted");
  CHECK(ok.ask({"s", ImageAlias::Main, QuestionType::AbnormalityRestricted, "q?"}).text == "Edema");
  CandidatePoolExpert narrow(inner, {"pneumothorax"}, "restricted");
  CHECK_THROWS_AS(narrow.ask({"s", ImageAlias::Main, QuestionType::AbnormalityRestricted, "q?"}), FixtureMiss);
}

TEST_CASE("noisy expert flips depend only on seed and query") {
  auto inner = std::make_shared<EchoExpert>("yes");
  NoisyExpert a(inner, {"yes", "no"}, 0.5, 11, "noisy");
  NoisyExpert b(inner, {"yes", "no"}, 0.5, 11, "noisy");
  NoisyExpert never(inner, {"yes", "no"}, 0.0, 11, "noisy");
  NoisyExpert always(inner, {"yes", "no"}, 1.0, 11, "noisy");
  std::size_t flipped = 0;
  for (int i = 0; i < 400; ++i) {
    const ExpertQuery q{"s" + std::to_string(i), ImageAlias::Main, QuestionType::Presence, "is there edema?"};
    CHECK(a.flips(q) == b.flips(q));
    CHECK(a.ask(q).text == b.ask(q).text);
    CHECK(never.ask(q).text == "yes");
    CHECK(always.ask(q).text == "no");
    if (a.flips(q)) ++flipped;
  }
  CHECK(flipped > 120);
  CHECK(flipped < 280);
  CHECK_THROWS_AS(NoisyExpert(inner, {}, 1.5, 1, "x"), InvalidArgument);
}

TEST_CASE("expert wire bodies") {
  const ExpertQuery q{"s1", ImageAlias::Reference, QuestionType::Level, "what is the level of the edema?"};
  const auto body = nlohmann::json::parse(make_expert_request_body(q));
  CHECK(body["study_id"] == "s1");
  CHECK(body["image_alias"] == "000B");
  CHECK(body["qtype"] == "level");
  CHECK(body["question"] == "what is the level of the edema?");
  CHECK(body.size() == 4);
  CHECK(parse_expert_response_body(R"({"answer":"mild","confidence":0.7})").confidence == doctest::Approx(0.7));
  CHECK_THROWS_AS(parse_expert_response_body(R"({"answer":"mild","confidence":2})"), BackendError);
  CHECK_THROWS_AS(parse_expert_response_body(R"({"answer":""})"), BackendError);
  CHECK_THROWS_AS(parse_expert_response_body(R"({"text":"x"})"), BackendError);
}

TEST_CASE("remote expert talks to a local server") {
  httplib::Server server;
  std::string seen;
  server.Post("/experts/answer", [&](const httplib::Request& req, httplib::Response& res) {
    seen = req.body;
    res.set_content(R"({"answer":"moderate"})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  RemoteExpertConfig c;
  c.base_url = "http://127.0.0.1:" + std::to_string(port) + "/experts";
  c.retry.max_retries = 0;
  RemoteExpert e(c, [](std::chrono::milliseconds) {});
  const ExpertAnswer a = e.ask({"s1", ImageAlias::Main, QuestionType::Level, "what is the level of the edema?"});
  CHECK(a.text == "moderate");
  CHECK(a.expert_id == "remote-expert");
  CHECK(nlohmann::json::parse(seen)["image_alias"] == "000A");
  server.stop();
  t.join();
}

// ---- intent parsing -----------------------------------------------------------------------

TEST_CASE("parse_intent strict grammar") {
  const ParsedIntent ask = parse_intent("QUESTION: is there edema?\nTYPE: presence\nIMAGE: 000B\n");
  CHECK(ask.kind == IntentKind::AskExpert);
  CHECK(ask.question_text == "is there edema?");
  CHECK(ask.qtype == QuestionType::Presence);
  CHECK(ask.image_alias == ImageAlias::Reference);

  const ParsedIntent decorated = parse_intent("**Question:** what level is the edema?\n**Type:** level\n- Image ID: 000A");
  CHECK(decorated.kind == IntentKind::AskExpert);
  CHECK(decorated.qtype == QuestionType::Level);

  const ParsedIntent fin = parse_intent("FINAL: the main image has an additional finding of edema.");
  CHECK(fin.kind == IntentKind::Final);
  CHECK(fin.final_answer == "the main image has an additional finding of edema.");
  CHECK(parse_intent("FINAL:\nnothing has\nchanged").final_answer == "nothing has changed");

  CHECK(parse_intent("").kind == IntentKind::Malformed);
  CHECK(parse_intent("  \n ").kind == IntentKind::Malformed);
  CHECK(parse_intent("QUESTION: is there edema?").kind == IntentKind::Malformed);
  CHECK(parse_intent("QUESTION: what has changed?\nTYPE: difference\nIMAGE: 000A").kind == IntentKind::Malformed);
  CHECK(parse_intent("QUESTION: q?\nTYPE: colour\nIMAGE: 000A").kind == IntentKind::Malformed);
  CHECK(parse_intent("QUESTION: what has changed compared to the reference image?\nTYPE: presence\nIMAGE: 000A").kind ==
        IntentKind::Malformed);
  CHECK(parse_intent("what has changed compared to the reference image? presence 000A").kind == IntentKind::Final);
  CHECK(parse_intent("FINAL:   ").kind == IntentKind::Malformed);
}

TEST_CASE("parse_intent lenient reading") {
  const ParsedIntent q = parse_intent("Let me check. Is there evidence of edema in this image? (presence, 000B)");
  CHECK(q.kind == IntentKind::AskExpert);
  CHECK(q.qtype == QuestionType::Presence);
  CHECK(q.image_alias == ImageAlias::Reference);
  CHECK(q.question_text == "Is there evidence of edema in this image?");

  const ParsedIntent no_alias = parse_intent("is there evidence of edema in this image?");
  CHECK(no_alias.kind == IntentKind::Final);
  const ParsedIntent prose = parse_intent("The effusion has resolved.");
  CHECK(prose.kind == IntentKind::Final);
  CHECK(prose.final_answer == "The effusion has resolved.");
}

TEST_CASE("parse_intent never yields a difference question") {
  std::mt19937_64 rng(5);
  const std::vector<std::string> parts = {"QUESTION: ", "what has changed compared to the reference image?", "TYPE: ",
                                          "difference", "IMAGE: ", "000A", "000B", "\n", "?", "FINAL: ", "edema",
                                          "presence", "level", "is there edema", " "};
  for (int i = 0; i < 3000; ++i) {
    std::string raw;
    const std::size_t n = rng() % 10;
    for (std::size_t k = 0; k < n; ++k) raw += parts[rng() % parts.size()];
    const ParsedIntent p = parse_intent(raw);
    if (p.kind == IntentKind::AskExpert) CHECK(p.qtype != QuestionType::Difference);
    if (p.kind == IntentKind::Final) CHECK_FALSE(text::trim(p.final_answer).empty());
  }
}

// ---- conversation loop ---------------------------------------------------------------------

namespace {

struct LoopFixture {
  std::shared_ptr<EchoExpert> expert = std::make_shared<EchoExpert>("edema");
  ExpertPool pool = echo_pool(expert);
  LoopConfig config;
  std::vector<std::string> warnings;

  Transcript run(ScriptedBackend& learner, const StudyPair& s = study()) {
    ConversationEnv env{learner, pool, [&](std::string_view w) { warnings.emplace_back(w); }, {}};
    return run_conversation(s, synth::kDifferenceQuestion, config, env);
  }
};

}  // namespace

TEST_CASE("conversation that finalizes on its own") {
  LoopFixture f;
  ScriptedBackend learner(synth::identity_script("the main image has an additional finding of edema."));
  const Transcript t = f.run(learner);
  CHECK(t.stop_reason == StopReason::ModelFinalized);
  CHECK(t.turns.size() == 3);
  CHECK(t.answered_turns().size() == 2);
  CHECK(t.final_answer == "the main image has an additional finding of edema.");
  CHECK(learner.calls() == 3);
  const auto seen = f.expert->seen();
  REQUIRE(seen.size() == 2);
  CHECK(seen[0].image_alias == ImageAlias::Main);
  CHECK(seen[1].image_alias == ImageAlias::Reference);
  CHECK(seen[0].study_id == "s1");
  // Each later prompt carries the log so far.
  const auto prompts = learner.prompts_seen();
  CHECK(prompts[2].find("Q: [000A] what abnormalities are seen in this image?\nA: edema\n") != std::string::npos);
  CHECK(transcript_to_chatlog_text(t) ==
        "Q: [000A] what abnormalities are seen in this image? A: edema\n"
        "Q: [000B] what abnormalities are seen in this image? A: edema\n"
        "FINAL: the main image has an additional finding of edema.\n");
}

TEST_CASE("max rounds forces an answer with one extra call") {
  LoopFixture f;
  f.config.max_rounds = 3;
  f.config.repeat_limit = 10;
  std::vector<std::string> script;
  for (const char* q : {"is there evidence of edema in this image?", "which view is this image taken in?",
                        "is there evidence of a cyst in this image?"}) {
    script.push_back(synth::format_ask(q, classify_question_type(q), ImageAlias::Main));
  }
  script.push_back("FINAL: no change");
  ScriptedBackend learner(script);
  const Transcript t = f.run(learner);
  CHECK(t.stop_reason == StopReason::MaxRoundsForced);
  CHECK(learner.calls() == 4);
  CHECK(t.final_answer == "no change");
  CHECK(learner.prompts_seen().back().ends_with(std::string(kAnswerNowDirective)));
}

TEST_CASE("forced call that still asks a question yields the undetermined answer") {
  LoopFixture f;
  f.config.max_rounds = 1;
  const std::string ask = synth::format_ask("which view is this image taken in?", QuestionType::View, ImageAlias::Main);
  ScriptedBackend learner({ask, ask});
  const Transcript t = f.run(learner);
  CHECK(t.stop_reason == StopReason::MaxRoundsForced);
  CHECK(t.final_answer == kUndeterminedAnswer);
  CHECK(learner.calls() == 2);
}

TEST_CASE("repeated questions trigger a forced answer") {
  LoopFixture f;
  f.config.repeat_limit = 2;
  const std::string ask = synth::format_ask("which view is this image taken in?", QuestionType::View, ImageAlias::Main);
  ScriptedBackend learner({ask, ask, ask, "FINAL: no change"});
  const Transcript t = f.run(learner);
  CHECK(t.stop_reason == StopReason::RepetitionForced);
  CHECK(f.expert->seen().size() == 2);
  CHECK(learner.calls() == 4);
  CHECK(t.final_answer == "no change");
}

TEST_CASE("malformed replies get one reminder then force") {
  LoopFixture f;
  ScriptedBackend recovers({"QUESTION: is there edema?", "FINAL: edema is new"});
  const Transcript ok = f.run(recovers);
  CHECK(ok.stop_reason == StopReason::ModelFinalized);
  CHECK(recovers.prompts_seen()[1].ends_with(std::string(kFormatReminder)));

  ScriptedBackend blank({"", "", "FINAL: edema"});
  const Transcript forced = f.run(blank);
  CHECK(forced.stop_reason == StopReason::MalformedForced);
  CHECK(forced.final_answer == "edema");
  CHECK(blank.calls() == 3);

  ScriptedBackend partial({"TYPE: presence", "IMAGE: 000A"});
  const Transcript salvaged = f.run(partial);
  CHECK(salvaged.stop_reason == StopReason::MalformedForced);
  CHECK(partial.calls() == 2);
  CHECK_FALSE(salvaged.final_answer.empty());
}

TEST_CASE("fixture misses become unknown and are warned about") {
  auto fixture = std::make_shared<FixtureExpert>("oracle");
  ExpertPool pool;
  for (const QuestionType t : kRoutable) pool.bind(route(ExpertRegistry::standard(), t), fixture);
  LoopConfig config;
  ScriptedBackend learner(synth::identity_script("nothing"));
  std::vector<std::string> warnings;
  ConversationEnv env{learner, pool, [&](std::string_view w) { warnings.emplace_back(w); }, {}};
  const Transcript t = run_conversation(study(), synth::kDifferenceQuestion, config, env);
  CHECK(t.turns[0].expert_answer == std::string(kUnknownExpertAnswer));
  CHECK(warnings.size() >= 2);
}

TEST_CASE("a learner prompt that would leak a locator never leaves") {
  LoopFixture f;
  const StudyPair s = study("s7");
  // The expert answer echoes the locator, so the second prompt carries it.
  f.pool = echo_pool(std::make_shared<EchoExpert>(s.main.source_uri));
  ScriptedBackend learner(synth::identity_script("x"));
  CHECK_THROWS_AS(f.run(learner, s), PrivacyViolation);
  CHECK(learner.calls() == 1);
}

TEST_CASE("transcripts round-trip through JSON lines") {
  LoopFixture f;
  ScriptedBackend learner({"", "QUESTION: is there edema?\nTYPE: presence\nIMAGE: 000B", "FINAL: done"});
  Transcript t = f.run(learner);
  Transcript failed;
  failed.study_id = "s2";
  failed.difference_question = "q";
  failed.stop_reason = StopReason::Failed;
  failed.error = "transport failure";
  std::ostringstream out;
  const std::vector<Transcript> all{t, failed};
  write_transcripts(all, out);
  std::istringstream in(out.str());
  CHECK(read_transcripts(in) == all);
  CHECK_THROWS_AS(transcript_from_json_line("{}"), SchemaError);
  CHECK_THROWS_AS(transcript_from_json_line(R"({"study_id":"s","question":"q","turns":[],"final_answer":"a","stop_reason":"bored"})"),
                  SchemaError);
}

TEST_CASE("loop config validation") {
  LoopFixture f;
  ScriptedBackend learner({"FINAL: x"});
  f.config.max_rounds = 0;
  CHECK_THROWS_AS(f.run(learner), InvalidArgument);
  f.config.max_rounds = 2;
  f.config.repeat_limit = 0;
  CHECK_THROWS_AS(f.run(learner), InvalidArgument);
  CHECK(learner.calls() == 0);
}
