#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "medres/error.hpp"
#include "medres/harness.hpp"
#include "medres/synthetic.hpp"

using namespace medres;

namespace {

std::string dump(std::span<const Transcript> ts) {
  std::ostringstream out;
  write_transcripts(ts, out);
  return out.str();
}

// Fails every conversation of one study.
LearnerFactory failing_for(std::string study_id, LearnerFactory inner) {
  return [study_id, inner](const StudyPair& s, const QuestionRecord& r) -> std::unique_ptr<ChatBackend> {
    if (s.study_id == study_id) return std::make_unique<ScriptedBackend>(std::vector<std::string>{});
    return inner(s, r);
  };
}

}  // namespace

TEST_CASE("difference answers are composed from label sets") {
  const AbnormalityLabelSet edema({"edema"});
  const AbnormalityLabelSet effusion({"pleural effusion"});
  CHECK(synth::compose_difference_answer(edema, {}) ==
        "the main image has an additional finding of edema than the reference image.");
  CHECK(synth::compose_difference_answer({}, effusion) ==
        "the main image is missing the finding of pleural effusion than the reference image.");
  CHECK(synth::compose_difference_answer(edema, effusion) ==
        "the main image has an additional finding of edema than the reference image. "
        "the main image is missing the finding of pleural effusion than the reference image.");
  const std::string same = synth::compose_difference_answer(edema, edema);
  CHECK(same == synth::compose_difference_answer({}, {}));
  CHECK(metrics::tokenize(same).size() >= 4);
}

TEST_CASE("fixtures are deterministic and valid") {
  const DatasetManifest a = synth::make_fixture({.studies = 15, .train = 5, .val = 2, .seed = 3});
  const DatasetManifest b = synth::make_fixture({.studies = 15, .train = 5, .val = 2, .seed = 3});
  CHECK(a.records == b.records);
  CHECK(a.studies == b.studies);
  CHECK(a.difference_questions(Split::Test).size() == 8);
  CHECK_NOTHROW(validate(a));
  const DatasetManifest c = synth::make_fixture({.studies = 15, .seed = 4});
  CHECK_FALSE(a.records == c.records);
}

TEST_CASE("script book lookup and parsing") {
  ScriptBook book;
  book.add("s1", std::nullopt, {"FINAL: a"});
  book.add("s1", std::string("q2"), {"FINAL: b"});
  CHECK(book.responses("s1", "q2").front() == "FINAL: b");
  CHECK(book.responses("s1", "other").front() == "FINAL: a");
  CHECK_THROWS_AS(book.responses("s2", "q"), FixtureMiss);

  std::ostringstream out;
  book.write(out);
  std::istringstream in(out.str());
  const ScriptBook again = ScriptBook::parse(in);
  CHECK(again.size() == 2);
  CHECK(again.responses("s1", "q2").front() == "FINAL: b");

  std::istringstream bad(R"({"study_id":"s1","responses":"FINAL: x"})");
  CHECK_THROWS_AS(ScriptBook::parse(bad), SchemaError);
}

TEST_CASE("identity scripts with oracle experts score perfectly at any parallelism") {
  const DatasetManifest m = synth::make_fixture({.studies = 20});
  const auto book = std::make_shared<const ScriptBook>(identity_scripts(m));
  const ExpertPool experts = oracle_pool(m);
  EvalOptions opts;
  opts.parallel = 1;
  const EvalResult serial = evaluate(m, experts, scripted_learners(book), opts);
  opts.parallel = 8;
  const EvalResult wide = evaluate(m, experts, scripted_learners(book), opts);

  CHECK(serial.evaluated == 20);
  CHECK(serial.scored == 20);
  CHECK(serial.failed == 0);
  CHECK(dump(serial.transcripts) == dump(wide.transcripts));
  REQUIRE(serial.report);
  CHECK(serial.report->bleu[3] == 1.0);
  CHECK(serial.report->cider_d == 10.0);
  CHECK(serial.report->rouge_l == doctest::Approx(1.0));
  CHECK(serial.report->meteor > 0.99);
  CHECK(*serial.report == *wide.report);
  for (const Transcript& t : serial.transcripts) CHECK(t.stop_reason == StopReason::ModelFinalized);
}

TEST_CASE("heuristic learner with oracle experts recovers the gold answers") {
  const DatasetManifest m = synth::make_fixture({.studies = 12, .seed = 21});
  const EvalResult r = evaluate(m, oracle_pool(m), heuristic_learners(), {});
  CHECK(r.failed == 0);
  REQUIRE(r.report);
  CHECK(r.report->bleu[3] == 1.0);
  for (const Transcript& t : r.transcripts) CHECK(t.answered_turns().size() == 2);
}

TEST_CASE("failed conversations are recorded and not scored") {
  const DatasetManifest m = synth::make_fixture({.studies = 6});
  const auto book = std::make_shared<const ScriptBook>(identity_scripts(m));
  const std::string victim = m.difference_questions(Split::Test).front()->study_id;
  EvalOptions opts;
  opts.parallel = 3;
  const EvalResult r = evaluate(m, oracle_pool(m), failing_for(victim, scripted_learners(book)), opts);
  CHECK(r.evaluated == 6);
  CHECK(r.failed == 1);
  CHECK(r.scored == 5);
  CHECK(r.stop_reasons.at(StopReason::Failed) == 1);
  for (const Transcript& t : r.transcripts) {
    if (t.study_id == victim) {
      CHECK(t.stop_reason == StopReason::Failed);
      CHECK(t.error.has_value());
    }
  }
  REQUIRE(r.report);
  CHECK(r.report->n == 5);
}

TEST_CASE("bias report strata") {
  const DatasetManifest m = synth::make_fixture({.studies = 100, .ages = synth::bias_fixture_ages(100)});
  const auto book = std::make_shared<const ScriptBook>(identity_scripts(m));
  EvalOptions opts;
  opts.parallel = 4;
  const EvalResult r = evaluate(m, oracle_pool(m), scripted_learners(book), opts);
  const BiasReport b = bias_report(r.transcripts, m);
  CHECK(b.total == 100);
  std::map<std::string, std::size_t> sums;
  std::map<std::string, std::size_t> age;
  for (const StratumRow& row : b.rows) {
    sums[row.family] += row.size;
    if (row.family == "age") age[row.label] = row.size;
    CHECK(row.size > 0);
    REQUIRE(row.report);
    CHECK(row.report->n == row.size);
  }
  CHECK(sums["gender"] == 100);
  CHECK(sums["age"] == 100);
  CHECK(age.size() == 3);
  std::vector<std::size_t> sizes;
  for (const auto& [label, n] : age) sizes.push_back(n);
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<std::size_t>{29, 34, 37});
  const auto j = nlohmann::json::parse(bias_report_to_json(b));
  CHECK(j["total"] == 100);
  CHECK(format_bias_table(b).find("age") != std::string::npos);
}

TEST_CASE("augmented export picks a stable fraction of studies") {
  const DatasetManifest m = synth::make_fixture({.studies = 200});
  const auto book = std::make_shared<const ScriptBook>(identity_scripts(m));
  EvalOptions opts;
  opts.parallel = 8;
  const EvalResult r = evaluate(m, oracle_pool(m), scripted_learners(book), opts);
  const auto a = export_augmented(r.transcripts, m, 0.05, 99);
  const auto b = export_augmented(r.transcripts, m, 0.05, 99);
  const auto c = export_augmented(r.transcripts, m, 0.05, 100);
  CHECK(a.size() == 10);
  std::ostringstream sa, sb, sc;
  write_augmented(a, sa);
  write_augmented(b, sb);
  write_augmented(c, sc);
  CHECK(sa.str() == sb.str());
  CHECK(sa.str() != sc.str());
  std::set<std::string> ids;
  for (const AugmentedRecord& rec : a) {
    ids.insert(rec.study_id);
    CHECK(rec.gold_answer.has_value());
    CHECK(std::count(rec.chatlog_text.begin(), rec.chatlog_text.end(), '\n') == 3);
  }
  CHECK(ids.size() == 10);
  CHECK(export_augmented(r.transcripts, m, 0.0, 1).empty());
  CHECK(export_augmented(r.transcripts, m, 1.0, 1).size() == 200);
  CHECK_THROWS_AS(export_augmented(r.transcripts, m, 1.5, 1), InvalidArgument);
}

TEST_CASE("ablation rows") {
  const DatasetManifest m = synth::make_fixture({.studies = 20, .seed = 13});
  const auto book = std::make_shared<const ScriptBook>(identity_scripts(m));
  const auto rows = ablation_matrix(m, oracle_pool(m), heuristic_learners(), {});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].label == kAblationFull);
  CHECK(rows[1].label == kAblationMonolithic);
  CHECK(rows[2].label == kAblationNoDetector);
  CHECK(rows[1].routing == RoutingMode::Monolithic);
  CHECK_FALSE(rows[2].abnormality_detector);
  // Every slot is the oracle, so routing cannot change the answers.
  for (const AblationRow& row : rows) {
    REQUIRE(row.result.report);
    CHECK(*row.result.report == *rows[0].result.report);
  }
  const auto noisy = ablation_matrix(m, degraded_general_pool(m, 0.6, 5), heuristic_learners(), {});
  REQUIRE(noisy[0].result.report);
  REQUIRE(noisy[1].result.report);
  CHECK(noisy[0].result.report->cider_d > noisy[1].result.report->cider_d);
  CHECK(nlohmann::json::parse(ablation_to_json(noisy)).size() == 3);
  CHECK(format_ablation_table(noisy).find("w/o divide-and-conquer") != std::string::npos);
}

TEST_CASE("run configuration files") {
  const auto dir = std::filesystem::temp_directory_path() / "medres_config_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "run.json");
    f << R"({"manifest":"data/m.jsonl","learner":"heuristic","routing":"monolithic","max_rounds":4,"parallel":2,
            "remote_learner":{"base_url":"https://example.invalid/v1","model":"m","max_retries":5}})";
  }
  const RunConfig c = load_run_config(dir / "run.json");
  CHECK(c.manifest == dir / "data/m.jsonl");
  CHECK(c.learner == LearnerKind::Heuristic);
  CHECK(c.routing == RoutingMode::Monolithic);
  CHECK(c.max_rounds == 4);
  CHECK(c.parallel == 2);
  CHECK(c.remote_learner.retry.max_retries == 5);
  {
    std::ofstream f(dir / "bad.json");
    f << R"({"max_rounds":0})";
  }
  CHECK_THROWS_AS(validate(load_run_config(dir / "bad.json")), InvalidArgument);
  std::filesystem::remove_all(dir);
}

TEST_CASE("run_eval writes transcripts and a report") {
  const auto dir = std::filesystem::temp_directory_path() / "medres_run_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const DatasetManifest m = synth::make_fixture({.studies = 8, .train = 2});
  {
    std::ofstream f(dir / "manifest.jsonl");
    write_manifest(m, f);
  }
  RunConfig c;
  c.manifest = dir / "manifest.jsonl";
  c.learner = LearnerKind::Heuristic;
  c.out_dir = dir / "out";
  const RunOutput out = run_eval(c);
  CHECK(out.result.scored == 6);
  CHECK(load_transcripts(out.transcripts_path).size() == 6);
  std::ifstream rf(out.report_path);
  const auto report = nlohmann::json::parse(rf);
  CHECK(report["scored"] == 6);
  CHECK(report["metrics"]["bleu_4"] == 1.0);
  CHECK(report["stop_reasons"].size() == 5);
  CHECK(format_report_table(out.result).find("BLEU-4") != std::string::npos);
  std::filesystem::remove_all(dir);
}
