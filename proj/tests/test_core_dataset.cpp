#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "medres/core.hpp"
#include "medres/dataset.hpp"
#include "medres/error.hpp"
#include "medres/synthetic.hpp"
#include "medres/text.hpp"

using namespace medres;

TEST_CASE("image aliases round-trip") {
  CHECK(to_string(ImageAlias::Main) == "000A");
  CHECK(to_string(ImageAlias::Reference) == "000B");
  CHECK(parse_image_alias("000b") == ImageAlias::Reference);
  CHECK_FALSE(parse_image_alias("000C").has_value());
}

TEST_CASE("question types round-trip through their wire names") {
  for (const QuestionType t : kAllQuestionTypes) CHECK(parse_question_type(to_string(t)) == t);
  CHECK(parse_question_type("Abnormality*") == QuestionType::AbnormalityRestricted);
  CHECK_FALSE(parse_question_type("colour").has_value());
}

TEST_CASE("classify_question_type") {
  CHECK(classify_question_type("what level is the cardiomegaly?") == QuestionType::Level);
  CHECK(classify_question_type("what has changed compared to the reference image?") == QuestionType::Difference);
  CHECK(classify_question_type("where is the pleural effusion located?") == QuestionType::Location);
  CHECK(classify_question_type("which view is this image taken in?") == QuestionType::View);
  CHECK(classify_question_type("what type of fracture is it?") == QuestionType::Type);
  CHECK(classify_question_type("is there evidence of edema in this image?") == QuestionType::Presence);
  CHECK(classify_question_type("what abnormalities are seen in this image?") == QuestionType::Abnormality);
  CHECK(classify_question_type("what abnormalities are seen in the lungs?") == QuestionType::AbnormalityRestricted);
  CHECK_THROWS_AS(classify_question_type(""), Unclassifiable);
  try {
    classify_question_type("tell me a story");
    FAIL("expected Unclassifiable");
  } catch (const Unclassifiable& e) {
    CHECK(e.text() == "tell me a story");
  }
}

TEST_CASE("classification covers every fixture question") {
  const DatasetManifest m = synth::make_fixture({.studies = 30});
  for (const QuestionRecord& r : m.records) {
    INFO(r.text);
    CHECK(classify_question_type(r.text) == r.qtype);
  }
}

TEST_CASE("normalize_answer") {
  CHECK(normalize_answer("Pneumothorax, Atelectasis") == "atelectasis, pneumothorax");
  CHECK(normalize_answer("yes") == "yes");
  CHECK(normalize_answer("  AP   view. ") == "ap view");
  CHECK(normalize_answer("") == "");

  std::mt19937 rng(1);
  std::vector<std::string> labels{"edema", "pleural effusion", "cardiomegaly", "atelectasis"};
  const std::string canonical = normalize_answer(text::join(labels, ", "));
  for (int i = 0; i < 20; ++i) {
    std::shuffle(labels.begin(), labels.end(), rng);
    const std::string n = normalize_answer(text::join(labels, ", "));
    CHECK(n == canonical);
    CHECK(normalize_answer(n) == n);
  }
}

TEST_CASE("record and transcript invariants") {
  QuestionRecord r{"s1", QuestionType::Difference, "what changed?", std::nullopt, {{ImageAlias::Main, "a"}}};
  CHECK_THROWS_AS(validate(r), InvalidArgument);
  r.images.push_back({ImageAlias::Reference, "b"});
  CHECK_NOTHROW(validate(r));
  r.text = "   ";
  CHECK_THROWS_AS(validate(r), InvalidArgument);

  Transcript t;
  t.study_id = "s1";
  t.final_answer = "";
  CHECK_THROWS_AS(validate(t), InvalidArgument);
  t.stop_reason = StopReason::Failed;
  CHECK_NOTHROW(validate(t));

  CHECK_THROWS_AS(ParsedIntent::ask("what changed?", QuestionType::Difference, ImageAlias::Main), InvalidArgument);
}

namespace {

const char* kThreeRecords =
    R"({"study_id":"s1","qtype":"abnormality","question":"what abnormalities are seen in this image?","answer":"edema","main_image":"img/1a.dcm","ref_image":"img/1b.dcm","gender":"F","age":54,"split":"train"})"
    "\n"
    R"({"study_id":"s1","qtype":"presence","question":"is there edema?","answer":"yes","main_image":"img/1a.dcm","image_alias":"000B","ref_image":"img/1b.dcm","split":"train"})"
    "\n\n"
    R"({"study_id":"s2","qtype":"difference","question":"what has changed compared to the reference image?","answer":"nothing","main_image":"img/2a.dcm","ref_image":"img/2b.dcm","split":"test"})"
    "\n";

}  // namespace

TEST_CASE("parse_manifest reads the documented schema") {
  std::istringstream in(kThreeRecords);
  const DatasetManifest m = parse_manifest(in);
  CHECK(m.records.size() == 3);
  CHECK(m.studies.size() == 2);
  CHECK(m.study("s1").gender == Gender::Female);
  CHECK(m.study("s1").age == 54);
  CHECK(m.study("s2").gender == Gender::Unknown);
  CHECK(m.records[1].images.front().alias == ImageAlias::Reference);
  CHECK(m.records[1].images.front().source_uri == "img/1b.dcm");
  CHECK(m.difference_questions(Split::Test).size() == 1);

  std::ostringstream out;
  write_manifest(m, out);
  std::istringstream again(out.str());
  const DatasetManifest m2 = parse_manifest(again);
  CHECK(m2.records == m.records);
  CHECK(m2.studies == m.studies);
  CHECK(m2.split_labels == m.split_labels);
}

TEST_CASE("parse_manifest errors carry the line and field") {
  std::istringstream overlap(
      R"({"study_id":"s1","qtype":"presence","question":"is there edema?","main_image":"a","split":"train"})"
      "\n"
      R"({"study_id":"s1","qtype":"presence","question":"is there a cyst?","main_image":"a","split":"test"})");
  CHECK_THROWS_AS(parse_manifest(overlap), OverlapError);

  std::istringstream shared_image(
      R"({"study_id":"s1","qtype":"presence","question":"is there edema?","main_image":"a","split":"train"})"
      "\n"
      R"({"study_id":"s2","qtype":"presence","question":"is there a cyst?","main_image":"a","split":"test"})");
  CHECK_THROWS_AS(parse_manifest(shared_image), OverlapError);

  std::istringstream missing(R"({"study_id":"s1","qtype":"presence","main_image":"a","split":"train"})");
  try {
    parse_manifest(missing);
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(e.line() == 1);
    CHECK(e.field() == "question");
  }

  std::istringstream bad_type("\n" R"({"study_id":"s1","qtype":"colour","question":"q","main_image":"a","split":"train"})");
  try {
    parse_manifest(bad_type);
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(e.line() == 2);
    CHECK(e.field() == "qtype");
  }

  std::istringstream not_json("{nope");
  CHECK_THROWS_AS(parse_manifest(not_json), SchemaError);
  std::istringstream diff_without_ref(
      R"({"study_id":"s1","qtype":"difference","question":"what changed?","main_image":"a","split":"train"})");
  CHECK_THROWS_AS(parse_manifest(diff_without_ref), SchemaError);
}

TEST_CASE("split sizes follow the study assignment") {
  const DatasetManifest m = synth::make_fixture({.studies = 12, .train = 8, .val = 2});
  const auto sizes = m.split_sizes();
  CHECK(sizes.at(Split::Train) == 8);
  CHECK(sizes.at(Split::Val) == 2);
  CHECK(sizes.at(Split::Test) == 2);
}

TEST_CASE("compute_stats counts pairs and distinct normalized answers") {
  CHECK(compute_stats(DatasetManifest{}).all.qa_pairs == 0);

  DatasetManifest m;
  m.studies["s"] = StudyPair{"s", {ImageAlias::Main, "m"}, {ImageAlias::Reference, "r"}, Gender::Unknown, {}};
  m.split_labels["s"] = Split::Train;
  const auto add = [&](QuestionType t, std::string answer) {
    m.records.push_back({"s", t, "q", std::move(answer), {{ImageAlias::Main, "m"}}});
  };
  for (const char* a : {"mild", "Mild.", "severe", "moderate", "severe"}) add(QuestionType::Level, a);
  for (const char* a : {"yes", "no", "Yes"}) add(QuestionType::Presence, a);
  m.records.push_back({"s", QuestionType::Difference, "what changed?", "nothing", {m.studies["s"].main, m.studies["s"].reference}});
  validate(m);

  const TypeStats stats = compute_stats(m);
  CHECK(stats.per_type.at(QuestionType::Level) == TypeCount{5, 3});
  CHECK(stats.per_type.at(QuestionType::Presence) == TypeCount{3, 2});
  CHECK(stats.per_type.at(QuestionType::View) == TypeCount{0, 0});
  CHECK(stats.all.qa_pairs == 9);
  CHECK(stats.all_excluding_difference.qa_pairs == 8);
  CHECK(stats.all.distinct_answers == 6);
  CHECK(stats.all_excluding_difference.distinct_answers == 5);

  std::reverse(m.records.begin(), m.records.end());
  CHECK(compute_stats(m) == stats);
}

TEST_CASE("age buckets and strata") {
  CHECK(age_bucket(54) == AgeBucket::Under55);
  CHECK(age_bucket(55) == AgeBucket::From55To70);
  CHECK(age_bucket(69) == AgeBucket::From55To70);
  CHECK(age_bucket(70) == AgeBucket::From70);
  CHECK(age_bucket(std::nullopt) == AgeBucket::Unknown);

  const DatasetManifest m =
      synth::make_fixture({.studies = 100, .ages = synth::bias_fixture_ages(100)});
  const Strata s = stratify(m);
  CHECK(s.age.at(AgeBucket::Under55).size() == 29);
  CHECK(s.age.at(AgeBucket::From55To70).size() == 34);
  CHECK(s.age.at(AgeBucket::From70).size() == 37);
  std::size_t gender_total = 0;
  for (const auto& [g, ids] : s.gender) gender_total += ids.size();
  CHECK(gender_total == 100);

  const DatasetManifest no_ages = synth::make_fixture({.studies = 5, .ages = {std::nullopt}});
  const Strata u = stratify(no_ages);
  CHECK(u.age.at(AgeBucket::Unknown).size() == 5);
  std::size_t age_total = 0;
  for (const auto& [b, ids] : u.age) age_total += ids.size();
  CHECK(age_total == 5);
}
