#include "medres/synthetic.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "medres/error.hpp"
#include "medres/orchestrator.hpp"
#include "medres/text.hpp"

namespace medres::synth {

namespace {

std::string join_set(const std::set<std::string>& labels) {
  return text::join(std::vector<std::string>(labels.begin(), labels.end()), ", ");
}

// Portable draws: std::uniform_int_distribution differs between standard
// libraries, and fixtures must not.
std::size_t draw(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

AbnormalityLabelSet draw_labels(std::mt19937_64& rng, std::size_t max_count) {
  const auto& vocab = abnormality_vocabulary();
  std::vector<std::string> labels;
  const std::size_t count = draw(rng, max_count + 1);
  for (std::size_t i = 0; i < count; ++i) labels.emplace_back(vocab[draw(rng, vocab.size())]);
  return AbnormalityLabelSet(labels);
}

struct StudyBuilder {
  DatasetManifest& manifest;
  const StudyPair& study;

  void single(ImageAlias alias, QuestionType type, std::string question, std::string answer) {
    QuestionRecord r;
    r.study_id = study.study_id;
    r.qtype = type;
    r.text = std::move(question);
    r.gold_answer = std::move(answer);
    r.images = {alias == ImageAlias::Main ? study.main : study.reference};
    manifest.records.push_back(std::move(r));
  }

  void difference(std::string question, std::string answer) {
    QuestionRecord r;
    r.study_id = study.study_id;
    r.qtype = QuestionType::Difference;
    r.text = std::move(question);
    r.gold_answer = std::move(answer);
    r.images = {study.main, study.reference};
    manifest.records.push_back(std::move(r));
  }
};

}  // namespace

std::string compose_difference_answer(const AbnormalityLabelSet& main, const AbnormalityLabelSet& reference) {
  std::set<std::string> added, missing;
  std::set_difference(main.labels().begin(), main.labels().end(), reference.labels().begin(),
                      reference.labels().end(), std::inserter(added, added.end()));
  std::set_difference(reference.labels().begin(), reference.labels().end(), main.labels().begin(),
                      main.labels().end(), std::inserter(missing, missing.end()));
  if (added.empty() && missing.empty()) return "there is no change between the main image and the reference image.";
  std::vector<std::string> sentences;
  if (!added.empty()) {
    sentences.push_back("the main image has an additional finding of " + join_set(added) +
                        " than the reference image.");
  }
  if (!missing.empty()) {
    sentences.push_back("the main image is missing the finding of " + join_set(missing) +
                        " than the reference image.");
  }
  return text::join(sentences, " ");
}

DatasetManifest make_fixture(const FixtureOptions& options) {
  if (options.studies == 0) throw InvalidArgument("a fixture needs at least one study");
  if (options.train + options.val > options.studies) {
    throw InvalidArgument("train and val studies exceed the study count");
  }
  std::mt19937_64 rng(options.seed);
  static constexpr std::string_view kViews[] = {"AP view", "PA view", "lateral view"};
  static constexpr std::string_view kSides[] = {"left lung", "right lung", "bilateral lungs"};
  static constexpr std::string_view kLevels[] = {"mild", "moderate", "severe"};
  static constexpr std::string_view kKinds[] = {"acute", "chronic"};
  const auto& vocab = abnormality_vocabulary();
  const auto& restricted = restricted_abnormality_answers();

  DatasetManifest manifest;
  const std::size_t width = std::to_string(options.studies - 1).size();
  for (std::size_t i = 0; i < options.studies; ++i) {
    std::string index = std::to_string(i);
    index.insert(0, width - index.size(), '0');

    StudyPair study;
    study.study_id = options.id_prefix + index;
    study.main = {ImageAlias::Main, "fixture://" + study.study_id + "/main.dcm"};
    study.reference = {ImageAlias::Reference, "fixture://" + study.study_id + "/prior.dcm"};
    const std::size_t g = draw(rng, 5);
    study.gender = g < 2 ? Gender::Female : (g < 4 ? Gender::Male : Gender::Unknown);
    if (!options.ages.empty()) {
      study.age = options.ages[i % options.ages.size()];
    } else {
      const std::size_t a = draw(rng, 70);
      if (a >= 5) study.age = static_cast<int>(25 + a);
    }
    manifest.studies[study.study_id] = study;
    manifest.split_labels[study.study_id] =
        i < options.train ? Split::Train : (i < options.train + options.val ? Split::Val : Split::Test);

    const AbnormalityLabelSet main = draw_labels(rng, 3);
    const AbnormalityLabelSet ref = draw_labels(rng, 3);
    StudyBuilder b{manifest, manifest.studies[study.study_id]};
    for (const auto& [alias, labels] : {std::pair{ImageAlias::Main, &main}, std::pair{ImageAlias::Reference, &ref}}) {
      b.single(alias, QuestionType::Abnormality, std::string(kAbnormalityQuestion), join_labels(*labels));
      const std::string probe(vocab[draw(rng, vocab.size())]);
      b.single(alias, QuestionType::Presence, "is there evidence of " + probe + " in this image?",
               labels->labels().contains(probe) ? "yes" : "no");
      b.single(alias, QuestionType::View, "which view is this image taken in?", std::string(kViews[draw(rng, 3)]));
      if (!labels->empty()) {
        const std::string& first = *labels->labels().begin();
        b.single(alias, QuestionType::Location, "where is the " + first + " located?",
                 std::string(kSides[draw(rng, 3)]));
        b.single(alias, QuestionType::Level, "what is the level of the " + first + "?",
                 std::string(kLevels[draw(rng, 3)]));
        b.single(alias, QuestionType::Type, "what type of " + first + " is it?", std::string(kKinds[draw(rng, 2)]));
        const bool listed = std::find(restricted.begin(), restricted.end(), first) != restricted.end();
        b.single(alias, QuestionType::AbnormalityRestricted, "what abnormalities are seen in the lungs?",
                 listed ? first : std::string(kNoAbnormalities));
      }
    }
    b.difference(std::string(kDifferenceQuestion), compose_difference_answer(main, ref));
  }
  validate(manifest);
  return manifest;
}

std::vector<std::optional<int>> bias_fixture_ages(std::size_t total) {
  // Per 100 studies: 29 under 55, 34 in [55, 70), 37 at 70 or above.
  const std::size_t young = total * 29 / 100;
  const std::size_t middle = total * 34 / 100;
  const std::size_t old = total - young - middle;
  std::vector<std::optional<int>> ages;
  const auto fill = [&](std::size_t count, std::initializer_list<int> boundary, int lo, int hi) {
    std::size_t k = 0;
    for (const int a : boundary) {
      if (k++ < count) ages.emplace_back(a);
    }
    for (; k < count; ++k) ages.emplace_back(lo + static_cast<int>(k % static_cast<std::size_t>(hi - lo)));
  };
  fill(young, {54}, 30, 54);
  fill(middle, {55, 69}, 55, 69);
  fill(old, {70}, 70, 95);
  return ages;
}

std::string format_ask(std::string_view question, QuestionType type, ImageAlias alias) {
  return "QUESTION: " + std::string(question) + "\nTYPE: " + std::string(to_string(type)) +
         "\nIMAGE: " + std::string(to_string(alias)) + "\n";
}

std::string format_final(std::string_view answer) { return "FINAL: " + std::string(answer) + "\n"; }

std::vector<std::string> identity_script(std::string_view final_answer) {
  return {format_ask(kAbnormalityQuestion, QuestionType::Abnormality, ImageAlias::Main),
          format_ask(kAbnormalityQuestion, QuestionType::Abnormality, ImageAlias::Reference),
          format_final(final_answer)};
}

ChatResponse HeuristicLearner::do_complete(const ChatRequest& request) {
  // Log lines look like "Q: [000A] question" followed by "A: answer".
  std::optional<std::string> answers[2];
  const std::vector<std::string_view> lines = text::split_lines(request.prompt_text);
  const std::string wanted = normalize_answer(kAbnormalityQuestion);
  for (std::size_t i = 0; i + 1 < lines.size(); ++i) {
    const std::string_view q = lines[i];
    if (q.rfind("Q: [", 0) != 0 || q.size() < 10 || q[8] != ']') continue;
    if (lines[i + 1].rfind("A: ", 0) != 0) continue;
    const auto alias = parse_image_alias(q.substr(4, 4));
    if (!alias || normalize_answer(q.substr(10)) != wanted) continue;
    answers[*alias == ImageAlias::Main ? 0 : 1] = std::string(lines[i + 1].substr(3));
  }

  const bool must_answer = request.prompt_text.find(kAnswerNowDirective) != std::string::npos;
  ChatResponse response;
  response.backend_id = id_;
  if (!must_answer && !answers[0]) {
    response.text = format_ask(kAbnormalityQuestion, QuestionType::Abnormality, ImageAlias::Main);
  } else if (!must_answer && !answers[1]) {
    response.text = format_ask(kAbnormalityQuestion, QuestionType::Abnormality, ImageAlias::Reference);
  } else {
    const auto labels = [](const std::optional<std::string>& answer) {
      if (!answer) return AbnormalityLabelSet{};
      try {
        return AbnormalityLabelSet::from_answer(*answer);
      } catch (const InvalidArgument&) {
        // "unknown" or an off-vocabulary answer from a degraded expert.
        return AbnormalityLabelSet{};
      }
    };
    response.text = format_final(compose_difference_answer(labels(answers[0]), labels(answers[1])));
  }
  return response;
}

}  // namespace medres::synth
