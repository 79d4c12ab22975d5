#include "medres/core.hpp"

#include <algorithm>
#include <array>
#include <initializer_list>

#include "medres/error.hpp"
#include "medres/text.hpp"

namespace medres {

std::string_view to_string(ImageAlias alias) noexcept {
  return alias == ImageAlias::Main ? "000A" : "000B";
}

std::optional<ImageAlias> parse_image_alias(std::string_view text) noexcept {
  text = text::trim(text);
  if (text == "000A" || text == "000a") return ImageAlias::Main;
  if (text == "000B" || text == "000b") return ImageAlias::Reference;
  return std::nullopt;
}

std::string_view to_string(QuestionType type) noexcept {
  switch (type) {
    case QuestionType::Abnormality: return "abnormality";
    case QuestionType::AbnormalityRestricted: return "abnormality_restricted";
    case QuestionType::Presence: return "presence";
    case QuestionType::View: return "view";
    case QuestionType::Location: return "location";
    case QuestionType::Type: return "type";
    case QuestionType::Level: return "level";
    case QuestionType::Difference: return "difference";
  }
  return "unknown";
}

std::optional<QuestionType> parse_question_type(std::string_view text) noexcept {
  const std::string lowered = text::to_lower(text::trim(text));
  if (lowered == "abnormality*" || lowered == "restricted abnormality" ||
      lowered == "abnormality restricted") {
    return QuestionType::AbnormalityRestricted;
  }
  for (const QuestionType t : kAllQuestionTypes) {
    if (lowered == to_string(t)) return t;
  }
  return std::nullopt;
}

std::string_view to_string(Gender gender) noexcept {
  switch (gender) {
    case Gender::Female: return "F";
    case Gender::Male: return "M";
    case Gender::Unknown: return "U";
  }
  return "U";
}

std::optional<Gender> parse_gender(std::string_view text) noexcept {
  const std::string lowered = text::to_lower(text::trim(text));
  if (lowered == "f" || lowered == "female") return Gender::Female;
  if (lowered == "m" || lowered == "male") return Gender::Male;
  if (lowered == "u" || lowered == "unknown" || lowered.empty()) return Gender::Unknown;
  return std::nullopt;
}

void validate(const QuestionRecord& record) {
  if (text::trim(record.text).empty()) {
    throw InvalidArgument("question text is empty for study " + record.study_id);
  }
  const std::size_t expected = record.qtype == QuestionType::Difference ? 2 : 1;
  if (record.images.size() != expected) {
    throw InvalidArgument("question '" + record.text + "' of type " +
                          std::string(to_string(record.qtype)) + " needs " +
                          std::to_string(expected) + " image(s)");
  }
}

void validate(const StudyPair& study) {
  if (study.study_id.empty()) throw InvalidArgument("study_id is empty");
  if (study.main.alias != ImageAlias::Main || study.reference.alias != ImageAlias::Reference) {
    throw InvalidArgument("study " + study.study_id + " has swapped image aliases");
  }
  if (study.age && *study.age < 0) {
    throw InvalidArgument("study " + study.study_id + " has a negative age");
  }
}

std::string_view to_string(IntentKind kind) noexcept {
  switch (kind) {
    case IntentKind::AskExpert: return "ask_expert";
    case IntentKind::Final: return "final";
    case IntentKind::Malformed: return "malformed";
  }
  return "malformed";
}

ParsedIntent ParsedIntent::ask(std::string question, QuestionType type, ImageAlias alias) {
  if (type == QuestionType::Difference) {
    throw InvalidArgument("a difference question cannot be sent to a single-image expert");
  }
  ParsedIntent intent;
  intent.kind = IntentKind::AskExpert;
  intent.question_text = std::move(question);
  intent.qtype = type;
  intent.image_alias = alias;
  return intent;
}

ParsedIntent ParsedIntent::final_answer_of(std::string answer) {
  ParsedIntent intent;
  intent.kind = IntentKind::Final;
  intent.final_answer = std::move(answer);
  return intent;
}

ParsedIntent ParsedIntent::malformed() { return ParsedIntent{}; }

std::string_view to_string(StopReason reason) noexcept {
  switch (reason) {
    case StopReason::ModelFinalized: return "model_finalized";
    case StopReason::MaxRoundsForced: return "max_rounds_forced";
    case StopReason::RepetitionForced: return "repetition_forced";
    case StopReason::MalformedForced: return "malformed_forced";
    case StopReason::Failed: return "failed";
  }
  return "failed";
}

std::optional<StopReason> parse_stop_reason(std::string_view text) noexcept {
  for (const StopReason r : {StopReason::ModelFinalized, StopReason::MaxRoundsForced,
                             StopReason::RepetitionForced, StopReason::MalformedForced,
                             StopReason::Failed}) {
    if (text == to_string(r)) return r;
  }
  return std::nullopt;
}

std::vector<const Turn*> Transcript::answered_turns() const {
  std::vector<const Turn*> out;
  for (const Turn& turn : turns) {
    if (turn.intent.kind == IntentKind::AskExpert && turn.expert_answer) out.push_back(&turn);
  }
  return out;
}

void validate(const Transcript& transcript) {
  for (std::size_t i = 0; i < transcript.turns.size(); ++i) {
    const Turn& turn = transcript.turns[i];
    if (turn.index != static_cast<int>(i) + 1) {
      throw InvalidArgument("transcript turn indices are not contiguous from 1");
    }
    if (turn.intent.kind == IntentKind::Final) {
      if (turn.expert_answer) throw InvalidArgument("final turn carries an expert answer");
      if (i + 1 != transcript.turns.size()) throw InvalidArgument("final turn is not last");
    }
  }
  if (transcript.stop_reason != StopReason::Failed && text::trim(transcript.final_answer).empty()) {
    throw InvalidArgument("transcript for " + transcript.study_id + " has no final answer");
  }
}

namespace {

bool has_word(const std::vector<std::string>& words, std::initializer_list<std::string_view> options) {
  return std::any_of(words.begin(), words.end(), [&](const std::string& w) {
    return std::find(options.begin(), options.end(), w) != options.end();
  });
}

bool has_phrase(const std::string& padded, std::initializer_list<std::string_view> phrases) {
  return std::any_of(phrases.begin(), phrases.end(), [&](std::string_view p) {
    return padded.find(" " + std::string(p) + " ") != std::string::npos;
  });
}

// True when an abnormality question points at part of the image ("in the
// upper lungs") rather than the whole image ("in this image").
bool names_region(const std::vector<std::string>& words) {
  static constexpr std::array<std::string_view, 7> kWholeImage = {
      "image", "picture", "xray", "x", "film", "study", "radiograph"};
  for (std::size_t i = 0; i + 2 < words.size(); ++i) {
    const std::string& prep = words[i];
    if ((prep == "in" || prep == "on" || prep == "of" || prep == "at") && words[i + 1] == "the") {
      const std::string& next = words[i + 2];
      if (std::find(kWholeImage.begin(), kWholeImage.end(), next) == kWholeImage.end()) return true;
    }
  }
  return false;
}

}  // namespace

QuestionType classify_question_type(std::string_view raw) {
  const std::string folded = text::fold_words(raw);
  if (folded.empty()) throw Unclassifiable(std::string(raw));
  const std::vector<std::string> words = text::split_words(folded);
  const std::string padded = " " + folded + " ";

  if (has_word(words, {"change", "changed", "changes", "compared", "comparison", "difference",
                       "differences", "differ", "progression", "progressed"})) {
    return QuestionType::Difference;
  }
  if (has_word(words, {"level", "severity", "severe"}) || has_phrase(padded, {"how bad"})) {
    return QuestionType::Level;
  }
  if (has_phrase(padded, {"what type", "which type", "kind of", "type of"})) {
    return QuestionType::Type;
  }
  if (has_word(words, {"view", "projection"})) return QuestionType::View;
  if (has_word(words, {"where", "located", "location", "side"})) return QuestionType::Location;
  const std::string& first = words.front();
  if (first == "is" || first == "are" || first == "does" || first == "do" || first == "has" ||
      first == "have" || first == "was" || first == "were" || has_phrase(padded, {"evidence of"})) {
    return QuestionType::Presence;
  }
  if (has_word(words, {"abnormality", "abnormalities", "abnormal", "findings"})) {
    return names_region(words) ? QuestionType::AbnormalityRestricted : QuestionType::Abnormality;
  }
  throw Unclassifiable(std::string(raw));
}

std::string normalize_answer(std::string_view raw) {
  std::vector<std::string> labels;
  std::size_t start = 0;
  while (start <= raw.size()) {
    const std::size_t comma = raw.find(',', start);
    const std::size_t end = comma == std::string_view::npos ? raw.size() : comma;
    std::string label = text::fold_words(raw.substr(start, end - start));
    if (!label.empty()) labels.push_back(std::move(label));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  std::sort(labels.begin(), labels.end());
  return text::join(labels, ", ");
}

}  // namespace medres
