#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace medres {

// Anonymized image identifiers. Only these two strings ever leave the
// process; the locator in ImageRef::source_uri stays local.
enum class ImageAlias { Main, Reference };

std::string_view to_string(ImageAlias alias) noexcept;
std::optional<ImageAlias> parse_image_alias(std::string_view text) noexcept;

struct ImageRef {
  ImageAlias alias = ImageAlias::Main;
  std::string source_uri;

  friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

enum class QuestionType {
  Abnormality,
  AbnormalityRestricted,
  Presence,
  View,
  Location,
  Type,
  Level,
  Difference,
};

inline constexpr std::array<QuestionType, 8> kAllQuestionTypes = {
    QuestionType::Abnormality, QuestionType::AbnormalityRestricted,
    QuestionType::Presence,    QuestionType::View,
    QuestionType::Location,    QuestionType::Type,
    QuestionType::Level,       QuestionType::Difference,
};

// The seven types a single-image expert can answer.
inline constexpr std::array<QuestionType, 7> kSingleImageTypes = {
    QuestionType::Abnormality, QuestionType::AbnormalityRestricted,
    QuestionType::Presence,    QuestionType::View,
    QuestionType::Location,    QuestionType::Type,
    QuestionType::Level,
};

// Canonical lowercase wire names: "abnormality", "abnormality_restricted",
// "presence", "view", "location", "type", "level", "difference".
std::string_view to_string(QuestionType type) noexcept;

// Accepts the wire names case-insensitively, plus "abnormality*" and
// "restricted abnormality" for the restricted variant.
std::optional<QuestionType> parse_question_type(std::string_view text) noexcept;

enum class Gender { Female, Male, Unknown };

std::string_view to_string(Gender gender) noexcept;
std::optional<Gender> parse_gender(std::string_view text) noexcept;

struct QuestionRecord {
  std::string study_id;
  QuestionType qtype = QuestionType::Presence;
  std::string text;
  std::optional<std::string> gold_answer;
  std::vector<ImageRef> images;

  friend bool operator==(const QuestionRecord&, const QuestionRecord&) = default;
};

// Throws InvalidArgument when the record breaks its invariants
// (empty text, wrong image count for its type).
void validate(const QuestionRecord& record);

struct StudyPair {
  std::string study_id;
  ImageRef main{ImageAlias::Main, {}};
  ImageRef reference{ImageAlias::Reference, {}};
  Gender gender = Gender::Unknown;
  std::optional<int> age;

  friend bool operator==(const StudyPair&, const StudyPair&) = default;
};

void validate(const StudyPair& study);

enum class IntentKind { AskExpert, Final, Malformed };

std::string_view to_string(IntentKind kind) noexcept;

struct ParsedIntent {
  IntentKind kind = IntentKind::Malformed;
  std::string question_text;
  QuestionType qtype = QuestionType::Presence;
  ImageAlias image_alias = ImageAlias::Main;
  std::string final_answer;

  static ParsedIntent ask(std::string question, QuestionType type, ImageAlias alias);
  static ParsedIntent final_answer_of(std::string answer);
  static ParsedIntent malformed();

  friend bool operator==(const ParsedIntent&, const ParsedIntent&) = default;
};

struct Turn {
  int index = 1;
  std::string learner_raw;
  ParsedIntent intent;
  std::optional<std::string> expert_answer;
  std::optional<std::string> expert_id;

  friend bool operator==(const Turn&, const Turn&) = default;
};

// Failed marks a conversation aborted by a backend error; it never has a
// usable final answer and is excluded from scoring.
enum class StopReason { ModelFinalized, MaxRoundsForced, RepetitionForced, MalformedForced, Failed };

std::string_view to_string(StopReason reason) noexcept;
std::optional<StopReason> parse_stop_reason(std::string_view text) noexcept;

struct Transcript {
  std::string study_id;
  std::string difference_question;
  std::vector<Turn> turns;
  std::string final_answer;
  StopReason stop_reason = StopReason::ModelFinalized;
  std::optional<std::string> error;

  // Turns whose question reached an expert and got an answer back.
  std::vector<const Turn*> answered_turns() const;

  friend bool operator==(const Transcript&, const Transcript&) = default;
};

void validate(const Transcript& transcript);

// Keyword classifier for the question taxonomy. Rules, first match wins:
//   difference : change/changed/compared/comparison/difference/differ/
//                "reference image"/"previous image"/progress
//   level      : level, severity, severe, how bad
//   type       : "what type", "which type", "kind of", "type of"
//   view       : view, projection
//   location   : where, located, location, "left side or right side", "which side"
//   abnormality: abnormality / abnormalities / findings. Restricted when the
//                question names a region other than the whole image.
//   presence   : starts with is/are/does/do/has/have, or contains "evidence of"
// Throws Unclassifiable for empty text or when no rule matches.
QuestionType classify_question_type(std::string_view text);

// Lowercase, punctuation to spaces, whitespace collapsed. Comma-separated
// label lists are sorted so "b, a" and "a, b" compare equal.
std::string normalize_answer(std::string_view text);

}  // namespace medres
