#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "medres/core.hpp"
#include "medres/experts.hpp"
#include "medres/gateway.hpp"
#include "medres/prompting.hpp"

namespace medres {

struct LoopConfig {
  int max_rounds = 10;
  int repeat_limit = 3;
  std::string backend_id = "learner";
  ExpertRegistry registry = ExpertRegistry::standard();
  PromptTemplateSet templates = default_templates();
  std::vector<ContextExample> context_examples;
  double temperature = kDefaultTemperature;
  int max_tokens = kDefaultMaxTokens;
};

void validate(const LoopConfig& config);

// Appended after the rendered prompt, outside the four prompt parts.
inline constexpr std::string_view kAnswerNowDirective =
    "\nYou have asked enough questions. Answer the difference question now.\nFINAL: <answer>\n";
inline constexpr std::string_view kFormatReminder =
    "\nYour last reply did not follow the required format. Reply with either\n"
    "QUESTION: <question>\nTYPE: <type>\nIMAGE: <000A or 000B>\nor\nFINAL: <answer>\n";

// Final answer used when a forced answer call still does not produce one.
inline constexpr std::string_view kUndeterminedAnswer = "no conclusive difference could be determined";
// Expert answer recorded when no expert has an answer for a question.
inline constexpr std::string_view kUnknownExpertAnswer = "unknown";

// Strict grammar first ("QUESTION:", "TYPE:", "IMAGE:" lines, or "FINAL:"),
// then a lenient reading: a '?' sentence with a recognizable type and an
// image alias is a question; any other non-empty text is a final answer.
// Partial strict markers without a usable question or final answer, and
// blank text, are Malformed. A question whose text reads as a difference
// question is never an AskExpert, whatever type it declares.
ParsedIntent parse_intent(std::string_view raw);

struct ConversationEnv {
  ChatBackend& learner;
  const ExpertPool& experts;
  std::function<void(std::string_view)> on_warning;
  std::function<void(const RenderedPrompt&)> on_prompt;
  // Guard every learner call is checked against; the study's own locators
  // are always added. Defaults to the image-container sentinels.
  const PrivacyGuard* base_guard = nullptr;
};

// One linear learner conversation. Makes at most max_rounds + 1 chat calls
// and never sends a Difference question to an expert. Chat transport and
// privacy errors propagate.
Transcript run_conversation(const StudyPair& study, std::string_view difference_question, const LoopConfig& config,
                            const ConversationEnv& env);

// One "Q: [alias] question A: answer" line per answered turn, then one
// "FINAL: answer" line, so the line count is answered_turns() + 1.
std::string transcript_to_chatlog_text(const Transcript& transcript);

// One JSON object per line; field names are fixed in docs/transcript.md.
std::string transcript_to_json_line(const Transcript& transcript);
Transcript transcript_from_json_line(std::string_view line, std::size_t line_no = 1);

void write_transcripts(std::span<const Transcript> transcripts, std::ostream& out);
std::vector<Transcript> read_transcripts(std::istream& in);
std::vector<Transcript> load_transcripts(const std::filesystem::path& path);

}  // namespace medres
