#include "medres/orchestrator.hpp"

#include <fstream>
#include <optional>

#include <json.hpp>

#include "medres/error.hpp"
#include "medres/text.hpp"

namespace medres {

using json = nlohmann::json;

void validate(const LoopConfig& config) {
  if (config.max_rounds < 1) throw InvalidArgument("max_rounds must be at least 1");
  if (config.repeat_limit < 1) throw InvalidArgument("repeat_limit must be at least 1");
  validate(config.templates);
  validate(config.registry);
}

// ---- intent parsing ------------------------------------------------------------

namespace {

std::string_view strip_decoration(std::string_view line) {
  line = text::trim(line);
  while (!line.empty() && (line.front() == '*' || line.front() == '-' || line.front() == '#' || line.front() == '>')) {
    line.remove_prefix(1);
    line = text::trim(line);
  }
  return line;
}

// Value after `marker` when `line` starts with it (case-insensitive), with
// trailing markdown emphasis removed.
std::optional<std::string> marker_value(std::string_view line, std::string_view marker) {
  if (!text::starts_with_icase(line, marker)) return std::nullopt;
  std::string_view rest = line.substr(marker.size());
  while (!rest.empty() && rest.front() == '*') rest.remove_prefix(1);
  rest = text::trim(rest);
  while (!rest.empty() && rest.back() == '*') rest.remove_suffix(1);
  return std::string(text::trim(rest));
}

std::optional<ImageAlias> find_alias(std::string_view s) {
  const bool has_a = text::contains_icase(s, "000A");
  const bool has_b = text::contains_icase(s, "000B");
  if (has_a && has_b) {
    // The first one mentioned wins.
    std::string lowered = text::to_lower(s);
    return lowered.find("000a") < lowered.find("000b") ? ImageAlias::Main : ImageAlias::Reference;
  }
  if (has_a) return ImageAlias::Main;
  if (has_b) return ImageAlias::Reference;
  return std::nullopt;
}

std::optional<QuestionType> explicit_type_word(std::string_view s) {
  const std::vector<std::string> words = text::split_words(text::fold_words(s));
  for (const std::string& w : words) {
    if (w == "abnormality" || w == "presence" || w == "view" || w == "location" || w == "level" || w == "type") {
      return parse_question_type(w);
    }
  }
  return std::nullopt;
}

// The learner may label the difference question itself as something else.
bool reads_as_difference(std::string_view question) {
  try {
    return classify_question_type(question) == QuestionType::Difference;
  } catch (const Unclassifiable&) {
    return false;
  }
}

ParsedIntent parse_lenient(std::string_view raw) {
  const std::string_view body = text::trim(raw);
  const std::size_t qmark = body.find('?');
  if (qmark != std::string_view::npos) {
    std::size_t start = body.find_last_of(".!?\n:", qmark == 0 ? 0 : qmark - 1);
    start = (start == std::string_view::npos || start >= qmark) ? 0 : start + 1;
    std::string question(text::trim(body.substr(start, qmark - start + 1)));
    // Drop an alias the learner wrote inside the question itself.
    for (const char* alias : {"000A", "000B", "000a", "000b"}) {
      for (std::size_t p = question.find(alias); p != std::string::npos; p = question.find(alias)) {
        question.erase(p, 4);
      }
    }
    question = text::single_line(question);
    const std::string rest = std::string(body.substr(0, start)) + " " + std::string(body.substr(qmark + 1));
    const auto alias = find_alias(body);
    std::optional<QuestionType> type = explicit_type_word(rest);
    if (!type) {
      try {
        type = classify_question_type(question);
      } catch (const Unclassifiable&) {
      }
    }
    if (alias && type && *type != QuestionType::Difference && !text::fold_words(question).empty() &&
        !reads_as_difference(question)) {
      return ParsedIntent::ask(question, *type, *alias);
    }
  }
  return ParsedIntent::final_answer_of(text::single_line(body));
}

}  // namespace

ParsedIntent parse_intent(std::string_view raw) {
  if (text::trim(raw).empty()) return ParsedIntent::malformed();

  std::optional<std::string> question, type, image, final_text;
  const std::vector<std::string_view> lines = text::split_lines(raw);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string_view line = strip_decoration(lines[i]);
    if (auto v = marker_value(line, "QUESTION:")) {
      question = std::move(v);
    } else if (auto v = marker_value(line, "TYPE:")) {
      type = std::move(v);
    } else if (auto v = marker_value(line, "IMAGE ID:")) {
      image = std::move(v);
    } else if (auto v = marker_value(line, "IMAGE:")) {
      image = std::move(v);
    } else if (auto v = marker_value(line, "FINAL ANSWER:")) {
      final_text = std::move(v);
    } else if (auto v = marker_value(line, "FINAL:")) {
      final_text = std::move(v);
      // An answer may continue on the following lines.
      if (final_text->empty()) {
        std::vector<std::string> tail;
        for (std::size_t k = i + 1; k < lines.size(); ++k) {
          if (!text::trim(lines[k]).empty()) tail.emplace_back(text::trim(lines[k]));
        }
        final_text = text::join(tail, " ");
      }
    }
  }

  if (question && type && image) {
    const auto qtype = parse_question_type(*type);
    const auto alias = find_alias(*image);
    if (qtype && *qtype != QuestionType::Difference && alias && !text::trim(*question).empty() &&
        !reads_as_difference(*question)) {
      return ParsedIntent::ask(text::single_line(*question), *qtype, *alias);
    }
  }
  if (final_text && !text::trim(*final_text).empty()) {
    return ParsedIntent::final_answer_of(text::single_line(*final_text));
  }
  if (question || type || image || final_text) return ParsedIntent::malformed();
  return parse_lenient(raw);
}

// ---- conversation loop ---------------------------------------------------------

namespace {

class Conversation {
 public:
  Conversation(const StudyPair& study, std::string_view question, const LoopConfig& config, const ConversationEnv& env)
      : study_(study), question_(question), config_(config), env_(env) {
    guard_ = env.base_guard ? *env.base_guard : PrivacyGuard::with_default_sentinels();
    guard_.deny_study(study);
    transcript_.study_id = study.study_id;
    transcript_.difference_question = std::string(question);
  }

  Transcript run() {
    std::string directive;
    int malformed_streak = 0;
    std::string repeat_key;
    int repeat_streak = 0;

    while (calls_ < config_.max_rounds) {
      const std::string raw = call(directive);
      directive.clear();
      const ParsedIntent intent = parse_intent(raw);
      if (!text::trim(raw).empty()) last_nonempty_ = text::single_line(raw);

      switch (intent.kind) {
        case IntentKind::Final:
          push(raw, intent, std::nullopt, std::nullopt);
          return finish(intent.final_answer, StopReason::ModelFinalized);

        case IntentKind::Malformed:
          push(raw, intent, std::nullopt, std::nullopt);
          if (++malformed_streak >= 2) {
            if (last_nonempty_) return finish(*last_nonempty_, StopReason::MalformedForced);
            return force(StopReason::MalformedForced);
          }
          directive = std::string(kFormatReminder);
          break;

        case IntentKind::AskExpert: {
          malformed_streak = 0;
          const std::string key = normalize_answer(intent.question_text) + "|" +
                                  std::string(to_string(intent.image_alias));
          if (key == repeat_key) {
            ++repeat_streak;
          } else {
            repeat_key = key;
            repeat_streak = 1;
          }
          if (repeat_streak - 1 >= config_.repeat_limit) {
            push(raw, intent, std::nullopt, std::nullopt);
            return force(StopReason::RepetitionForced);
          }
          const ExpertAnswer answer = consult(intent);
          push(raw, intent, answer.text, answer.expert_id);
          break;
        }
      }
    }
    return force(StopReason::MaxRoundsForced);
  }

 private:
  std::string call(std::string_view directive) {
    const RenderedPrompt prompt =
        render_prompt(config_.templates, config_.context_examples, question_, transcript_.turns);
    if (env_.on_prompt) env_.on_prompt(prompt);
    ChatRequest request;
    request.prompt_text = prompt.full_text + std::string(directive);
    request.temperature = config_.temperature;
    request.max_tokens = config_.max_tokens;
    request.backend_id = config_.backend_id;
    ++calls_;
    return env_.learner.complete(request, guard_).text;
  }

  ExpertAnswer consult(const ParsedIntent& intent) {
    ExpertQuery query{study_.study_id, intent.image_alias, intent.qtype, intent.question_text};
    try {
      const QuestionType surface = classify_question_type(intent.question_text);
      if (surface != intent.qtype) {
        warn("learner declared type " + std::string(to_string(intent.qtype)) + " but '" + intent.question_text +
             "' reads as " + std::string(to_string(surface)));
      }
    } catch (const Unclassifiable&) {
      warn("learner question '" + intent.question_text + "' matches no type keyword");
    }
    const std::string backend = route(config_.registry, query);
    try {
      return ask_expert(env_.experts, backend, query);
    } catch (const FixtureMiss& miss) {
      warn(miss.what());
      return {std::string(kUnknownExpertAnswer), backend, std::nullopt};
    } catch (const UnboundAlias& miss) {
      warn(miss.what());
      return {std::string(kUnknownExpertAnswer), backend, std::nullopt};
    }
  }

  Transcript force(StopReason reason) {
    const std::string raw = call(kAnswerNowDirective);
    const ParsedIntent intent = parse_intent(raw);
    const std::string answer =
        intent.kind == IntentKind::Final ? intent.final_answer : std::string(kUndeterminedAnswer);
    push(raw, ParsedIntent::final_answer_of(answer), std::nullopt, std::nullopt);
    return finish(answer, reason);
  }

  Transcript finish(std::string answer, StopReason reason) {
    transcript_.final_answer = std::move(answer);
    transcript_.stop_reason = reason;
    return std::move(transcript_);
  }

  void push(const std::string& raw, const ParsedIntent& intent, std::optional<std::string> expert_answer,
            std::optional<std::string> expert_id) {
    Turn turn;
    turn.index = static_cast<int>(transcript_.turns.size()) + 1;
    turn.learner_raw = raw;
    turn.intent = intent;
    turn.expert_answer = std::move(expert_answer);
    turn.expert_id = std::move(expert_id);
    transcript_.turns.push_back(std::move(turn));
  }

  void warn(const std::string& message) {
    if (env_.on_warning) env_.on_warning("[" + study_.study_id + "] " + message);
  }

  const StudyPair& study_;
  std::string_view question_;
  const LoopConfig& config_;
  const ConversationEnv& env_;
  PrivacyGuard guard_;
  Transcript transcript_;
  int calls_ = 0;
  std::optional<std::string> last_nonempty_;
};

}  // namespace

Transcript run_conversation(const StudyPair& study, std::string_view difference_question, const LoopConfig& config,
                            const ConversationEnv& env) {
  validate(config);
  validate(study);
  if (text::trim(difference_question).empty()) throw InvalidArgument("difference question is empty");
  return Conversation(study, difference_question, config, env).run();
}

std::string transcript_to_chatlog_text(const Transcript& transcript) {
  std::string out;
  for (const Turn& turn : transcript.turns) {
    if (turn.intent.kind != IntentKind::AskExpert || !turn.expert_answer) continue;
    out += "Q: [" + std::string(to_string(turn.intent.image_alias)) + "] " + text::single_line(turn.intent.question_text);
    out += " A: " + text::single_line(*turn.expert_answer) + "\n";
  }
  return out + "FINAL: " + text::single_line(transcript.final_answer) + "\n";
}

// ---- transcript files -------------------------------------------------------------

namespace {

json turn_to_json(const Turn& turn) {
  json obj;
  obj["index"] = turn.index;
  obj["learner"] = turn.learner_raw;
  obj["intent"] = std::string(to_string(turn.intent.kind));
  if (turn.intent.kind == IntentKind::AskExpert) {
    obj["question"] = turn.intent.question_text;
    obj["qtype"] = std::string(to_string(turn.intent.qtype));
    obj["image"] = std::string(to_string(turn.intent.image_alias));
  } else if (turn.intent.kind == IntentKind::Final) {
    obj["final_answer"] = turn.intent.final_answer;
  }
  if (turn.expert_answer) obj["expert_answer"] = *turn.expert_answer;
  if (turn.expert_id) obj["expert_id"] = *turn.expert_id;
  return obj;
}

Turn turn_from_json(const json& obj, std::size_t line_no) {
  Turn turn;
  turn.index = obj.at("index").get<int>();
  turn.learner_raw = obj.at("learner").get<std::string>();
  const std::string kind = obj.at("intent").get<std::string>();
  if (kind == "ask_expert") {
    const auto qtype = parse_question_type(obj.at("qtype").get<std::string>());
    const auto alias = parse_image_alias(obj.at("image").get<std::string>());
    if (!qtype || *qtype == QuestionType::Difference) throw SchemaError(line_no, "turns.qtype", "invalid");
    if (!alias) throw SchemaError(line_no, "turns.image", "invalid");
    turn.intent = ParsedIntent::ask(obj.at("question").get<std::string>(), *qtype, *alias);
  } else if (kind == "final") {
    turn.intent = ParsedIntent::final_answer_of(obj.at("final_answer").get<std::string>());
  } else if (kind == "malformed") {
    turn.intent = ParsedIntent::malformed();
  } else {
    throw SchemaError(line_no, "turns.intent", "unknown intent '" + kind + "'");
  }
  if (const auto it = obj.find("expert_answer"); it != obj.end()) turn.expert_answer = it->get<std::string>();
  if (const auto it = obj.find("expert_id"); it != obj.end()) turn.expert_id = it->get<std::string>();
  return turn;
}

}  // namespace

std::string transcript_to_json_line(const Transcript& transcript) {
  json obj;
  obj["study_id"] = transcript.study_id;
  obj["question"] = transcript.difference_question;
  json turns = json::array();
  for (const Turn& turn : transcript.turns) turns.push_back(turn_to_json(turn));
  obj["turns"] = std::move(turns);
  obj["final_answer"] = transcript.final_answer;
  obj["stop_reason"] = std::string(to_string(transcript.stop_reason));
  if (transcript.error) obj["error"] = *transcript.error;
  return obj.dump();
}

Transcript transcript_from_json_line(std::string_view line, std::size_t line_no) {
  try {
    const json obj = json::parse(line);
    Transcript t;
    t.study_id = obj.at("study_id").get<std::string>();
    t.difference_question = obj.at("question").get<std::string>();
    for (const json& turn : obj.at("turns")) t.turns.push_back(turn_from_json(turn, line_no));
    t.final_answer = obj.at("final_answer").get<std::string>();
    const auto reason = parse_stop_reason(obj.at("stop_reason").get<std::string>());
    if (!reason) throw SchemaError(line_no, "stop_reason", "unknown value");
    t.stop_reason = *reason;
    if (const auto it = obj.find("error"); it != obj.end()) t.error = it->get<std::string>();
    return t;
  } catch (const json::exception& e) {
    throw SchemaError(line_no, "<transcript>", e.what());
  }
}

void write_transcripts(std::span<const Transcript> transcripts, std::ostream& out) {
  for (const Transcript& t : transcripts) out << transcript_to_json_line(t) << '\n';
}

std::vector<Transcript> read_transcripts(std::istream& in) {
  std::vector<Transcript> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    out.push_back(transcript_from_json_line(line, line_no));
  }
  return out;
}

std::vector<Transcript> load_transcripts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open transcripts " + path.string());
  return read_transcripts(in);
}

}  // namespace medres
