#include "medres/prompting.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "medres/dataset.hpp"
#include "medres/error.hpp"
#include "medres/text.hpp"

namespace medres {

namespace {

constexpr std::string_view kRadiologistSentence =
    "You are a radiologist trying to answer questions that pertain to the clinical progress and "
    "changes in the main image as compared to the reference image.";
constexpr std::string_view kExamplesSentence =
    "I will give you example answers in the format of question-answer pairs.";

constexpr std::string_view kQuestionBody =
    "You can ask questions about both images to gather information, but do not ask redundant "
    "questions. You can ask about the abnormalities in different images, like \"what abnormalities "
    "are seen in this image?\". You can ask about the presence of a certain abnormality in an "
    "image, like \"is there evidence of atelectasis in this image?\". You can ask about the level "
    "of a certain abnormality in an image with \"what level is the cardiomegaly?\". You can also "
    "ask about the view (\"which view is this image taken?\"), the location (\"where in the image "
    "is the pleural effusion located?\") and the type (\"what type is the opacity?\") of a finding. "
    "Give me your questions one at a time about any of the images. Only return the generated "
    "question, the question type, and the corresponding image ID.\n";

constexpr std::string_view kQuestionFormat =
    "Reply in exactly this format:\n"
    "QUESTION: <question>\n"
    "TYPE: <abnormality|presence|view|location|type|level>\n"
    "IMAGE: <000A or 000B>\n";

constexpr std::string_view kAppendedBody =
    "You should answer the question like the previous examples once you have enough information. "
    "Do not make any assumptions by yourself. Only reply with the difference when you answer the "
    "question. No explanation is needed.\n";

constexpr std::string_view kAppendedFormat = "When you answer, reply in exactly this format:\nFINAL: <answer>\n";

// Placeholders that would pull an image locator into a prompt.
constexpr std::array<std::string_view, 5> kForbiddenPlaceholders = {
    "{source_uri", "{main_image", "{ref_image", "{image_path", "{locator"};

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t count = 0;
  for (std::size_t pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size())) {
    ++count;
  }
  return count;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read template " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace

void validate(const PromptTemplateSet& templates) {
  for (const std::string_view placeholder : kTaskPlaceholders) {
    const std::size_t n = count_occurrences(templates.task_template, placeholder);
    if (n != 1) {
      throw MissingPlaceholder("task template must contain " + std::string(placeholder) +
                               " exactly once (found " + std::to_string(n) + ")");
    }
  }
  for (const std::string* part :
       {&templates.task_template, &templates.question_instruction, &templates.appended_instruction}) {
    for (const std::string_view forbidden : kForbiddenPlaceholders) {
      if (part->find(forbidden) != std::string::npos) {
        throw MissingPlaceholder("templates may not reference image locators (" + std::string(forbidden) + "})");
      }
    }
  }
}

std::string_view to_string(TemplateVariant variant) noexcept {
  return variant == TemplateVariant::Gpt ? "gpt" : "llama";
}

TemplateVariant parse_template_variant(std::string_view text) {
  const std::string lowered = text::to_lower(text::trim(text));
  if (lowered == "gpt") return TemplateVariant::Gpt;
  if (lowered == "llama") return TemplateVariant::Llama;
  throw InvalidArgument("unknown template variant '" + std::string(text) + "'");
}

PromptTemplateSet default_templates(TemplateVariant variant) {
  PromptTemplateSet t;
  const std::string ask_line =
      "Please answer this question for a main image {main_alias} with reference image {ref_alias}: "
      "{difference_question}\n";
  if (variant == TemplateVariant::Gpt) {
    t.task_template = std::string(kRadiologistSentence) + " " + std::string(kExamplesSentence) +
                      "\n{context_examples}" + ask_line;
    t.question_instruction = std::string(kQuestionBody) + std::string(kQuestionFormat);
    t.appended_instruction = std::string(kAppendedBody) + std::string(kAppendedFormat);
  } else {
    // Chat-tuned LLaMa models expect the role sentence in a system block.
    t.task_template = "<<SYS>>\n" + std::string(kRadiologistSentence) + "\n<</SYS>>\n\n" +
                      std::string(kExamplesSentence) + "\n{context_examples}" + ask_line + "\n";
    t.question_instruction = "### Instructions\n" + std::string(kQuestionBody) + std::string(kQuestionFormat) + "\n";
    t.appended_instruction = std::string(kAppendedBody) + std::string(kAppendedFormat) + "\n### Conversation\n";
  }
  validate(t);
  return t;
}

PromptTemplateSet load_templates(const std::filesystem::path& dir) {
  PromptTemplateSet t;
  t.task_template = read_file(dir / "task.txt");
  t.question_instruction = read_file(dir / "question.txt");
  t.appended_instruction = read_file(dir / "appended.txt");
  validate(t);
  return t;
}

void write_templates(const PromptTemplateSet& templates, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::pair<const char*, const std::string*> files[] = {
      {"task.txt", &templates.task_template},
      {"question.txt", &templates.question_instruction},
      {"appended.txt", &templates.appended_instruction}};
  for (const auto& [name, body] : files) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw IoError("cannot write template " + (dir / name).string());
    out << *body;
  }
}

std::vector<ContextExample> select_context_examples(const DatasetManifest& manifest, std::size_t per_type) {
  std::vector<ContextExample> out;
  if (per_type == 0) return out;
  for (const QuestionType type : kAllQuestionTypes) {
    for (const Split split : {Split::Train, Split::Val}) {
      std::vector<ContextExample> picked;
      std::set<std::string> seen;
      for (const QuestionRecord& r : manifest.records) {
        if (picked.size() == per_type) break;
        if (r.qtype != type || !r.gold_answer || manifest.split_labels.at(r.study_id) != split) continue;
        const std::string key = normalize_answer(r.text) + "|" + normalize_answer(*r.gold_answer);
        if (!seen.insert(key).second) continue;
        picked.push_back({text::single_line(r.text), text::single_line(*r.gold_answer)});
      }
      if (!picked.empty()) {
        out.insert(out.end(), picked.begin(), picked.end());
        break;
      }
    }
  }
  return out;
}

std::string_view RenderedPrompt::part(PromptPart which) const {
  const Span& span = parts[static_cast<std::size_t>(which)];
  return std::string_view(full_text).substr(span.offset, span.length);
}

std::string fill_task_template(std::string_view task_template, std::string_view context_block,
                               std::string_view difference_question, std::string_view main_alias,
                               std::string_view ref_alias) {
  const std::pair<std::string_view, std::string_view> values[] = {
      {"{context_examples}", context_block},
      {"{difference_question}", difference_question},
      {"{main_alias}", main_alias},
      {"{ref_alias}", ref_alias}};
  std::string out;
  out.reserve(task_template.size() + context_block.size() + difference_question.size());
  std::size_t pos = 0;
  while (pos < task_template.size()) {
    bool replaced = false;
    if (task_template[pos] == '{') {
      for (const auto& [key, value] : values) {
        if (task_template.substr(pos, key.size()) == key) {
          out.append(value);
          pos += key.size();
          replaced = true;
          break;
        }
      }
    }
    if (!replaced) out.push_back(task_template[pos++]);
  }
  return out;
}

std::string render_context_examples(std::span<const ContextExample> examples) {
  std::string out;
  for (const ContextExample& ex : examples) {
    out += "Question: " + text::single_line(ex.question) + "\n";
    out += "Answer: " + text::single_line(ex.answer) + "\n";
  }
  return out;
}

std::string render_log(std::span<const Turn> turns) {
  std::string out;
  for (const Turn& turn : turns) {
    if (turn.intent.kind != IntentKind::AskExpert || !turn.expert_answer) continue;
    out += "Q: [";
    out += to_string(turn.intent.image_alias);
    out += "] " + text::single_line(turn.intent.question_text) + "\n";
    out += "A: " + text::single_line(*turn.expert_answer) + "\n";
  }
  return out;
}

RenderedPrompt render_prompt(const PromptTemplateSet& templates, std::span<const ContextExample> examples,
                             std::string_view difference_question, std::span<const Turn> log) {
  if (text::trim(difference_question).empty()) throw InvalidArgument("difference question is empty");
  validate(templates);

  const std::string task =
      fill_task_template(templates.task_template, render_context_examples(examples),
                         text::single_line(difference_question), to_string(ImageAlias::Main),
                         to_string(ImageAlias::Reference));
  const std::string log_text = render_log(log);

  RenderedPrompt prompt;
  const std::string_view pieces[] = {task, templates.question_instruction, templates.appended_instruction, log_text};
  for (std::size_t i = 0; i < 4; ++i) {
    prompt.parts[i] = {prompt.full_text.size(), pieces[i].size()};
    prompt.full_text.append(pieces[i]);
  }
  return prompt;
}

}  // namespace medres
