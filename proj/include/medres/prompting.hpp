#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "medres/core.hpp"

namespace medres {

struct DatasetManifest;

// The three static prompt parts. The task part carries four placeholders:
// {context_examples}, {difference_question}, {main_alias} and {ref_alias},
// each exactly once. The other two parts are literal text.
struct PromptTemplateSet {
  std::string task_template;
  std::string question_instruction;
  std::string appended_instruction;

  friend bool operator==(const PromptTemplateSet&, const PromptTemplateSet&) = default;
};

inline constexpr std::array<std::string_view, 4> kTaskPlaceholders = {
    "{context_examples}", "{difference_question}", "{main_alias}", "{ref_alias}"};

// Throws MissingPlaceholder if a task placeholder is absent or repeated, or
// if any part references an image locator placeholder.
void validate(const PromptTemplateSet& templates);

enum class TemplateVariant { Gpt, Llama };

std::string_view to_string(TemplateVariant variant) noexcept;
TemplateVariant parse_template_variant(std::string_view text);

PromptTemplateSet default_templates(TemplateVariant variant = TemplateVariant::Gpt);

// Reads task.txt, question.txt and appended.txt from `dir` and validates.
PromptTemplateSet load_templates(const std::filesystem::path& dir);
void write_templates(const PromptTemplateSet& templates, const std::filesystem::path& dir);

struct ContextExample {
  std::string question;
  std::string answer;

  friend bool operator==(const ContextExample&, const ContextExample&) = default;
};

// Up to `per_type` examples for each question type, taken from the train
// split in manifest order (falling back to val when train has none).
std::vector<ContextExample> select_context_examples(const DatasetManifest& manifest, std::size_t per_type);

enum class PromptPart { Task = 0, Question = 1, Appended = 2, Log = 3 };

struct Span {
  std::size_t offset = 0;
  std::size_t length = 0;

  friend bool operator==(const Span&, const Span&) = default;
};

struct RenderedPrompt {
  std::string full_text;
  std::array<Span, 4> parts;

  std::string_view part(PromptPart which) const;
};

// Substitutes the task placeholders in one pass; substituted values are
// never rescanned.
std::string fill_task_template(std::string_view task_template, std::string_view context_block,
                               std::string_view difference_question, std::string_view main_alias,
                               std::string_view ref_alias);

std::string render_context_examples(std::span<const ContextExample> examples);

// One "Q: [alias] question" line and one "A: answer" line per turn that
// reached an expert, in turn order. Other turns are skipped.
std::string render_log(std::span<const Turn> turns);

RenderedPrompt render_prompt(const PromptTemplateSet& templates, std::span<const ContextExample> examples,
                             std::string_view difference_question, std::span<const Turn> log);

}  // namespace medres
