#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "medres/core.hpp"

namespace medres {

enum class Split { Train, Val, Test };

std::string_view to_string(Split split) noexcept;
std::optional<Split> parse_split(std::string_view text) noexcept;

// Validated, immutable view of one manifest file. Every record's study
// resolves in `studies`, and every study sits in exactly one split.
struct DatasetManifest {
  std::vector<QuestionRecord> records;
  std::map<std::string, StudyPair> studies;
  std::map<std::string, Split> split_labels;

  const StudyPair& study(const std::string& study_id) const;
  std::map<Split, std::size_t> split_sizes() const;
  std::vector<const QuestionRecord*> difference_questions(Split split) const;
};

// Line-delimited manifest, one JSON object per line. Field names are fixed
// in docs/schema.md. Throws SchemaError (with line and field) on malformed
// input and OverlapError when a study or image crosses splits.
DatasetManifest parse_manifest(std::istream& in);
DatasetManifest load_manifest(const std::filesystem::path& path);

void write_manifest(const DatasetManifest& manifest, std::ostream& out);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Checks the cross-record invariants. parse_manifest calls this; it is
// public so hand-built manifests can be checked too.
void validate(const DatasetManifest& manifest);

struct TypeCount {
  std::size_t qa_pairs = 0;
  std::size_t distinct_answers = 0;

  friend bool operator==(const TypeCount&, const TypeCount&) = default;
};

// Per-type QA-pair and distinct-answer counts (answers compared after
// normalize_answer). Totals are given with and without Difference.
struct TypeStats {
  std::map<QuestionType, TypeCount> per_type;
  TypeCount all;
  TypeCount all_excluding_difference;

  friend bool operator==(const TypeStats&, const TypeStats&) = default;
};

TypeStats compute_stats(const DatasetManifest& manifest);

enum class AgeBucket { Under55, From55To70, From70, Unknown };

std::string_view to_string(AgeBucket bucket) noexcept;
AgeBucket age_bucket(std::optional<int> age) noexcept;

// Two independent partitions of the study set. Study IDs inside each
// stratum are sorted.
struct Strata {
  std::map<Gender, std::vector<std::string>> gender;
  std::map<AgeBucket, std::vector<std::string>> age;
};

Strata stratify(const DatasetManifest& manifest);
Strata stratify(const DatasetManifest& manifest, const std::vector<std::string>& study_ids);

}  // namespace medres
