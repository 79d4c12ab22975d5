#include "medres/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "medres/error.hpp"
#include "medres/text.hpp"

namespace medres {

using json = nlohmann::json;

std::string_view to_string(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

std::optional<Split> parse_split(std::string_view text) noexcept {
  const std::string lowered = text::to_lower(text::trim(text));
  if (lowered == "train") return Split::Train;
  if (lowered == "val" || lowered == "validation") return Split::Val;
  if (lowered == "test") return Split::Test;
  return std::nullopt;
}

const StudyPair& DatasetManifest::study(const std::string& study_id) const {
  const auto it = studies.find(study_id);
  if (it == studies.end()) throw InvalidArgument("unknown study " + study_id);
  return it->second;
}

std::map<Split, std::size_t> DatasetManifest::split_sizes() const {
  std::map<Split, std::size_t> sizes{{Split::Train, 0}, {Split::Val, 0}, {Split::Test, 0}};
  for (const auto& [id, split] : split_labels) ++sizes[split];
  return sizes;
}

std::vector<const QuestionRecord*> DatasetManifest::difference_questions(Split split) const {
  std::vector<const QuestionRecord*> out;
  for (const QuestionRecord& r : records) {
    if (r.qtype != QuestionType::Difference) continue;
    const auto it = split_labels.find(r.study_id);
    if (it != split_labels.end() && it->second == split) out.push_back(&r);
  }
  return out;
}

namespace {

std::string required_string(const json& obj, const char* field, std::size_t line) {
  const auto it = obj.find(field);
  if (it == obj.end() || it->is_null()) throw SchemaError(line, field, "missing");
  if (!it->is_string()) throw SchemaError(line, field, "expected a string");
  std::string value = it->get<std::string>();
  if (text::trim(value).empty()) throw SchemaError(line, field, "empty");
  return value;
}

std::optional<std::string> optional_string(const json& obj, const char* field, std::size_t line) {
  const auto it = obj.find(field);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw SchemaError(line, field, "expected a string");
  return it->get<std::string>();
}

struct PendingStudy {
  StudyPair pair;
  Split split = Split::Train;
  bool has_reference = false;
  bool has_gender = false;
  bool has_age = false;
};

}  // namespace

DatasetManifest parse_manifest(std::istream& in) {
  DatasetManifest manifest;
  std::map<std::string, PendingStudy> pending;
  std::string line;
  std::size_t line_no = 0;

  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SchemaError(line_no, "<line>", std::string("not valid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw SchemaError(line_no, "<line>", "expected an object");

    const std::string study_id = required_string(obj, "study_id", line_no);
    const std::string qtype_text = required_string(obj, "qtype", line_no);
    const auto qtype = parse_question_type(qtype_text);
    if (!qtype) throw SchemaError(line_no, "qtype", "unknown question type '" + qtype_text + "'");
    const std::string question = required_string(obj, "question", line_no);
    const auto answer = optional_string(obj, "answer", line_no);
    const std::string main_image = required_string(obj, "main_image", line_no);
    const auto ref_image = optional_string(obj, "ref_image", line_no);
    const std::string split_text = required_string(obj, "split", line_no);
    const auto split = parse_split(split_text);
    if (!split) throw SchemaError(line_no, "split", "unknown split '" + split_text + "'");

    ImageAlias target = ImageAlias::Main;
    if (const auto alias_text = optional_string(obj, "image_alias", line_no)) {
      const auto parsed = parse_image_alias(*alias_text);
      if (!parsed) throw SchemaError(line_no, "image_alias", "expected 000A or 000B");
      target = *parsed;
    }

    std::optional<Gender> gender;
    if (const auto gender_text = optional_string(obj, "gender", line_no)) {
      gender = parse_gender(*gender_text);
      if (!gender) throw SchemaError(line_no, "gender", "expected F, M or U");
    }

    std::optional<int> age;
    if (const auto it = obj.find("age"); it != obj.end() && !it->is_null()) {
      if (!it->is_number_integer() || it->get<long long>() < 0 || it->get<long long>() > 150) {
        throw SchemaError(line_no, "age", "expected a non-negative integer");
      }
      age = it->get<int>();
    }

    auto [it, inserted] = pending.try_emplace(study_id);
    PendingStudy& study = it->second;
    if (inserted) {
      study.pair.study_id = study_id;
      study.pair.main = {ImageAlias::Main, main_image};
      study.split = *split;
    } else {
      if (study.split != *split) {
        throw OverlapError("study " + study_id + " appears in both " +
                           std::string(to_string(study.split)) + " and " +
                           std::string(to_string(*split)) + " (line " + std::to_string(line_no) + ")");
      }
      if (study.pair.main.source_uri != main_image) {
        throw SchemaError(line_no, "main_image", "conflicts with an earlier record of study " + study_id);
      }
    }
    if (ref_image) {
      if (study.has_reference && study.pair.reference.source_uri != *ref_image) {
        throw SchemaError(line_no, "ref_image", "conflicts with an earlier record of study " + study_id);
      }
      study.pair.reference = {ImageAlias::Reference, *ref_image};
      study.has_reference = true;
    }
    if (gender) {
      if (study.has_gender && study.pair.gender != *gender) {
        throw SchemaError(line_no, "gender", "conflicts with an earlier record of study " + study_id);
      }
      study.pair.gender = *gender;
      study.has_gender = true;
    }
    if (age) {
      if (study.has_age && study.pair.age != age) {
        throw SchemaError(line_no, "age", "conflicts with an earlier record of study " + study_id);
      }
      study.pair.age = age;
      study.has_age = true;
    }

    QuestionRecord record;
    record.study_id = study_id;
    record.qtype = *qtype;
    record.text = question;
    record.gold_answer = answer;
    if (*qtype == QuestionType::Difference) {
      if (!ref_image) throw SchemaError(line_no, "ref_image", "required for difference questions");
      if (obj.contains("image_alias")) {
        throw SchemaError(line_no, "image_alias", "not allowed on difference questions");
      }
      record.images = {{ImageAlias::Main, main_image}, {ImageAlias::Reference, *ref_image}};
    } else if (target == ImageAlias::Main) {
      record.images = {{ImageAlias::Main, main_image}};
    } else {
      if (!ref_image) throw SchemaError(line_no, "ref_image", "required when image_alias is 000B");
      record.images = {{ImageAlias::Reference, *ref_image}};
    }
    manifest.records.push_back(std::move(record));
  }

  for (auto& [id, study] : pending) {
    manifest.studies.emplace(id, std::move(study.pair));
    manifest.split_labels.emplace(id, study.split);
  }
  validate(manifest);
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  return parse_manifest(in);
}

void validate(const DatasetManifest& manifest) {
  for (const QuestionRecord& record : manifest.records) {
    validate(record);
    if (!manifest.studies.contains(record.study_id)) {
      throw InvalidArgument("record refers to unknown study " + record.study_id);
    }
  }
  for (const auto& [id, study] : manifest.studies) {
    validate(study);
    if (!manifest.split_labels.contains(id)) throw InvalidArgument("study " + id + " has no split");
  }
  if (manifest.split_labels.size() != manifest.studies.size()) {
    throw InvalidArgument("split labels name studies that do not exist");
  }
  // An image locator may not be shared by studies in different splits.
  std::map<std::string, std::pair<Split, std::string>> owner;
  for (const auto& [id, study] : manifest.studies) {
    const Split split = manifest.split_labels.at(id);
    for (const ImageRef* image : {&study.main, &study.reference}) {
      if (image->source_uri.empty()) continue;
      const auto [it, inserted] = owner.try_emplace(image->source_uri, split, id);
      if (!inserted && it->second.first != split) {
        throw OverlapError("image " + image->source_uri + " is used by study " + it->second.second +
                           " (" + std::string(to_string(it->second.first)) + ") and study " + id +
                           " (" + std::string(to_string(split)) + ")");
      }
    }
  }
}

void write_manifest(const DatasetManifest& manifest, std::ostream& out) {
  for (const QuestionRecord& record : manifest.records) {
    const StudyPair& study = manifest.study(record.study_id);
    json obj;
    obj["study_id"] = record.study_id;
    obj["qtype"] = std::string(to_string(record.qtype));
    obj["question"] = record.text;
    if (record.gold_answer) obj["answer"] = *record.gold_answer;
    obj["main_image"] = study.main.source_uri;
    if (!study.reference.source_uri.empty()) obj["ref_image"] = study.reference.source_uri;
    if (record.qtype != QuestionType::Difference) {
      obj["image_alias"] = std::string(to_string(record.images.front().alias));
    }
    if (study.gender != Gender::Unknown) obj["gender"] = std::string(to_string(study.gender));
    if (study.age) obj["age"] = *study.age;
    obj["split"] = std::string(to_string(manifest.split_labels.at(record.study_id)));
    out << obj.dump() << '\n';
  }
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  write_manifest(manifest, out);
}

TypeStats compute_stats(const DatasetManifest& manifest) {
  TypeStats stats;
  std::map<QuestionType, std::set<std::string>> answers;
  std::set<std::string> all_answers;
  std::set<std::string> single_image_answers;
  for (const QuestionType t : kAllQuestionTypes) stats.per_type[t] = {};

  for (const QuestionRecord& record : manifest.records) {
    ++stats.per_type[record.qtype].qa_pairs;
    ++stats.all.qa_pairs;
    if (record.qtype != QuestionType::Difference) ++stats.all_excluding_difference.qa_pairs;
    if (!record.gold_answer) continue;
    std::string normalized = normalize_answer(*record.gold_answer);
    answers[record.qtype].insert(normalized);
    if (record.qtype != QuestionType::Difference) single_image_answers.insert(normalized);
    all_answers.insert(std::move(normalized));
  }
  for (const auto& [type, distinct] : answers) stats.per_type[type].distinct_answers = distinct.size();
  stats.all.distinct_answers = all_answers.size();
  stats.all_excluding_difference.distinct_answers = single_image_answers.size();
  return stats;
}

std::string_view to_string(AgeBucket bucket) noexcept {
  switch (bucket) {
    case AgeBucket::Under55: return "Age<55";
    case AgeBucket::From55To70: return "55<=Age<70";
    case AgeBucket::From70: return "70<=Age";
    case AgeBucket::Unknown: return "AgeUnknown";
  }
  return "AgeUnknown";
}

AgeBucket age_bucket(std::optional<int> age) noexcept {
  if (!age) return AgeBucket::Unknown;
  if (*age < 55) return AgeBucket::Under55;
  if (*age < 70) return AgeBucket::From55To70;
  return AgeBucket::From70;
}

Strata stratify(const DatasetManifest& manifest, const std::vector<std::string>& study_ids) {
  Strata strata;
  for (const Gender g : {Gender::Female, Gender::Male, Gender::Unknown}) strata.gender[g] = {};
  for (const AgeBucket b : {AgeBucket::Under55, AgeBucket::From55To70, AgeBucket::From70, AgeBucket::Unknown}) {
    strata.age[b] = {};
  }
  std::set<std::string> unique(study_ids.begin(), study_ids.end());
  for (const std::string& id : unique) {
    const StudyPair& study = manifest.study(id);
    strata.gender[study.gender].push_back(id);
    strata.age[age_bucket(study.age)].push_back(id);
  }
  return strata;
}

Strata stratify(const DatasetManifest& manifest) {
  std::vector<std::string> ids;
  ids.reserve(manifest.studies.size());
  for (const auto& [id, study] : manifest.studies) ids.push_back(id);
  return stratify(manifest, ids);
}

}  // namespace medres
