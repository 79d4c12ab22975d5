#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "medres/dataset.hpp"
#include "medres/experts.hpp"
#include "medres/gateway.hpp"

namespace medres::synth {

inline constexpr std::string_view kAbnormalityQuestion = "what abnormalities are seen in this image?";
inline constexpr std::string_view kDifferenceQuestion = "what has changed compared to the reference image?";

// "the main image has an additional finding of X than the reference image."
// and/or "the main image is missing the finding of Y than the reference
// image."; a no-change sentence when the label sets agree.
std::string compose_difference_answer(const AbnormalityLabelSet& main, const AbnormalityLabelSet& reference);

struct FixtureOptions {
  std::size_t studies = 20;
  std::size_t train = 0;
  std::size_t val = 0;
  std::uint64_t seed = 7;
  // When non-empty, study i gets ages[i % ages.size()]; otherwise ages are
  // drawn from the seed, with a few left unknown.
  std::vector<std::optional<int>> ages;
  std::string id_prefix = "s";
};

// Studies with abnormality, presence, view, location, level and type
// questions for both images and one difference question each. The first
// `train` studies go to train, the next `val` to val, the rest to test.
DatasetManifest make_fixture(const FixtureOptions& options);

// Ages for `total` studies in the proportions 29/34/37 (per 100) across
// the three age buckets, including the boundary ages 54, 55, 69 and 70.
std::vector<std::optional<int>> bias_fixture_ages(std::size_t total = 100);

// A learner that asks both abnormality questions and composes the
// difference from the two answers. Reads the conversation log back out of
// the prompt, so it is stateless and safe to share.
class HeuristicLearner final : public ChatBackend {
 public:
  explicit HeuristicLearner(std::string id = "heuristic") : id_(std::move(id)) {}
  std::string id() const override { return id_; }

 protected:
  ChatResponse do_complete(const ChatRequest& request) override;

 private:
  std::string id_;
};

// What a well-behaved learner says for one difference question: the two
// abnormality questions, then FINAL with `final_answer`.
std::vector<std::string> identity_script(std::string_view final_answer);

std::string format_ask(std::string_view question, QuestionType type, ImageAlias alias);
std::string format_final(std::string_view answer);

}  // namespace medres::synth
