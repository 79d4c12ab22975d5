#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace medres::metrics {

// Lowercase tokens with no empty entries and no whitespace. Built by
// tokenize(); the explicit constructor checks the invariant.
class TokenSeq {
 public:
  TokenSeq() = default;
  explicit TokenSeq(std::vector<std::string> tokens);
  TokenSeq(std::initializer_list<std::string_view> tokens);

  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  bool empty() const noexcept { return tokens_.empty(); }
  const std::string& operator[](std::size_t i) const { return tokens_[i]; }

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;

 private:
  std::vector<std::string> tokens_;
};

// Lowercase, punctuation to spaces, split on whitespace.
TokenSeq tokenize(std::string_view text);

// Corpus BLEU with one reference per candidate: clipped n-gram counts summed
// over the corpus, geometric mean of orders 1..max_n, times
// min(1, exp(1 - r/c)). Unsmoothed: any zero precision gives 0.
// Throws EmptyCorpus, LengthMismatch, or InvalidArgument for max_n outside 1..4.
double bleu(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references, int max_n);

// Single-pair BLEU for diagnostics; zero precisions are replaced by epsilon.
double sentence_bleu(const TokenSeq& candidate, const TokenSeq& reference, int max_n, double epsilon = 1e-9);

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b);

// F-measure over the longest common subsequence, recall weighted by beta.
double rouge_l(const TokenSeq& candidate, const TokenSeq& reference, double beta = 1.2);

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
};

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

// Exact-match unigram alignment with the most matches, and among those the
// fewest chunks. The search is exhaustive up to a node budget; past it the
// best alignment found so far is returned (only reachable with many
// repeated words).
MeteorAlignment meteor_align(const TokenSeq& candidate, const TokenSeq& reference);

// Exact-match METEOR (no stemming or synonyms).
double meteor(const TokenSeq& candidate, const TokenSeq& reference, const MeteorParams& params = {});

enum class CiderVariant { CiderD, Plain };

struct CiderParams {
  CiderVariant variant = CiderVariant::CiderD;
  double sigma = 6.0;
  int max_n = 4;
};

// Per-candidate scores. Document frequencies come from the reference sets
// themselves (one document per set). CIDEr-D clips candidate weights to the
// reference weights and applies a Gaussian length penalty; both scale the
// mean cosine by 10.
std::vector<double> cider_scores(std::span<const TokenSeq> candidates,
                                 std::span<const std::vector<TokenSeq>> reference_sets, const CiderParams& params = {});

// Corpus mean of cider_scores.
double cider_d(std::span<const TokenSeq> candidates, std::span<const std::vector<TokenSeq>> reference_sets,
               const CiderParams& params = {});

struct AccuracyReport {
  double open = 0.0;
  double close = 0.0;
  double all = 0.0;
  std::size_t n_open = 0;
  std::size_t n_close = 0;
};

// Exact match after normalize_answer. A bucket with no questions reports 0.
AccuracyReport accuracy(std::span<const std::string> predictions, std::span<const std::string> golds,
                        const std::vector<bool>& closed_mask);

// Yes/no gold answers mark closed questions.
bool is_closed_answer(std::string_view gold);

struct MetricReport {
  std::array<double, 4> bleu{};
  double meteor = 0.0;
  double rouge_l = 0.0;
  double cider_d = 0.0;
  std::size_t n = 0;
  // Mean of smoothed sentence-level BLEU-1..4, a secondary column.
  std::array<double, 4> sentence_bleu{};
  CiderVariant cider_variant = CiderVariant::CiderD;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

// Scores line-aligned predictions against single references.
MetricReport score_corpus(std::span<const std::string> predictions, std::span<const std::string> references,
                          CiderVariant variant = CiderVariant::CiderD);

// Field names are fixed in docs/metrics.md.
std::string to_json(const MetricReport& report, int indent = -1);
MetricReport metric_report_from_json(std::string_view json_text);

}  // namespace medres::metrics
