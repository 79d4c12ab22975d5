#include "medres/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "medres/core.hpp"
#include "medres/error.hpp"
#include "medres/text.hpp"

namespace medres::metrics {

TokenSeq::TokenSeq(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (const std::string& t : tokens_) {
    if (t.empty()) throw InvalidArgument("token sequence contains an empty token");
    for (const char c : t) {
      const auto u = static_cast<unsigned char>(c);
      if (std::isspace(u) || (u < 0x80 && std::isupper(u))) {
        throw InvalidArgument("token '" + t + "' is not a lowercase word");
      }
    }
  }
}

TokenSeq::TokenSeq(std::initializer_list<std::string_view> tokens)
    : TokenSeq(std::vector<std::string>(tokens.begin(), tokens.end())) {}

TokenSeq tokenize(std::string_view s) { return TokenSeq(text::split_words(text::fold_words(s))); }

namespace {

using NgramCounts = std::unordered_map<std::string, int>;

NgramCounts count_ngrams(const TokenSeq& seq, int n) {
  NgramCounts counts;
  const auto& toks = seq.tokens();
  if (toks.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (int k = 1; k < n; ++k) {
      key += ' ';
      key += toks[i + k];
    }
    ++counts[key];
  }
  return counts;
}

std::size_t ngram_total(const TokenSeq& seq, int n) {
  return seq.size() >= static_cast<std::size_t>(n) ? seq.size() - n + 1 : 0;
}

std::size_t clipped_matches(const NgramCounts& cand, const NgramCounts& ref) {
  std::size_t m = 0;
  for (const auto& [gram, count] : cand) {
    const auto it = ref.find(gram);
    if (it != ref.end()) m += static_cast<std::size_t>(std::min(count, it->second));
  }
  return m;
}

double brevity_penalty(double cand_len, double ref_len) {
  if (cand_len <= 0.0) return 0.0;
  return std::min(1.0, std::exp(1.0 - ref_len / cand_len));
}

void check_order(int max_n) {
  if (max_n < 1 || max_n > 4) throw InvalidArgument("BLEU order must lie in 1..4");
}

}  // namespace

double bleu(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references, int max_n) {
  check_order(max_n);
  if (candidates.size() != references.size()) {
    throw LengthMismatch("BLEU needs one reference per candidate");
  }
  if (candidates.empty()) throw EmptyCorpus("BLEU over an empty corpus");

  double cand_len = 0.0;
  double ref_len = 0.0;
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (int n = 1; n <= max_n; ++n) {
      matches[n - 1] += clipped_matches(count_ngrams(candidates[i], n), count_ngrams(references[i], n));
      totals[n - 1] += ngram_total(candidates[i], n);
    }
  }
  double log_sum = 0.0;
  for (int n = 0; n < max_n; ++n) {
    if (totals[n] == 0 || matches[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
  }
  return brevity_penalty(cand_len, ref_len) * std::exp(log_sum / max_n);
}

double sentence_bleu(const TokenSeq& candidate, const TokenSeq& reference, int max_n, double epsilon) {
  check_order(max_n);
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const std::size_t total = ngram_total(candidate, n);
    const std::size_t m = clipped_matches(count_ngrams(candidate, n), count_ngrams(reference, n));
    const double p = (total == 0 || m == 0) ? epsilon : static_cast<double>(m) / static_cast<double>(total);
    log_sum += std::log(p);
  }
  return brevity_penalty(static_cast<double>(candidate.size()), static_cast<double>(reference.size())) *
         std::exp(log_sum / max_n);
}

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const TokenSeq& candidate, const TokenSeq& reference, double beta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const std::size_t l = lcs_length(candidate, reference);
  if (l == 0) return 0.0;
  const double p = static_cast<double>(l) / static_cast<double>(candidate.size());
  const double r = static_cast<double>(l) / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

namespace {

// Depth-first search over maximum exact-match alignments, branching only
// where a word repeats. Chunk count never decreases along a path, so any
// partial alignment already at the best count is cut.
class ChunkMinimizer {
 public:
  static constexpr std::size_t kNodeBudget = 200'000;

  ChunkMinimizer(const TokenSeq& cand, const TokenSeq& ref) : cand_(cand), used_(ref.size(), false) {
    std::map<std::string, std::size_t> cand_count;
    for (const std::string& w : cand.tokens()) ++cand_count[w];
    for (std::size_t j = 0; j < ref.size(); ++j) ref_positions_[ref[j]].push_back(j);
    for (const auto& [w, cc] : cand_count) {
      const auto it = ref_positions_.find(w);
      const std::size_t cr = it == ref_positions_.end() ? 0 : it->second.size();
      const std::size_t k = std::min(cc, cr);
      matches_ += k;
      skips_left_[w] = cc - k;
    }
  }

  MeteorAlignment solve() {
    if (matches_ > 0) search(0, kNone, 0);
    return {matches_, matches_ == 0 ? 0 : best_};
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  void search(std::size_t i, std::size_t prev_ref, std::size_t chunks) {
    if (chunks >= best_) return;
    if (i == cand_.size()) {
      best_ = chunks;
      return;
    }
    if (++nodes_ > kNodeBudget && best_ != kNone) return;

    const std::string& w = cand_[i];
    if (const auto it = ref_positions_.find(w); it != ref_positions_.end()) {
      const std::vector<std::size_t>& positions = it->second;
      // Try continuing the current chunk before opening a new one.
      if (prev_ref != kNone && prev_ref + 1 < used_.size() && !used_[prev_ref + 1] &&
          std::binary_search(positions.begin(), positions.end(), prev_ref + 1)) {
        used_[prev_ref + 1] = true;
        search(i + 1, prev_ref + 1, chunks);
        used_[prev_ref + 1] = false;
      }
      for (const std::size_t j : positions) {
        if (used_[j] || (prev_ref != kNone && j == prev_ref + 1)) continue;
        used_[j] = true;
        search(i + 1, j, chunks + 1);
        used_[j] = false;
      }
    }
    std::size_t& skips = skips_left_[w];
    if (skips > 0) {
      --skips;
      search(i + 1, kNone, chunks);
      ++skips;
    }
  }

  const TokenSeq& cand_;
  std::vector<bool> used_;
  std::map<std::string, std::vector<std::size_t>> ref_positions_;
  std::map<std::string, std::size_t> skips_left_;
  std::size_t matches_ = 0;
  std::size_t best_ = kNone;
  std::size_t nodes_ = 0;
};

}  // namespace

MeteorAlignment meteor_align(const TokenSeq& candidate, const TokenSeq& reference) {
  return ChunkMinimizer(candidate, reference).solve();
}

double meteor(const TokenSeq& candidate, const TokenSeq& reference, const MeteorParams& params) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const MeteorAlignment a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double fmean = p * r / (params.alpha * p + (1.0 - params.alpha) * r);
  const double penalty = params.gamma * std::pow(static_cast<double>(a.chunks) / m, params.beta);
  return fmean * (1.0 - penalty);
}

namespace {

struct WeightedVector {
  std::unordered_map<std::string, double> weights;
  double norm_sq = 0.0;
};

}  // namespace

std::vector<double> cider_scores(std::span<const TokenSeq> candidates,
                                 std::span<const std::vector<TokenSeq>> reference_sets, const CiderParams& params) {
  if (candidates.size() != reference_sets.size()) {
    throw LengthMismatch("CIDEr needs one reference set per candidate");
  }
  if (candidates.empty()) throw EmptyCorpus("CIDEr over an empty corpus");
  if (params.max_n < 1) throw InvalidArgument("CIDEr order must be positive");
  const int max_n = params.max_n;

  // Document frequency: number of reference sets that contain the n-gram.
  std::vector<std::unordered_map<std::string, double>> df(max_n);
  for (const auto& refs : reference_sets) {
    for (int n = 1; n <= max_n; ++n) {
      std::unordered_map<std::string, bool> seen;
      for (const TokenSeq& r : refs) {
        for (const auto& [gram, count] : count_ngrams(r, n)) seen[gram] = true;
      }
      for (const auto& [gram, flag] : seen) df[n - 1][gram] += 1.0;
    }
  }
  const double log_docs = std::log(static_cast<double>(reference_sets.size()));

  const auto to_vector = [&](const TokenSeq& seq, int n) {
    WeightedVector v;
    for (const auto& [gram, count] : count_ngrams(seq, n)) {
      const auto it = df[n - 1].find(gram);
      const double d = it == df[n - 1].end() ? 1.0 : std::max(1.0, it->second);
      const double w = static_cast<double>(count) * (log_docs - std::log(d));
      v.weights.emplace(gram, w);
      v.norm_sq += w * w;
    }
    return v;
  };

  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& refs = reference_sets[i];
    if (refs.empty()) throw InvalidArgument("CIDEr reference set " + std::to_string(i) + " is empty");
    std::vector<WeightedVector> cand_vecs;
    for (int n = 1; n <= max_n; ++n) cand_vecs.push_back(to_vector(candidates[i], n));

    double sum_over_refs = 0.0;
    for (const TokenSeq& ref : refs) {
      const double delta = static_cast<double>(candidates[i].size()) - static_cast<double>(ref.size());
      const double penalty = params.variant == CiderVariant::CiderD
                                 ? std::exp(-(delta * delta) / (2.0 * params.sigma * params.sigma))
                                 : 1.0;
      double sum_over_orders = 0.0;
      for (int n = 1; n <= max_n; ++n) {
        const WeightedVector ref_vec = to_vector(ref, n);
        const WeightedVector& cand_vec = cand_vecs[n - 1];
        double dot = 0.0;
        for (const auto& [gram, cw] : cand_vec.weights) {
          const auto it = ref_vec.weights.find(gram);
          if (it == ref_vec.weights.end()) continue;
          const double rw = it->second;
          dot += (params.variant == CiderVariant::CiderD ? std::min(cw, rw) : cw) * rw;
        }
        double sim = 0.0;
        if (cand_vec.norm_sq != 0.0 && ref_vec.norm_sq != 0.0) {
          sim = dot / std::sqrt(cand_vec.norm_sq * ref_vec.norm_sq);
        }
        sum_over_orders += sim * penalty;
      }
      sum_over_refs += sum_over_orders;
    }
    scores.push_back(sum_over_refs / static_cast<double>(refs.size()) * 10.0 / static_cast<double>(max_n));
  }
  return scores;
}

double cider_d(std::span<const TokenSeq> candidates, std::span<const std::vector<TokenSeq>> reference_sets,
               const CiderParams& params) {
  const std::vector<double> scores = cider_scores(candidates, reference_sets, params);
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

bool is_closed_answer(std::string_view gold) {
  const std::string n = normalize_answer(gold);
  return n == "yes" || n == "no";
}

AccuracyReport accuracy(std::span<const std::string> predictions, std::span<const std::string> golds,
                        const std::vector<bool>& closed_mask) {
  if (predictions.size() != golds.size() || golds.size() != closed_mask.size()) {
    throw LengthMismatch("accuracy needs equally long predictions, golds and closed mask");
  }
  std::size_t open_ok = 0, close_ok = 0;
  AccuracyReport report;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const bool ok = normalize_answer(predictions[i]) == normalize_answer(golds[i]);
    if (closed_mask[i]) {
      ++report.n_close;
      close_ok += ok ? 1 : 0;
    } else {
      ++report.n_open;
      open_ok += ok ? 1 : 0;
    }
  }
  const auto rate = [](std::size_t ok, std::size_t n) { return n == 0 ? 0.0 : static_cast<double>(ok) / n; };
  report.open = rate(open_ok, report.n_open);
  report.close = rate(close_ok, report.n_close);
  report.all = rate(open_ok + close_ok, report.n_open + report.n_close);
  return report;
}

MetricReport score_corpus(std::span<const std::string> predictions, std::span<const std::string> references,
                          CiderVariant variant) {
  if (predictions.size() != references.size()) {
    throw LengthMismatch("predictions and references differ in length (" + std::to_string(predictions.size()) +
                         " vs " + std::to_string(references.size()) + ")");
  }
  if (predictions.empty()) throw EmptyCorpus("nothing to score");

  std::vector<TokenSeq> cands, refs;
  std::vector<std::vector<TokenSeq>> ref_sets;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    cands.push_back(tokenize(predictions[i]));
    refs.push_back(tokenize(references[i]));
    ref_sets.push_back({refs.back()});
  }

  MetricReport report;
  report.n = cands.size();
  report.cider_variant = variant;
  for (int n = 1; n <= 4; ++n) report.bleu[n - 1] = bleu(cands, refs, n);
  double meteor_sum = 0.0, rouge_sum = 0.0;
  std::array<double, 4> sbleu_sum{};
  for (std::size_t i = 0; i < cands.size(); ++i) {
    meteor_sum += meteor(cands[i], refs[i]);
    rouge_sum += rouge_l(cands[i], refs[i]);
    for (int n = 1; n <= 4; ++n) sbleu_sum[n - 1] += sentence_bleu(cands[i], refs[i], n);
  }
  const double count = static_cast<double>(cands.size());
  report.meteor = meteor_sum / count;
  report.rouge_l = rouge_sum / count;
  for (int n = 0; n < 4; ++n) report.sentence_bleu[n] = sbleu_sum[n] / count;
  CiderParams params;
  params.variant = variant;
  report.cider_d = cider_d(cands, ref_sets, params);
  return report;
}

std::string to_json(const MetricReport& report, int indent) {
  nlohmann::ordered_json obj;
  obj["n"] = report.n;
  for (int n = 0; n < 4; ++n) obj["bleu_" + std::to_string(n + 1)] = report.bleu[n];
  obj["meteor"] = report.meteor;
  obj["rouge_l"] = report.rouge_l;
  obj["cider_d"] = report.cider_d;
  obj["cider_variant"] = report.cider_variant == CiderVariant::CiderD ? "cider-d" : "cider";
  for (int n = 0; n < 4; ++n) obj["sentence_bleu_" + std::to_string(n + 1)] = report.sentence_bleu[n];
  return obj.dump(indent);
}

MetricReport metric_report_from_json(std::string_view json_text) {
  try {
    const auto obj = nlohmann::json::parse(json_text);
    MetricReport r;
    r.n = obj.at("n").get<std::size_t>();
    for (int n = 0; n < 4; ++n) {
      r.bleu[n] = obj.at("bleu_" + std::to_string(n + 1)).get<double>();
      r.sentence_bleu[n] = obj.at("sentence_bleu_" + std::to_string(n + 1)).get<double>();
    }
    r.meteor = obj.at("meteor").get<double>();
    r.rouge_l = obj.at("rouge_l").get<double>();
    r.cider_d = obj.at("cider_d").get<double>();
    r.cider_variant = obj.at("cider_variant").get<std::string>() == "cider" ? CiderVariant::Plain : CiderVariant::CiderD;
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("not a metric report: ") + e.what());
  }
}

}  // namespace medres::metrics
