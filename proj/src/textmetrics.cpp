#include "mscqg/textmetrics.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

namespace mscqg {

namespace {

std::map<std::vector<TokenId>, std::size_t> ngram_counts(std::span<const TokenId> s, std::size_t n) {
  std::map<std::vector<TokenId>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[std::vector<TokenId>(s.begin() + i, s.begin() + i + n)];
  return counts;
}

}  // namespace

double bleu(std::span<const TokenId> hypothesis, std::span<const TokenId> reference, int max_n) {
  if (reference.empty()) throw std::invalid_argument("bleu: reference is empty");
  if (max_n < 1 || max_n > 4) throw std::invalid_argument("bleu: max_n must be in 1..4");
  if (hypothesis.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto nn = static_cast<std::size_t>(n);
    if (hypothesis.size() < nn) return 0.0;
    const auto hyp = ngram_counts(hypothesis, nn);
    const auto ref = ngram_counts(reference, nn);
    std::size_t clipped = 0;
    for (const auto& [gram, c] : hyp) {
      auto it = ref.find(gram);
      if (it != ref.end()) clipped += std::min(c, it->second);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(hypothesis.size() - nn + 1));
  }
  const double h = static_cast<double>(hypothesis.size()), r = static_cast<double>(reference.size());
  const double bp = h < r ? std::exp(1.0 - r / h) : 1.0;
  return bp * std::exp(log_sum / max_n);
}

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const TokenId> hypothesis, std::span<const TokenId> reference) {
  if (reference.empty()) throw std::invalid_argument("rouge_l: reference is empty");
  const auto l = static_cast<double>(lcs_length(hypothesis, reference));
  if (l == 0.0) return 0.0;
  const double p = l / static_cast<double>(hypothesis.size());
  const double r = l / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

}  // namespace mscqg
