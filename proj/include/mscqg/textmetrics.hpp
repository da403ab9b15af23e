// Sentence-level similarity against a single reference question.
#pragma once

#include "mscqg/corpus.hpp"

#include <span>

namespace mscqg {

/// Unsmoothed BLEU: geometric mean of clipped n-gram precisions 1..max_n
/// times the brevity penalty. Zero when any precision is zero.
double bleu(std::span<const TokenId> hypothesis, std::span<const TokenId> reference, int max_n);

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b);
/// F-measure of LCS precision and recall.
double rouge_l(std::span<const TokenId> hypothesis, std::span<const TokenId> reference);

}  // namespace mscqg
