#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "unims/errors.hpp"

namespace unims {

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline RougeScore make_rouge(double overlap, double n_cand, double n_ref) {
    RougeScore s;
    s.precision = n_cand > 0 ? overlap / n_cand : 0.0;
    s.recall = n_ref > 0 ? overlap / n_ref : 0.0;
    s.f1 = (s.precision + s.recall) > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

using TokenSeq = std::vector<std::string>;

// Clipped n-gram overlap, n in {1, 2}.
inline RougeScore rouge_n(const TokenSeq& candidate, const TokenSeq& reference, int n) {
    if (n != 1 && n != 2) throw InputError("rouge_n: n must be 1 or 2");
    auto ngram_counts = [n](const TokenSeq& tokens) {
        std::map<std::vector<std::string>, int> counts;
        if (static_cast<int>(tokens.size()) >= n) {
            for (size_t i = 0; i + n <= tokens.size(); ++i) {
                ++counts[std::vector<std::string>(tokens.begin() + static_cast<long>(i),
                                                  tokens.begin() + static_cast<long>(i + n))];
            }
        }
        return counts;
    };
    auto cand = ngram_counts(candidate), ref = ngram_counts(reference);
    double overlap = 0.0, n_cand = 0.0, n_ref = 0.0;
    for (const auto& [g, c] : cand) n_cand += c;
    for (const auto& [g, c] : ref) n_ref += c;
    for (const auto& [g, c] : cand) {
        auto it = ref.find(g);
        if (it != ref.end()) overlap += std::min(c, it->second);
    }
    return make_rouge(overlap, n_cand, n_ref);
}

inline int lcs_length(const TokenSeq& a, const TokenSeq& b) {
    const size_t m = a.size(), n = b.size();
    if (m == 0 || n == 0) return 0;
    std::vector<int> prev(n + 1, 0), cur(n + 1, 0);
    for (size_t i = 1; i <= m; ++i) {
        for (size_t j = 1; j <= n; ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[n];
}

inline RougeScore rouge_l(const TokenSeq& candidate, const TokenSeq& reference) {
    double lcs = lcs_length(candidate, reference);
    return make_rouge(lcs, static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
}

}  // namespace unims
