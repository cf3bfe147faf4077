#pragma once

#include <algorithm>
#include <vector>

#include "unims/rouge.hpp"

namespace unims {

struct OracleLabels {
    std::vector<int> selected;       // greedy selection order
    std::vector<double> trace;       // achieved ROUGE-L F1 after each step, strictly increasing
    std::vector<int> labels;         // 0/1 per sentence
    bool degenerate = false;         // no sentence improved over the empty selection
};

// Greedy oracle: repeatedly add the sentence that maximizes ROUGE-L F1 of
// the selection (concatenated in document order) against the reference;
// ties go to the lowest index, and the loop stops at the first
// non-improving step.
inline OracleLabels greedy_oracle(const std::vector<TokenSeq>& sentences, const TokenSeq& reference) {
    OracleLabels out;
    out.labels.assign(sentences.size(), 0);
    if (sentences.empty()) {
        out.degenerate = true;
        return out;
    }
    std::vector<char> used(sentences.size(), 0);
    double best_f1 = 0.0;
    for (;;) {
        int best_idx = -1;
        double step_best = best_f1;
        for (size_t i = 0; i < sentences.size(); ++i) {
            if (used[i]) continue;
            TokenSeq candidate;
            for (size_t j = 0; j < sentences.size(); ++j) {
                if (used[j] || j == i) {
                    candidate.insert(candidate.end(), sentences[j].begin(), sentences[j].end());
                }
            }
            double f1 = rouge_l(candidate, reference).f1;
            if (f1 > step_best) {
                step_best = f1;
                best_idx = static_cast<int>(i);
            }
        }
        if (best_idx < 0) break;
        used[static_cast<size_t>(best_idx)] = 1;
        out.selected.push_back(best_idx);
        out.labels[static_cast<size_t>(best_idx)] = 1;
        out.trace.push_back(step_best);
        best_f1 = step_best;
    }
    out.degenerate = out.selected.empty();
    return out;
}

}  // namespace unims
