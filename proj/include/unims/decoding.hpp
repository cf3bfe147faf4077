#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "unims/model.hpp"

namespace unims {

// GNMT length penalty: ((5 + n) / 6)^alpha.
inline double length_penalty(int n, double alpha) {
    if (n < 1) throw InputError("length_penalty: length must be >= 1");
    return std::pow((5.0 + n) / 6.0, alpha);
}

struct Beam {
    std::vector<int> tokens;  // emitted tokens; ends with <eos> iff finished early
    double logprob = 0.0;
    bool finished = false;

    double normalized(double alpha) const {
        return logprob / length_penalty(std::max<int>(1, static_cast<int>(tokens.size())), alpha);
    }
};

inline std::vector<double> next_token_logprobs(Model& m, const EncoderOutput& enc,
                                               const std::vector<int>& prefix,
                                               Ablation ablation = Ablation::kNone) {
    std::vector<int> input;
    input.reserve(prefix.size() + 1);
    input.push_back(kBosId);
    input.insert(input.end(), prefix.begin(), prefix.end());
    Tensor hidden = decode_hidden(m, enc, input, ablation);
    Tensor last = slice_rows(hidden, hidden.rows() - 1, hidden.rows());
    Tensor logits = matmul(last, transpose(m.tok_embed));
    const int v = logits.cols();
    std::vector<double> lp(static_cast<size_t>(v));
    double mx = logits.data()[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, logits.data()[j]);
    double denom = 0.0;
    for (int j = 0; j < v; ++j) denom += std::exp(logits.data()[j] - mx);
    const double lse = std::log(denom) + mx;
    for (int j = 0; j < v; ++j) lp[static_cast<size_t>(j)] = logits.data()[j] - lse;
    return lp;
}

inline bool lex_less(const std::vector<int>& a, const std::vector<int>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

// Standard beam search with deterministic (score, then lexicographic token
// sequence) tie-breaking. A beam that emits <eos> retires; everything still
// active at max_len retires without it. The winner is the finished beam with
// the best length-penalized score.
inline std::vector<int> beam_search(Model& m, const EncoderOutput& enc, int beam_size, double alpha,
                                    int max_len, Ablation ablation = Ablation::kNone) {
    if (max_len < 1) throw InputError("beam_search: max_len must be >= 1");
    if (beam_size < 1) throw InputError("beam_search: beam_size must be >= 1");
    std::vector<Beam> active{Beam{}};
    std::vector<Beam> finished;
    for (int step = 0; step < max_len && !active.empty(); ++step) {
        std::vector<Beam> candidates;
        candidates.reserve(active.size() * static_cast<size_t>(m.cfg.vocab_size));
        for (const Beam& b : active) {
            std::vector<double> lp = next_token_logprobs(m, enc, b.tokens, ablation);
            for (int tok = 0; tok < m.cfg.vocab_size; ++tok) {
                Beam nb = b;
                nb.tokens.push_back(tok);
                nb.logprob += lp[static_cast<size_t>(tok)];
                candidates.push_back(std::move(nb));
            }
        }
        std::sort(candidates.begin(), candidates.end(), [](const Beam& a, const Beam& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            return lex_less(a.tokens, b.tokens);
        });
        if (static_cast<int>(candidates.size()) > beam_size) candidates.resize(static_cast<size_t>(beam_size));
        active.clear();
        for (Beam& c : candidates) {
            if (c.tokens.back() == kEosId || static_cast<int>(c.tokens.size()) == max_len) {
                c.finished = true;
                finished.push_back(std::move(c));
            } else {
                active.push_back(std::move(c));
            }
        }
    }
    std::sort(finished.begin(), finished.end(), [alpha](const Beam& a, const Beam& b) {
        double na = a.normalized(alpha), nb = b.normalized(alpha);
        if (na != nb) return na > nb;
        return lex_less(a.tokens, b.tokens);
    });
    return finished.front().tokens;
}

inline std::vector<int> greedy_decode(Model& m, const EncoderOutput& enc, int max_len,
                                      Ablation ablation = Ablation::kNone) {
    if (max_len < 1) throw InputError("greedy_decode: max_len must be >= 1");
    std::vector<int> tokens;
    for (int step = 0; step < max_len; ++step) {
        std::vector<double> lp = next_token_logprobs(m, enc, tokens, ablation);
        int best = 0;
        for (int tok = 1; tok < static_cast<int>(lp.size()); ++tok) {
            if (lp[static_cast<size_t>(tok)] > lp[static_cast<size_t>(best)]) best = tok;
        }
        tokens.push_back(best);
        if (best == kEosId) break;
    }
    return tokens;
}

// Drops reserved markers for surface output.
inline std::vector<int> strip_special(const std::vector<int>& tokens) {
    std::vector<int> out;
    for (int t : tokens) {
        if (t >= kNumReserved) out.push_back(t);
    }
    return out;
}

}  // namespace unims
