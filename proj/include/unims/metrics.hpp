#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "unims/data.hpp"
#include "unims/model.hpp"
#include "unims/rouge.hpp"
#include "unims/teacher.hpp"

namespace unims {

// Fraction of the selected images that are annotated as reference output.
inline double image_precision(const std::vector<int>& selected, const std::vector<int>& annotated) {
    if (selected.empty()) throw InputError("image_precision: empty selection");
    std::set<int> ann(annotated.begin(), annotated.end());
    int hit = 0;
    for (int s : selected) hit += ann.count(s) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(selected.size());
}

// Maximum teacher score of any selected image against the generated summary.
// A proxy metric: the teacher stands in for the paper's retrieval model, so
// values are only comparable within this artifact.
inline double msim_proxy(const std::vector<int>& selected, const EncodedExample& ex,
                         const std::vector<int>& generated_ids,
                         const std::vector<std::string>& generated_tokens, const Teacher& teacher) {
    if (selected.empty()) throw InputError("msim_proxy: empty selection");
    std::vector<double> scores = teacher.score(ex, generated_ids, generated_tokens);
    double best = -1e300;
    for (int s : selected) {
        if (s < 0 || s >= static_cast<int>(scores.size())) {
            throw InputError("msim_proxy: selected index " + std::to_string(s) + " out of range");
        }
        best = std::max(best, scores[static_cast<size_t>(s)]);
    }
    return best;
}

struct NovelNgramStats {
    int count = 0;          // distinct summary n-grams absent from the source
    double novel_recall = 0.0;  // coverage of the reference's novel n-grams
};

inline std::set<std::vector<std::string>> ngram_set(const TokenSeq& tokens, int n) {
    std::set<std::vector<std::string>> out;
    if (static_cast<int>(tokens.size()) >= n) {
        for (size_t i = 0; i + static_cast<size_t>(n) <= tokens.size(); ++i) {
            out.insert(std::vector<std::string>(tokens.begin() + static_cast<long>(i),
                                                tokens.begin() + static_cast<long>(i) + n));
        }
    }
    return out;
}

inline NovelNgramStats novel_ngrams(const TokenSeq& summary, const TokenSeq& source,
                                    const TokenSeq& reference, int n) {
    if (n < 1 || n > 4) throw InputError("novel_ngrams: n must be in 1..4");
    auto src = ngram_set(source, n);
    auto novel_of = [&src, n](const TokenSeq& text) {
        std::set<std::vector<std::string>> out;
        for (const auto& g : ngram_set(text, n)) {
            if (!src.count(g)) out.insert(g);
        }
        return out;
    };
    auto novel_sum = novel_of(summary);
    auto novel_ref = novel_of(reference);
    NovelNgramStats stats;
    stats.count = static_cast<int>(novel_sum.size());
    if (!novel_ref.empty()) {
        int hit = 0;
        for (const auto& g : novel_sum) hit += novel_ref.count(g) ? 1 : 0;
        stats.novel_recall = static_cast<double>(hit) / static_cast<double>(novel_ref.size());
    }
    return stats;
}

// --------------------------------------------------------------------------
// Cross-modal importance maps (CAM style): the extraction head scores every
// visual hidden state, the image-selection head scores every textual hidden
// state. Each map is min-max normalized per example; constant maps collapse
// to zero.
// --------------------------------------------------------------------------

struct ImportanceMaps {
    std::vector<double> token_importance;               // per textual position
    std::vector<std::vector<double>> patch_importance;  // per image, per patch
};

inline void minmax_normalize(std::vector<double*>& values) {
    if (values.empty()) return;
    double lo = *values[0], hi = *values[0];
    for (double* v : values) {
        lo = std::min(lo, *v);
        hi = std::max(hi, *v);
    }
    const double range = hi - lo;
    for (double* v : values) *v = range > 0 ? (*v - lo) / range : 0.0;
}

inline ImportanceMaps cross_modal_importance(Model& m, const EncoderOutput& enc) {
    ImportanceMaps maps;
    auto head_scores = [&m](const Tensor& states, const LinearParams& head) {
        Tensor s = linear(states, head);
        return std::vector<double>(s.data(), s.data() + s.numel());
    };
    if (enc.text_len > 0) {
        maps.token_importance = head_scores(enc.textual_states(), m.img_head);
        std::vector<double*> ptrs;
        for (auto& v : maps.token_importance) ptrs.push_back(&v);
        minmax_normalize(ptrs);
    }
    const int vis_tokens = m.cfg.visual_tokens_per_image();
    std::vector<double*> patch_ptrs;
    for (int i = 0; i < enc.n_real_images; ++i) {
        int cls = enc.image_cls[static_cast<size_t>(i)];
        Tensor states = slice_rows(enc.h, cls + 1, cls + vis_tokens);  // patches only
        maps.patch_importance.push_back(head_scores(states, m.ext_head));
    }
    for (auto& img : maps.patch_importance)
        for (auto& v : img) patch_ptrs.push_back(&v);
    minmax_normalize(patch_ptrs);
    return maps;
}

// --------------------------------------------------------------------------
// Selection helpers and corpus-level evaluation
// --------------------------------------------------------------------------

// Top-k indices by score (ties to the lower index), reordered ascending so
// extractive output reads in document order.
inline std::vector<int> select_top_k(const std::vector<double>& scores, int k) {
    std::vector<int> idx(scores.size());
    for (size_t i = 0; i < scores.size(); ++i) idx[i] = static_cast<int>(i);
    std::sort(idx.begin(), idx.end(), [&scores](int a, int b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)]) {
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        }
        return a < b;
    });
    if (static_cast<int>(idx.size()) > k) idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

struct Prediction {
    std::string id;
    std::vector<std::string> abstractive;  // token strings
    std::vector<int> extractive;           // sentence indices, document order
    std::vector<int> images;               // selected image indices
    std::vector<double> image_scores;
    std::vector<double> sentence_scores;
};

struct CorpusReport {
    nlohmann::json json;  // per-example rows + corpus means
};

inline nlohmann::json rouge_to_json(const RougeScore& r) {
    return {{"p", r.precision}, {"r", r.recall}, {"f1", r.f1}};
}

// Joins per-document predictions with references: ROUGE for abstractive and
// extractive output, image precision over annotated documents, the M_sim
// proxy, and novel n-gram curves for n = 1..4.
inline CorpusReport build_report(const std::vector<MultimodalDocument>& docs,
                                 const std::vector<EncodedExample>& examples,
                                 const std::vector<Prediction>& preds, const Vocabulary& vocab,
                                 const Teacher* teacher) {
    std::map<std::string, const MultimodalDocument*> doc_by_id;
    std::map<std::string, const EncodedExample*> ex_by_id;
    for (const auto& d : docs) doc_by_id[d.id] = &d;
    for (const auto& e : examples) ex_by_id[e.id] = &e;

    nlohmann::json rows = nlohmann::json::array();
    double abs_r1 = 0, abs_r2 = 0, abs_rl = 0, ext_r1 = 0, ext_r2 = 0, ext_rl = 0;
    double ip_sum = 0, msim_sum = 0;
    int n = 0, ip_count = 0, ip_skipped = 0, msim_count = 0;
    double novel_count[5] = {0, 0, 0, 0, 0}, novel_recall[5] = {0, 0, 0, 0, 0};

    for (const auto& pred : preds) {
        auto dit = doc_by_id.find(pred.id);
        if (dit == doc_by_id.end()) throw LookupError("evaluate: prediction for unknown document '" + pred.id + "'");
        const MultimodalDocument& doc = *dit->second;
        const EncodedExample* ex = ex_by_id.count(pred.id) ? ex_by_id.at(pred.id) : nullptr;
        nlohmann::json row;
        row["id"] = pred.id;

        const TokenSeq& reference = doc.summary_tokens;
        RougeScore a1 = rouge_n(pred.abstractive, reference, 1);
        RougeScore a2 = rouge_n(pred.abstractive, reference, 2);
        RougeScore al = rouge_l(pred.abstractive, reference);
        row["abstractive"] = {{"r1", rouge_to_json(a1)}, {"r2", rouge_to_json(a2)}, {"rl", rouge_to_json(al)}};
        abs_r1 += a1.f1;
        abs_r2 += a2.f1;
        abs_rl += al.f1;

        TokenSeq ext_text;
        for (int si : pred.extractive) {
            const auto& sents = ex ? ex->sentence_tokens : doc.sentence_tokens;
            if (si >= 0 && si < static_cast<int>(sents.size())) {
                ext_text.insert(ext_text.end(), sents[static_cast<size_t>(si)].begin(),
                                sents[static_cast<size_t>(si)].end());
            }
        }
        RougeScore e1 = rouge_n(ext_text, reference, 1);
        RougeScore e2 = rouge_n(ext_text, reference, 2);
        RougeScore el = rouge_l(ext_text, reference);
        row["extractive"] = {{"r1", rouge_to_json(e1)}, {"r2", rouge_to_json(e2)}, {"rl", rouge_to_json(el)}};
        ext_r1 += e1.f1;
        ext_r2 += e2.f1;
        ext_rl += el.f1;

        if (!pred.images.empty()) {
            if (doc.image_refs && !doc.image_refs->empty()) {
                double ip = image_precision(pred.images, *doc.image_refs);
                row["ip"] = ip;
                ip_sum += ip;
                ++ip_count;
            } else {
                ++ip_skipped;
            }
            if (teacher != nullptr && ex != nullptr && ex->n_images() > 0) {
                double ms = msim_proxy(pred.images, *ex, vocab.encode(pred.abstractive), pred.abstractive,
                                       *teacher);
                row["msim_proxy"] = ms;
                msim_sum += ms;
                ++msim_count;
            }
        }

        nlohmann::json novel = nlohmann::json::array();
        TokenSeq source = doc.document_tokens();
        for (int g = 1; g <= 4; ++g) {
            NovelNgramStats s = novel_ngrams(pred.abstractive, source, reference, g);
            novel.push_back({{"n", g}, {"count", s.count}, {"novel_recall", s.novel_recall}});
            novel_count[g] += s.count;
            novel_recall[g] += s.novel_recall;
        }
        row["novel_ngrams"] = novel;
        rows.push_back(row);
        ++n;
    }
    if (n == 0) throw InputError("evaluate: no overlapping predictions");

    nlohmann::json mean;
    mean["abstractive"] = {{"r1", abs_r1 / n}, {"r2", abs_r2 / n}, {"rl", abs_rl / n}};
    mean["extractive"] = {{"r1", ext_r1 / n}, {"r2", ext_r2 / n}, {"rl", ext_rl / n}};
    if (ip_count > 0) mean["ip"] = ip_sum / ip_count;
    mean["ip_annotated"] = ip_count;
    mean["ip_skipped"] = ip_skipped;
    if (msim_count > 0) mean["msim_proxy"] = msim_sum / msim_count;
    nlohmann::json novel = nlohmann::json::array();
    for (int g = 1; g <= 4; ++g) {
        novel.push_back(
            {{"n", g}, {"count", novel_count[g] / n}, {"novel_recall", novel_recall[g] / n}});
    }
    mean["novel_ngrams"] = novel;

    CorpusReport report;
    report.json = {{"examples", rows}, {"mean", mean}, {"n", n}};
    return report;
}

}  // namespace unims
