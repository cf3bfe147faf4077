#pragma once

#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "unims/config.hpp"
#include "unims/data.hpp"
#include "unims/teacher.hpp"
#include "unims/tensor.hpp"
#include "unims/text.hpp"

namespace unims {

struct SyntheticSpec {
    int n_docs = 32;
    int vocab_words = 200;
    int min_sentences = 3;
    int max_sentences = 6;
    int min_sentence_len = 4;
    int max_sentence_len = 8;
    int min_images = 2;
    int max_images = 4;
    int image_size = 32;
    int image_channels = 3;
    uint64_t seed = 7;
};

inline std::string synthetic_word(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "w%03d", index);
    return buf;
}

// Per-image base color plus noise keeps images well separated in
// mean-patch space, so teacher score rankings stay unambiguous.
inline std::vector<ImageRaster> synthetic_images(const SyntheticSpec& spec, int n_images,
                                                 std::mt19937_64& rng) {
    auto uniform = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
    std::vector<ImageRaster> out;
    out.reserve(static_cast<size_t>(n_images));
    for (int i = 0; i < n_images; ++i) {
        ImageRaster img;
        img.height = spec.image_size;
        img.width = spec.image_size;
        img.channels = spec.image_channels;
        std::vector<double> base(static_cast<size_t>(img.channels));
        for (auto& b : base) b = uniform();
        img.pixels.resize(static_cast<size_t>(img.height) * img.width * img.channels);
        for (size_t p = 0; p < img.pixels.size(); ++p) {
            double v = base[p % static_cast<size_t>(img.channels)] + (uniform() - 0.5) * 0.3;
            img.pixels[p] = std::min(1.0, std::max(0.0, v));
        }
        out.push_back(std::move(img));
    }
    return out;
}

// Deterministic toy corpus. Summaries are built from fragments of two
// document sentences plus occasional fresh words, so the greedy oracle is
// nontrivial and the abstractive target stays learnable. Every word type
// appears at least once across the corpus.
inline std::vector<MultimodalDocument> synthetic_corpus(const SyntheticSpec& spec) {
    std::mt19937_64 rng(mix_seed(spec.seed, 42));
    auto rand_int = [&rng](int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
    };
    int next_forced_word = 0;
    long long calls = 0;
    auto pick_word = [&]() {
        // every third draw walks the type inventory so all words occur
        if (next_forced_word < spec.vocab_words && ++calls % 3 == 0) {
            return synthetic_word(next_forced_word++);
        }
        return synthetic_word(rand_int(0, spec.vocab_words - 1));
    };

    std::vector<MultimodalDocument> docs;
    docs.reserve(static_cast<size_t>(spec.n_docs));
    for (int d = 0; d < spec.n_docs; ++d) {
        MultimodalDocument doc;
        doc.id = "doc" + std::to_string(d);
        const int n_sents = rand_int(spec.min_sentences, spec.max_sentences);
        for (int s = 0; s < n_sents; ++s) {
            std::vector<std::string> sent;
            const int len = rand_int(spec.min_sentence_len, spec.max_sentence_len);
            for (int w = 0; w < len; ++w) sent.push_back(pick_word());
            doc.sentence_tokens.push_back(std::move(sent));
        }
        // summary: leading fragments of two distinct sentences, sometimes a
        // novel word appended
        int s1 = rand_int(0, n_sents - 1);
        int s2 = rand_int(0, n_sents - 1);
        if (n_sents > 1 && s2 == s1) s2 = (s1 + 1) % n_sents;
        for (int s : {std::min(s1, s2), std::max(s1, s2)}) {
            const auto& sent = doc.sentence_tokens[static_cast<size_t>(s)];
            int take = std::min<int>(static_cast<int>(sent.size()), rand_int(3, 5));
            doc.summary_tokens.insert(doc.summary_tokens.end(), sent.begin(), sent.begin() + take);
            if (s1 == s2) break;
        }
        if (rng() % 3 == 0) doc.summary_tokens.push_back(pick_word());

        const int n_images = rand_int(spec.min_images, spec.max_images);
        doc.images = synthetic_images(spec, n_images, rng);
        // caption: fragment of a random sentence plus a word from another,
        // enough for the rouge-rank teacher to produce a spread of scores
        for (int i = 0; i < n_images; ++i) {
            const auto& sent = doc.sentence_tokens[static_cast<size_t>(rand_int(0, n_sents - 1))];
            std::vector<std::string> cap(sent.begin(), sent.begin() + std::min<size_t>(sent.size(), 3));
            const auto& other = doc.sentence_tokens[static_cast<size_t>(rand_int(0, n_sents - 1))];
            cap.push_back(other[static_cast<size_t>(rand_int(0, static_cast<int>(other.size()) - 1))]);
            doc.captions.push_back(std::move(cap));
        }
        docs.push_back(std::move(doc));
    }
    return docs;
}

// Tokenizes a corpus against a vocabulary built from it and annotates each
// document's reference images with the mock teacher's argmax, giving the
// synthetic data a coherent image-selection ground truth.
struct SyntheticCorpus {
    std::vector<MultimodalDocument> docs;
    Vocabulary vocab;
};

inline SyntheticCorpus make_synthetic_corpus(const SyntheticSpec& spec, ModelConfig cfg) {
    SyntheticCorpus out;
    out.docs = synthetic_corpus(spec);
    std::vector<std::vector<std::string>> streams;
    for (const auto& d : out.docs) {
        streams.push_back(d.document_tokens());
        streams.push_back(d.summary_tokens);
    }
    out.vocab = build_vocab(streams, 1, spec.vocab_words);
    for (auto& d : out.docs) {
        d.sentences.clear();
        for (const auto& s : d.sentence_tokens) d.sentences.push_back(out.vocab.encode(s));
        d.summary = out.vocab.encode(d.summary_tokens);
    }
    cfg.vocab_size = out.vocab.size();
    cfg.image_resolution = spec.image_size;
    cfg.image_channels = spec.image_channels;
    cfg.seed = spec.seed;
    MockTeacher teacher(cfg);
    // Annotated references follow the teacher's argmax. Documents whose top
    // two teacher scores nearly tie get their images redrawn: a fixture with
    // ambiguous ground truth cannot anchor selection metrics.
    constexpr double kMargin = 0.15;
    size_t doc_index = 0;
    for (auto& d : out.docs) {
        for (int retry = 0; retry < 100; ++retry) {
            EncodedExample ex = encode_document(d, cfg);
            std::vector<double> scores = teacher.score_reference(ex);
            if (scores.empty()) break;
            int best = 0;
            double second = -1e300;
            for (size_t i = 1; i < scores.size(); ++i) {
                if (scores[i] > scores[static_cast<size_t>(best)]) best = static_cast<int>(i);
            }
            for (size_t i = 0; i < scores.size(); ++i) {
                if (static_cast<int>(i) != best) second = std::max(second, scores[i]);
            }
            if (scores.size() == 1 || scores[static_cast<size_t>(best)] - second >= kMargin) {
                d.image_refs = std::vector<int>{best};
                break;
            }
            std::mt19937_64 redraw(mix_seed(spec.seed, 5000 + doc_index * 128 + static_cast<size_t>(retry)));
            d.images = synthetic_images(spec, static_cast<int>(d.images.size()), redraw);
        }
        ++doc_index;
    }
    return out;
}

}  // namespace unims
