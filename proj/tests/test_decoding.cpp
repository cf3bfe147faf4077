#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "test_util.hpp"
#include "unims/decoding.hpp"

using namespace unims;

namespace {

// Fixed random model over a tiny vocabulary; decoding tests only need the
// conditional next-token distribution to be deterministic.
struct DecodeFixture {
    ModelConfig cfg;
    EncodedExample ex;
    std::unique_ptr<Model> model;

    DecodeFixture(int vocab, int max_len, uint64_t seed) {
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_enc_layers = 1;
        cfg.n_dec_layers = 1;
        cfg.ffn_dim = 16;
        cfg.vocab_size = vocab;
        cfg.patch_size = 4;
        cfg.image_resolution = 8;
        cfg.image_channels = 1;
        cfg.max_images = 1;
        cfg.max_text_tokens = 8;
        cfg.max_decode_len = max_len;
        cfg.seed = seed;
        ex.id = "fx";
        ex.text_ids = {0, 1, 2, 0, 3 % vocab};
        ex.sentence_cls = {0};
        ex.sentence_tokens = {{"a"}};
        ex.sentence_ids = {{0}};
        ex.summary_ids = {0};
        ex.summary_tokens = {"a"};
        ex.oracle_labels = {1};
        model = std::make_unique<Model>(cfg);
    }

    EncoderOutput encoded() { return encode(*model, pad_single(ex, cfg)); }
};

// Test-side exhaustive search: every sequence up to max_len where <eos> may
// appear only terminally; ranked by the same normalized score and tie-break.
std::vector<int> exhaustive_best(Model& m, const EncoderOutput& enc, double alpha, int max_len) {
    std::vector<int> best;
    double best_score = -1e300;
    std::vector<int> seq;
    std::function<void(double)> walk = [&](double logprob) {
        std::vector<double> lp = next_token_logprobs(m, enc, seq);
        for (int tok = 0; tok < m.cfg.vocab_size; ++tok) {
            seq.push_back(tok);
            double s = logprob + lp[static_cast<size_t>(tok)];
            const bool terminal = tok == kEosId || static_cast<int>(seq.size()) == max_len;
            if (terminal) {
                double norm = s / length_penalty(static_cast<int>(seq.size()), alpha);
                if (norm > best_score || (norm == best_score && lex_less(seq, best))) {
                    best_score = norm;
                    best = seq;
                }
            } else {
                walk(s);
            }
            seq.pop_back();
        }
    };
    walk(0.0);
    return best;
}

}  // namespace

TEST_CASE("length_penalty") {
    CHECK(length_penalty(1, 0.0) == 1.0);
    CHECK(length_penalty(7, 0.0) == 1.0);
    CHECK(length_penalty(1, 2.4) == 1.0);
    CHECK(length_penalty(5, 2.0) == Catch::Approx(2.7778).margin(1e-4));
    CHECK_THROWS_AS(length_penalty(0, 1.0), InputError);
}

TEST_CASE("beam search equals exhaustive enumeration on tiny vocabularies") {
    for (int trial = 0; trial < 20; ++trial) {
        DecodeFixture fx(4, 3, 300 + static_cast<uint64_t>(trial));
        EncoderOutput enc = fx.encoded();
        const double alpha = (trial % 3) * 0.9;
        std::vector<int> beam = beam_search(*fx.model, enc, 64, alpha, 3);
        std::vector<int> brute = exhaustive_best(*fx.model, enc, alpha, 3);
        CHECK(beam == brute);
    }
}

TEST_CASE("beam size one equals greedy decoding") {
    for (int trial = 0; trial < 50; ++trial) {
        DecodeFixture fx(10, 5, 400 + static_cast<uint64_t>(trial));
        EncoderOutput enc = fx.encoded();
        std::vector<int> beam = beam_search(*fx.model, enc, 1, 1.8, 5);
        std::vector<int> greedy = greedy_decode(*fx.model, enc, 5);
        CHECK(beam == greedy);
    }
}

TEST_CASE("output terminates with eos or at max_len, deterministically") {
    for (int trial = 0; trial < 10; ++trial) {
        DecodeFixture fx(8, 4, 500 + static_cast<uint64_t>(trial));
        EncoderOutput enc = fx.encoded();
        std::vector<int> out = beam_search(*fx.model, enc, 3, 1.8, 4);
        REQUIRE(!out.empty());
        CHECK((out.back() == kEosId || static_cast<int>(out.size()) == 4));
        for (size_t i = 0; i + 1 < out.size(); ++i) CHECK(out[i] != kEosId);
        CHECK(beam_search(*fx.model, enc, 3, 1.8, 4) == out);
    }
    DecodeFixture fx(8, 4, 999);
    CHECK_THROWS_AS(beam_search(*fx.model, fx.encoded(), 3, 1.8, 0), InputError);
    CHECK_THROWS_AS(beam_search(*fx.model, fx.encoded(), 0, 1.8, 4), InputError);
}

TEST_CASE("a large length penalty never shortens the output") {
    for (int trial = 0; trial < 10; ++trial) {
        DecodeFixture fx(6, 6, 600 + static_cast<uint64_t>(trial));
        EncoderOutput enc = fx.encoded();
        std::vector<int> flat = beam_search(*fx.model, enc, 8, 0.0, 6);
        std::vector<int> pushy = beam_search(*fx.model, enc, 8, 4.0, 6);
        CHECK(pushy.size() >= flat.size());
    }
}

TEST_CASE("strip_special removes reserved markers") {
    std::vector<int> out{kBosId, 10, kSepId, 11, kEosId};
    CHECK(strip_special(out) == std::vector<int>{10, 11});
}
