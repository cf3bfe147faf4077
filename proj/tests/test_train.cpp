#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "unims/synthetic.hpp"
#include "unims/train.hpp"

using namespace unims;
using testutil::TinyFixture;

namespace {

std::string temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

std::vector<double> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::vector<double> out;
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    out.resize(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) out[i] = bytes[i];
    return out;
}

}  // namespace

TEST_CASE("lr_schedule") {
    CHECK(lr_schedule(750, 750, 30000, 1e-4) == Catch::Approx(1e-4));
    CHECK(lr_schedule(30000, 750, 30000, 1e-4) == 0.0);
    CHECK(lr_schedule(375, 750, 30000, 1e-4) == Catch::Approx(5e-5));
    CHECK_THROWS_AS(lr_schedule(10, 100, 100, 1e-4), ConfigError);
    CHECK_THROWS_AS(lr_schedule(0, 10, 100, 1e-4), InputError);
    CHECK_THROWS_AS(lr_schedule(101, 10, 100, 1e-4), InputError);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    TinyFixture fx(2);
    Model m(fx.cfg);
    std::map<std::string, std::vector<double>> before;
    m.visit_params([&before](const std::string& n, Tensor& t) { before[n] = t.values(); });
    TrainConfig tc;
    tc.batch_size = 1;
    tc.total_steps = 4;
    tc.warmup_steps = 0;
    tc.peak_lr = 0.0;
    TrainState state;
    train_step(m, {&fx.ex}, state, tc, Ablation::kNone);
    m.visit_params([&before](const std::string& n, Tensor& t) { CHECK(t.values() == before[n]); });
}

TEST_CASE("losses drop by 90 percent when overfitting one example") {
    TinyFixture fx(2);
    Model m(fx.cfg);
    TrainConfig tc;
    tc.batch_size = 1;
    tc.total_steps = 1000;  // schedule horizon; only 200 steps are taken
    tc.warmup_steps = 10;
    tc.eval_interval = 10000;
    tc.peak_lr = 3e-3;
    TrainState state;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 200; ++step) {
        StepLosses l = train_step(m, {&fx.ex}, state, tc, Ablation::kNone);
        if (step == 0) first = l.total;
        last = l.total;
        CHECK(l.kd >= 0.0);
        CHECK(l.ext >= 0.0);
        CHECK(l.abs >= 0.0);
    }
    CHECK(last < 0.1 * first);
}

TEST_CASE("ablation flags zero out exactly the forbidden path's gradients") {
    TinyFixture fx(2);

    auto grads_after_step = [&](Ablation ab) {
        Model m(fx.cfg);
        Tape tape;
        m.zero_grads();
        {
            Tape::Scope scope(tape);
            ForwardResult r = forward_losses(m, fx.padded(), ab);
            tape.backward(r.total);
        }
        std::map<std::string, double> norms;
        m.visit_params([&norms](const std::string& n, Tensor& t) {
            double s = 0.0;
            for (double g : t.grads()) s += g * g;
            norms[n] = s;
        });
        return norms;
    };

    auto base = grads_after_step(Ablation::kNone);
    CHECK(base.at("ext_head.w") > 0.0);
    CHECK(base.at("dec.0.cross_v.q.w") > 0.0);
    CHECK(base.at("img_head.w") > 0.0);

    auto no_ext = grads_after_step(Ablation::kNoExt);
    CHECK(no_ext.at("ext_head.w") == 0.0);
    CHECK(no_ext.at("ext_head.b") == 0.0);
    CHECK(no_ext.at("dec.0.cross_v.q.w") > 0.0);
    CHECK(no_ext.at("img_head.w") > 0.0);

    auto no_vg = grads_after_step(Ablation::kNoVisualGuide);
    for (const char* name : {"dec.0.cross_v.q.w", "dec.0.cross_v.k.w", "dec.0.cross_v.v.w",
                             "dec.0.cross_v.o.w", "dec.0.ln_v.gain"}) {
        CHECK(no_vg.at(name) == 0.0);
    }
    CHECK(no_vg.at("ext_head.w") > 0.0);
    CHECK(no_vg.at("dec.0.cross_t.q.w") > 0.0);

    auto no_both = grads_after_step(Ablation::kNoBoth);
    CHECK(no_both.at("ext_head.w") == 0.0);
    CHECK(no_both.at("dec.0.cross_v.q.w") == 0.0);
    CHECK(no_both.at("img_head.w") > 0.0);
    CHECK(no_both.at("dec.0.cross_t.q.w") > 0.0);
}

TEST_CASE("checkpoint round trip is byte-identical") {
    TinyFixture fx(2);
    Model m(fx.cfg);
    TrainConfig tc;
    tc.batch_size = 1;
    tc.total_steps = 10;
    tc.warmup_steps = 1;
    tc.peak_lr = 1e-3;
    TrainState state;
    for (int i = 0; i < 3; ++i) train_step(m, {&fx.ex}, state, tc, Ablation::kNone);
    state.best.push_back({1.25, 3, "ckpt_000003"});

    Vocabulary vocab = build_vocab({{"alpha", "beta", "gamma"}});
    std::string dir = temp_dir("unims_ckpt");
    std::string base = dir + "/a";
    save_checkpoint(m, state, vocab, base);

    LoadedCheckpoint loaded = load_checkpoint(base);
    CHECK(loaded.state.step == 3);
    CHECK(loaded.vocab.size() == vocab.size());
    REQUIRE(loaded.state.best.size() == 1);
    CHECK(loaded.state.best[0].val_loss == 1.25);

    std::string base2 = dir + "/b";
    save_checkpoint(*loaded.model, loaded.state, loaded.vocab, base2);
    CHECK(read_file_bytes(base + ".json") == read_file_bytes(base2 + ".json"));
    CHECK(read_file_bytes(base + ".bin") == read_file_bytes(base2 + ".bin"));

    // config mismatch is named
    ModelConfig other = fx.cfg;
    other.n_heads = 4;
    try {
        load_checkpoint(base, &other);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("n_heads") != std::string::npos);
    }

    // truncated payload names the offending tensor
    {
        std::ifstream in(base + ".bin", std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(base + ".bin", std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(base), IntegrityError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("two seeded runs produce identical loss traces") {
    SyntheticSpec spec;
    spec.n_docs = 6;
    ModelConfig base;
    base.d_model = 16;
    base.n_heads = 2;
    base.n_enc_layers = 1;
    base.n_dec_layers = 1;
    base.ffn_dim = 24;
    base.max_text_tokens = 64;
    SyntheticCorpus corpus = make_synthetic_corpus(spec, base);
    ModelConfig cfg = base;
    cfg.vocab_size = corpus.vocab.size();
    cfg.seed = 7;

    auto run = [&] {
        std::vector<EncodedExample> examples;
        for (const auto& d : corpus.docs) examples.push_back(encode_document(d, cfg));
        MockTeacher teacher(cfg);
        attach_supervision(examples, teacher);
        Model m(cfg);
        TrainConfig tc;
        tc.batch_size = 2;
        tc.total_steps = 12;
        tc.warmup_steps = 2;
        tc.eval_interval = 6;
        tc.peak_lr = 1e-3;
        TrainState state;
        std::vector<double> trace;
        for (const TrainLogEntry& e : train_loop(m, examples, {}, tc, state, corpus.vocab)) {
            trace.push_back(e.losses.total);
        }
        return trace;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == 12);
    CHECK(a == b);
}

TEST_CASE("resumed training reproduces the unbroken run exactly") {
    SyntheticSpec spec;
    spec.n_docs = 5;
    ModelConfig base;
    base.d_model = 16;
    base.n_heads = 2;
    base.n_enc_layers = 1;
    base.n_dec_layers = 1;
    base.ffn_dim = 24;
    base.max_text_tokens = 64;
    SyntheticCorpus corpus = make_synthetic_corpus(spec, base);
    ModelConfig cfg = base;
    cfg.vocab_size = corpus.vocab.size();

    std::vector<EncodedExample> examples;
    for (const auto& d : corpus.docs) examples.push_back(encode_document(d, cfg));
    MockTeacher teacher(cfg);
    attach_supervision(examples, teacher);

    TrainConfig tc;
    tc.batch_size = 2;
    tc.total_steps = 20;
    tc.warmup_steps = 2;
    tc.eval_interval = 10;
    tc.peak_lr = 1e-3;

    // unbroken run of 20 steps
    Model full(cfg);
    TrainState full_state;
    std::vector<double> full_trace;
    for (const TrainLogEntry& e : train_loop(full, examples, {}, tc, full_state, corpus.vocab)) {
        full_trace.push_back(e.losses.total);
    }

    // run 10 steps under the same schedule, checkpoint, reload, run 10 more
    std::string dir = temp_dir("unims_resume");
    Model half(cfg);
    TrainState half_state;
    TrainOptions pause;
    pause.stop_after = 10;
    train_loop(half, examples, {}, tc, half_state, corpus.vocab, pause);
    save_checkpoint(half, half_state, corpus.vocab, dir + "/mid");

    LoadedCheckpoint resumed = load_checkpoint(dir + "/mid", &cfg);
    CHECK(resumed.state.step == 10);
    std::vector<double> tail;
    for (const TrainLogEntry& e :
         train_loop(*resumed.model, examples, {}, tc, resumed.state, resumed.vocab)) {
        tail.push_back(e.losses.total);
    }
    REQUIRE(tail.size() == 10);
    for (size_t i = 0; i < 10; ++i) {
        CHECK(tail[i] == full_trace[10 + i]);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("train_loop keeps the best-k registry and persists checkpoints") {
    SyntheticSpec spec;
    spec.n_docs = 4;
    ModelConfig base;
    base.d_model = 16;
    base.n_heads = 2;
    base.n_enc_layers = 1;
    base.n_dec_layers = 1;
    base.ffn_dim = 24;
    base.max_text_tokens = 64;
    SyntheticCorpus corpus = make_synthetic_corpus(spec, base);
    ModelConfig cfg = base;
    cfg.vocab_size = corpus.vocab.size();

    std::vector<EncodedExample> examples;
    for (const auto& d : corpus.docs) examples.push_back(encode_document(d, cfg));
    MockTeacher teacher(cfg);
    attach_supervision(examples, teacher);

    Model m(cfg);
    TrainConfig tc;
    tc.batch_size = 2;
    tc.total_steps = 12;
    tc.warmup_steps = 2;
    tc.eval_interval = 2;  // 6 evals, keep 3
    tc.peak_lr = 1e-3;
    TrainState state;
    std::string dir = temp_dir("unims_bestk");
    TrainOptions opts;
    opts.out_dir = dir;
    train_loop(m, examples, {}, tc, state, corpus.vocab, opts);

    REQUIRE(state.best.size() == 3);
    CHECK(state.best[0].val_loss <= state.best[1].val_loss);
    CHECK(state.best[1].val_loss <= state.best[2].val_loss);
    int on_disk = 0;
    for (const auto& e : state.best) {
        if (std::filesystem::exists(e.path + ".json")) ++on_disk;
    }
    CHECK(on_disk == 3);
    // no more than keep_best checkpoint pairs remain
    int files = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir + "/checkpoints")) {
        files += entry.path().extension() == ".json";
    }
    CHECK(files == 3);
    std::filesystem::remove_all(dir);
}
