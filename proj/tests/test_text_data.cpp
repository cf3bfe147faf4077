#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "unims/data.hpp"
#include "unims/image.hpp"
#include "unims/synthetic.hpp"
#include "unims/text.hpp"

using namespace unims;

namespace {
std::string fixture(const std::string& name) {
    return std::string(UNIMS_TEST_DIR) + "/fixtures/" + name;
}
std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("tokenize") {
    CHECK(tokenize("The cat sat.") == std::vector<std::string>{"the", "cat", "sat", "."});
    CHECK(tokenize("").empty());
    CHECK(tokenize("U.S. won 2-1") == std::vector<std::string>{"u", ".", "s", ".", "won", "2-1"});
    CHECK(tokenize("  spaced\tout\nwords ") == std::vector<std::string>{"spaced", "out", "words"});
}

TEST_CASE("tokenize is stable over detokenize round trips") {
    std::vector<std::string> texts{"The cat sat.", "U.S. won 2-1!", "a-b c,d;e", "Hello... World"};
    for (const auto& text : texts) {
        auto tokens = tokenize(text);
        CHECK(tokenize(detokenize(tokens)) == tokens);
    }
}

TEST_CASE("build_vocab ordering and filtering") {
    Vocabulary v = build_vocab({tokenize("a a b")}, 1);
    CHECK(v.contains("a"));
    CHECK(v.contains("b"));
    CHECK(v.id("a") < v.id("b"));
    CHECK(v.id("a") == kNumReserved);

    Vocabulary v2 = build_vocab({tokenize("a a b")}, 2);
    CHECK(v2.contains("a"));
    CHECK(v2.id("b") == kUnkId);

    CHECK_THROWS_AS(build_vocab({}, 1), InputError);
}

TEST_CASE("build_vocab on the 32-document fixture corpus") {
    SyntheticSpec spec;
    ModelConfig cfg;
    SyntheticCorpus corpus = make_synthetic_corpus(spec, cfg);
    CHECK(corpus.vocab.size() == 200 + kNumReserved);

    // round trip through serialized entries
    Vocabulary again = Vocabulary::from_entries(corpus.vocab.entries());
    CHECK(again.size() == corpus.vocab.size());
    CHECK(again.id(corpus.vocab.token(kNumReserved)) == kNumReserved);
}

TEST_CASE("patchify") {
    ImageRaster big;
    big.height = 224;
    big.width = 224;
    big.channels = 3;
    big.pixels.assign(224 * 224 * 3, 0.5);
    CHECK(patchify(big, 32).size() == 49);

    GaussianRng rng(3);
    ImageRaster img;
    img.height = 32;
    img.width = 32;
    img.channels = 3;
    img.pixels.resize(32 * 32 * 3);
    for (auto& p : img.pixels) p = rng.uniform();
    auto patches = patchify(img, 8);
    CHECK(patches.size() == 16);
    CHECK(patches[0].size() == 192);

    auto whole = patchify(img, 32);
    CHECK(whole.size() == 1);
    CHECK(whole[0] == img.pixels);

    CHECK_THROWS_AS(patchify(img, 5), ShapeError);

    ImageRaster back = unpatchify(patches, 8, 32, 32, 3);
    CHECK(back.pixels == img.pixels);
}

TEST_CASE("image file round trips") {
    GaussianRng rng(4);
    ImageRaster img;
    img.height = 16;
    img.width = 12;
    img.channels = 3;
    img.pixels.resize(16 * 12 * 3);
    for (auto& p : img.pixels) p = rng.uniform();

    std::string upath = temp_path("unims_test.uimg");
    write_uimg(img, upath);
    ImageRaster u = read_uimg(upath);
    CHECK(u.height == 16);
    CHECK(u.width == 12);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        CHECK(u.pixels[i] == Catch::Approx(img.pixels[i]).margin(1e-7));  // f32 payload
    }

    std::string ppath = temp_path("unims_test.ppm");
    write_ppm(img, ppath);
    ImageRaster p = read_ppm(ppath);
    CHECK(p.height == 16);
    CHECK(p.width == 12);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        CHECK(p.pixels[i] == Catch::Approx(img.pixels[i]).margin(1.0 / 255.0));
    }
    std::filesystem::remove(upath);
    std::filesystem::remove(ppath);
}

TEST_CASE("resize_nearest") {
    ImageRaster img;
    img.height = 2;
    img.width = 2;
    img.channels = 1;
    img.pixels = {0.0, 1.0, 0.25, 0.75};
    ImageRaster r = resize_nearest(img, 4);
    CHECK(r.height == 4);
    CHECK(r.at(0, 0, 0) == 0.0);
    CHECK(r.at(0, 3, 0) == 1.0);
    CHECK(r.at(3, 0, 0) == 0.25);
    ImageRaster same = resize_nearest(img, 2);
    CHECK(same.pixels == img.pixels);
}

TEST_CASE("encode_document layout") {
    ModelConfig cfg;
    cfg.max_text_tokens = 64;
    MultimodalDocument doc;
    doc.id = "d";
    doc.sentence_tokens = {{"a", "b", "c"}, {"d", "e", "f"}};
    doc.sentences = {{10, 11, 12}, {13, 14, 15}};
    doc.summary_tokens = {"a"};
    doc.summary = {10};
    EncodedExample ex = encode_document(doc, cfg);
    CHECK(ex.text_ids.size() == 10);  // 2 * (3 + 2)
    CHECK(ex.sentence_cls == std::vector<int>{0, 5});
    CHECK(ex.text_ids[0] == kClsId);
    CHECK(ex.text_ids[4] == kSepId);
    CHECK(ex.text_ids[5] == kClsId);
    CHECK(ex.text_ids[9] == kSepId);

    MultimodalDocument empty;
    empty.id = "e";
    CHECK_THROWS_AS(encode_document(empty, cfg), InputError);
}

TEST_CASE("encode_document paper-scale visual stream") {
    ModelConfig cfg;
    cfg.image_resolution = 224;
    cfg.patch_size = 32;
    cfg.max_images = 10;
    cfg.max_text_tokens = 512;
    CHECK(cfg.patches_per_image() == 49);
    CHECK(cfg.max_visual_tokens() == 500);

    MultimodalDocument doc;
    doc.id = "imgs";
    doc.sentence_tokens = {{"x"}};
    doc.sentences = {{9}};
    for (int i = 0; i < 12; ++i) {
        ImageRaster img;
        img.height = 16;
        img.width = 16;
        img.channels = 3;
        img.pixels.assign(16 * 16 * 3, i / 12.0);
        doc.images.push_back(img);
    }
    EncodedExample ex = encode_document(doc, cfg);
    CHECK(ex.n_images() == 10);  // first 10 kept in order
    CHECK(ex.image_patches[0][0][0] == Catch::Approx(0.0));
    CHECK(ex.image_patches[9][0][0] == Catch::Approx(9 / 12.0));
    CHECK(visual_stream_length(ex) == 500);
}

TEST_CASE("encode_document truncation keeps sentences whole") {
    ModelConfig cfg;
    cfg.max_text_tokens = 12;
    MultimodalDocument doc;
    doc.id = "t";
    doc.sentence_tokens = {{"a", "b", "c"}, {"d", "e", "f"}, {"g", "h", "i"}};
    doc.sentences = {{10, 11, 12}, {13, 14, 15}, {16, 17, 18}};
    EncodedExample ex = encode_document(doc, cfg);
    // two sentences of cost 5 fit in 12; the third would need 15
    CHECK(ex.n_sentences() == 2);
    CHECK(ex.text_ids.size() == 10);
    int cls = 0, sep = 0;
    for (int id : ex.text_ids) {
        cls += id == kClsId;
        sep += id == kSepId;
    }
    CHECK(cls == ex.n_sentences());
    CHECK(sep == ex.n_sentences());

    // an oversized single sentence is hard-truncated, then wrapped
    MultimodalDocument mono;
    mono.id = "m";
    mono.sentence_tokens = {{"a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n"}};
    mono.sentences = {{10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23}};
    EncodedExample mex = encode_document(mono, cfg);
    CHECK(mex.n_sentences() == 1);
    CHECK(mex.text_ids.size() == 12);
    CHECK(mex.text_ids.front() == kClsId);
    CHECK(mex.text_ids.back() == kSepId);
    CHECK(mex.sentence_ids[0].size() == 10);
}

TEST_CASE("jsonl corpus parsing") {
    Vocabulary vocab = build_vocab({tokenize("the cat sat on mat a dog barked loudly outside rain fell all day long markets rose sharply today investors cheered news")});
    auto docs = read_jsonl_corpus(fixture("tiny.jsonl"), &vocab);
    REQUIRE(docs.size() == 2);
    CHECK(docs[0].id == "t1");
    CHECK(docs[0].sentence_tokens[0] == std::vector<std::string>{"the", "cat", "sat", "on", "the", "mat", "."});
    CHECK(docs[0].images.size() == 1);
    CHECK(docs[0].images[0].height == 8);
    CHECK(docs[0].captions.size() == 1);
    REQUIRE(docs[0].image_refs.has_value());
    CHECK(docs[0].image_refs->at(0) == 0);
    CHECK(docs[0].summary_tokens == std::vector<std::string>{"the", "cat", "sat", "."});
    CHECK(docs[1].images.empty());

    CHECK_THROWS_AS(read_jsonl_corpus(fixture("missing.jsonl")), InputError);

    std::string bad = temp_path("unims_bad.jsonl");
    {
        std::ofstream f(bad);
        f << "{not json}\n";
    }
    CHECK_THROWS_AS(read_jsonl_corpus(bad), FormatError);
    std::filesystem::remove(bad);
}

TEST_CASE("document_to_json round trip") {
    SyntheticSpec spec;
    spec.n_docs = 2;
    ModelConfig cfg;
    SyntheticCorpus corpus = make_synthetic_corpus(spec, cfg);
    std::string path = temp_path("unims_roundtrip.jsonl");
    {
        std::ofstream f(path);
        for (const auto& d : corpus.docs) f << document_to_json(d).dump() << "\n";
    }
    auto docs = read_jsonl_corpus(path, &corpus.vocab);
    REQUIRE(docs.size() == corpus.docs.size());
    for (size_t i = 0; i < docs.size(); ++i) {
        CHECK(docs[i].id == corpus.docs[i].id);
        CHECK(docs[i].sentence_tokens == corpus.docs[i].sentence_tokens);
        CHECK(docs[i].summary_tokens == corpus.docs[i].summary_tokens);
        CHECK(docs[i].images.size() == corpus.docs[i].images.size());
        CHECK(docs[i].image_refs == corpus.docs[i].image_refs);
    }
    std::filesystem::remove(path);
}
