#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "unims/config.hpp"
#include "unims/errors.hpp"
#include "unims/image.hpp"
#include "unims/text.hpp"

namespace unims {

// A tokenized multimodal document. Token strings are kept alongside the ids:
// ROUGE, the greedy oracle and the caption-ranking teacher all work on the
// tokenizer output rather than the (UNK-lossy) id space.
struct MultimodalDocument {
    std::string id;
    std::vector<std::vector<int>> sentences;
    std::vector<std::vector<std::string>> sentence_tokens;
    std::vector<ImageRaster> images;  // as loaded; resized during encoding
    std::vector<std::vector<std::string>> captions;  // empty when absent
    std::vector<int> summary;
    std::vector<std::string> summary_tokens;
    std::optional<std::vector<int>> image_refs;

    std::vector<std::string> document_tokens() const {
        std::vector<std::string> all;
        for (const auto& s : sentence_tokens) all.insert(all.end(), s.begin(), s.end());
        return all;
    }
};

// Model-ready example: marked token stream, patch matrices, supervision.
struct EncodedExample {
    std::string id;
    std::vector<int> text_ids;             // [CLS] s1 [SEP] [CLS] s2 [SEP] ...
    std::vector<int> sentence_cls;         // CLS position per retained sentence
    std::vector<std::vector<int>> sentence_ids;              // retained, truncated
    std::vector<std::vector<std::string>> sentence_tokens;   // retained, truncated
    std::vector<std::vector<std::vector<double>>> image_patches;  // [image][patch][patch_dim]
    std::vector<std::vector<std::string>> captions;  // per retained image, empty when absent
    std::vector<int> summary_ids;
    std::vector<std::string> summary_tokens;
    std::optional<std::vector<int>> image_refs;

    // attached supervision
    std::vector<int> oracle_labels;  // 0/1 per retained sentence
    bool oracle_degenerate = false;
    std::vector<double> teacher_scores;  // per retained image

    int n_sentences() const { return static_cast<int>(sentence_cls.size()); }
    int n_images() const { return static_cast<int>(image_patches.size()); }
};

// --------------------------------------------------------------------------
// JSONL corpus format: one object per line with fields
//   id: string, sentences: [string], images: [path | {h,w,c,pixels}],
//   captions: [string] (optional), summary: [string],
//   image_refs: [int] (optional).
// Image paths resolve relative to the dataset file's directory.
// --------------------------------------------------------------------------

inline ImageRaster parse_image_field(const nlohmann::json& j, const std::string& base_dir) {
    if (j.is_string()) {
        std::filesystem::path p(j.get<std::string>());
        if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
        return load_image(p.string());
    }
    if (j.is_object()) {
        ImageRaster img;
        img.height = j.at("h").get<int>();
        img.width = j.at("w").get<int>();
        img.channels = j.at("c").get<int>();
        img.pixels = j.at("pixels").get<std::vector<double>>();
        img.validate();
        return img;
    }
    throw FormatError("dataset: image entry must be a path or an inline raster object");
}

inline MultimodalDocument parse_document(const nlohmann::json& j, const Vocabulary* vocab,
                                         const std::string& base_dir) {
    MultimodalDocument doc;
    doc.id = j.at("id").get<std::string>();
    if (!j.contains("sentences") || !j.at("sentences").is_array() || j.at("sentences").empty()) {
        throw InputError("dataset: document '" + doc.id + "' has no sentences");
    }
    for (const auto& s : j.at("sentences")) {
        auto tokens = tokenize(s.get<std::string>());
        doc.sentence_tokens.push_back(tokens);
        doc.sentences.push_back(vocab ? vocab->encode(tokens) : std::vector<int>());
    }
    if (j.contains("images")) {
        for (const auto& im : j.at("images")) doc.images.push_back(parse_image_field(im, base_dir));
    }
    if (j.contains("captions")) {
        for (const auto& c : j.at("captions")) doc.captions.push_back(tokenize(c.get<std::string>()));
        if (doc.captions.size() != doc.images.size()) {
            throw FormatError("dataset: document '" + doc.id + "' has " + std::to_string(doc.captions.size()) +
                              " captions for " + std::to_string(doc.images.size()) + " images");
        }
    }
    if (j.contains("summary")) {
        for (const auto& s : j.at("summary")) {
            auto tokens = tokenize(s.get<std::string>());
            doc.summary_tokens.insert(doc.summary_tokens.end(), tokens.begin(), tokens.end());
        }
        if (vocab) doc.summary = vocab->encode(doc.summary_tokens);
    }
    if (j.contains("image_refs")) {
        doc.image_refs = j.at("image_refs").get<std::vector<int>>();
    }
    return doc;
}

inline std::vector<MultimodalDocument> read_jsonl_corpus(const std::string& path,
                                                         const Vocabulary* vocab = nullptr) {
    std::ifstream f(path);
    if (!f) throw InputError("dataset: cannot open " + path);
    std::string base_dir = std::filesystem::path(path).parent_path().string();
    std::vector<MultimodalDocument> docs;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("dataset: " + path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        docs.push_back(parse_document(j, vocab, base_dir));
    }
    if (docs.empty()) throw InputError("dataset: " + path + " contains no documents");
    return docs;
}

inline nlohmann::json document_to_json(const MultimodalDocument& doc) {
    nlohmann::json j;
    j["id"] = doc.id;
    nlohmann::json sentences = nlohmann::json::array();
    for (const auto& s : doc.sentence_tokens) sentences.push_back(detokenize(s));
    j["sentences"] = sentences;
    nlohmann::json images = nlohmann::json::array();
    for (const auto& img : doc.images) {
        images.push_back({{"h", img.height}, {"w", img.width}, {"c", img.channels}, {"pixels", img.pixels}});
    }
    j["images"] = images;
    if (!doc.captions.empty()) {
        nlohmann::json caps = nlohmann::json::array();
        for (const auto& c : doc.captions) caps.push_back(detokenize(c));
        j["captions"] = caps;
    }
    j["summary"] = nlohmann::json::array({detokenize(doc.summary_tokens)});
    if (doc.image_refs) j["image_refs"] = *doc.image_refs;
    return j;
}

// --------------------------------------------------------------------------
// encode_document: marked text stream + patch matrices.
// --------------------------------------------------------------------------

// Text layout is [CLS] s [SEP] per sentence, packed in document order until
// the budget runs out; a sentence is never split across the boundary. A
// sentence that alone exceeds the budget is hard-truncated first so a
// degenerate document still encodes.
inline EncodedExample encode_document(const MultimodalDocument& doc, const ModelConfig& cfg) {
    if (doc.sentences.empty()) throw InputError("encode: document '" + doc.id + "' is empty");
    EncodedExample ex;
    ex.id = doc.id;
    const int budget = cfg.max_text_tokens;
    for (size_t i = 0; i < doc.sentences.size(); ++i) {
        std::vector<int> ids = doc.sentences[i];
        std::vector<std::string> tokens = doc.sentence_tokens[i];
        if (static_cast<int>(ids.size()) + 2 > budget) {
            ids.resize(static_cast<size_t>(budget - 2));
            tokens.resize(static_cast<size_t>(budget - 2));
        }
        if (static_cast<int>(ex.text_ids.size() + ids.size()) + 2 > budget) break;
        ex.sentence_cls.push_back(static_cast<int>(ex.text_ids.size()));
        ex.text_ids.push_back(kClsId);
        ex.text_ids.insert(ex.text_ids.end(), ids.begin(), ids.end());
        ex.text_ids.push_back(kSepId);
        ex.sentence_ids.push_back(std::move(ids));
        ex.sentence_tokens.push_back(std::move(tokens));
    }
    const int n_images = std::min<int>(static_cast<int>(doc.images.size()), cfg.max_images);
    for (int i = 0; i < n_images; ++i) {
        ImageRaster resized = resize_nearest(doc.images[static_cast<size_t>(i)], cfg.image_resolution);
        if (resized.channels != cfg.image_channels) {
            throw InputError("encode: document '" + doc.id + "' image " + std::to_string(i) + " has " +
                             std::to_string(resized.channels) + " channels, config wants " +
                             std::to_string(cfg.image_channels));
        }
        ex.image_patches.push_back(patchify(resized, cfg.patch_size));
        if (!doc.captions.empty()) ex.captions.push_back(doc.captions[static_cast<size_t>(i)]);
    }
    ex.summary_ids = doc.summary;
    ex.summary_tokens = doc.summary_tokens;
    ex.image_refs = doc.image_refs;
    return ex;
}

inline int visual_stream_length(const EncodedExample& ex) {
    int len = 0;
    for (const auto& img : ex.image_patches) len += 1 + static_cast<int>(img.size());
    return len;
}

}  // namespace unims
