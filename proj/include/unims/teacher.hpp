#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "unims/config.hpp"
#include "unims/data.hpp"
#include "unims/errors.hpp"
#include "unims/rouge.hpp"
#include "unims/tensor.hpp"

namespace unims {

struct TeacherScores {
    std::string id;
    std::vector<double> scores;  // index-aligned with the retained image list
};

// Image-relevance teacher. Scores are distillation targets and therefore
// constants: nothing here ever touches the tape.
class Teacher {
public:
    virtual ~Teacher() = default;

    // Scores each retained image of `ex` against the given summary.
    virtual std::vector<double> score(const EncodedExample& ex, const std::vector<int>& summary_ids,
                                      const std::vector<std::string>& summary_tokens) const = 0;

    // Against the example's own reference summary.
    std::vector<double> score_reference(const EncodedExample& ex) const {
        return score(ex, ex.summary_ids, ex.summary_tokens);
    }
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Stand-in for a pretrained vision-language scorer: bag-of-words summary and
// mean-pooled patch vectors, both pushed through fixed seeded random
// projections into a shared 64-dim space, compared by cosine similarity.
class MockTeacher : public Teacher {
public:
    static constexpr int kEmbedDim = 64;

    explicit MockTeacher(const ModelConfig& cfg) : cfg_(cfg) {
        if (cfg.vocab_size <= 0) throw ConfigError("mock teacher: vocab_size not set");
        text_proj_ = random_matrix(cfg.vocab_size, mix_seed(cfg.seed, 101));
        image_proj_ = random_matrix(cfg.patch_dim(), mix_seed(cfg.seed, 102));
    }

    std::vector<double> score(const EncodedExample& ex, const std::vector<int>& summary_ids,
                              const std::vector<std::string>& /*summary_tokens*/) const override {
        std::vector<double> bow(static_cast<size_t>(cfg_.vocab_size), 0.0);
        for (int id : summary_ids) {
            if (id >= 0 && id < cfg_.vocab_size) bow[static_cast<size_t>(id)] += 1.0;
        }
        std::vector<double> text_vec = project(text_proj_, bow);
        std::vector<double> out;
        out.reserve(ex.image_patches.size());
        for (const auto& patches : ex.image_patches) {
            std::vector<double> mean(static_cast<size_t>(cfg_.patch_dim()), 0.0);
            for (const auto& p : patches)
                for (size_t k = 0; k < p.size(); ++k) mean[k] += p[k];
            for (auto& v : mean) v /= static_cast<double>(patches.size());
            out.push_back(cosine(project(image_proj_, mean), text_vec));
        }
        return out;
    }

private:
    // rows x kEmbedDim gaussian projection
    static std::vector<double> random_matrix(int rows, uint64_t seed) {
        GaussianRng rng(seed);
        std::vector<double> m(static_cast<size_t>(rows) * kEmbedDim);
        for (auto& v : m) v = rng.gaussian();
        return m;
    }

    static std::vector<double> project(const std::vector<double>& proj, const std::vector<double>& x) {
        std::vector<double> out(kEmbedDim, 0.0);
        for (size_t r = 0; r < x.size(); ++r) {
            if (x[r] == 0.0) continue;
            for (int j = 0; j < kEmbedDim; ++j) out[static_cast<size_t>(j)] += x[r] * proj[r * kEmbedDim + j];
        }
        return out;
    }

    ModelConfig cfg_;
    std::vector<double> text_proj_;
    std::vector<double> image_proj_;
};

// Ingests externally computed scores (e.g. from a real pretrained teacher).
class FileTeacher : public Teacher {
public:
    explicit FileTeacher(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw InputError("teacher file: cannot open " + path);
        std::string line;
        size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            if (line.empty()) continue;
            try {
                nlohmann::json j = nlohmann::json::parse(line);
                by_id_[j.at("id").get<std::string>()] = j.at("scores").get<std::vector<double>>();
            } catch (const nlohmann::json::exception& e) {
                throw FormatError("teacher file: " + path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    std::vector<double> score(const EncodedExample& ex, const std::vector<int>&,
                              const std::vector<std::string>&) const override {
        auto it = by_id_.find(ex.id);
        if (it == by_id_.end()) throw LookupError("teacher file: no scores for document '" + ex.id + "'");
        if (it->second.size() != ex.image_patches.size()) {
            throw FormatError("teacher file: document '" + ex.id + "' has " + std::to_string(it->second.size()) +
                              " scores for " + std::to_string(ex.image_patches.size()) + " images");
        }
        return it->second;
    }

private:
    std::map<std::string, std::vector<double>> by_id_;
};

// ROUGE-ranking baseline: score per image is the ROUGE-L F1 of its caption
// against the summary. Requires a caption for every image.
class RougeRankTeacher : public Teacher {
public:
    std::vector<double> score(const EncodedExample& ex, const std::vector<int>&,
                              const std::vector<std::string>& summary_tokens) const override {
        std::vector<double> out;
        out.reserve(ex.image_patches.size());
        for (size_t i = 0; i < ex.image_patches.size(); ++i) {
            if (i >= ex.captions.size()) {
                throw InputError("rouge-rank: document '" + ex.id + "' image " + std::to_string(i) +
                                 " has no caption");
            }
            out.push_back(rouge_l(ex.captions[i], summary_tokens).f1);
        }
        return out;
    }
};

// Spec-level convenience wrappers.

inline TeacherScores mock_teacher_score(const EncodedExample& ex, const ModelConfig& cfg) {
    return {ex.id, MockTeacher(cfg).score_reference(ex)};
}

inline TeacherScores file_teacher_score(const std::string& path, const EncodedExample& ex) {
    return {ex.id, FileTeacher(path).score_reference(ex)};
}

inline TeacherScores rouge_rank(const EncodedExample& ex, const std::vector<std::string>& reference) {
    return {ex.id, RougeRankTeacher().score(ex, {}, reference)};
}

// Teacher-score JSONL: {"id": string, "scores": [float]} per line.

inline void write_teacher_scores(const std::vector<TeacherScores>& all, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw InputError("teacher scores: cannot open " + path + " for writing");
    for (const auto& ts : all) {
        nlohmann::json j{{"id", ts.id}, {"scores", ts.scores}};
        f << j.dump() << "\n";
    }
}

// Factory from a CLI-style spec: "mock", "file:<path>", or "rouge-rank".
inline std::unique_ptr<Teacher> make_teacher(const std::string& spec, const ModelConfig& cfg) {
    if (spec == "mock") return std::make_unique<MockTeacher>(cfg);
    if (spec.rfind("file:", 0) == 0) return std::make_unique<FileTeacher>(spec.substr(5));
    if (spec == "rouge-rank") return std::make_unique<RougeRankTeacher>();
    throw InputError("unknown teacher '" + spec + "' (expected mock, file:<path> or rouge-rank)");
}

}  // namespace unims
