#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "unims/config.hpp"
#include "unims/errors.hpp"
#include "unims/metrics.hpp"

namespace unims {

// Written into the output directory before any other artifact, so a run is
// reproducible from its manifest alone.
struct RunManifest {
    std::string command;
    RunConfig config;
    uint64_t seed = 0;
    std::vector<std::string> data_paths;
    std::string teacher;
    std::string out_dir;
};

inline void write_manifest(const RunManifest& m) {
    std::filesystem::create_directories(m.out_dir);
    nlohmann::json j{{"command", m.command}, {"config", m.config},   {"seed", m.seed},
                     {"data", m.data_paths}, {"teacher", m.teacher}, {"out", m.out_dir}};
    std::ofstream f(std::filesystem::path(m.out_dir) / "manifest.json");
    if (!f) throw InputError("manifest: cannot write to " + m.out_dir);
    f << j.dump(2) << "\n";
}

// Predictions JSONL: {id, abstractive tokens, extractive indices, image
// indices, scores} — generation decoupled from evaluation.

inline void write_predictions(const std::vector<Prediction>& preds, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw InputError("predictions: cannot write " + path);
    for (const auto& p : preds) {
        nlohmann::json j{{"id", p.id},
                         {"abstractive", p.abstractive},
                         {"extractive", p.extractive},
                         {"images", p.images},
                         {"image_scores", p.image_scores},
                         {"sentence_scores", p.sentence_scores}};
        f << j.dump() << "\n";
    }
}

inline std::vector<Prediction> read_predictions(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("predictions: cannot open " + path);
    std::vector<Prediction> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            Prediction p;
            p.id = j.at("id").get<std::string>();
            p.abstractive = j.value("abstractive", std::vector<std::string>{});
            p.extractive = j.value("extractive", std::vector<int>{});
            p.images = j.value("images", std::vector<int>{});
            p.image_scores = j.value("image_scores", std::vector<double>{});
            p.sentence_scores = j.value("sentence_scores", std::vector<double>{});
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("predictions: " + path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

// Worker cap: --threads flag first, UNIMS_THREADS next, else single-threaded.
inline int resolve_threads(int flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("UNIMS_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 1;
}

// Index-based parallel map; results land in caller-owned slots so output
// order never depends on scheduling.
inline void parallel_for(size_t count, int threads, const std::function<void(size_t)>& fn) {
    threads = std::max(1, std::min<int>(threads, static_cast<int>(count)));
    if (threads == 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    std::atomic<bool> failed{false};
    std::string error;
    std::mutex error_mu;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= count || failed.load()) return;
                try {
                    fn(i);
                } catch (const std::exception& e) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    failed.store(true);
                    if (error.empty()) error = e.what();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failed.load()) throw Error(error);
}

}  // namespace unims
