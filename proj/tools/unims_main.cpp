// unims: unified multimodal summarization at desk scale.
//
// Subcommands wire the library's pipelines together: build-vocab, oracle,
// teacher-scores, train, summarize, evaluate, analyze-ngrams, visualize.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "unims/config.hpp"
#include "unims/data.hpp"
#include "unims/decoding.hpp"
#include "unims/metrics.hpp"
#include "unims/model.hpp"
#include "unims/oracle.hpp"
#include "unims/runio.hpp"
#include "unims/teacher.hpp"
#include "unims/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string data_path;
    std::string val_path;
    std::string vocab_path;
    std::string teacher = "mock";
    std::string out_dir;
    std::string ckpt_path;
    std::string pred_paths;
    std::string ablation;
    uint64_t seed = 0;
    bool seed_set = false;
    int topk_images = 1;
    int threads = 0;
    int min_count = 1;
    int max_size = 50000;
    int beam_size = 0;
    double alpha = -1.0;
};

unims::RunConfig load_config_or_default(const CommonArgs& args) {
    unims::RunConfig rc;
    if (!args.config_path.empty()) rc = unims::load_run_config(args.config_path);
    if (args.seed_set) rc.model.seed = args.seed;
    if (!args.ablation.empty()) rc.ablation = unims::ablation_from_string(args.ablation);
    if (args.beam_size > 0) rc.beam_size = args.beam_size;
    if (args.alpha >= 0.0) rc.beam_alpha = args.alpha;
    return rc;
}

void save_vocab(const unims::Vocabulary& vocab, const std::string& path) {
    json j{{"tokens", vocab.entries()}};
    std::ofstream f(path);
    if (!f) throw unims::InputError("vocab: cannot write " + path);
    f << j.dump() << "\n";
}

unims::Vocabulary load_vocab(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw unims::InputError("vocab: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw unims::FormatError("vocab: " + path + ": " + e.what());
    }
    return unims::Vocabulary::from_entries(j.at("tokens").get<std::vector<std::string>>());
}

unims::Vocabulary obtain_vocab(const CommonArgs& args, const std::vector<unims::MultimodalDocument>& docs) {
    if (!args.vocab_path.empty()) return load_vocab(args.vocab_path);
    std::vector<std::vector<std::string>> streams;
    for (const auto& d : docs) {
        streams.push_back(d.document_tokens());
        streams.push_back(d.summary_tokens);
    }
    return unims::build_vocab(streams, args.min_count, args.max_size);
}

void apply_vocab(std::vector<unims::MultimodalDocument>& docs, const unims::Vocabulary& vocab) {
    for (auto& d : docs) {
        d.sentences.clear();
        for (const auto& s : d.sentence_tokens) d.sentences.push_back(vocab.encode(s));
        d.summary = vocab.encode(d.summary_tokens);
    }
}

std::vector<unims::EncodedExample> encode_corpus(const std::vector<unims::MultimodalDocument>& docs,
                                                 const unims::ModelConfig& cfg) {
    std::vector<unims::EncodedExample> out;
    out.reserve(docs.size());
    for (const auto& d : docs) out.push_back(unims::encode_document(d, cfg));
    return out;
}

unims::RunManifest make_manifest(const std::string& command, const CommonArgs& args,
                                 const unims::RunConfig& rc) {
    unims::RunManifest m;
    m.command = command;
    m.config = rc;
    m.seed = rc.model.seed;
    if (!args.data_path.empty()) m.data_paths.push_back(args.data_path);
    if (!args.val_path.empty()) m.data_paths.push_back(args.val_path);
    m.teacher = args.teacher;
    m.out_dir = args.out_dir;
    return m;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// ---------------------------------------------------------------------------

int cmd_build_vocab(const CommonArgs& args) {
    unims::RunConfig rc = load_config_or_default(args);
    unims::write_manifest(make_manifest("build-vocab", args, rc));
    auto docs = unims::read_jsonl_corpus(args.data_path);
    unims::Vocabulary vocab = obtain_vocab(args, docs);
    save_vocab(vocab, (fs::path(args.out_dir) / "vocab.json").string());
    std::cout << "build-vocab: " << docs.size() << " documents, " << vocab.size() << " ids ("
              << vocab.size() - unims::kNumReserved << " tokens + " << unims::kNumReserved
              << " reserved)\n";
    return 0;
}

int cmd_oracle(const CommonArgs& args) {
    unims::RunConfig rc = load_config_or_default(args);
    unims::write_manifest(make_manifest("oracle", args, rc));
    auto docs = unims::read_jsonl_corpus(args.data_path);
    std::vector<json> rows(docs.size());
    unims::parallel_for(docs.size(), unims::resolve_threads(args.threads), [&](size_t i) {
        unims::EncodedExample ex = unims::encode_document(docs[i], rc.model);
        unims::OracleLabels o = unims::greedy_oracle(ex.sentence_tokens, ex.summary_tokens);
        rows[i] = json{{"id", docs[i].id},
                       {"labels", o.labels},
                       {"selected", o.selected},
                       {"trace", o.trace},
                       {"degenerate", o.degenerate}};
    });
    std::ofstream f(fs::path(args.out_dir) / "oracle.jsonl");
    for (const auto& r : rows) f << r.dump() << "\n";
    std::cout << "oracle: labeled " << docs.size() << " documents -> oracle.jsonl\n";
    return 0;
}

int cmd_teacher_scores(const CommonArgs& args) {
    unims::RunConfig rc = load_config_or_default(args);
    unims::write_manifest(make_manifest("teacher-scores", args, rc));
    auto docs = unims::read_jsonl_corpus(args.data_path);
    unims::Vocabulary vocab = obtain_vocab(args, docs);
    apply_vocab(docs, vocab);
    rc.model.vocab_size = vocab.size();
    auto teacher = unims::make_teacher(args.teacher, rc.model);
    std::vector<unims::TeacherScores> scores(docs.size());
    unims::parallel_for(docs.size(), unims::resolve_threads(args.threads), [&](size_t i) {
        unims::EncodedExample ex = unims::encode_document(docs[i], rc.model);
        scores[i] = {docs[i].id, ex.n_images() > 0 ? teacher->score_reference(ex) : std::vector<double>{}};
    });
    unims::write_teacher_scores(scores, (fs::path(args.out_dir) / "teacher_scores.jsonl").string());
    std::cout << "teacher-scores: " << docs.size() << " documents -> teacher_scores.jsonl\n";
    return 0;
}

int cmd_train(const CommonArgs& args) {
    unims::RunConfig rc = load_config_or_default(args);
    unims::write_manifest(make_manifest("train", args, rc));
    auto docs = unims::read_jsonl_corpus(args.data_path);
    unims::Vocabulary vocab = obtain_vocab(args, docs);
    apply_vocab(docs, vocab);
    rc.model.vocab_size = vocab.size();
    rc.model.validate();
    save_vocab(vocab, (fs::path(args.out_dir) / "vocab.json").string());

    auto teacher = unims::make_teacher(args.teacher, rc.model);
    std::vector<unims::EncodedExample> examples = encode_corpus(docs, rc.model);
    unims::attach_supervision(examples, *teacher);

    std::vector<unims::EncodedExample> val;
    if (!args.val_path.empty()) {
        auto val_docs = unims::read_jsonl_corpus(args.val_path);
        apply_vocab(val_docs, vocab);
        val = encode_corpus(val_docs, rc.model);
        unims::attach_supervision(val, *teacher);
    }

    unims::Model model(rc.model);
    unims::TrainState state;
    if (!args.ckpt_path.empty()) {
        unims::LoadedCheckpoint resumed = unims::load_checkpoint(args.ckpt_path, &rc.model);
        model = std::move(*resumed.model);
        state = std::move(resumed.state);
        std::cout << "train: resumed from step " << state.step << "\n";
    }

    std::ofstream log_file(fs::path(args.out_dir) / "log.jsonl");
    unims::TrainOptions opts;
    opts.out_dir = args.out_dir;
    opts.ablation = rc.ablation;
    opts.on_step = [&](const unims::TrainLogEntry& e) {
        log_file << json{{"step", e.step},
                         {"kd", e.losses.kd},
                         {"ext", e.losses.ext},
                         {"abs", e.losses.abs},
                         {"total", e.losses.total},
                         {"lr", e.lr}}
                        .dump()
                 << "\n";
        if (e.step % rc.train.eval_interval == 0 || e.step == 1 || e.step == rc.train.total_steps) {
            std::printf("step %6lld  kd %.4f  ext %.4f  abs %.4f  total %.4f\n",
                        static_cast<long long>(e.step), e.losses.kd, e.losses.ext, e.losses.abs,
                        e.losses.total);
        }
    };
    unims::train_loop(model, examples, val, rc.train, state, vocab, opts);

    json best = json::array();
    for (const auto& e : state.best) {
        best.push_back({{"val_loss", e.val_loss}, {"step", e.step}, {"path", e.path}});
    }
    std::ofstream best_file(fs::path(args.out_dir) / "best.json");
    best_file << best.dump(2) << "\n";
    std::cout << "train: finished at step " << state.step << "; top-" << state.best.size()
              << " checkpoints in best.json\n";
    return 0;
}

int cmd_summarize(const CommonArgs& args) {
    unims::RunConfig rc = load_config_or_default(args);
    unims::LoadedCheckpoint ckpt = unims::load_checkpoint(args.ckpt_path);
    rc.model = ckpt.model->cfg;
    unims::write_manifest(make_manifest("summarize", args, rc));
    auto docs = unims::read_jsonl_corpus(args.data_path);
    apply_vocab(docs, ckpt.vocab);

    std::vector<unims::Prediction> preds(docs.size());
    unims::Model& model = *ckpt.model;
    unims::parallel_for(docs.size(), unims::resolve_threads(args.threads), [&](size_t i) {
        unims::EncodedExample ex = unims::encode_document(docs[i], model.cfg);
        unims::PaddedExample pe = unims::pad_single(ex, model.cfg);
        unims::EncoderOutput enc = unims::encode(model, pe);
        unims::Prediction p;
        p.id = ex.id;
        std::vector<int> tokens = unims::beam_search(model, enc, rc.beam_size, rc.beam_alpha,
                                                     model.cfg.max_decode_len, rc.ablation);
        p.abstractive = ckpt.vocab.decode(unims::strip_special(tokens));
        unims::Tensor sent = unims::sentence_select_scores(model, enc);
        p.sentence_scores = sent.values();
        p.extractive = unims::select_top_k(p.sentence_scores, 3);
        if (ex.n_images() > 0) {
            unims::Tensor img = unims::image_select_scores(model, enc);
            p.image_scores = img.values();
            p.images = unims::select_top_k(p.image_scores, args.topk_images);
        }
        preds[i] = std::move(p);
    });
    unims::write_predictions(preds, (fs::path(args.out_dir) / "predictions.jsonl").string());
    std::cout << "summarize: " << docs.size() << " documents -> predictions.jsonl (beam "
              << rc.beam_size << ", alpha " << rc.beam_alpha << ", top-" << args.topk_images
              << " images)\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args) {
    unims::RunConfig rc = load_config_or_default(args);
    unims::write_manifest(make_manifest("evaluate", args, rc));
    auto docs = unims::read_jsonl_corpus(args.data_path);
    unims::Vocabulary vocab = obtain_vocab(args, docs);
    apply_vocab(docs, vocab);
    rc.model.vocab_size = vocab.size();
    auto teacher = unims::make_teacher(args.teacher, rc.model);
    std::vector<unims::EncodedExample> examples = encode_corpus(docs, rc.model);

    std::vector<std::string> pred_files = split_csv(args.pred_paths);
    if (pred_files.empty()) throw unims::InputError("evaluate: --pred is required");
    json report;
    json runs = json::array();
    std::vector<json> means;
    for (const auto& path : pred_files) {
        auto preds = unims::read_predictions(path);
        unims::CorpusReport r = unims::build_report(docs, examples, preds, vocab, teacher.get());
        runs.push_back({{"pred", path}, {"report", r.json}});
        means.push_back(r.json.at("mean"));
    }
    report["runs"] = runs;
    if (means.size() > 1) {
        // metric averaging across checkpoints, not weight averaging
        json avg;
        auto avg_field = [&](const char* task, const char* metric) {
            double s = 0;
            for (const auto& m : means) s += m.at(task).at(metric).get<double>();
            avg[task][metric] = s / means.size();
        };
        for (const char* task : {"abstractive", "extractive"}) {
            for (const char* metric : {"r1", "r2", "rl"}) avg_field(task, metric);
        }
        double ip = 0;
        int ip_n = 0;
        double ms = 0;
        int ms_n = 0;
        for (const auto& m : means) {
            if (m.contains("ip")) {
                ip += m.at("ip").get<double>();
                ++ip_n;
            }
            if (m.contains("msim_proxy")) {
                ms += m.at("msim_proxy").get<double>();
                ++ms_n;
            }
        }
        if (ip_n) avg["ip"] = ip / ip_n;
        if (ms_n) avg["msim_proxy"] = ms / ms_n;
        report["averaged"] = avg;
    }
    std::ofstream f(fs::path(args.out_dir) / "report.json");
    f << report.dump(2) << "\n";
    const json& first = means.front();
    std::printf("evaluate: %zu run(s); abstractive R-1 %.4f R-2 %.4f R-L %.4f; extractive R-L %.4f",
                pred_files.size(), first.at("abstractive").at("r1").get<double>(),
                first.at("abstractive").at("r2").get<double>(),
                first.at("abstractive").at("rl").get<double>(),
                first.at("extractive").at("rl").get<double>());
    if (first.contains("ip")) std::printf("; IP %.4f", first.at("ip").get<double>());
    if (first.contains("msim_proxy")) std::printf("; M_sim~ %.4f", first.at("msim_proxy").get<double>());
    std::printf(" -> report.json\n");
    return 0;
}

int cmd_analyze_ngrams(const CommonArgs& args) {
    unims::RunConfig rc = load_config_or_default(args);
    unims::write_manifest(make_manifest("analyze-ngrams", args, rc));
    auto docs = unims::read_jsonl_corpus(args.data_path);
    auto preds = unims::read_predictions(args.pred_paths);
    std::map<std::string, const unims::MultimodalDocument*> by_id;
    for (const auto& d : docs) by_id[d.id] = &d;
    json curves = json::array();
    for (int n = 1; n <= 4; ++n) {
        double count = 0, recall = 0;
        int used = 0;
        for (const auto& p : preds) {
            auto it = by_id.find(p.id);
            if (it == by_id.end()) continue;
            unims::NovelNgramStats s =
                unims::novel_ngrams(p.abstractive, it->second->document_tokens(),
                                    it->second->summary_tokens, n);
            count += s.count;
            recall += s.novel_recall;
            ++used;
        }
        if (used == 0) throw unims::InputError("analyze-ngrams: no overlapping documents");
        curves.push_back({{"n", n}, {"mean_count", count / used}, {"mean_novel_recall", recall / used}});
    }
    std::ofstream f(fs::path(args.out_dir) / "ngrams.json");
    f << json{{"curves", curves}}.dump(2) << "\n";
    std::cout << "analyze-ngrams: curves for n=1..4 -> ngrams.json\n";
    return 0;
}

int cmd_visualize(const CommonArgs& args) {
    unims::RunConfig rc = load_config_or_default(args);
    unims::LoadedCheckpoint ckpt = unims::load_checkpoint(args.ckpt_path);
    rc.model = ckpt.model->cfg;
    unims::write_manifest(make_manifest("visualize", args, rc));
    auto docs = unims::read_jsonl_corpus(args.data_path);
    apply_vocab(docs, ckpt.vocab);
    unims::Model& model = *ckpt.model;
    std::vector<json> rows(docs.size());
    unims::parallel_for(docs.size(), unims::resolve_threads(args.threads), [&](size_t i) {
        unims::EncodedExample ex = unims::encode_document(docs[i], model.cfg);
        unims::EncoderOutput enc = unims::encode(model, unims::pad_single(ex, model.cfg));
        unims::ImportanceMaps maps = unims::cross_modal_importance(model, enc);
        rows[i] = json{{"id", ex.id},
                       {"tokens", ckpt.vocab.decode(ex.text_ids)},
                       {"token_importance", maps.token_importance},
                       {"patch_importance", maps.patch_importance}};
    });
    std::ofstream f(fs::path(args.out_dir) / "importance_maps.jsonl");
    for (const auto& r : rows) f << r.dump() << "\n";
    std::cout << "visualize: " << docs.size() << " documents -> importance_maps.jsonl\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unims: unified multimodal summarization (desk scale)"};
    app.require_subcommand(1);
    CommonArgs args;

    auto add_common = [&args](CLI::App* cmd, bool needs_data, bool needs_out) {
        auto* d = cmd->add_option("--data", args.data_path, "dataset JSONL");
        if (needs_data) d->required();
        auto* o = cmd->add_option("--out", args.out_dir, "output directory");
        if (needs_out) o->required();
        cmd->add_option("--config", args.config_path, "run config JSON");
        cmd->add_option("--seed", args.seed, "seed override")->each([&args](const std::string&) {
            args.seed_set = true;
        });
        cmd->add_option("--threads", args.threads, "worker cap (UNIMS_THREADS as fallback)");
        cmd->add_option("--ablation", args.ablation, "none|no-visual-guide|no-ext|no-both");
        cmd->add_option("--vocab", args.vocab_path, "vocabulary JSON");
    };

    CLI::App* build_vocab = app.add_subcommand("build-vocab", "build a vocabulary from a corpus");
    add_common(build_vocab, true, true);
    build_vocab->add_option("--min-count", args.min_count, "minimum token frequency");
    build_vocab->add_option("--max-size", args.max_size, "maximum non-reserved entries");

    CLI::App* oracle = app.add_subcommand("oracle", "greedy extractive oracle labels");
    add_common(oracle, true, true);

    CLI::App* teacher_scores = app.add_subcommand("teacher-scores", "image-relevance teacher scores");
    add_common(teacher_scores, true, true);
    teacher_scores->add_option("--teacher", args.teacher, "mock|file:<path>|rouge-rank");

    CLI::App* train = app.add_subcommand("train", "multitask training");
    add_common(train, true, true);
    train->add_option("--teacher", args.teacher, "mock|file:<path>|rouge-rank");
    train->add_option("--val", args.val_path, "validation JSONL");
    train->add_option("--resume", args.ckpt_path, "checkpoint base path to resume from");

    CLI::App* summarize = app.add_subcommand("summarize", "generate multimodal summaries");
    add_common(summarize, true, true);
    summarize->add_option("--ckpt", args.ckpt_path, "checkpoint base path")->required();
    summarize->add_option("--topk-images", args.topk_images, "images to select");
    summarize->add_option("--beam-size", args.beam_size, "beam width");
    summarize->add_option("--alpha", args.alpha, "length penalty exponent");

    CLI::App* evaluate = app.add_subcommand("evaluate", "score predictions against references");
    add_common(evaluate, true, true);
    evaluate->add_option("--pred", args.pred_paths, "predictions JSONL (comma-separated for top-k averaging)")
        ->required();
    evaluate->add_option("--teacher", args.teacher, "teacher for the M_sim proxy");

    CLI::App* analyze = app.add_subcommand("analyze-ngrams", "novel n-gram analysis");
    add_common(analyze, true, true);
    analyze->add_option("--pred", args.pred_paths, "predictions JSONL")->required();

    CLI::App* visualize = app.add_subcommand("visualize", "cross-modal importance maps");
    add_common(visualize, true, true);
    visualize->add_option("--ckpt", args.ckpt_path, "checkpoint base path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (build_vocab->parsed()) return cmd_build_vocab(args);
        if (oracle->parsed()) return cmd_oracle(args);
        if (teacher_scores->parsed()) return cmd_teacher_scores(args);
        if (train->parsed()) return cmd_train(args);
        if (summarize->parsed()) return cmd_summarize(args);
        if (evaluate->parsed()) return cmd_evaluate(args);
        if (analyze->parsed()) return cmd_analyze_ngrams(args);
        if (visualize->parsed()) return cmd_visualize(args);
    } catch (const unims::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 2;
    } catch (const unims::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
