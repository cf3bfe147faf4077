#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "unims/config.hpp"
#include "unims/data.hpp"
#include "unims/model.hpp"
#include "unims/oracle.hpp"
#include "unims/teacher.hpp"

namespace unims {

// Linear warmup to peak, then linear decay to zero at `total`.
inline double lr_schedule(int step, int warmup, int total, double peak) {
    if (warmup >= total) throw ConfigError("lr_schedule: warmup must be < total");
    if (step < 1 || step > total) throw InputError("lr_schedule: step " + std::to_string(step) + " out of range");
    if (warmup > 0 && step <= warmup) return peak * step / warmup;
    return peak * (total - step) / (total - warmup);
}

struct CheckpointEntry {
    double val_loss = 0.0;
    int64_t step = 0;
    std::string path;
};

struct TrainState {
    int64_t step = 0;
    std::map<std::string, std::vector<double>> adam_m;
    std::map<std::string, std::vector<double>> adam_v;
    std::vector<CheckpointEntry> best;  // ascending val_loss, size <= keep_best
};

struct StepLosses {
    double kd = 0.0, ext = 0.0, abs = 0.0, total = 0.0;
};

inline double global_grad_norm(Model& m) {
    double sq = 0.0;
    m.visit_params([&sq](const std::string&, Tensor& t) {
        for (double g : t.grads()) sq += g * g;
    });
    return std::sqrt(sq);
}

inline void clip_gradients(Model& m, double max_norm) {
    if (max_norm <= 0.0) return;
    double norm = global_grad_norm(m);
    if (norm <= max_norm) return;
    const double factor = max_norm / norm;
    m.visit_params([factor](const std::string&, Tensor& t) {
        for (double& g : t.grads()) g *= factor;
    });
}

inline void adam_update(Model& m, TrainState& state, const TrainConfig& tc, double lr) {
    const double b1 = tc.adam_beta1, b2 = tc.adam_beta2, eps = tc.adam_eps;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(b1, t);
    const double bc2 = 1.0 - std::pow(b2, t);
    m.visit_params([&](const std::string& name, Tensor& p) {
        auto& mo = state.adam_m[name];
        auto& vo = state.adam_v[name];
        if (mo.size() != p.values().size()) mo.assign(p.values().size(), 0.0);
        if (vo.size() != p.values().size()) vo.assign(p.values().size(), 0.0);
        for (size_t i = 0; i < p.values().size(); ++i) {
            double g = p.grads()[i];
            mo[i] = b1 * mo[i] + (1.0 - b1) * g;
            vo[i] = b2 * vo[i] + (1.0 - b2) * g * g;
            double mhat = mo[i] / bc1;
            double vhat = vo[i] / bc2;
            p.values()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    });
}

// --------------------------------------------------------------------------
// Supervision attachment
// --------------------------------------------------------------------------

inline void attach_supervision(std::vector<EncodedExample>& examples, const Teacher& teacher) {
    for (auto& ex : examples) {
        if (ex.n_images() > 0) ex.teacher_scores = teacher.score_reference(ex);
        OracleLabels oracle = greedy_oracle(ex.sentence_tokens, ex.summary_tokens);
        ex.oracle_labels = oracle.labels;
        ex.oracle_degenerate = oracle.degenerate;
    }
}

// --------------------------------------------------------------------------
// Deterministic batch order: epoch e is a seeded shuffle, batches are
// consecutive chunks, so any step's batch is a pure function of (seed, step).
// --------------------------------------------------------------------------

class BatchSchedule {
public:
    BatchSchedule(size_t corpus_size, int batch_size, uint64_t seed)
        : n_(corpus_size), batch_(static_cast<size_t>(batch_size)), seed_(seed) {
        if (n_ == 0) throw InputError("training: empty corpus");
    }

    std::vector<size_t> batch_indices(int64_t step) const {
        std::vector<size_t> out;
        out.reserve(batch_);
        uint64_t start = static_cast<uint64_t>(step - 1) * batch_;
        for (size_t i = 0; i < batch_; ++i) {
            uint64_t pos = start + i;
            uint64_t epoch = pos / n_;
            out.push_back(permutation(epoch)[pos % n_]);
        }
        return out;
    }

private:
    const std::vector<size_t>& permutation(uint64_t epoch) const {
        auto it = cache_.find(epoch);
        if (it != cache_.end()) return it->second;
        std::vector<size_t> perm(n_);
        for (size_t i = 0; i < n_; ++i) perm[i] = i;
        std::mt19937_64 rng(mix_seed(seed_, 1000 + epoch));
        for (size_t i = n_; i > 1; --i) {
            size_t j = static_cast<size_t>(rng() % i);
            std::swap(perm[i - 1], perm[j]);
        }
        if (cache_.size() > 4) cache_.clear();
        return cache_.emplace(epoch, std::move(perm)).first->second;
    }

    size_t n_;
    size_t batch_;
    uint64_t seed_;
    mutable std::map<uint64_t, std::vector<size_t>> cache_;
};

// --------------------------------------------------------------------------
// Optimization step
// --------------------------------------------------------------------------

inline StepLosses train_step(Model& m, const std::vector<const EncodedExample*>& batch, TrainState& state,
                             const TrainConfig& tc, Ablation ablation, const DropoutCtx& drop = {}) {
    m.zero_grads();
    Tape tape;
    StepLosses losses;
    {
        Tape::Scope scope(tape);
        std::vector<PaddedExample> padded = assemble_batch(batch, m.cfg);
        Tensor batch_total;
        for (const PaddedExample& pe : padded) {
            ForwardResult r = forward_losses(m, pe, ablation, drop);
            losses.kd += r.kd.item();
            losses.ext += r.ext.item();
            losses.abs += r.abs.item();
            batch_total = batch_total.defined() ? add(batch_total, r.total) : r.total;
        }
        const double inv = 1.0 / static_cast<double>(padded.size());
        batch_total = scale(batch_total, inv);
        losses.kd *= inv;
        losses.ext *= inv;
        losses.abs *= inv;
        losses.total = batch_total.item();
        if (!std::isfinite(losses.total)) {
            throw NumericError("train: non-finite loss at step " + std::to_string(state.step + 1) +
                               " (kd=" + std::to_string(losses.kd) + " ext=" + std::to_string(losses.ext) +
                               " abs=" + std::to_string(losses.abs) + ")");
        }
        tape.backward(batch_total);
    }
    clip_gradients(m, tc.clip_norm);
    state.step += 1;
    adam_update(m, state, tc, lr_schedule(static_cast<int>(state.step), tc.warmup_steps, tc.total_steps, tc.peak_lr));
    return losses;
}

inline double validation_loss(Model& m, const std::vector<EncodedExample>& val, const TrainConfig& tc,
                              Ablation ablation) {
    double total = 0.0;
    size_t count = 0;
    for (size_t at = 0; at < val.size(); at += static_cast<size_t>(tc.batch_size)) {
        std::vector<const EncodedExample*> batch;
        for (size_t i = at; i < std::min(val.size(), at + static_cast<size_t>(tc.batch_size)); ++i) {
            batch.push_back(&val[i]);
        }
        for (const PaddedExample& pe : assemble_batch(batch, m.cfg)) {
            total += forward_losses(m, pe, ablation).total.item();
            ++count;
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

// --------------------------------------------------------------------------
// Checkpoints: JSON manifest + flat little-endian f64 payload, bit-exact
// round trip.
// --------------------------------------------------------------------------

static_assert(sizeof(double) == 8, "checkpoint format assumes 64-bit doubles");

namespace detail {

inline void append_tensor_entry(nlohmann::json& list, const std::string& name, const Shape& shape,
                                size_t offset, size_t numel) {
    list.push_back({{"name", name}, {"shape", shape}, {"offset", offset}, {"numel", numel}});
}

}  // namespace detail

inline void save_checkpoint(Model& m, const TrainState& state, const Vocabulary& vocab,
                            const std::string& path_base) {
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<const std::vector<double>*> blocks;
    size_t offset = 0;
    auto add_block = [&](const std::string& name, const Shape& shape, const std::vector<double>& data) {
        detail::append_tensor_entry(tensors, name, shape, offset, data.size());
        blocks.push_back(&data);
        offset += data.size();
    };
    m.visit_params([&](const std::string& name, Tensor& t) { add_block(name, t.shape(), t.values()); });
    for (const auto& [name, data] : state.adam_m) add_block("adam.m." + name, {static_cast<int>(data.size())}, data);
    for (const auto& [name, data] : state.adam_v) add_block("adam.v." + name, {static_cast<int>(data.size())}, data);

    nlohmann::json best = nlohmann::json::array();
    for (const auto& e : state.best) {
        best.push_back({{"val_loss", e.val_loss}, {"step", e.step}, {"path", e.path}});
    }
    nlohmann::json manifest{{"format", "unims-ckpt-v1"},
                            {"step", state.step},
                            {"config", m.cfg},
                            {"vocab", vocab.entries()},
                            {"tensors", tensors},
                            {"best", best}};
    {
        std::ofstream jf(path_base + ".json");
        if (!jf) throw InputError("checkpoint: cannot write " + path_base + ".json");
        jf << manifest.dump(2) << "\n";
    }
    std::ofstream bf(path_base + ".bin", std::ios::binary);
    if (!bf) throw InputError("checkpoint: cannot write " + path_base + ".bin");
    for (const auto* block : blocks) {
        for (double v : *block) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            unsigned char b[8];
            for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>((bits >> (8 * k)) & 0xff);
            bf.write(reinterpret_cast<char*>(b), 8);
        }
    }
}

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    TrainState state;
    Vocabulary vocab;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path_base,
                                        const ModelConfig* expected_config = nullptr) {
    std::ifstream jf(path_base + ".json");
    if (!jf) throw InputError("checkpoint: cannot open " + path_base + ".json");
    nlohmann::json manifest;
    try {
        jf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint: bad manifest " + path_base + ".json: " + e.what());
    }
    if (manifest.value("format", "") != "unims-ckpt-v1") {
        throw FormatError("checkpoint: unknown format in " + path_base + ".json");
    }
    LoadedCheckpoint out;
    ModelConfig cfg = manifest.at("config").get<ModelConfig>();
    if (expected_config != nullptr) {
        std::string field = config_mismatch(*expected_config, cfg);
        if (!field.empty()) {
            throw ConfigError("checkpoint: config mismatch on field '" + field + "'");
        }
    }
    out.vocab = Vocabulary::from_entries(manifest.at("vocab").get<std::vector<std::string>>());
    out.model = std::make_unique<Model>(cfg);
    out.state.step = manifest.at("step").get<int64_t>();
    for (const auto& e : manifest.value("best", nlohmann::json::array())) {
        out.state.best.push_back({e.at("val_loss").get<double>(), e.at("step").get<int64_t>(),
                                  e.at("path").get<std::string>()});
    }

    std::ifstream bf(path_base + ".bin", std::ios::binary);
    if (!bf) throw InputError("checkpoint: cannot open " + path_base + ".bin");
    std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
    auto read_block = [&payload, &path_base](size_t offset, size_t numel, const std::string& name,
                                             std::vector<double>& dst) {
        if ((offset + numel) * 8 > payload.size()) {
            throw IntegrityError("checkpoint: payload truncated at tensor '" + name + "' in " + path_base);
        }
        dst.resize(numel);
        for (size_t i = 0; i < numel; ++i) {
            uint64_t bits = 0;
            for (int k = 0; k < 8; ++k) bits |= static_cast<uint64_t>(payload[(offset + i) * 8 + k]) << (8 * k);
            std::memcpy(&dst[i], &bits, 8);
        }
    };

    std::map<std::string, Tensor*> params;
    out.model->visit_params([&params](const std::string& name, Tensor& t) { params[name] = &t; });
    size_t expected_total = 0;
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const size_t offset = entry.at("offset").get<size_t>();
        const size_t numel = entry.at("numel").get<size_t>();
        expected_total += numel;
        if (name.rfind("adam.m.", 0) == 0) {
            read_block(offset, numel, name, out.state.adam_m[name.substr(7)]);
        } else if (name.rfind("adam.v.", 0) == 0) {
            read_block(offset, numel, name, out.state.adam_v[name.substr(7)]);
        } else {
            auto it = params.find(name);
            if (it == params.end()) throw IntegrityError("checkpoint: unknown tensor '" + name + "'");
            Shape shape = entry.at("shape").get<Shape>();
            if (shape != it->second->shape() || numel != it->second->values().size()) {
                throw IntegrityError("checkpoint: shape mismatch for tensor '" + name + "'");
            }
            read_block(offset, numel, name, it->second->values());
        }
    }
    if (expected_total * 8 != payload.size()) {
        throw IntegrityError("checkpoint: payload size " + std::to_string(payload.size()) + " != manifest total " +
                             std::to_string(expected_total * 8) + " bytes");
    }
    return out;
}

// --------------------------------------------------------------------------
// Training loop with validation-driven best-k checkpoint selection.
// --------------------------------------------------------------------------

struct TrainLogEntry {
    int64_t step = 0;
    StepLosses losses;
    double lr = 0.0;
};

struct TrainOptions {
    std::string out_dir;  // empty = keep everything in memory
    Ablation ablation = Ablation::kNone;
    int64_t stop_after = 0;  // pause the loop at this step; 0 = run to total_steps
    std::function<void(const TrainLogEntry&)> on_step;
};

inline std::string checkpoint_base(const std::string& out_dir, int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%06lld", static_cast<long long>(step));
    return (std::filesystem::path(out_dir) / "checkpoints" / buf).string();
}

inline std::vector<TrainLogEntry> train_loop(Model& m, const std::vector<EncodedExample>& corpus,
                                             const std::vector<EncodedExample>& validation,
                                             const TrainConfig& tc, TrainState& state,
                                             const Vocabulary& vocab, const TrainOptions& opts = {}) {
    tc.validate();
    BatchSchedule schedule(corpus.size(), tc.batch_size, m.cfg.seed);
    std::mt19937_64 dropout_rng(mix_seed(m.cfg.seed, 2000));
    DropoutCtx drop{m.cfg.dropout, &dropout_rng};
    const bool persist = !opts.out_dir.empty();
    if (persist) {
        std::filesystem::create_directories(std::filesystem::path(opts.out_dir) / "checkpoints");
    }
    std::vector<TrainLogEntry> log;
    const int64_t stop = opts.stop_after > 0 ? std::min<int64_t>(opts.stop_after, tc.total_steps)
                                             : tc.total_steps;
    while (state.step < stop) {
        std::vector<const EncodedExample*> batch;
        for (size_t idx : schedule.batch_indices(state.step + 1)) batch.push_back(&corpus[idx]);
        StepLosses losses = train_step(m, batch, state, tc, opts.ablation, drop);
        TrainLogEntry entry{state.step, losses,
                            lr_schedule(static_cast<int>(state.step), tc.warmup_steps, tc.total_steps, tc.peak_lr)};
        log.push_back(entry);
        if (opts.on_step) opts.on_step(entry);

        if (state.step % tc.eval_interval == 0 || state.step == tc.total_steps) {
            const std::vector<EncodedExample>& val = validation.empty() ? corpus : validation;
            double val_loss = validation_loss(m, val, tc, opts.ablation);
            CheckpointEntry ce{val_loss, state.step,
                               persist ? checkpoint_base(opts.out_dir, state.step) : std::string()};
            state.best.push_back(ce);
            std::stable_sort(state.best.begin(), state.best.end(),
                             [](const CheckpointEntry& a, const CheckpointEntry& b) {
                                 return a.val_loss < b.val_loss;
                             });
            std::vector<CheckpointEntry> dropped(state.best.begin() + std::min<size_t>(state.best.size(),
                                                                                       static_cast<size_t>(tc.keep_best)),
                                                 state.best.end());
            state.best.resize(std::min<size_t>(state.best.size(), static_cast<size_t>(tc.keep_best)));
            if (persist) {
                bool kept = false;
                for (const auto& e : state.best) kept |= e.step == state.step;
                if (kept) save_checkpoint(m, state, vocab, ce.path);
                for (const auto& e : dropped) {
                    if (!e.path.empty() && e.step != state.step) {
                        std::error_code ec;
                        std::filesystem::remove(e.path + ".json", ec);
                        std::filesystem::remove(e.path + ".bin", ec);
                    }
                }
            }
        }
    }
    return log;
}

}  // namespace unims
