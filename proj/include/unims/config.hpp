#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "unims/errors.hpp"

namespace unims {

enum class Ablation { kNone, kNoVisualGuide, kNoExt, kNoBoth };

inline Ablation ablation_from_string(const std::string& s) {
    if (s == "none") return Ablation::kNone;
    if (s == "no-visual-guide") return Ablation::kNoVisualGuide;
    if (s == "no-ext") return Ablation::kNoExt;
    if (s == "no-both") return Ablation::kNoBoth;
    throw ConfigError("unknown ablation '" + s + "'");
}

inline std::string ablation_to_string(Ablation a) {
    switch (a) {
        case Ablation::kNone: return "none";
        case Ablation::kNoVisualGuide: return "no-visual-guide";
        case Ablation::kNoExt: return "no-ext";
        case Ablation::kNoBoth: return "no-both";
    }
    return "none";
}

inline bool ablation_drops_visual_guide(Ablation a) {
    return a == Ablation::kNoVisualGuide || a == Ablation::kNoBoth;
}

inline bool ablation_drops_ext(Ablation a) {
    return a == Ablation::kNoExt || a == Ablation::kNoBoth;
}

struct ModelConfig {
    int d_model = 32;
    int n_enc_layers = 2;
    int n_dec_layers = 2;
    int n_heads = 4;
    int ffn_dim = 64;
    int vocab_size = 0;  // set once the vocabulary is known
    int patch_size = 8;
    int image_resolution = 32;
    int image_channels = 3;
    int max_images = 4;
    int max_text_tokens = 128;
    double kd_temperature = 10.0;
    int kd_tap_layer = 0;  // 0 means "last encoder layer"
    std::string ext_loss_mode = "bce";  // bce | softmax_nll
    int max_decode_len = 32;
    double dropout = 0.0;
    uint64_t seed = 7;

    int patches_per_image() const {
        return (image_resolution / patch_size) * (image_resolution / patch_size);
    }
    int patch_dim() const { return patch_size * patch_size * image_channels; }
    int visual_tokens_per_image() const { return 1 + patches_per_image(); }
    int max_visual_tokens() const { return max_images * visual_tokens_per_image(); }
    int max_joint_tokens() const { return max_text_tokens + max_visual_tokens(); }
    int tap_layer() const { return kd_tap_layer == 0 ? n_enc_layers : kd_tap_layer; }

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
            throw ConfigError("d_model must be a positive multiple of n_heads");
        }
        if (n_enc_layers < 1 || n_dec_layers < 1) throw ConfigError("need at least one layer per stack");
        if (patch_size <= 0 || image_resolution % patch_size != 0) {
            throw ConfigError("image_resolution must be divisible by patch_size");
        }
        if (image_channels != 1 && image_channels != 3) throw ConfigError("image_channels must be 1 or 3");
        if (max_images < 1 || max_text_tokens < 3) throw ConfigError("max_images/max_text_tokens too small");
        if (kd_temperature <= 0.0) throw ConfigError("kd_temperature must be positive");
        if (kd_tap_layer < 0 || kd_tap_layer > n_enc_layers) {
            throw ConfigError("kd_tap_layer must be in [1, n_enc_layers] (or 0 for last)");
        }
        if (ext_loss_mode != "bce" && ext_loss_mode != "softmax_nll") {
            throw ConfigError("ext_loss_mode must be 'bce' or 'softmax_nll'");
        }
        if (max_decode_len < 1) throw ConfigError("max_decode_len must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    }
};

struct TrainConfig {
    int batch_size = 8;
    double peak_lr = 1e-4;
    int total_steps = 2000;
    int warmup_steps = 50;
    int eval_interval = 200;
    double clip_norm = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int keep_best = 3;

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
        if (warmup_steps >= total_steps) throw ConfigError("warmup_steps must be < total_steps");
        if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
        if (peak_lr <= 0.0) throw ConfigError("peak_lr must be positive");
        if (keep_best < 1) throw ConfigError("keep_best must be >= 1");
    }
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    Ablation ablation = Ablation::kNone;
    double beam_alpha = 1.8;  // midpoint of the tuned 1.6..2.0 range
    int beam_size = 5;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"d_model", c.d_model},
                       {"n_enc_layers", c.n_enc_layers},
                       {"n_dec_layers", c.n_dec_layers},
                       {"n_heads", c.n_heads},
                       {"ffn_dim", c.ffn_dim},
                       {"vocab_size", c.vocab_size},
                       {"patch_size", c.patch_size},
                       {"image_resolution", c.image_resolution},
                       {"image_channels", c.image_channels},
                       {"max_images", c.max_images},
                       {"max_text_tokens", c.max_text_tokens},
                       {"kd_temperature", c.kd_temperature},
                       {"kd_tap_layer", c.kd_tap_layer},
                       {"ext_loss_mode", c.ext_loss_mode},
                       {"max_decode_len", c.max_decode_len},
                       {"dropout", c.dropout},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.d_model = j.value("d_model", d.d_model);
    c.n_enc_layers = j.value("n_enc_layers", d.n_enc_layers);
    c.n_dec_layers = j.value("n_dec_layers", d.n_dec_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.patch_size = j.value("patch_size", d.patch_size);
    c.image_resolution = j.value("image_resolution", d.image_resolution);
    c.image_channels = j.value("image_channels", d.image_channels);
    c.max_images = j.value("max_images", d.max_images);
    c.max_text_tokens = j.value("max_text_tokens", d.max_text_tokens);
    c.kd_temperature = j.value("kd_temperature", d.kd_temperature);
    c.kd_tap_layer = j.value("kd_tap_layer", d.kd_tap_layer);
    c.ext_loss_mode = j.value("ext_loss_mode", d.ext_loss_mode);
    c.max_decode_len = j.value("max_decode_len", d.max_decode_len);
    c.dropout = j.value("dropout", d.dropout);
    c.seed = j.value("seed", d.seed);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"batch_size", c.batch_size},
                       {"peak_lr", c.peak_lr},
                       {"total_steps", c.total_steps},
                       {"warmup_steps", c.warmup_steps},
                       {"eval_interval", c.eval_interval},
                       {"clip_norm", c.clip_norm},
                       {"adam_beta1", c.adam_beta1},
                       {"adam_beta2", c.adam_beta2},
                       {"adam_eps", c.adam_eps},
                       {"keep_best", c.keep_best}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.batch_size = j.value("batch_size", d.batch_size);
    c.peak_lr = j.value("peak_lr", d.peak_lr);
    c.total_steps = j.value("total_steps", d.total_steps);
    c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
    c.eval_interval = j.value("eval_interval", d.eval_interval);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.keep_best = j.value("keep_best", d.keep_best);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"train", c.train},
                       {"ablation", ablation_to_string(c.ablation)},
                       {"beam_alpha", c.beam_alpha},
                       {"beam_size", c.beam_size}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    RunConfig d;
    c.model = j.value("model", d.model);
    c.train = j.value("train", d.train);
    c.ablation = ablation_from_string(j.value("ablation", std::string("none")));
    c.beam_alpha = j.value("beam_alpha", d.beam_alpha);
    c.beam_size = j.value("beam_size", d.beam_size);
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("config: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config: " + path + ": " + e.what());
    }
    RunConfig c = j.get<RunConfig>();
    c.model.validate();
    c.train.validate();
    return c;
}

// Names the first differing field, for checkpoint/config compatibility checks.
inline std::string config_mismatch(const ModelConfig& a, const ModelConfig& b) {
    nlohmann::json ja = a, jb = b;
    for (auto it = ja.begin(); it != ja.end(); ++it) {
        if (jb.at(it.key()) != it.value()) return it.key();
    }
    return "";
}

}  // namespace unims
