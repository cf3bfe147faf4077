#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "unims/config.hpp"
#include "unims/data.hpp"
#include "unims/ops.hpp"
#include "unims/tensor.hpp"
#include "unims/text.hpp"

namespace unims {

struct LinearParams {
    Tensor w;  // [in x out]
    Tensor b;  // [out]
};

struct AttnParams {
    LinearParams q, k, v, o;
};

struct LayerNormParams {
    Tensor gain, bias;
};

struct FfnParams {
    LinearParams in, out;
};

struct EncLayerParams {
    AttnParams self_attn;
    LayerNormParams ln_attn;
    FfnParams ffn;
    LayerNormParams ln_ffn;
};

// Each decoder layer owns two structurally identical cross-attention blocks;
// the visual one runs first (that order is the model).
struct DecLayerParams {
    AttnParams self_attn;
    LayerNormParams ln_self;
    AttnParams cross_visual;
    LayerNormParams ln_visual;
    AttnParams cross_text;
    LayerNormParams ln_text;
    FfnParams ffn;
    LayerNormParams ln_ffn;
};

class Model {
public:
    ModelConfig cfg;
    Tensor tok_embed;   // [vocab x d]; also the tied output projection
    Tensor patch_proj;  // [patch_dim x d]
    Tensor v_cls;       // [1 x patch_dim], stacked atop the patches before projection
    Tensor v_pos;       // [(1 + patches) x d], shared across image slots
    Tensor e_pos;       // [max joint length x d]
    Tensor dec_pos;     // [max_decode_len + 1 x d]
    std::vector<EncLayerParams> enc_layers;
    std::vector<DecLayerParams> dec_layers;
    LinearParams img_head;  // g_v: d -> 1
    LinearParams ext_head;  // g_t: d -> 1

    explicit Model(const ModelConfig& config) : cfg(config) {
        cfg.validate();
        if (cfg.vocab_size <= 0) throw ConfigError("model: vocab_size not set");
        const int d = cfg.d_model;
        tok_embed = Tensor::zeros({cfg.vocab_size, d}, true);
        patch_proj = Tensor::zeros({cfg.patch_dim(), d}, true);
        v_cls = Tensor::zeros({1, cfg.patch_dim()}, true);
        v_pos = Tensor::zeros({cfg.visual_tokens_per_image(), d}, true);
        e_pos = Tensor::zeros({cfg.max_joint_tokens(), d}, true);
        dec_pos = Tensor::zeros({cfg.max_decode_len + 1, d}, true);
        enc_layers.resize(static_cast<size_t>(cfg.n_enc_layers));
        dec_layers.resize(static_cast<size_t>(cfg.n_dec_layers));
        for (auto& l : enc_layers) {
            init_attn(l.self_attn, d);
            init_ln(l.ln_attn, d);
            init_ffn(l.ffn, d, cfg.ffn_dim);
            init_ln(l.ln_ffn, d);
        }
        for (auto& l : dec_layers) {
            init_attn(l.self_attn, d);
            init_ln(l.ln_self, d);
            init_attn(l.cross_visual, d);
            init_ln(l.ln_visual, d);
            init_attn(l.cross_text, d);
            init_ln(l.ln_text, d);
            init_ffn(l.ffn, d, cfg.ffn_dim);
            init_ln(l.ln_ffn, d);
        }
        img_head.w = Tensor::zeros({d, 1}, true);
        img_head.b = Tensor::zeros({1}, true);
        ext_head.w = Tensor::zeros({d, 1}, true);
        ext_head.b = Tensor::zeros({1}, true);
        init_weights();
    }

    // Stable visiting order; checkpoint layout and init order both follow it.
    void visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
        fn("tok_embed", tok_embed);
        fn("patch_proj", patch_proj);
        fn("v_cls", v_cls);
        fn("v_pos", v_pos);
        fn("e_pos", e_pos);
        fn("dec_pos", dec_pos);
        for (size_t i = 0; i < enc_layers.size(); ++i) {
            std::string p = "enc." + std::to_string(i) + ".";
            visit_attn(fn, p + "self.", enc_layers[i].self_attn);
            visit_ln(fn, p + "ln_attn.", enc_layers[i].ln_attn);
            visit_ffn(fn, p + "ffn.", enc_layers[i].ffn);
            visit_ln(fn, p + "ln_ffn.", enc_layers[i].ln_ffn);
        }
        for (size_t i = 0; i < dec_layers.size(); ++i) {
            std::string p = "dec." + std::to_string(i) + ".";
            visit_attn(fn, p + "self.", dec_layers[i].self_attn);
            visit_ln(fn, p + "ln_self.", dec_layers[i].ln_self);
            visit_attn(fn, p + "cross_v.", dec_layers[i].cross_visual);
            visit_ln(fn, p + "ln_v.", dec_layers[i].ln_visual);
            visit_attn(fn, p + "cross_t.", dec_layers[i].cross_text);
            visit_ln(fn, p + "ln_t.", dec_layers[i].ln_text);
            visit_ffn(fn, p + "ffn.", dec_layers[i].ffn);
            visit_ln(fn, p + "ln_ffn.", dec_layers[i].ln_ffn);
        }
        fn("img_head.w", img_head.w);
        fn("img_head.b", img_head.b);
        fn("ext_head.w", ext_head.w);
        fn("ext_head.b", ext_head.b);
    }

    void zero_grads() {
        visit_params([](const std::string&, Tensor& t) { t.zero_grad(); });
    }

private:
    static void init_attn(AttnParams& a, int d) {
        for (LinearParams* l : {&a.q, &a.k, &a.v, &a.o}) {
            l->w = Tensor::zeros({d, d}, true);
            l->b = Tensor::zeros({d}, true);
        }
    }
    static void init_ffn(FfnParams& f, int d, int ffn_dim) {
        f.in.w = Tensor::zeros({d, ffn_dim}, true);
        f.in.b = Tensor::zeros({ffn_dim}, true);
        f.out.w = Tensor::zeros({ffn_dim, d}, true);
        f.out.b = Tensor::zeros({d}, true);
    }
    static void init_ln(LayerNormParams& l, int d) {
        l.gain = Tensor::zeros({d}, true);
        l.bias = Tensor::zeros({d}, true);
    }
    static void visit_attn(const std::function<void(const std::string&, Tensor&)>& fn,
                           const std::string& p, AttnParams& a) {
        fn(p + "q.w", a.q.w);
        fn(p + "q.b", a.q.b);
        fn(p + "k.w", a.k.w);
        fn(p + "k.b", a.k.b);
        fn(p + "v.w", a.v.w);
        fn(p + "v.b", a.v.b);
        fn(p + "o.w", a.o.w);
        fn(p + "o.b", a.o.b);
    }
    static void visit_ffn(const std::function<void(const std::string&, Tensor&)>& fn,
                          const std::string& p, FfnParams& f) {
        fn(p + "in.w", f.in.w);
        fn(p + "in.b", f.in.b);
        fn(p + "out.w", f.out.w);
        fn(p + "out.b", f.out.b);
    }
    static void visit_ln(const std::function<void(const std::string&, Tensor&)>& fn,
                         const std::string& p, LayerNormParams& l) {
        fn(p + "gain", l.gain);
        fn(p + "bias", l.bias);
    }

    // Truncated normal (std 0.02) for weights; ones for LN gains, zeros for
    // every bias. One seeded stream in visiting order.
    void init_weights() {
        GaussianRng rng(mix_seed(cfg.seed, 1));
        visit_params([&rng](const std::string& name, Tensor& t) {
            auto ends_with = [&name](const char* s) {
                std::string suffix(s);
                return name.size() >= suffix.size() &&
                       name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
            };
            if (ends_with("gain")) {
                std::fill(t.values().begin(), t.values().end(), 1.0);
            } else if (ends_with(".b") || ends_with("bias")) {
                std::fill(t.values().begin(), t.values().end(), 0.0);
            } else {
                fill_trunc_normal(t, 0.02, rng);
            }
        });
    }
};

// --------------------------------------------------------------------------
// Batch assembly: text and visual streams pad independently to per-batch
// maxima; attention masks carry the real extents.
// --------------------------------------------------------------------------

struct PaddedExample {
    const EncodedExample* src = nullptr;
    std::vector<int> text_ids;  // padded with <pad>
    int real_text_len = 0;
    int n_real_images = 0;
    int n_image_slots = 0;
    std::vector<const std::vector<std::vector<double>>*> slot_patches;  // nullptr = phantom slot
    std::vector<int> dec_input;   // <bos> + summary, padded
    std::vector<int> dec_target;  // summary + <eos>, padded
    int real_target_len = 0;
};

inline std::vector<PaddedExample> assemble_batch(const std::vector<const EncodedExample*>& batch,
                                                 const ModelConfig& cfg) {
    if (batch.empty()) throw InputError("assemble_batch: empty batch");
    size_t max_text = 0, max_images = 0, max_target = 0;
    for (const EncodedExample* ex : batch) {
        max_text = std::max(max_text, ex->text_ids.size());
        max_images = std::max(max_images, ex->image_patches.size());
        size_t tgt = std::min<size_t>(ex->summary_ids.size(), static_cast<size_t>(cfg.max_decode_len - 1)) + 1;
        max_target = std::max(max_target, tgt);
    }
    std::vector<PaddedExample> out;
    out.reserve(batch.size());
    for (const EncodedExample* ex : batch) {
        PaddedExample p;
        p.src = ex;
        p.text_ids = ex->text_ids;
        p.real_text_len = static_cast<int>(ex->text_ids.size());
        p.text_ids.resize(max_text, kPadId);
        p.n_real_images = static_cast<int>(ex->image_patches.size());
        p.n_image_slots = static_cast<int>(max_images);
        for (int i = 0; i < p.n_image_slots; ++i) {
            p.slot_patches.push_back(i < p.n_real_images ? &ex->image_patches[static_cast<size_t>(i)]
                                                         : nullptr);
        }
        std::vector<int> summary = ex->summary_ids;
        if (static_cast<int>(summary.size()) > cfg.max_decode_len - 1) {
            summary.resize(static_cast<size_t>(cfg.max_decode_len - 1));
        }
        p.dec_input.push_back(kBosId);
        p.dec_input.insert(p.dec_input.end(), summary.begin(), summary.end());
        p.dec_target = summary;
        p.dec_target.push_back(kEosId);
        p.real_target_len = static_cast<int>(p.dec_target.size());
        p.dec_input.resize(max_target, kPadId);
        p.dec_target.resize(max_target, kPadId);
        out.push_back(std::move(p));
    }
    return out;
}

inline PaddedExample pad_single(const EncodedExample& ex, const ModelConfig& cfg) {
    return assemble_batch({&ex}, cfg)[0];
}

// --------------------------------------------------------------------------
// Attention and transformer blocks
// --------------------------------------------------------------------------

struct DropoutCtx {
    double p = 0.0;
    std::mt19937_64* rng = nullptr;

    Tensor apply(const Tensor& x) const {
        if (p > 0.0 && rng != nullptr) {
            return dropout(x, p, *rng);
        }
        return x;
    }
};

inline Tensor linear(const Tensor& x, const LinearParams& p) {
    return add_rowvec(matmul(x, p.w), p.b);
}

// Multi-head scaled dot-product attention. `key_valid` masks padded keys
// (empty = all valid); `causal` restricts position i to keys <= i.
inline Tensor attention(const AttnParams& p, const Tensor& query_in, const Tensor& key_in,
                        int n_heads, const std::vector<int>& key_valid, bool causal) {
    const int d = query_in.cols();
    if (d % n_heads != 0) throw ShapeError("attention: d_model not divisible by heads");
    const int dh = d / n_heads;
    const int tq = query_in.rows(), tk = key_in.rows();
    if (!key_valid.empty() && static_cast<int>(key_valid.size()) != tk) {
        throw ShapeError("attention: key mask length mismatch");
    }
    Tensor q = linear(query_in, p.q);
    Tensor k = linear(key_in, p.k);
    Tensor v = linear(key_in, p.v);

    bool any_masked = causal;
    for (int m : key_valid) {
        if (!m) any_masked = true;
    }
    Tensor mask;
    if (any_masked) {
        mask = Tensor::zeros({tq, tk});
        for (int i = 0; i < tq; ++i) {
            for (int j = 0; j < tk; ++j) {
                bool blocked = (causal && j > i) || (!key_valid.empty() && !key_valid[static_cast<size_t>(j)]);
                if (blocked) mask.at(i, j) = -1e9;
            }
        }
    }
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        if (any_masked) scores = add(scores, mask);
        Tensor weights = softmax(scores, -1);
        heads.push_back(matmul(weights, vh));
    }
    Tensor merged = n_heads == 1 ? heads[0] : concat_cols(heads);
    return linear(merged, p.o);
}

inline Tensor feed_forward(const Tensor& x, const FfnParams& p) {
    return linear(gelu(linear(x, p.in)), p.out);
}

inline Tensor post_norm(const Tensor& residual, const Tensor& branch, const LayerNormParams& ln) {
    return layer_norm(add(residual, branch), ln.gain, ln.bias);
}

// --------------------------------------------------------------------------
// Encoder
// --------------------------------------------------------------------------

struct EncoderOutput {
    Tensor h;      // final joint hidden states [T x d]
    Tensor h_tap;  // layer-L hidden states feeding the image-selection head
    std::vector<int> sentence_cls;
    std::vector<int> image_cls;  // one per image slot, phantoms included
    int text_len = 0;
    int total_len = 0;
    int n_real_images = 0;
    std::vector<int> key_valid;

    Tensor textual_states() const { return slice_rows(h, 0, text_len); }
    Tensor visual_states() const { return slice_rows(h, text_len, total_len); }
    std::vector<int> text_valid() const {
        return std::vector<int>(key_valid.begin(), key_valid.begin() + text_len);
    }
    std::vector<int> visual_valid() const {
        return std::vector<int>(key_valid.begin() + text_len, key_valid.end());
    }
    bool any_visual_key() const {
        for (int i = text_len; i < total_len; ++i) {
            if (key_valid[static_cast<size_t>(i)]) return true;
        }
        return false;
    }
};

// e = [e_t; e_v1; ...; e_vN] + e_pos with e_vi = [v_cls; patches] W_v + v_pos.
inline Tensor embed_multimodal(Model& m, const PaddedExample& ex, EncoderOutput& meta,
                               const DropoutCtx& drop = {}) {
    const ModelConfig& cfg = m.cfg;
    const int text_len = static_cast<int>(ex.text_ids.size());
    if (text_len > cfg.max_text_tokens) {
        throw ShapeError("embed: text stream of " + std::to_string(text_len) + " exceeds configured max " +
                         std::to_string(cfg.max_text_tokens));
    }
    if (ex.n_image_slots > cfg.max_images) {
        throw ShapeError("embed: " + std::to_string(ex.n_image_slots) + " image slots exceed configured max " +
                         std::to_string(cfg.max_images));
    }
    for (int id : ex.text_ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw ShapeError("embed: token id " + std::to_string(id) + " out of vocabulary");
        }
    }
    std::vector<Tensor> parts;
    parts.push_back(embedding(m.tok_embed, ex.text_ids));
    const int vis_tokens = cfg.visual_tokens_per_image();
    meta.text_len = text_len;
    meta.n_real_images = ex.n_real_images;
    meta.key_valid.assign(static_cast<size_t>(text_len), 1);
    for (int i = ex.real_text_len; i < text_len; ++i) meta.key_valid[static_cast<size_t>(i)] = 0;
    for (int i = 0; i < ex.n_image_slots; ++i) {
        meta.image_cls.push_back(text_len + i * vis_tokens);
        const bool real = ex.slot_patches[static_cast<size_t>(i)] != nullptr;
        Tensor patch_block;
        if (real) {
            const auto& patches = *ex.slot_patches[static_cast<size_t>(i)];
            if (static_cast<int>(patches.size()) != cfg.patches_per_image()) {
                throw ShapeError("embed: image " + std::to_string(i) + " has " +
                                 std::to_string(patches.size()) + " patches, config wants " +
                                 std::to_string(cfg.patches_per_image()));
            }
            std::vector<double> flat;
            flat.reserve(patches.size() * static_cast<size_t>(cfg.patch_dim()));
            for (const auto& p : patches) {
                if (static_cast<int>(p.size()) != cfg.patch_dim()) {
                    throw ShapeError("embed: patch vector length mismatch");
                }
                flat.insert(flat.end(), p.begin(), p.end());
            }
            patch_block = Tensor::from({cfg.patches_per_image(), cfg.patch_dim()}, std::move(flat));
        } else {
            patch_block = Tensor::zeros({cfg.patches_per_image(), cfg.patch_dim()});
        }
        Tensor stacked = concat_rows({m.v_cls, patch_block});
        Tensor projected = add(matmul(stacked, m.patch_proj), m.v_pos);
        parts.push_back(projected);
        for (int t = 0; t < vis_tokens; ++t) meta.key_valid.push_back(real ? 1 : 0);
    }
    Tensor e = parts.size() == 1 ? parts[0] : concat_rows(parts);
    meta.total_len = e.rows();
    if (meta.total_len > cfg.max_joint_tokens()) {
        throw ShapeError("embed: joint sequence of " + std::to_string(meta.total_len) +
                         " exceeds configured max " + std::to_string(cfg.max_joint_tokens()));
    }
    // Joint positions: text rows 0..Lt-1, visual rows anchored at the fixed
    // offset max_text_tokens so an image slot receives the same position row
    // whether or not the text stream is padded.
    std::vector<int> positions(static_cast<size_t>(meta.total_len));
    for (int i = 0; i < text_len; ++i) positions[static_cast<size_t>(i)] = i;
    for (int i = text_len; i < meta.total_len; ++i) {
        positions[static_cast<size_t>(i)] = cfg.max_text_tokens + (i - text_len);
    }
    e = add(e, gather_rows(m.e_pos, positions));
    meta.sentence_cls = ex.src ? ex.src->sentence_cls : std::vector<int>{};
    return drop.apply(e);
}

inline EncoderOutput encode(Model& m, const PaddedExample& ex, const DropoutCtx& drop = {}) {
    EncoderOutput out;
    Tensor h = embed_multimodal(m, ex, out, drop);
    const int tap = m.cfg.tap_layer();
    for (int i = 0; i < m.cfg.n_enc_layers; ++i) {
        EncLayerParams& l = m.enc_layers[static_cast<size_t>(i)];
        Tensor a = attention(l.self_attn, h, h, m.cfg.n_heads, out.key_valid, false);
        h = post_norm(h, drop.apply(a), l.ln_attn);
        Tensor f = feed_forward(h, l.ffn);
        h = post_norm(h, drop.apply(f), l.ln_ffn);
        if (i + 1 == tap) out.h_tap = h;
    }
    out.h = h;
    return out;
}

// g_v over the image-CLS rows of the tapped layer. `n_images` limits the
// scoring to the first n (real) slots; -1 scores every slot.
inline Tensor image_select_scores(Model& m, const EncoderOutput& enc, int n_images = -1) {
    int n = n_images < 0 ? static_cast<int>(enc.image_cls.size()) : n_images;
    if (n <= 0) throw InputError("image_select_scores: document has no images");
    std::vector<int> idx(enc.image_cls.begin(), enc.image_cls.begin() + n);
    Tensor cls = gather_rows(enc.h_tap, idx);
    return reshape(linear(cls, m.img_head), {n});
}

// g_t over the sentence-CLS rows of the final layer.
inline Tensor sentence_select_scores(Model& m, const EncoderOutput& enc) {
    if (enc.sentence_cls.empty()) throw InputError("sentence_select_scores: no sentences");
    Tensor cls = gather_rows(enc.h, enc.sentence_cls);
    return reshape(linear(cls, m.ext_head), {static_cast<int>(enc.sentence_cls.size())});
}

// --------------------------------------------------------------------------
// Losses
// --------------------------------------------------------------------------

// KL(p || q) with p = softmax(student / tau) and q = softmax(teacher / tau);
// the teacher side is constant, no tau^2 rescaling.
inline Tensor kd_loss(const Tensor& student_scores, const std::vector<double>& teacher_scores, double tau) {
    if (tau <= 0.0) throw InputError("kd_loss: temperature must be positive");
    if (static_cast<size_t>(student_scores.numel()) != teacher_scores.size() || teacher_scores.empty()) {
        throw InputError("kd_loss: " + std::to_string(student_scores.numel()) + " student scores vs " +
                         std::to_string(teacher_scores.size()) + " teacher scores");
    }
    Tensor p = softmax(scale(student_scores, 1.0 / tau), -1);
    std::vector<double> scaled(teacher_scores);
    for (auto& s : scaled) s /= tau;
    const int n = static_cast<int>(scaled.size());
    Tensor q = softmax(Tensor::from({n}, std::move(scaled)), -1);
    return kl_divergence(p, q);
}

struct ExtLossResult {
    Tensor loss;
    bool degenerate = false;  // no positive oracle label
};

inline ExtLossResult ext_loss(const Tensor& sentence_scores, const std::vector<int>& oracle_labels,
                              const std::string& mode) {
    if (static_cast<size_t>(sentence_scores.numel()) != oracle_labels.size()) {
        throw InputError("ext_loss: score/label length mismatch");
    }
    for (int l : oracle_labels) {
        if (l != 0 && l != 1) throw InputError("ext_loss: labels must be 0 or 1");
    }
    int positives = 0;
    for (int l : oracle_labels) positives += l;
    if (positives == 0) {
        return {Tensor::scalar(0.0), true};
    }
    if (mode == "bce") {
        std::vector<double> labels(oracle_labels.begin(), oracle_labels.end());
        return {bce_with_logits(sentence_scores, labels), false};
    }
    if (mode == "softmax_nll") {
        Tensor p = softmax(sentence_scores, -1);
        std::vector<double> pick(oracle_labels.begin(), oracle_labels.end());
        const int n = static_cast<int>(pick.size());
        Tensor mask = Tensor::from({n}, std::move(pick));
        return {scale(sum(mul(elem_log(p), mask)), -1.0), false};
    }
    throw ConfigError("ext_loss: unknown mode '" + mode + "'");
}

// Mean negative log-likelihood over non-pad target positions.
inline Tensor abs_loss(const Tensor& logits, const std::vector<int>& targets) {
    return cross_entropy(logits, targets, kPadId);
}

inline Tensor total_loss(const Tensor& kd, const Tensor& ext, const Tensor& abs) {
    return add(add(kd, ext), abs);
}

// --------------------------------------------------------------------------
// Decoder
// --------------------------------------------------------------------------

// One visual-guided decoder layer stack pass over the whole target prefix.
// Order per layer: causal self-attention, cross-attention over the visual
// states, cross-attention over the textual states, feed-forward; post-norm
// residuals throughout. With the no-visual-guide ablation the textual block
// attends once over the full joint states instead.
inline Tensor decode_hidden(Model& m, const EncoderOutput& enc, const std::vector<int>& dec_input,
                            Ablation ablation = Ablation::kNone, const DropoutCtx& drop = {}) {
    const int len = static_cast<int>(dec_input.size());
    if (len == 0) throw InputError("decode: empty decoder input");
    if (len > m.cfg.max_decode_len + 1) {
        throw ShapeError("decode: prefix of " + std::to_string(len) + " exceeds max_decode_len");
    }
    std::vector<int> positions(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) positions[static_cast<size_t>(i)] = i;
    Tensor y = add(embedding(m.tok_embed, dec_input), gather_rows(m.dec_pos, positions));
    y = drop.apply(y);

    const bool merged_cross = ablation_drops_visual_guide(ablation);
    Tensor h_text = enc.textual_states();
    std::vector<int> text_valid = enc.text_valid();
    const bool has_visual = enc.total_len > enc.text_len && enc.any_visual_key();
    Tensor h_visual;
    std::vector<int> visual_valid;
    if (!merged_cross && has_visual) {
        h_visual = enc.visual_states();
        visual_valid = enc.visual_valid();
    }
    for (auto& l : m.dec_layers) {
        Tensor s = attention(l.self_attn, y, y, m.cfg.n_heads, {}, true);
        y = post_norm(y, drop.apply(s), l.ln_self);
        if (merged_cross) {
            Tensor c = attention(l.cross_text, y, enc.h, m.cfg.n_heads, enc.key_valid, false);
            y = post_norm(y, drop.apply(c), l.ln_text);
        } else {
            if (has_visual) {
                Tensor cv = attention(l.cross_visual, y, h_visual, m.cfg.n_heads, visual_valid, false);
                y = post_norm(y, drop.apply(cv), l.ln_visual);
            }
            Tensor ct = attention(l.cross_text, y, h_text, m.cfg.n_heads, text_valid, false);
            y = post_norm(y, drop.apply(ct), l.ln_text);
        }
        Tensor f = feed_forward(y, l.ffn);
        y = post_norm(y, drop.apply(f), l.ln_ffn);
    }
    return y;
}

// Output projection is weight-tied to the token embedding table.
inline Tensor decode_logits(Model& m, const EncoderOutput& enc, const std::vector<int>& dec_input,
                            Ablation ablation = Ablation::kNone, const DropoutCtx& drop = {}) {
    Tensor hidden = decode_hidden(m, enc, dec_input, ablation, drop);
    return matmul(hidden, transpose(m.tok_embed));
}

// --------------------------------------------------------------------------
// Joint forward pass
// --------------------------------------------------------------------------

struct ForwardResult {
    Tensor kd, ext, abs, total;  // scalars, on-tape where applicable
    bool ext_degenerate = false;
    bool has_images = false;
    EncoderOutput enc;
    Tensor image_scores;     // defined iff has_images
    Tensor sentence_scores;  // defined iff the example has sentences
};

inline ForwardResult forward_losses(Model& m, const PaddedExample& ex, Ablation ablation = Ablation::kNone,
                                    const DropoutCtx& drop = {}) {
    if (ex.src == nullptr) throw InputError("forward: padded example without source");
    ForwardResult r;
    r.enc = encode(m, ex, drop);
    r.has_images = ex.n_real_images > 0;
    if (r.has_images) {
        if (ex.src->teacher_scores.size() != static_cast<size_t>(ex.n_real_images)) {
            throw InputError("forward: document '" + ex.src->id + "' lacks teacher scores");
        }
        r.image_scores = image_select_scores(m, r.enc, ex.n_real_images);
        r.kd = kd_loss(r.image_scores, ex.src->teacher_scores, m.cfg.kd_temperature);
    } else {
        r.kd = Tensor::scalar(0.0);
    }
    if (ablation_drops_ext(ablation)) {
        r.ext = Tensor::scalar(0.0);
    } else {
        if (ex.src->oracle_labels.size() != static_cast<size_t>(ex.src->sentence_cls.size())) {
            throw InputError("forward: document '" + ex.src->id + "' lacks oracle labels");
        }
        r.sentence_scores = sentence_select_scores(m, r.enc);
        ExtLossResult el = ext_loss(r.sentence_scores, ex.src->oracle_labels, m.cfg.ext_loss_mode);
        r.ext = el.loss;
        r.ext_degenerate = el.degenerate;
    }
    Tensor logits = decode_logits(m, r.enc, ex.dec_input, ablation, drop);
    r.abs = abs_loss(logits, ex.dec_target);
    r.total = total_loss(r.kd, r.ext, r.abs);
    return r;
}

}  // namespace unims
