#pragma once

// TranSOP assembly: 3D patch embedding + CLS + learnable positional encoding,
// pre-norm transformer blocks, an MLP head producing image features, a
// clinical FC branch, and the fusion module (concat or learnable-weighted add)
// ending in a 2-class softmax over dichotomized outcome. Variants: `vit`,
// `convit` (three conv blocks before patch embedding) and `clinic_dnn`
// (clinical branch only). `use_clinical=false` mirrors clinic_dnn on the
// image side for unimodal comparisons.

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "transop/dataset.hpp"
#include "transop/error.hpp"
#include "transop/keyval.hpp"
#include "transop/nn.hpp"
#include "transop/rng.hpp"
#include "transop/tensor.hpp"
#include "transop/volume.hpp"

namespace transop {

enum class Variant { vit, convit, clinic_dnn };
enum class FusionMode { concat, add };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::vit: return "vit";
        case Variant::convit: return "convit";
        default: return "clinic_dnn";
    }
}

inline std::string to_string(FusionMode f) { return f == FusionMode::concat ? "concat" : "add"; }

inline Variant parse_variant(const std::string& s) {
    if (s == "vit") return Variant::vit;
    if (s == "convit") return Variant::convit;
    if (s == "clinic_dnn") return Variant::clinic_dnn;
    throw ConfigError("unknown variant '" + s + "' (expected vit, convit or clinic_dnn)");
}

inline FusionMode parse_fusion(const std::string& s) {
    if (s == "concat") return FusionMode::concat;
    if (s == "add") return FusionMode::add;
    throw ConfigError("unknown fusion mode '" + s + "' (expected concat or add)");
}

struct TranSOPConfig {
    Variant variant = Variant::vit;
    int patch = 16;        // P
    int embed_dim = 768;   // K
    int layers = 12;
    int heads = 12;
    int mlp_hidden = 3072;
    int feature_dim = 256; // F, both branch outputs
    int clinical_dim = 10; // C
    FusionMode fusion = FusionMode::concat;
    bool use_clinical = true;
    double p_drop = 0.1;
    int num_classes = 2; // fixed: dichotomized outcome
    int crop_d = 32, crop_w = 192, crop_h = 128;
    std::vector<int> stem_channels = {32, 64, 128}; // convit only

    static TranSOPConfig full_size() { return TranSOPConfig{}; }

    // Desk-scale preset for 8x24x16 synthetic volumes.
    static TranSOPConfig tiny() {
        TranSOPConfig c;
        c.patch = 4;
        c.embed_dim = 32;
        c.layers = 2;
        c.heads = 2;
        c.mlp_hidden = 64;
        c.feature_dim = 32;
        c.crop_d = 8;
        c.crop_w = 24;
        c.crop_h = 16;
        c.stem_channels = {4, 8, 16};
        return c;
    }

    bool uses_image() const { return variant != Variant::clinic_dnn; }
    bool uses_clinical() const { return variant == Variant::clinic_dnn || use_clinical; }

    // Patch-embed input geometry (after the conv stem for convit).
    void grid(int& channels, int& gd, int& gw, int& gh) const {
        channels = 1;
        gd = crop_d;
        gw = crop_w;
        gh = crop_h;
        if (variant == Variant::convit) {
            for (size_t i = 0; i < stem_channels.size(); ++i) {
                gd = (gd + 1) / 2;
                gw = (gw + 1) / 2;
                gh = (gh + 1) / 2;
            }
            channels = stem_channels.empty() ? 1 : stem_channels.back();
        }
    }

    int token_count() const {
        int c, gd, gw, gh;
        grid(c, gd, gw, gh);
        return patch_token_count(gd, gw, gh, patch);
    }

    // Fused-feature width entering the post stack.
    int fused_dim() const {
        bool multimodal = uses_image() && uses_clinical();
        return multimodal && fusion == FusionMode::concat ? 2 * feature_dim : feature_dim;
    }

    void validate() const {
        if (num_classes != 2) throw ConfigError("num_classes is fixed at 2");
        if (layers < 1) throw ConfigError("layers must be >= 1");
        if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
        if (clinical_dim < 1) throw ConfigError("clinical_dim must be >= 1");
        if (p_drop < 0.0 || p_drop >= 1.0) throw ConfigError("p_drop must be in [0,1)");
        if (variant == Variant::clinic_dnn) return;
        if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
            throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (patch < 1) throw ConfigError("patch must be >= 1");
        if (mlp_hidden < 1) throw ConfigError("mlp_hidden must be >= 1");
        if (!uses_image() && !uses_clinical())
            throw ConfigError("model must use at least one modality");
        if (variant == Variant::convit && stem_channels.empty())
            throw ConfigError("convit requires stem_channels");
        int c, gd, gw, gh;
        grid(c, gd, gw, gh);
        if (gd < patch || gw < patch || gh < patch)
            throw ConfigError("patch-embed grid (" + std::to_string(gd) + "," + std::to_string(gw) +
                              "," + std::to_string(gh) + ") smaller than patch " +
                              std::to_string(patch));
    }

    KeyVal to_kv() const {
        KeyVal kv;
        kv.set("variant", to_string(variant));
        kv.set("fusion", to_string(fusion));
        kv.set("use_clinical", uses_clinical() ? "true" : "false");
        kv.set("patch", std::to_string(patch));
        kv.set("embed_dim", std::to_string(embed_dim));
        kv.set("layers", std::to_string(layers));
        kv.set("heads", std::to_string(heads));
        kv.set("mlp_hidden", std::to_string(mlp_hidden));
        kv.set("feature_dim", std::to_string(feature_dim));
        kv.set("clinical_dim", std::to_string(clinical_dim));
        kv.set("p_drop", format_double(p_drop));
        kv.set("num_classes", std::to_string(num_classes));
        kv.set("crop_d", std::to_string(crop_d));
        kv.set("crop_w", std::to_string(crop_w));
        kv.set("crop_h", std::to_string(crop_h));
        std::ostringstream sc;
        for (size_t i = 0; i < stem_channels.size(); ++i) sc << (i ? "," : "") << stem_channels[i];
        kv.set("stem_channels", sc.str());
        return kv;
    }

    static TranSOPConfig from_kv(const KeyVal& kv) {
        TranSOPConfig c;
        c.variant = parse_variant(kv.get("variant"));
        if (kv.has("fusion")) c.fusion = parse_fusion(kv.get("fusion"));
        if (kv.has("use_clinical")) c.use_clinical = kv.get_bool("use_clinical");
        if (kv.has("patch")) c.patch = static_cast<int>(kv.get_int("patch"));
        if (kv.has("embed_dim")) c.embed_dim = static_cast<int>(kv.get_int("embed_dim"));
        if (kv.has("layers")) c.layers = static_cast<int>(kv.get_int("layers"));
        if (kv.has("heads")) c.heads = static_cast<int>(kv.get_int("heads"));
        if (kv.has("mlp_hidden")) c.mlp_hidden = static_cast<int>(kv.get_int("mlp_hidden"));
        if (kv.has("feature_dim")) c.feature_dim = static_cast<int>(kv.get_int("feature_dim"));
        if (kv.has("clinical_dim")) c.clinical_dim = static_cast<int>(kv.get_int("clinical_dim"));
        if (kv.has("p_drop")) c.p_drop = kv.get_double("p_drop");
        if (kv.has("num_classes")) c.num_classes = static_cast<int>(kv.get_int("num_classes"));
        if (kv.has("crop_d")) c.crop_d = static_cast<int>(kv.get_int("crop_d"));
        if (kv.has("crop_w")) c.crop_w = static_cast<int>(kv.get_int("crop_w"));
        if (kv.has("crop_h")) c.crop_h = static_cast<int>(kv.get_int("crop_h"));
        if (kv.has("stem_channels")) {
            c.stem_channels.clear();
            std::istringstream in(kv.get("stem_channels"));
            std::string tok;
            while (std::getline(in, tok, ','))
                if (!tok.empty()) c.stem_channels.push_back(std::stoi(tok));
        }
        c.validate();
        return c;
    }
};

struct BlockParams {
    LayerNormParams ln1;
    MHSAParams attn;
    LayerNormParams ln2;
    MlpParams mlp;
};

struct EncoderParams {
    PatchEmbedParams patch;
    Tensor cls; // [1,K], trainable
    Tensor pe;  // [L+1,K], trainable
    std::vector<BlockParams> blocks;
    LayerNormParams head_norm; // pre-head norm on the CLS vector
    MlpParams head;            // CLS vector -> F
};

struct FusionParams {
    LinearParams img_fc1, img_fc2;   // F->F branch stack (image path)
    LinearParams clin_fc1, clin_fc2; // F->F branch stack (clinical path)
    Tensor w_img, w_clin;            // learnable scalar weights, add mode
    LinearParams post_fc1, post_fc2; // G->G
    LinearParams classifier;         // G->2
};

struct Prediction {
    std::array<double, 2> probs{}; // [good, bad], sums to 1
    int label = 0;                 // argmax: 0 good (mRS<=2), 1 bad (mRS>2)
};

struct Model {
    TranSOPConfig cfg;
    std::optional<std::vector<ConvBlockParams>> stem;
    std::optional<EncoderParams> encoder;
    std::optional<LinearParams> clinical_fc; // C -> F
    FusionParams fusion;
    // per-feature z-scoring fitted on the train split
    std::vector<double> clin_mean, clin_std;

    // Visits every trainable parameter in a fixed order (checkpoint order).
    template <typename Fn>
    void visit_params(Fn&& fn) {
        if (stem) {
            for (size_t i = 0; i < stem->size(); ++i) {
                std::string p = "stem." + std::to_string(i) + ".";
                fn(p + "kernel", (*stem)[i].kernel);
                fn(p + "bias", (*stem)[i].bias);
                fn(p + "norm.gamma", (*stem)[i].norm.gamma);
                fn(p + "norm.beta", (*stem)[i].norm.beta);
            }
        }
        if (encoder) {
            fn("encoder.patch.projection", encoder->patch.projection);
            fn("encoder.patch.bias", encoder->patch.bias);
            fn("encoder.cls", encoder->cls);
            fn("encoder.pe", encoder->pe);
            for (size_t i = 0; i < encoder->blocks.size(); ++i) {
                std::string p = "encoder.block" + std::to_string(i) + ".";
                BlockParams& b = encoder->blocks[i];
                fn(p + "ln1.gamma", b.ln1.gamma);
                fn(p + "ln1.beta", b.ln1.beta);
                fn(p + "attn.wq", b.attn.wq);
                fn(p + "attn.wk", b.attn.wk);
                fn(p + "attn.wv", b.attn.wv);
                fn(p + "attn.wo", b.attn.wo);
                fn(p + "ln2.gamma", b.ln2.gamma);
                fn(p + "ln2.beta", b.ln2.beta);
                fn(p + "mlp.fc1.W", b.mlp.fc1.W);
                fn(p + "mlp.fc1.b", b.mlp.fc1.b);
                fn(p + "mlp.fc2.W", b.mlp.fc2.W);
                fn(p + "mlp.fc2.b", b.mlp.fc2.b);
            }
            fn("encoder.head_norm.gamma", encoder->head_norm.gamma);
            fn("encoder.head_norm.beta", encoder->head_norm.beta);
            fn("encoder.head.fc1.W", encoder->head.fc1.W);
            fn("encoder.head.fc1.b", encoder->head.fc1.b);
            fn("encoder.head.fc2.W", encoder->head.fc2.W);
            fn("encoder.head.fc2.b", encoder->head.fc2.b);
        }
        if (clinical_fc) {
            fn("clinical_fc.W", clinical_fc->W);
            fn("clinical_fc.b", clinical_fc->b);
        }
        if (cfg.uses_image()) {
            fn("fusion.img_fc1.W", fusion.img_fc1.W);
            fn("fusion.img_fc1.b", fusion.img_fc1.b);
            fn("fusion.img_fc2.W", fusion.img_fc2.W);
            fn("fusion.img_fc2.b", fusion.img_fc2.b);
        }
        if (cfg.uses_clinical()) {
            fn("fusion.clin_fc1.W", fusion.clin_fc1.W);
            fn("fusion.clin_fc1.b", fusion.clin_fc1.b);
            fn("fusion.clin_fc2.W", fusion.clin_fc2.W);
            fn("fusion.clin_fc2.b", fusion.clin_fc2.b);
        }
        if (cfg.uses_image() && cfg.uses_clinical() && cfg.fusion == FusionMode::add) {
            fn("fusion.w_img", fusion.w_img);
            fn("fusion.w_clin", fusion.w_clin);
        }
        fn("fusion.post_fc1.W", fusion.post_fc1.W);
        fn("fusion.post_fc1.b", fusion.post_fc1.b);
        fn("fusion.post_fc2.W", fusion.post_fc2.W);
        fn("fusion.post_fc2.b", fusion.post_fc2.b);
        fn("fusion.classifier.W", fusion.classifier.W);
        fn("fusion.classifier.b", fusion.classifier.b);
    }

    size_t param_count() {
        size_t n = 0;
        visit_params([&](const std::string&, Tensor& t) { n += t.size(); });
        return n;
    }

    // Deep copy: parameter buffers are duplicated, not shared.
    Model clone() const {
        Model m = *this;
        m.visit_params([](const std::string&, Tensor& t) { t = t.copy_values(); });
        return m;
    }
};

namespace detail {

inline Tensor trunc_normal_tensor(Shape s, double stddev, Rng& rng) {
    Tensor t(std::move(s));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.trunc_normal(stddev);
    return t;
}

inline LinearParams make_linear(int in, int out, Rng& rng) {
    return LinearParams{trunc_normal_tensor({in, out}, 0.02, rng), Tensor({out})};
}

inline LayerNormParams make_norm(int k) {
    return LayerNormParams{Tensor::full({k}, 1.0), Tensor({k})};
}

} // namespace detail

// Builds a model with the standard init: truncated-normal(0.02) projection
// matrices, zero biases, zero CLS/PE, unit fusion weights.
inline Model build_model(const TranSOPConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const int F = cfg.feature_dim;
    if (cfg.variant == Variant::convit) {
        std::vector<ConvBlockParams> stem;
        int cin = 1;
        for (int cout : cfg.stem_channels) {
            ConvBlockParams b;
            b.kernel = detail::trunc_normal_tensor({cin * 27, cout}, 0.02, rng);
            b.bias = Tensor({cout});
            b.norm = detail::make_norm(cout);
            stem.push_back(std::move(b));
            cin = cout;
        }
        m.stem = std::move(stem);
    }
    if (cfg.uses_image()) {
        EncoderParams enc;
        int channels, gd, gw, gh;
        cfg.grid(channels, gd, gw, gh);
        const int K = cfg.embed_dim;
        enc.patch.patch = cfg.patch;
        enc.patch.channels = channels;
        enc.patch.projection =
            detail::trunc_normal_tensor({channels * cfg.patch * cfg.patch * cfg.patch, K}, 0.02, rng);
        enc.patch.bias = Tensor({K});
        enc.cls = Tensor({1, K});
        enc.pe = Tensor({cfg.token_count() + 1, K});
        for (int l = 0; l < cfg.layers; ++l) {
            BlockParams b;
            b.ln1 = detail::make_norm(K);
            b.attn.wq = detail::trunc_normal_tensor({K, K}, 0.02, rng);
            b.attn.wk = detail::trunc_normal_tensor({K, K}, 0.02, rng);
            b.attn.wv = detail::trunc_normal_tensor({K, K}, 0.02, rng);
            b.attn.wo = detail::trunc_normal_tensor({K, K}, 0.02, rng);
            b.attn.heads = cfg.heads;
            b.ln2 = detail::make_norm(K);
            b.mlp.fc1 = detail::make_linear(K, cfg.mlp_hidden, rng);
            b.mlp.fc2 = detail::make_linear(cfg.mlp_hidden, K, rng);
            enc.blocks.push_back(std::move(b));
        }
        enc.head_norm = detail::make_norm(K);
        enc.head.fc1 = detail::make_linear(K, K, rng);
        enc.head.fc2 = detail::make_linear(K, F, rng);
        m.encoder = std::move(enc);
    }
    if (cfg.uses_clinical()) m.clinical_fc = detail::make_linear(cfg.clinical_dim, F, rng);

    if (cfg.uses_image()) {
        m.fusion.img_fc1 = detail::make_linear(F, F, rng);
        m.fusion.img_fc2 = detail::make_linear(F, F, rng);
    }
    if (cfg.uses_clinical()) {
        m.fusion.clin_fc1 = detail::make_linear(F, F, rng);
        m.fusion.clin_fc2 = detail::make_linear(F, F, rng);
    }
    m.fusion.w_img = Tensor::scalar(1.0);
    m.fusion.w_clin = Tensor::scalar(1.0);
    const int G = cfg.fused_dim();
    m.fusion.post_fc1 = detail::make_linear(G, G, rng);
    m.fusion.post_fc2 = detail::make_linear(G, G, rng);
    m.fusion.classifier = detail::make_linear(G, cfg.num_classes, rng);

    m.visit_params([](const std::string&, Tensor& t) { t.mark_grad(); });
    return m;
}

struct Batch {
    std::vector<const Volume*> volumes;               // empty when image path unused
    std::vector<const std::vector<double>*> features; // empty when clinical path unused
};

struct ForwardTrace {
    Tensor z_img;   // [B,F]
    Tensor z_clin;  // [B,F]
    Tensor fused;   // [B,G]
    Tensor logits;  // [B,2]
    Tensor probs;   // [B,2]
};

namespace detail {

inline Tensor encode_volumes(Model& m, const std::vector<const Volume*>& vols, Tape* tape) {
    EncoderParams& enc = *m.encoder;
    const TranSOPConfig& cfg = m.cfg;
    const int B = static_cast<int>(vols.size());
    const int K = cfg.embed_dim;
    const int L = cfg.token_count();
    if (enc.pe.shape[0] != L + 1)
        throw ConfigError("positional encoding rows " + std::to_string(enc.pe.shape[0]) +
                          " != sequence length " + std::to_string(L + 1));
    std::vector<Tensor> per_sample;
    per_sample.reserve(vols.size());
    for (const Volume* v : vols) {
        if (v->d != cfg.crop_d || v->w != cfg.crop_w || v->h != cfg.crop_h)
            throw ConfigError("volume dims (" + std::to_string(v->d) + "," + std::to_string(v->w) +
                              "," + std::to_string(v->h) + ") do not match model crop (" +
                              std::to_string(cfg.crop_d) + "," + std::to_string(cfg.crop_w) + "," +
                              std::to_string(cfg.crop_h) + ")");
        Tensor x = volume_tensor(*v);
        if (m.stem) x = conv_stem(x, *m.stem, tape);
        Tensor tokens = patch_embed(x, enc.patch, tape); // [L,K]
        per_sample.push_back(reshape(tokens, {1, L, K}, tape));
    }
    Tensor tokens = per_sample.size() == 1 ? per_sample.front() : concat(per_sample, 0, tape);
    Tensor seq = concat({tile0(enc.cls, B, tape), tokens}, 1, tape); // [B,1,K] + [B,L,K]
    seq = add(seq, tile0(enc.pe, B, tape), tape);
    for (BlockParams& b : enc.blocks) {
        seq = add(seq, mhsa(layer_norm(seq, b.ln1, tape), b.attn, tape), tape);
        seq = add(seq, mlp_block(layer_norm(seq, b.ln2, tape), b.mlp, tape), tape);
    }
    Tensor cls_out = reshape(slice(seq, 1, 0, 1, tape), {B, K}, tape);
    cls_out = layer_norm(cls_out, enc.head_norm, tape);
    return mlp_block(cls_out, enc.head, tape); // [B,F]
}

inline Tensor encode_clinical(Model& m, const std::vector<const std::vector<double>*>& features,
                              Tape* tape) {
    const int B = static_cast<int>(features.size());
    const int C = m.cfg.clinical_dim;
    Tensor x({B, C});
    for (int b = 0; b < B; ++b) {
        const std::vector<double>& f = *features[static_cast<size_t>(b)];
        if (static_cast<int>(f.size()) != C)
            throw DimensionError("clinical feature vector has length " + std::to_string(f.size()) +
                                 ", expected " + std::to_string(C));
        for (int j = 0; j < C; ++j) {
            double v = f[static_cast<size_t>(j)];
            if (!m.clin_mean.empty())
                v = (v - m.clin_mean[static_cast<size_t>(j)]) / m.clin_std[static_cast<size_t>(j)];
            x[static_cast<size_t>(b) * C + j] = v;
        }
    }
    return linear(x, *m.clinical_fc, tape); // [B,F]
}

} // namespace detail

// Full forward pass over a batch. Dropout draws from `rng` only in train
// mode, in a fixed order (image branch, clinical branch, post stack).
inline ForwardTrace forward_trace(Model& m, const Batch& batch, Mode mode, Rng* rng,
                                  Tape* tape = nullptr) {
    const TranSOPConfig& cfg = m.cfg;
    const bool img = cfg.uses_image(), clin = cfg.uses_clinical();
    size_t B = img ? batch.volumes.size() : batch.features.size();
    if (B == 0) throw ContractError("forward: empty batch");
    if (img && batch.volumes.size() != B)
        throw ContractError("forward: batch volume count mismatch");
    if (clin && batch.features.size() != B)
        throw ContractError("forward: expected " + std::to_string(B) +
                            " clinical vectors, got " + std::to_string(batch.features.size()));
    ForwardTrace tr;
    auto branch = [&](Tensor z, LinearParams& fc1, LinearParams& fc2) {
        Tensor h = linear(z, fc1, tape);
        h = dropout(h, cfg.p_drop, mode, rng, tape);
        return linear(h, fc2, tape);
    };
    Tensor a_img, a_clin;
    if (img) {
        tr.z_img = detail::encode_volumes(m, batch.volumes, tape);
        a_img = branch(tr.z_img, m.fusion.img_fc1, m.fusion.img_fc2);
    }
    if (clin) {
        tr.z_clin = detail::encode_clinical(m, batch.features, tape);
        a_clin = branch(tr.z_clin, m.fusion.clin_fc1, m.fusion.clin_fc2);
    }
    if (img && clin) {
        tr.fused = cfg.fusion == FusionMode::concat
                       ? concat({a_img, a_clin}, 1, tape)
                       : add(smul(m.fusion.w_img, a_img, tape), smul(m.fusion.w_clin, a_clin, tape),
                             tape);
    } else {
        tr.fused = img ? a_img : a_clin;
    }
    Tensor h = linear(tr.fused, m.fusion.post_fc1, tape);
    h = dropout(h, cfg.p_drop, mode, rng, tape);
    h = linear(h, m.fusion.post_fc2, tape);
    tr.logits = linear(h, m.fusion.classifier, tape);
    tr.probs = softmax(tr.logits, 1, tape);
    return tr;
}

inline std::vector<Prediction> predictions_from(const Tensor& probs) {
    std::vector<Prediction> out;
    for (int b = 0; b < probs.shape[0]; ++b) {
        Prediction p;
        p.probs = {probs[static_cast<size_t>(b) * 2], probs[static_cast<size_t>(b) * 2 + 1]};
        p.label = p.probs[1] > p.probs[0] ? 1 : 0;
        out.push_back(p);
    }
    return out;
}

// Single-case inference (dropout off).
inline Prediction predict_one(Model& m, const Volume* vol, const std::vector<double>* features) {
    Batch b;
    if (m.cfg.uses_image()) {
        if (!vol) throw ContractError("predict: model requires a volume");
        b.volumes.push_back(vol);
    }
    if (m.cfg.uses_clinical()) {
        if (!features) throw ContractError("predict: model requires clinical features");
        b.features.push_back(features);
    }
    ForwardTrace tr = forward_trace(m, b, Mode::infer, nullptr);
    return predictions_from(tr.probs).front();
}

} // namespace transop
