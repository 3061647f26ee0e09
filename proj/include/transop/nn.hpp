#pragma once

// Layers for the transformer assembly: linear, layer norm (fused tape op),
// multi-head self-attention, MLP block, inverted dropout, 3D patch embedding
// and the convolutional stem. Parameter bundles are plain structs; layers are
// pure functions of (input, params).

#include <cmath>
#include <string>
#include <vector>

#include "transop/error.hpp"
#include "transop/rng.hpp"
#include "transop/tensor.hpp"
#include "transop/volume.hpp"

namespace transop {

enum class Mode { train, infer };

struct LinearParams {
    Tensor W; // [in, out]
    Tensor b; // [out]

    int in_dim() const { return W.shape[0]; }
    int out_dim() const { return W.shape[1]; }
};

// x[B,in] -> x.W + b
inline Tensor linear(const Tensor& x, const LinearParams& p, Tape* tape = nullptr) {
    if (x.rank() != 2 || x.shape[1] != p.in_dim())
        throw DimensionError("linear: input " + shape_str(x.shape) + " incompatible with weight " +
                             shape_str(p.W.shape));
    return add_row_bias(matmul(x, p.W, tape), p.b, tape);
}

struct LayerNormParams {
    Tensor gamma; // [K]
    Tensor beta;  // [K]
    double eps = 1e-8;
};

// Normalizes each trailing-axis vector to zero mean / unit population std,
// then applies gamma and beta. Fused single tape node.
inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p, Tape* tape = nullptr) {
    if (p.eps <= 0) throw ConfigError("layer_norm: eps must be positive");
    const int K = p.gamma.shape[0];
    if (p.gamma.rank() != 1 || p.beta.shape != p.gamma.shape)
        throw DimensionError("layer_norm: gamma/beta must be matching vectors");
    if (x.shape.back() != K)
        throw DimensionError("layer_norm: last dim of " + shape_str(x.shape) + " != " +
                             std::to_string(K));
    const size_t rows = x.size() / static_cast<size_t>(K);
    Tensor out(x.shape);
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    const double* px = x.data();
    const double* pg = p.gamma.data();
    const double* pb = p.beta.data();
    double* po = out.data();
    for (size_t r = 0; r < rows; ++r) {
        const double* row = px + r * K;
        double mu = 0.0;
        for (int j = 0; j < K; ++j) mu += row[j];
        mu /= K;
        double v = 0.0;
        for (int j = 0; j < K; ++j) {
            double d = row[j] - mu;
            v += d * d;
        }
        v /= K;
        double inv = 1.0 / std::sqrt(v + p.eps);
        (*inv_std)[r] = inv;
        for (int j = 0; j < K; ++j) {
            double xh = (row[j] - mu) * inv;
            (*xhat)[r * K + j] = xh;
            po[r * K + j] = pg[j] * xh + pb[j];
        }
    }
    if (tape && (x.requires_grad || p.gamma.requires_grad || p.beta.requires_grad)) {
        int ix = tape->input_id(x);
        int ig = tape->input_id(p.gamma);
        int ib = tape->input_id(p.beta);
        auto gs = p.gamma.store;
        size_t xn = x.size();
        out.node = tape->emit({ix, ig, ib}, [=](const std::vector<double>& g, Tape& t) {
            const double* gam = gs->data();
            if (ix >= 0) {
                auto& gx = t.grad_buf(ix, xn);
                for (size_t r = 0; r < rows; ++r) {
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int j = 0; j < K; ++j) {
                        double dxh = g[r * K + j] * gam[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * (*xhat)[r * K + j];
                    }
                    double inv = (*inv_std)[r];
                    for (int j = 0; j < K; ++j) {
                        double dxh = g[r * K + j] * gam[j];
                        double xh = (*xhat)[r * K + j];
                        gx[r * K + j] += inv / K * (K * dxh - sum_dxh - xh * sum_dxh_xh);
                    }
                }
            }
            if (ig >= 0) {
                auto& gg = t.grad_buf(ig, static_cast<size_t>(K));
                for (size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < K; ++j) gg[static_cast<size_t>(j)] += g[r * K + j] * (*xhat)[r * K + j];
            }
            if (ib >= 0) {
                auto& gb = t.grad_buf(ib, static_cast<size_t>(K));
                for (size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < K; ++j) gb[static_cast<size_t>(j)] += g[r * K + j];
            }
        });
        out.tape = tape;
        out.requires_grad = true;
    }
    return out;
}

struct MHSAParams {
    Tensor wq, wk, wv, wo; // each [K,K]
    int heads = 1;
};

// Scaled dot-product attention over x[B,T,K]; per-head softmax(QK^T/sqrt(hd))V,
// heads re-merged and projected by wo.
inline Tensor mhsa(const Tensor& x, const MHSAParams& p, Tape* tape = nullptr) {
    if (x.rank() != 3) throw DimensionError("mhsa: expected [B,T,K], got " + shape_str(x.shape));
    const int B = x.shape[0], T = x.shape[1], K = x.shape[2];
    if (p.wq.shape != Shape{K, K})
        throw DimensionError("mhsa: weight " + shape_str(p.wq.shape) + " incompatible with input " +
                             shape_str(x.shape));
    if (p.heads < 1 || K % p.heads != 0)
        throw ConfigError("mhsa: embed dim " + std::to_string(K) + " not divisible by " +
                          std::to_string(p.heads) + " heads");
    const int hd = K / p.heads;
    auto split_heads = [&](const Tensor& m) {
        // [B*T,K] -> [B*heads, T, hd]
        Tensor r = reshape(m, {B, T, p.heads, hd}, tape);
        r = transpose(r, 1, 2, tape);
        return reshape(r, {B * p.heads, T, hd}, tape);
    };
    Tensor x2 = reshape(x, {B * T, K}, tape);
    Tensor q = split_heads(matmul(x2, p.wq, tape));
    Tensor k = split_heads(matmul(x2, p.wk, tape));
    Tensor v = split_heads(matmul(x2, p.wv, tape));
    Tensor scores = scale(bmm(q, transpose(k, 1, 2, tape), tape), 1.0 / std::sqrt(double(hd)), tape);
    Tensor attn = softmax(scores, 2, tape);
    Tensor ctx = bmm(attn, v, tape); // [B*heads, T, hd]
    ctx = reshape(ctx, {B, p.heads, T, hd}, tape);
    ctx = transpose(ctx, 1, 2, tape);
    ctx = reshape(ctx, {B * T, K}, tape);
    return reshape(matmul(ctx, p.wo, tape), {B, T, K}, tape);
}

struct MlpParams {
    LinearParams fc1, fc2;
};

// linear -> GELU -> linear over the trailing feature axis of [B,K] or [B,T,K].
inline Tensor mlp_block(const Tensor& x, const MlpParams& p, Tape* tape = nullptr) {
    if (x.rank() != 2 && x.rank() != 3)
        throw DimensionError("mlp_block: expected rank 2 or 3, got " + shape_str(x.shape));
    Shape orig = x.shape;
    const int K = orig.back();
    Tensor h = x.rank() == 3 ? reshape(x, {orig[0] * orig[1], K}, tape) : x;
    h = linear(h, p.fc1, tape);
    h = gelu(h, tape);
    h = linear(h, p.fc2, tape);
    if (orig.size() == 3) h = reshape(h, {orig[0], orig[1], p.fc2.out_dim()}, tape);
    return h;
}

// Inverted dropout: zero with probability p_drop, scale survivors by
// 1/(1-p_drop). Identity in infer mode; rng is consumed only in train mode.
inline Tensor dropout(const Tensor& x, double p_drop, Mode mode, Rng* rng, Tape* tape = nullptr) {
    if (p_drop < 0.0 || p_drop >= 1.0)
        throw ConfigError("dropout: p_drop must be in [0,1), got " + std::to_string(p_drop));
    if (mode == Mode::infer || p_drop == 0.0) return x;
    if (!rng) throw ContractError("dropout: train mode requires an rng");
    Tensor mask(x.shape);
    double keep_scale = 1.0 / (1.0 - p_drop);
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = rng->bernoulli(p_drop) ? 0.0 : keep_scale;
    return mul(x, mask, tape);
}

struct PatchEmbedParams {
    int patch = 16;    // P, cubic edge length in voxels
    int channels = 1;  // input channels
    Tensor projection; // [channels*P^3, K]
    Tensor bias;       // [K]
};

// Token count along one axis under floor division (trailing voxels dropped).
inline int patch_tokens_1d(int dim, int patch) { return dim / patch; }

inline int patch_token_count(int d, int w, int h, int patch) {
    return patch_tokens_1d(d, patch) * patch_tokens_1d(w, patch) * patch_tokens_1d(h, patch);
}

// x[C,D,W,H] -> [L,K]: non-overlapping P^3 blocks in (d,w,h) order, flattened
// and projected. Implemented as unfold + matmul, equivalent to a stride-P conv.
inline Tensor patch_embed(const Tensor& x, const PatchEmbedParams& p, Tape* tape = nullptr) {
    if (x.rank() != 4) throw DimensionError("patch_embed: expected [C,D,W,H], got " + shape_str(x.shape));
    if (p.patch < 1) throw ConfigError("patch_embed: patch size must be >= 1");
    if (x.shape[0] != p.channels)
        throw DimensionError("patch_embed: got " + std::to_string(x.shape[0]) + " channels, expected " +
                             std::to_string(p.channels));
    if (x.shape[1] < p.patch || x.shape[2] < p.patch || x.shape[3] < p.patch)
        throw InputTooSmallError("patch_embed: volume " + shape_str(x.shape) +
                                 " smaller than patch size " + std::to_string(p.patch));
    if (p.projection.shape[0] != p.channels * p.patch * p.patch * p.patch)
        throw DimensionError("patch_embed: projection rows " + shape_str(p.projection.shape) +
                             " != channels*P^3");
    Tensor patches = unfold3d(x, p.patch, p.patch, p.patch, p.patch, p.patch, p.patch, 0, 0, 0, tape);
    return add_row_bias(matmul(patches, p.projection, tape), p.bias, tape);
}

inline Tensor volume_tensor(const Volume& v) {
    return Tensor({1, v.d, v.w, v.h}, v.voxels);
}

inline Tensor patch_embed(const Volume& v, const PatchEmbedParams& p, Tape* tape = nullptr) {
    return patch_embed(volume_tensor(v), p, tape);
}

struct ConvBlockParams {
    Tensor kernel; // [Cin*27, Cout], taps ordered like unfold3d columns
    Tensor bias;   // [Cout]
    LayerNormParams norm;
};

// One stem block: 3x3x3 conv, stride 2, pad 1 -> per-position channel layer
// norm -> GELU. Spatial dims become ceil(dim/2).
inline Tensor conv_block(const Tensor& x, const ConvBlockParams& p, Tape* tape = nullptr) {
    if (x.rank() != 4) throw DimensionError("conv_block: expected [C,D,W,H], got " + shape_str(x.shape));
    const int D = x.shape[1], W = x.shape[2], H = x.shape[3];
    const int od = (D + 1) / 2, ow = (W + 1) / 2, oh = (H + 1) / 2;
    const int cout = p.kernel.shape[1];
    if (p.kernel.shape[0] != x.shape[0] * 27)
        throw DimensionError("conv_block: kernel " + shape_str(p.kernel.shape) +
                             " incompatible with input channels " + std::to_string(x.shape[0]));
    Tensor cols = unfold3d(x, 3, 3, 3, 2, 2, 2, 1, 1, 1, tape); // [od*ow*oh, Cin*27]
    Tensor y = add_row_bias(matmul(cols, p.kernel, tape), p.bias, tape);
    y = layer_norm(y, p.norm, tape);
    y = gelu(y, tape);
    y = transpose(y, 0, 1, tape); // [Cout, od*ow*oh]
    return reshape(y, {cout, od, ow, oh}, tape);
}

// Three-block downsampling stem used by the hybrid (conv + transformer) variant.
inline Tensor conv_stem(const Tensor& x, const std::vector<ConvBlockParams>& blocks,
                        Tape* tape = nullptr) {
    Tensor h = x;
    for (const auto& b : blocks) h = conv_block(h, b, tape);
    return h;
}

} // namespace transop
