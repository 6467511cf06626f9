// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "modseg/autodiff.hpp"
#include "modseg/image.hpp"
#include "modseg/lr.hpp"
#include "modseg/params.hpp"

// Unrolled Lucy-Richardson decoder. Each stage patch-embeds the feature
// stack [f, h-plane, g, f (*) h], runs a self-attention block over image
// tokens and a cross-attention block with PSF-row queries over the same
// tokens, then applies multiplicative updates: the image is scaled by
// exp(bounded pre-activation) and the PSF is renormalized through a softmax
// over log h plus predicted logits. Zero-initialized update projections make
// every stage the identity.

namespace modseg {

struct UnrollConfig {
    int stages = 3;
    int psf_size = 9;
    int embed_dim = 64;
    int heads = 4;
    int mlp_dim = 128;
    int patch_size = 8;

    void validate() const {
        if (stages < 1) throw ContractError("UnrollConfig: stages must be >= 1");
        if (psf_size < 3 || psf_size % 2 == 0)
            throw ContractError("UnrollConfig: psf_size must be odd and >= 3");
        if (embed_dim % heads != 0)
            throw ContractError("UnrollConfig: embed_dim must divide by heads");
        if (patch_size < 1 || embed_dim < 1 || mlp_dim < 1)
            throw ContractError("UnrollConfig: dimensions must be positive");
    }
};

namespace detail {

inline std::string lr_prefix(int stage) { return "lr" + std::to_string(stage); }

// scaled dot-product multi-head attention; queries may differ from keys/values
inline ad::VarId multi_head_attention(GraphParams& P, ad::VarId q_in, ad::VarId kv_in,
                                      const std::string& prefix, int dim, int heads) {
    ad::Tape& t = *P.tape;
    const int dh = dim / heads;
    const auto q = ad::add_rowvec(t, ad::matmul(t, q_in, P(prefix + ".wq")), P(prefix + ".bq"));
    const auto k = ad::add_rowvec(t, ad::matmul(t, kv_in, P(prefix + ".wk")), P(prefix + ".bk"));
    const auto v = ad::add_rowvec(t, ad::matmul(t, kv_in, P(prefix + ".wv")), P(prefix + ".bv"));
    std::vector<ad::VarId> head_outs;
    for (int h = 0; h < heads; ++h) {
        const auto qh = ad::slice_cols(t, q, h * dh, (h + 1) * dh);
        const auto kh = ad::slice_cols(t, k, h * dh, (h + 1) * dh);
        const auto vh = ad::slice_cols(t, v, h * dh, (h + 1) * dh);
        const auto s = ad::scale(t, ad::matmul_nt(t, qh, kh), 1.0 / std::sqrt(dh));
        head_outs.push_back(ad::matmul(t, ad::softmax_rows(t, s), vh));
    }
    return ad::add_rowvec(t, ad::matmul(t, ad::concat_cols(t, head_outs), P(prefix + ".wo")),
                          P(prefix + ".bo"));
}

inline ad::VarId mlp_block(GraphParams& P, ad::VarId x, const std::string& prefix) {
    ad::Tape& t = *P.tape;
    const auto h1 = ad::add_rowvec(t, ad::matmul(t, x, P(prefix + ".fc1.w")),
                                   P(prefix + ".fc1.b"));
    return ad::add_rowvec(t, ad::matmul(t, ad::gelu(t, h1), P(prefix + ".fc2.w")),
                          P(prefix + ".fc2.b"));
}

// pre-norm residual self-attention then pre-norm residual MLP
inline ad::VarId transformer_block(GraphParams& P, ad::VarId z, const std::string& prefix,
                                   int dim, int heads) {
    ad::Tape& t = *P.tape;
    const auto ln1 = ad::layernorm_rows(t, z, P(prefix + ".ln1.g"), P(prefix + ".ln1.b"));
    const auto z1 = ad::add(t, z, multi_head_attention(P, ln1, ln1, prefix + ".attn", dim, heads));
    const auto ln2 = ad::layernorm_rows(t, z1, P(prefix + ".ln2.g"), P(prefix + ".ln2.b"));
    return ad::add(t, z1, mlp_block(P, ln2, prefix + ".mlp"));
}

// cross-attention block: normalized queries attend over normalized kv tokens
inline ad::VarId cross_block(GraphParams& P, ad::VarId queries, ad::VarId kv,
                             const std::string& prefix, int dim, int heads) {
    ad::Tape& t = *P.tape;
    const auto lnq = ad::layernorm_rows(t, queries, P(prefix + ".lnq.g"), P(prefix + ".lnq.b"));
    const auto lnkv = ad::layernorm_rows(t, kv, P(prefix + ".lnkv.g"), P(prefix + ".lnkv.b"));
    const auto q1 =
        ad::add(t, queries, multi_head_attention(P, lnq, lnkv, prefix + ".attn", dim, heads));
    const auto ln2 = ad::layernorm_rows(t, q1, P(prefix + ".ln2.g"), P(prefix + ".ln2.b"));
    return ad::add(t, q1, mlp_block(P, ln2, prefix + ".mlp"));
}

inline void add_block_params(ParamStore& p, const std::string& prefix, int dim, int mlp_dim,
                             Rng& rng) {
    add_layernorm(p, prefix + ".ln1", dim);
    add_attention(p, prefix + ".attn", dim, rng);
    add_layernorm(p, prefix + ".ln2", dim);
    add_linear(p, prefix + ".mlp.fc1", dim, mlp_dim, rng);
    add_linear(p, prefix + ".mlp.fc2", mlp_dim, dim, rng, /*zero_init=*/true);
}

inline void add_cross_block_params(ParamStore& p, const std::string& prefix, int dim,
                                   int mlp_dim, Rng& rng) {
    add_layernorm(p, prefix + ".lnq", dim);
    add_layernorm(p, prefix + ".lnkv", dim);
    add_attention(p, prefix + ".attn", dim, rng);
    add_layernorm(p, prefix + ".ln2", dim);
    add_linear(p, prefix + ".mlp.fc1", dim, mlp_dim, rng);
    add_linear(p, prefix + ".mlp.fc2", mlp_dim, dim, rng, /*zero_init=*/true);
}

}  // namespace detail

/// Registers one stage's parameters. Update projections start at zero, which
/// makes the stage the identity map on (f, h).
inline void add_unroll_stage_params(ParamStore& p, int stage, const UnrollConfig& cfg,
                                    int image_size, Rng& rng) {
    const std::string s = detail::lr_prefix(stage);
    const int pp = cfg.patch_size * cfg.patch_size;
    const int n = (image_size / cfg.patch_size) * (image_size / cfg.patch_size);
    const int e = cfg.embed_dim;
    const int k = cfg.psf_size;

    add_linear(p, s + ".pe", 4 * pp, e, rng);
    ad::Tensor pos(n, e);
    detail::fill_uniform_fanin(pos, e, rng);
    p.add(s + ".pos", std::move(pos));

    detail::add_block_params(p, s + ".img", e, cfg.mlp_dim, rng);
    add_linear(p, s + ".upd", e, pp, rng, /*zero_init=*/true);

    add_linear(p, s + ".psf.q", k, e, rng);
    detail::add_cross_block_params(p, s + ".psf", e, cfg.mlp_dim, rng);
    add_linear(p, s + ".psf.out", e, k * k, rng, /*zero_init=*/true);
}

struct UnrollGraphOut {
    ad::VarId f = -1;  // restored image plane (H x W)
    ad::VarId h = -1;  // PSF estimate (k x k)
};

/// One unrolled stage on tape: consumes (f, h), returns updated (f, h).
inline UnrollGraphOut unrolled_stage_graph(GraphParams& P, ad::VarId f, ad::VarId h,
                                           ad::VarId g_const, int stage,
                                           const UnrollConfig& cfg) {
    ad::Tape& t = *P.tape;
    const std::string s = detail::lr_prefix(stage);
    const int hgt = t.val(f).rows, wid = t.val(f).cols;
    if (hgt % cfg.patch_size != 0 || wid % cfg.patch_size != 0)
        throw ContractError("unrolled_stage: image dims not divisible by patch size");
    const int k = cfg.psf_size;

    // feature stack: f, centered PSF plane, g, reblurred estimate
    const auto reblur = ad::conv2d(t, f, h);
    const auto h_plane = ad::pad_center(t, h, hgt, wid);
    const auto feats = ad::patchify_stack(t, {f, h_plane, g_const, reblur}, cfg.patch_size);

    auto tokens = ad::add_rowvec(t, ad::matmul(t, feats, P(s + ".pe.w")), P(s + ".pe.b"));
    tokens = ad::add(t, tokens, P(s + ".pos"));

    // image branch: self-attention block then multiplicative field
    const auto img_tokens = detail::transformer_block(P, tokens, s + ".img", cfg.embed_dim,
                                                      cfg.heads);
    const auto pre_rows = ad::add_rowvec(t, ad::matmul(t, img_tokens, P(s + ".upd.w")),
                                         P(s + ".upd.b"));
    const auto pre_plane = ad::depatchify(t, pre_rows, cfg.patch_size, hgt, wid);
    // bounded pre-activation keeps the multiplicative field in [e^-4, e^4]
    const auto bounded = ad::scale(t, ad::tanh_op(t, ad::scale(t, pre_plane, 0.25)), 4.0);
    const auto field = ad::exp_op(t, bounded);
    const auto f_next = ad::mul(t, f, field);

    // PSF branch: one query token per PSF row, cross-attention over tokens
    const auto queries = ad::add_rowvec(t, ad::matmul(t, h, P(s + ".psf.q.w")),
                                        P(s + ".psf.q.b"));
    const auto psf_tokens = detail::cross_block(P, queries, tokens, s + ".psf", cfg.embed_dim,
                                                cfg.heads);
    const auto pooled = ad::mean_rows(t, psf_tokens);
    const auto logits = ad::add_rowvec(t, ad::matmul(t, pooled, P(s + ".psf.out.w")),
                                       P(s + ".psf.out.b"));
    const auto log_h = ad::log_op(t, ad::reshape(t, h, 1, k * k));
    const auto h_next =
        ad::reshape(t, ad::softmax_rows(t, ad::add(t, log_h, logits)), k, k);

    return {f_next, h_next};
}

/// Full unrolled decode on tape: f0 = g, h0 = flat PSF, S stages.
inline UnrollGraphOut unrolled_lr_decode_graph(GraphParams& P, ad::VarId g_const,
                                               const UnrollConfig& cfg) {
    cfg.validate();
    ad::Tape& t = *P.tape;
    ad::VarId f = g_const;
    ad::VarId h = t.constant(
        ad::Tensor(cfg.psf_size, cfg.psf_size,
                   1.0 / (static_cast<double>(cfg.psf_size) * cfg.psf_size)));
    for (int s = 0; s < cfg.stages; ++s) {
        const auto out = unrolled_stage_graph(P, f, h, g_const, s, cfg);
        f = out.f;
        h = out.h;
    }
    return {f, h};
}

namespace detail {

inline ad::Tensor plane_to_tensor(const ImagePlane& img) {
    if (img.channels != 1) throw ContractError("plane_to_tensor: single channel expected");
    return ad::Tensor(img.height, img.width, img.data);
}

inline ImagePlane tensor_to_plane(const ad::Tensor& t) {
    ImagePlane out(t.rows, t.cols, 1);
    out.data = t.data;
    return out;
}

}  // namespace detail

/// Channel-wise feature stack [f, centered h plane, g, f (*) h]; output has
/// 2C + 1 + C channels in that order.
inline ImagePlane build_features(const LrState& state) {
    const int hgt = state.f.height, wid = state.f.width, c = state.f.channels;
    if (!state.f.same_shape(state.g)) throw ContractError("build_features: f/g shapes differ");
    const ImagePlane reblur = convolve(state.f, state.h, Boundary::reflect);
    ImagePlane out(hgt, wid, 2 * c + 1 + c, 0.0);
    const int oy = (hgt - state.h.size) / 2, ox = (wid - state.h.size) / 2;
    for (int y = 0; y < hgt; ++y)
        for (int x = 0; x < wid; ++x) {
            int ch = 0;
            for (int i = 0; i < c; ++i) out.at(y, x, ch++) = state.f.at(y, x, i);
            const bool inside = y >= oy && y < oy + state.h.size && x >= ox && x < ox + state.h.size;
            out.at(y, x, ch++) = inside ? state.h.at(y - oy, x - ox) : 0.0;
            for (int i = 0; i < c; ++i) out.at(y, x, ch++) = state.g.at(y, x, i);
            for (int i = 0; i < c; ++i) out.at(y, x, ch++) = reblur.at(y, x, i);
        }
    return out;
}

/// Splits a build_features stack back into its four named parts.
inline std::vector<ImagePlane> split_features(const ImagePlane& stack, int c) {
    if (stack.channels != 3 * c + 1) throw ContractError("split_features: channel count mismatch");
    std::vector<ImagePlane> parts;
    int ch = 0;
    for (int count : {c, 1, c, c}) {
        ImagePlane p(stack.height, stack.width, count);
        for (int y = 0; y < stack.height; ++y)
            for (int x = 0; x < stack.width; ++x)
                for (int i = 0; i < count; ++i) p.at(y, x, i) = stack.at(y, x, ch + i);
        ch += count;
        parts.push_back(std::move(p));
    }
    return parts;
}

/// Single-stage plain wrapper: runs the stage graph with frozen parameters.
inline LrState unrolled_stage(const LrState& state, const ParamStore& params, int stage,
                              const UnrollConfig& cfg) {
    ad::Tape tape;
    GraphParams P{&tape, &params, /*training=*/false, {}};
    const auto f = tape.constant(detail::plane_to_tensor(state.f));
    const auto h = tape.constant(ad::Tensor(state.h.size, state.h.size, state.h.weights));
    const auto g = tape.constant(detail::plane_to_tensor(state.g));
    const auto out = unrolled_stage_graph(P, f, h, g, stage, cfg);
    LrState next;
    next.f = detail::tensor_to_plane(tape.val(out.f));
    next.h = Psf(cfg.psf_size, tape.val(out.h).data);
    next.g = state.g;
    next.iteration = state.iteration + 1;
    return next;
}

/// Full plain decode: (restored image, PSF estimate) with frozen parameters.
inline std::pair<ImagePlane, Psf> unrolled_lr_decode(const ImagePlane& g,
                                                     const UnrollConfig& cfg,
                                                     const ParamStore& params) {
    ad::Tape tape;
    GraphParams P{&tape, &params, /*training=*/false, {}};
    const auto g_const = tape.constant(detail::plane_to_tensor(g));
    const auto out = unrolled_lr_decode_graph(P, g_const, cfg);
    return {detail::tensor_to_plane(tape.val(out.f)), Psf(cfg.psf_size, tape.val(out.h).data)};
}

/// Registers all stage parameter tensors for a decoder.
inline void add_unroll_params(ParamStore& p, const UnrollConfig& cfg, int image_size, Rng& rng) {
    cfg.validate();
    for (int s = 0; s < cfg.stages; ++s) add_unroll_stage_params(p, s, cfg, image_size, rng);
}

}  // namespace modseg
