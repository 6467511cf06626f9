// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "modseg/autodiff.hpp"
#include "modseg/fisher.hpp"
#include "modseg/gmm.hpp"
#include "modseg/image.hpp"
#include "modseg/metrics.hpp"
#include "modseg/params.hpp"
#include "modseg/unroll.hpp"

// Toy-scale vision transformer segmentation model. Four variants share one
// encoder: the baseline embeds raw patches, the fv-encoder embeds Fisher
// descriptors, the lr-decoder restores the frame with the unrolled LR stages
// before the baseline path, and fv-lr chains restoration into the Fisher
// path. Models consume the luminance plane.

namespace modseg {

enum class Variant { baseline, fv_encoder, lr_decoder, fv_lr };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::baseline: return "baseline";
        case Variant::fv_encoder: return "fv-encoder";
        case Variant::lr_decoder: return "lr-decoder";
        case Variant::fv_lr: return "fv-lr";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "baseline") return Variant::baseline;
    if (s == "fv-encoder") return Variant::fv_encoder;
    if (s == "lr-decoder") return Variant::lr_decoder;
    if (s == "fv-lr") return Variant::fv_lr;
    throw ContractError("unknown variant: " + s);
}

inline bool uses_fisher(Variant v) { return v == Variant::fv_encoder || v == Variant::fv_lr; }
inline bool uses_unroll(Variant v) { return v == Variant::lr_decoder || v == Variant::fv_lr; }

struct VitConfig {
    int image_size = 64;
    int patch_size = 8;
    int embed_dim = 64;
    int layers = 4;
    int heads = 4;
    int mlp_dim = 128;
    Variant variant = Variant::baseline;
    int gmm_components = 8;  // fv routes
    UnrollConfig unroll;     // lr routes

    int n_patches() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }
    int patch_dim() const { return patch_size * patch_size; }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw ContractError("VitConfig: image_size must divide by patch_size");
        if (embed_dim <= 0 || embed_dim % heads != 0)
            throw ContractError("VitConfig: embed_dim must divide by heads");
        if (layers < 0 || mlp_dim <= 0) throw ContractError("VitConfig: bad layer/mlp sizes");
        if (uses_fisher(variant) && gmm_components <= 0)
            throw ContractError("VitConfig: fv variants need gmm_components > 0");
        if (uses_unroll(variant)) {
            unroll.validate();
            if (image_size % unroll.patch_size != 0)
                throw ContractError("VitConfig: image_size must divide by unroll patch size");
        }
    }
};

struct SegModel {
    VitConfig config;
    ParamStore params;
    GmmModel gmm;  // populated for fv routes only
    static constexpr int kVersion = 1;
};

/// Seeded parameter initialization: uniform 1/sqrt(fan-in) for linear maps,
/// zeros for biases and residual output projections, ones for LN gains.
inline ParamStore init_params(const VitConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore p;
    Rng rng(seed);
    const int d = cfg.embed_dim;
    const int n = cfg.n_patches();

    if (uses_fisher(cfg.variant)) {
        const int desc_dim = 2 * cfg.gmm_components * cfg.patch_dim();
        ad::Tensor w(desc_dim, d);
        detail::fill_uniform_fanin(w, desc_dim, rng);
        p.add("embed.fv", std::move(w));
    } else {
        ad::Tensor w(cfg.patch_dim(), d);
        detail::fill_uniform_fanin(w, cfg.patch_dim(), rng);
        p.add("embed.patch", std::move(w));
    }
    if (cfg.variant == Variant::lr_decoder) {
        // restored plane is re-embedded through the baseline path
    }
    p.add("embed.class", ad::Tensor(1, d, 0.0));
    {
        ad::Tensor pos(n + 1, d);
        detail::fill_uniform_fanin(pos, d, rng);
        p.add("embed.pos", std::move(pos));
    }
    for (int l = 0; l < cfg.layers; ++l)
        detail::add_block_params(p, "enc" + std::to_string(l), d, cfg.mlp_dim, rng);
    add_layernorm(p, "final_ln", d);
    add_linear(p, "head", d, cfg.patch_dim(), rng);

    if (uses_unroll(cfg.variant)) add_unroll_params(p, cfg.unroll, cfg.image_size, rng);
    return p;
}

// ---- graph builders ----

/// Eq.-1 embedding: project tokens, prepend the class token, add positions.
inline ad::VarId embed_graph(GraphParams& P, ad::VarId tokens, const std::string& embed_name,
                             const VitConfig& cfg) {
    ad::Tape& t = *P.tape;
    if (t.val(tokens).rows != cfg.n_patches())
        throw ContractError("embed: token count does not match position table");
    const auto projected = ad::matmul(t, tokens, P(embed_name));
    const auto with_class = ad::concat_rows(t, {P("embed.class"), projected});
    return ad::add(t, with_class, P("embed.pos"));
}

/// Eqs. 2-3: pre-norm residual MSA then pre-norm residual MLP.
inline ad::VarId encoder_layer_graph(GraphParams& P, ad::VarId z, int layer,
                                     const VitConfig& cfg) {
    return detail::transformer_block(P, z, "enc" + std::to_string(layer), cfg.embed_dim,
                                     cfg.heads);
}

/// embed -> L layers -> sequence-wide final LayerNorm (Eq. 4).
inline ad::VarId encode_graph(GraphParams& P, ad::VarId tokens, const std::string& embed_name,
                              const VitConfig& cfg) {
    ad::Tape& t = *P.tape;
    ad::VarId z = embed_graph(P, tokens, embed_name, cfg);
    for (int l = 0; l < cfg.layers; ++l) z = encoder_layer_graph(P, z, l, cfg);
    return ad::layernorm_rows(t, z, P("final_ln.g"), P("final_ln.b"));
}

/// Drops the class token and maps each token to its patch's logits.
inline ad::VarId seg_head_graph(GraphParams& P, ad::VarId z, const VitConfig& cfg) {
    ad::Tape& t = *P.tape;
    const auto tokens = ad::slice_rows(t, z, 1, cfg.n_patches() + 1);
    const auto rows = ad::add_rowvec(t, ad::matmul(t, tokens, P("head.w")), P("head.b"));
    return ad::depatchify(t, rows, cfg.patch_size, cfg.image_size, cfg.image_size);
}

struct ForwardGraph {
    ad::Tape tape;
    GraphParams params;        // holds name -> VarId for gradient readout
    ad::VarId logits = -1;     // H x W plane
    ad::VarId restored = -1;   // lr routes: final f estimate
    ad::VarId psf = -1;        // lr routes: final h estimate

    ForwardGraph() { params.tape = &tape; }
    ForwardGraph(const ForwardGraph&) = delete;
    ForwardGraph& operator=(const ForwardGraph&) = delete;
};

/// Builds the full variant-dispatched forward pass. The returned graph owns
/// the tape; callers read values or run backward on a loss built on top.
inline std::unique_ptr<ForwardGraph> build_forward(const SegModel& model, const ImagePlane& img,
                                                   bool training) {
    const VitConfig& cfg = model.config;
    cfg.validate();
    if (img.height != cfg.image_size || img.width != cfg.image_size)
        throw ContractError("forward: image does not match config size");
    if (uses_fisher(cfg.variant)) {
        if (model.gmm.K != cfg.gmm_components || model.gmm.dim != cfg.patch_dim())
            throw ContractError("forward: GMM missing or inconsistent for fv variant");
    }

    auto graph = std::make_unique<ForwardGraph>();
    ForwardGraph& g = *graph;
    g.params.store = &model.params;
    g.params.training = training;
    ad::Tape& t = g.tape;

    const ImagePlane lum = to_luminance(img);
    const auto input_plane = t.constant(ad::Tensor(lum.height, lum.width, lum.data));

    ad::VarId token_source = input_plane;
    if (uses_unroll(cfg.variant)) {
        const auto out = unrolled_lr_decode_graph(g.params, input_plane, cfg.unroll);
        g.restored = out.f;
        g.psf = out.h;
        token_source = out.f;
    }

    ad::VarId tokens;
    std::string embed_name;
    if (uses_fisher(cfg.variant)) {
        const auto patches = ad::patchify_stack(t, {token_source}, cfg.patch_size);
        tokens = fisher_descriptor_graph(t, patches, model.gmm);
        embed_name = "embed.fv";
    } else {
        tokens = ad::patchify_stack(t, {token_source}, cfg.patch_size);
        embed_name = "embed.patch";
    }

    const auto encoded = encode_graph(g.params, tokens, embed_name, cfg);
    g.logits = seg_head_graph(g.params, encoded, cfg);
    return graph;
}

/// Forward pass returning the logit plane.
inline ImagePlane forward(const SegModel& model, const ImagePlane& img) {
    const auto g = build_forward(model, img, /*training=*/false);
    const ad::Tensor& out = g->tape.val(g->logits);
    ImagePlane plane(out.rows, out.cols, 1);
    plane.data = out.data;
    return plane;
}

/// sigmoid(logits) > threshold.
inline Mask predict_mask(const SegModel& model, const ImagePlane& img, double threshold = 0.5) {
    if (!(threshold > 0.0 && threshold < 1.0) && threshold != 0.0)
        throw ContractError("predict_mask: threshold must lie in [0,1)");
    const ImagePlane logits = forward(model, img);
    Mask m(logits.height, logits.width);
    for (std::size_t i = 0; i < logits.data.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-logits.data[i]));
        m.data[i] = p > threshold ? 1 : 0;
    }
    return m;
}

}  // namespace modseg
