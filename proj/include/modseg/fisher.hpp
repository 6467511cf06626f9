// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <cmath>
#include <vector>

#include "modseg/autodiff.hpp"
#include "modseg/common.hpp"
#include "modseg/gmm.hpp"
#include "modseg/image.hpp"

// Improved-Fisher-Vector patch tokens: posterior-weighted first and second
// order statistics per component, scaled by 1/sqrt(weight), then signed
// square root and global L2 normalization. Descriptor layout is all
// first-order blocks for k = 1..K followed by all second-order blocks.

namespace modseg {

struct FisherToken {
    std::vector<double> posterior;   // K, sums to 1
    std::vector<double> descriptor;  // 2*K*dim
};

inline FisherToken encode_patch(const GmmModel& gmm, const std::vector<double>& f) {
    FisherToken tok;
    tok.posterior = posterior(gmm, f);
    const int kd = gmm.K * gmm.dim;
    tok.descriptor.assign(2 * static_cast<std::size_t>(kd), 0.0);
    for (int k = 0; k < gmm.K; ++k) {
        const double rho = tok.posterior[k];
        const double inv_sqrt_w = 1.0 / std::sqrt(gmm.weights[k]);
        for (int d = 0; d < gmm.dim; ++d) {
            const double sigma = std::sqrt(gmm.var_at(k, d));
            const double z = (f[d] - gmm.mean_at(k, d)) / sigma;
            tok.descriptor[static_cast<std::size_t>(k) * gmm.dim + d] = rho * z * inv_sqrt_w;
            tok.descriptor[static_cast<std::size_t>(kd) + k * gmm.dim + d] =
                rho * (z * z - 1.0) * inv_sqrt_w;
        }
    }
    for (double& v : tok.descriptor) v = (v < 0 ? -1.0 : 1.0) * std::sqrt(std::abs(v));
    double norm = 0.0;
    for (double v : tok.descriptor) norm += v * v;
    if (norm > 0.0) {
        norm = std::sqrt(norm);
        for (double& v : tok.descriptor) v /= norm;
    }
    return tok;
}

/// Differentiable Fisher descriptor matrix for a batch of patch rows
/// (N x dim): same math as encode_patch, composed from tape ops so gradients
/// flow into the patch pixels. GMM parameters enter as constants.
inline ad::VarId fisher_descriptor_graph(ad::Tape& t, ad::VarId patches, const GmmModel& gmm) {
    const int dim = gmm.dim;
    if (t.val(patches).cols != dim)
        throw ContractError("fisher_descriptor_graph: patch dimension != GMM dim");
    constexpr double kLog2Pi = 1.8378770664093453;

    std::vector<ad::VarId> loglik_cols, z_list;
    std::vector<double> inv_sqrt_w(gmm.K);
    for (int k = 0; k < gmm.K; ++k) {
        ad::Tensor neg_mean(1, dim), inv_sigma(1, dim);
        double log_const = std::log(gmm.weights[k]);
        for (int d = 0; d < dim; ++d) {
            neg_mean.at(0, d) = -gmm.mean_at(k, d);
            inv_sigma.at(0, d) = 1.0 / std::sqrt(gmm.var_at(k, d));
            log_const -= 0.5 * (std::log(gmm.var_at(k, d)) + kLog2Pi);
        }
        inv_sqrt_w[k] = 1.0 / std::sqrt(gmm.weights[k]);
        const auto centered = ad::add_rowvec(t, patches, t.constant(std::move(neg_mean)));
        const auto z = ad::mul_rowvec(t, centered, t.constant(std::move(inv_sigma)));
        z_list.push_back(z);
        const auto quad = ad::rowsum(t, ad::mul(t, z, z));
        loglik_cols.push_back(ad::add_scalar(t, ad::scale(t, quad, -0.5), log_const));
    }
    const auto posteriors = ad::softmax_rows(t, ad::concat_cols(t, loglik_cols));

    std::vector<ad::VarId> first_blocks, second_blocks;
    for (int k = 0; k < gmm.K; ++k) {
        const auto rho = ad::slice_cols(t, posteriors, k, k + 1);
        first_blocks.push_back(
            ad::scale(t, ad::mul_colvec(t, z_list[k], rho), inv_sqrt_w[k]));
        const auto z2m1 = ad::add_scalar(t, ad::mul(t, z_list[k], z_list[k]), -1.0);
        second_blocks.push_back(ad::scale(t, ad::mul_colvec(t, z2m1, rho), inv_sqrt_w[k]));
    }
    std::vector<ad::VarId> blocks = first_blocks;
    blocks.insert(blocks.end(), second_blocks.begin(), second_blocks.end());
    return ad::l2norm_rows(t, ad::signed_sqrt(t, ad::concat_cols(t, blocks)));
}

/// Fisher token per non-overlapping patch, row-major, order preserved.
inline std::vector<FisherToken> fv_tokenize(const ImagePlane& img, const GmmModel& gmm,
                                            int patch) {
    const std::vector<double> patches = patchify(img, patch);
    const int dim = patch * patch * img.channels;
    if (gmm.dim != dim) throw ContractError("fv_tokenize: GMM dimension != P*P*C");
    const int n = static_cast<int>(patches.size()) / dim;
    std::vector<FisherToken> out;
    out.reserve(n);
    std::vector<double> f(dim);
    for (int i = 0; i < n; ++i) {
        std::copy(patches.begin() + static_cast<std::size_t>(i) * dim,
                  patches.begin() + static_cast<std::size_t>(i + 1) * dim, f.begin());
        out.push_back(encode_patch(gmm, f));
    }
    return out;
}

}  // namespace modseg
