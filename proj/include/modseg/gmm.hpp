// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "modseg/common.hpp"

// Diagonal-covariance Gaussian mixture fitted by EM. Single-threaded with a
// fixed reduction order so a (features, K, seed) triple always produces the
// same bits.

namespace modseg {

constexpr double kVarianceFloor = 1e-6;

struct GmmModel {
    int K = 0;
    int dim = 0;
    std::vector<double> means;      // K x dim
    std::vector<double> variances;  // K x dim, >= kVarianceFloor
    std::vector<double> weights;    // K, sums to 1

    double mean_at(int k, int d) const { return means[static_cast<std::size_t>(k) * dim + d]; }
    double var_at(int k, int d) const { return variances[static_cast<std::size_t>(k) * dim + d]; }

    void validate() const {
        if (K <= 0 || dim <= 0) throw ContractError("GmmModel: K and dim must be positive");
        if (means.size() != static_cast<std::size_t>(K) * dim ||
            variances.size() != static_cast<std::size_t>(K) * dim ||
            weights.size() != static_cast<std::size_t>(K))
            throw ContractError("GmmModel: field sizes inconsistent");
        double s = 0.0;
        for (double w : weights) {
            if (!(w > 0.0)) throw ContractError("GmmModel: weights must be positive");
            s += w;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ContractError("GmmModel: weights must sum to 1");
        for (double v : variances)
            if (!(v >= kVarianceFloor)) throw ContractError("GmmModel: variance below floor");
    }
};

namespace detail {

inline double log_gaussian_diag(const GmmModel& g, int k, const double* f) {
    constexpr double kLog2Pi = 1.8378770664093453;
    double acc = 0.0;
    for (int d = 0; d < g.dim; ++d) {
        const double z = f[d] - g.mean_at(k, d);
        acc += z * z / g.var_at(k, d) + std::log(g.var_at(k, d)) + kLog2Pi;
    }
    return -0.5 * acc;
}

}  // namespace detail

/// Soft assignment rho(k) = N(f|mu_k, sigma_k^2) v_k / sum_j ..., computed in
/// log space with max subtraction. Always sums to 1 for finite input.
inline std::vector<double> posterior(const GmmModel& gmm, const std::vector<double>& f) {
    if (static_cast<int>(f.size()) != gmm.dim)
        throw ContractError("posterior: feature dimension mismatch");
    std::vector<double> logp(gmm.K);
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < gmm.K; ++k) {
        logp[k] = std::log(gmm.weights[k]) + detail::log_gaussian_diag(gmm, k, f.data());
        mx = std::max(mx, logp[k]);
    }
    double denom = 0.0;
    for (int k = 0; k < gmm.K; ++k) {
        logp[k] = std::exp(logp[k] - mx);
        denom += logp[k];
    }
    for (double& v : logp) v /= denom;
    return logp;
}

struct GmmFit {
    GmmModel model;
    std::vector<double> log_likelihoods;  // one entry per E-step
    int iterations = 0;
};

namespace detail {

// E-step over all points; returns total log-likelihood, fills resp (N x K).
inline double gmm_estep(const GmmModel& g, const std::vector<double>& x, int n,
                        std::vector<double>& resp) {
    resp.assign(static_cast<std::size_t>(n) * g.K, 0.0);
    double ll = 0.0;
    std::vector<double> logp(g.K);
    for (int i = 0; i < n; ++i) {
        const double* f = &x[static_cast<std::size_t>(i) * g.dim];
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < g.K; ++k) {
            logp[k] = std::log(g.weights[k]) + log_gaussian_diag(g, k, f);
            mx = std::max(mx, logp[k]);
        }
        double denom = 0.0;
        for (int k = 0; k < g.K; ++k) {
            logp[k] = std::exp(logp[k] - mx);
            denom += logp[k];
        }
        for (int k = 0; k < g.K; ++k) resp[static_cast<std::size_t>(i) * g.K + k] = logp[k] / denom;
        ll += mx + std::log(denom);
    }
    return ll;
}

// M-step with deterministic empty-component rescue: a dead component is
// re-seeded from the point with the lowest max-posterior.
inline void gmm_mstep(GmmModel& g, const std::vector<double>& x, int n,
                      const std::vector<double>& resp, const std::vector<double>& global_var) {
    for (int k = 0; k < g.K; ++k) {
        double nk = 0.0;
        for (int i = 0; i < n; ++i) nk += resp[static_cast<std::size_t>(i) * g.K + k];
        if (nk <= 1e-12) {
            int worst = 0;
            double worst_conf = std::numeric_limits<double>::infinity();
            for (int i = 0; i < n; ++i) {
                double conf = 0.0;
                for (int j = 0; j < g.K; ++j)
                    conf = std::max(conf, resp[static_cast<std::size_t>(i) * g.K + j]);
                if (conf < worst_conf) {
                    worst_conf = conf;
                    worst = i;
                }
            }
            for (int d = 0; d < g.dim; ++d) {
                g.means[static_cast<std::size_t>(k) * g.dim + d] =
                    x[static_cast<std::size_t>(worst) * g.dim + d];
                g.variances[static_cast<std::size_t>(k) * g.dim + d] = global_var[d];
            }
            g.weights[k] = 1.0 / n;
            continue;
        }
        for (int d = 0; d < g.dim; ++d) {
            double m = 0.0;
            for (int i = 0; i < n; ++i)
                m += resp[static_cast<std::size_t>(i) * g.K + k] *
                     x[static_cast<std::size_t>(i) * g.dim + d];
            m /= nk;
            double v = 0.0;
            for (int i = 0; i < n; ++i) {
                const double z = x[static_cast<std::size_t>(i) * g.dim + d] - m;
                v += resp[static_cast<std::size_t>(i) * g.K + k] * z * z;
            }
            v /= nk;
            g.means[static_cast<std::size_t>(k) * g.dim + d] = m;
            g.variances[static_cast<std::size_t>(k) * g.dim + d] = std::max(v, kVarianceFloor);
        }
        g.weights[k] = nk / n;
    }
    double s = 0.0;
    for (double w : g.weights) s += w;
    for (double& w : g.weights) w /= s;
}

inline std::vector<int> kmeanspp_seeds(const std::vector<double>& x, int n, int dim, int k,
                                       Rng& rng) {
    std::vector<int> centers;
    centers.push_back(static_cast<int>(rng.index(n)));
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    while (static_cast<int>(centers.size()) < k) {
        const int c = centers.back();
        for (int i = 0; i < n; ++i) {
            double dist = 0.0;
            for (int d = 0; d < dim; ++d) {
                const double z = x[static_cast<std::size_t>(i) * dim + d] -
                                 x[static_cast<std::size_t>(c) * dim + d];
                dist += z * z;
            }
            d2[i] = std::min(d2[i], dist);
        }
        double total = 0.0;
        for (double v : d2) total += v;
        if (total <= 0.0) {
            centers.push_back(static_cast<int>(rng.index(n)));
            continue;
        }
        const double u = rng.uniform() * total;
        double cum = 0.0;
        int pick = n - 1;
        for (int i = 0; i < n; ++i) {
            cum += d2[i];
            if (u < cum) {
                pick = i;
                break;
            }
        }
        centers.push_back(pick);
    }
    return centers;
}

}  // namespace detail

/// EM fit with seeded k-means++ initialization. Stops when the E-step
/// log-likelihood gain drops below tol or max_iters is reached.
inline GmmFit fit_gmm(const std::vector<double>& features, int n, int k, std::uint64_t seed,
                      int max_iters = 100, double tol = 1e-7) {
    if (n < k) throw ContractError("fit_gmm: need at least K points");
    if (n <= 0 || k <= 0) throw ContractError("fit_gmm: N and K must be positive");
    if (features.size() % static_cast<std::size_t>(n) != 0)
        throw ContractError("fit_gmm: feature buffer not divisible by N");
    const int dim = static_cast<int>(features.size() / static_cast<std::size_t>(n));

    std::vector<double> global_var(dim, 0.0);
    {
        std::vector<double> mean(dim, 0.0);
        for (int i = 0; i < n; ++i)
            for (int d = 0; d < dim; ++d) mean[d] += features[static_cast<std::size_t>(i) * dim + d];
        for (double& m : mean) m /= n;
        for (int i = 0; i < n; ++i)
            for (int d = 0; d < dim; ++d) {
                const double z = features[static_cast<std::size_t>(i) * dim + d] - mean[d];
                global_var[d] += z * z;
            }
        for (double& v : global_var) v = std::max(v / n, kVarianceFloor);
    }

    GmmFit fit;
    GmmModel& g = fit.model;
    g.K = k;
    g.dim = dim;
    g.means.resize(static_cast<std::size_t>(k) * dim);
    g.variances.resize(static_cast<std::size_t>(k) * dim);
    g.weights.assign(k, 1.0 / k);

    Rng rng(seed);
    const auto seeds = detail::kmeanspp_seeds(features, n, dim, k, rng);
    for (int c = 0; c < k; ++c)
        for (int d = 0; d < dim; ++d) {
            g.means[static_cast<std::size_t>(c) * dim + d] =
                features[static_cast<std::size_t>(seeds[c]) * dim + d];
            g.variances[static_cast<std::size_t>(c) * dim + d] = global_var[d];
        }

    std::vector<double> resp;
    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iters; ++it) {
        const double ll = detail::gmm_estep(g, features, n, resp);
        fit.log_likelihoods.push_back(ll);
        fit.iterations = it + 1;
        if (ll - prev_ll < tol && it > 0) break;
        prev_ll = ll;
        detail::gmm_mstep(g, features, n, resp, global_var);
    }
    return fit;
}

}  // namespace modseg
