// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "modseg/common.hpp"
#include "modseg/image.hpp"

// Lucy-Richardson deconvolution. The multiplicative image update uses reflect
// boundaries throughout; denominators are floored at kLrFloor because the
// reblurred estimate can reach zero on dark regions.

namespace modseg {

constexpr double kLrFloor = 1e-12;

struct LrState {
    ImagePlane f;  // latent image estimate, elementwise >= kLrFloor
    Psf h;         // PSF estimate
    ImagePlane g;  // observation
    int iteration = 0;
};

/// One multiplicative image update:
/// f <- f .* correlate(g ./ max(f (*) h, floor), h).
inline LrState lr_step(const LrState& state) {
    if (!state.f.same_shape(state.g)) throw ContractError("lr_step: f and g shapes differ");
    const ImagePlane reblurred = convolve(state.f, state.h, Boundary::reflect);
    ImagePlane ratio = state.g;
    for (std::size_t i = 0; i < ratio.data.size(); ++i)
        ratio.data[i] /= std::max(reblurred.data[i], kLrFloor);
    const ImagePlane bracket = correlate(ratio, state.h, Boundary::reflect);

    LrState out = state;
    for (std::size_t i = 0; i < out.f.data.size(); ++i)
        out.f.data[i] = std::max(state.f.data[i] * bracket.data[i], kLrFloor);
    out.iteration = state.iteration + 1;
    return out;
}

/// Classical LR from f0 = g, fixed PSF.
inline ImagePlane lr_deconv(const ImagePlane& g, const Psf& h, int iters) {
    if (iters < 1) throw ContractError("lr_deconv: iters must be >= 1");
    LrState state{g, h, g, 0};
    for (double& v : state.f.data) v = std::max(v, kLrFloor);
    for (int i = 0; i < iters; ++i) state = lr_step(state);
    return state.f;
}

/// Blind PSF update (Eq. 7 support window). The correlation of the ratio
/// image with f is evaluated per support offset and normalized by the local
/// mass of f, so a unit ratio leaves the PSF exactly unchanged; the result is
/// floored at 0 and renormalized to sum 1.
inline LrState psf_step(const LrState& state) {
    const ImagePlane reblurred = convolve(state.f, state.h, Boundary::reflect);
    ImagePlane ratio = state.g;
    for (std::size_t i = 0; i < ratio.data.size(); ++i)
        ratio.data[i] /= std::max(reblurred.data[i], kLrFloor);

    const int k = state.h.size;
    const int c = k / 2;
    LrState out = state;
    for (int sy = -c; sy <= c; ++sy) {
        for (int sx = -c; sx <= c; ++sx) {
            double num = 0.0, den = 0.0;
            for (int y = 0; y < state.f.height; ++y) {
                const int fy = y - sy;
                if (fy < 0 || fy >= state.f.height) continue;
                for (int x = 0; x < state.f.width; ++x) {
                    const int fx = x - sx;
                    if (fx < 0 || fx >= state.f.width) continue;
                    for (int ch = 0; ch < state.f.channels; ++ch) {
                        num += ratio.at(y, x, ch) * state.f.at(fy, fx, ch);
                        den += state.f.at(fy, fx, ch);
                    }
                }
            }
            const double factor = num / std::max(den, kLrFloor);
            out.h.at(sy + c, sx + c) = std::max(state.h.at(sy + c, sx + c) * factor, 0.0);
        }
    }
    double s = 0.0;
    for (double w : out.h.weights) s += w;
    if (s <= 0.0) throw NumericError("psf_step: degenerate PSF, all mass removed");
    for (double& w : out.h.weights) w /= s;
    return out;
}

/// Blind alternation: one image step then one PSF step per round, starting
/// from f0 = g and a flat PSF.
inline std::pair<ImagePlane, Psf> blind_deconv(const ImagePlane& g, int psf_size, int rounds) {
    LrState state{g, Psf::flat(psf_size), g, 0};
    for (double& v : state.f.data) v = std::max(v, kLrFloor);
    for (int r = 0; r < rounds; ++r) {
        state = lr_step(state);
        state = psf_step(state);
    }
    return {state.f, state.h};
}

/// Normalized inner product between two kernels of equal size.
inline double psf_correlation(const Psf& a, const Psf& b) {
    if (a.size != b.size) throw ContractError("psf_correlation: sizes differ");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.weights.size(); ++i) {
        dot += a.weights[i] * b.weights[i];
        na += a.weights[i] * a.weights[i];
        nb += b.weights[i] * b.weights[i];
    }
    return dot / std::max(std::sqrt(na * nb), kLrFloor);
}

}  // namespace modseg
