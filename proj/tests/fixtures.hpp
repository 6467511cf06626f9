// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include "modseg/image.hpp"

namespace modseg::testfix {

/// Deconvolution fixture: point-rich scene with two compact blobs on a dark
/// background. Point features pin down the PSF in blind estimation.
inline ImagePlane deconv_scene(int size, std::uint64_t seed) {
    Rng rng(seed);
    ImagePlane img(size, size, 1, 0.05);
    const int ndots = 10 + static_cast<int>(rng.index(7));
    for (int i = 0; i < ndots; ++i) {
        const int y = 6 + static_cast<int>(rng.index(size - 12));
        const int x = 6 + static_cast<int>(rng.index(size - 12));
        img.at(y, x) = rng.uniform(0.75, 1.0);
    }
    for (int b = 0; b < 2; ++b) {
        const double cy = rng.uniform(10, size - 10), cx = rng.uniform(10, size - 10);
        const double r = rng.uniform(2.0, 3.5), inten = rng.uniform(0.5, 0.8);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) img.at(y, x) = inten;
    }
    return img;
}

/// One seeded blurred/sharp pair with its ground-truth PSF.
struct DeconvPair {
    ImagePlane sharp;
    ImagePlane blurred;
    Psf psf;
};

inline DeconvPair make_deconv_pair(int size, int psf_len, std::uint64_t seed) {
    Rng rng(seed);
    DeconvPair p;
    p.sharp = deconv_scene(size, seed * 7919 + 13);
    p.psf = make_motion_psf(psf_len, rng.uniform(0.0, 180.0));
    p.blurred = convolve(p.sharp, p.psf, Boundary::reflect);
    return p;
}

}  // namespace modseg::testfix
