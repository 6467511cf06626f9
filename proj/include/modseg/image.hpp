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
#include <string>
#include <vector>

#include "modseg/common.hpp"

namespace modseg {

/// H x W x C raster, row-major, channel-interleaved. Values nominally in [0,1].
struct ImagePlane {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<double> data;

    ImagePlane() = default;
    ImagePlane(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {
        if (h <= 0 || w <= 0 || c <= 0) throw ContractError("ImagePlane: non-positive dimensions");
    }

    double& at(int y, int x, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    std::size_t size() const { return data.size(); }

    bool same_shape(const ImagePlane& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

/// Square odd-sized filter kernel, arbitrary sign.
struct Kernel2D {
    int size = 1;
    std::vector<double> weights{1.0};

    Kernel2D() = default;
    Kernel2D(int k, std::vector<double> w) : size(k), weights(std::move(w)) {
        if (k <= 0 || k % 2 == 0) throw ContractError("Kernel2D: size must be odd and positive");
        if (weights.size() != static_cast<std::size_t>(k) * k)
            throw ContractError("Kernel2D: weight count does not match size");
    }

    double at(int i, int j) const { return weights[static_cast<std::size_t>(i) * size + j]; }

    static Kernel2D identity(int k = 1) {
        Kernel2D out(k, std::vector<double>(static_cast<std::size_t>(k) * k, 0.0));
        out.weights[static_cast<std::size_t>(k / 2) * k + k / 2] = 1.0;
        return out;
    }

    static Kernel2D box(int k) {
        return Kernel2D(k, std::vector<double>(static_cast<std::size_t>(k) * k,
                                               1.0 / (static_cast<double>(k) * k)));
    }
};

/// Point spread function: odd-sized, non-negative, unit sum.
struct Psf {
    int size = 1;
    std::vector<double> weights{1.0};

    Psf() = default;
    Psf(int k, std::vector<double> w) : size(k), weights(std::move(w)) { validate(); }

    double at(int i, int j) const { return weights[static_cast<std::size_t>(i) * size + j]; }
    double& at(int i, int j) { return weights[static_cast<std::size_t>(i) * size + j]; }

    double sum() const {
        double s = 0.0;
        for (double w : weights) s += w;
        return s;
    }

    void validate() const {
        if (size <= 0 || size % 2 == 0) throw ContractError("Psf: size must be odd and positive");
        if (weights.size() != static_cast<std::size_t>(size) * size)
            throw ContractError("Psf: weight count does not match size");
        for (double w : weights) {
            if (!(w >= 0.0)) throw ContractError("Psf: negative or non-finite weight");
        }
        if (std::abs(sum() - 1.0) > 1e-9) throw ContractError("Psf: weights must sum to 1");
    }

    /// Floors negatives at 0 and rescales to unit sum.
    void normalize() {
        double s = 0.0;
        for (double& w : weights) {
            if (w < 0.0) w = 0.0;
            s += w;
        }
        if (s <= 0.0) throw NumericError("Psf: degenerate kernel, all mass removed");
        for (double& w : weights) w /= s;
    }

    static Psf identity(int k = 1) {
        std::vector<double> w(static_cast<std::size_t>(k) * k, 0.0);
        w[static_cast<std::size_t>(k / 2) * k + k / 2] = 1.0;
        return Psf(k, std::move(w));
    }

    static Psf flat(int k) {
        return Psf(k, std::vector<double>(static_cast<std::size_t>(k) * k,
                                          1.0 / (static_cast<double>(k) * k)));
    }
};

enum class Boundary { reflect, zero };

namespace detail {

// Mirror-with-edge reflection; kernel radius is bounded by the image, so a
// single fold is enough.
inline int reflect_index(int i, int n) {
    if (i < 0) return -i - 1;
    if (i >= n) return 2 * n - 1 - i;
    return i;
}

// True convolution (kernel flipped relative to the image).
inline ImagePlane filter2d(const ImagePlane& img, int k, const double* w, Boundary boundary) {
    if (k > std::min(img.height, img.width))
        throw ContractError("filter2d: kernel larger than image");
    const int c = k / 2;
    ImagePlane out(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int ch = 0; ch < img.channels; ++ch) {
                double acc = 0.0;
                for (int i = 0; i < k; ++i) {
                    for (int j = 0; j < k; ++j) {
                        const int sy = y - (i - c);
                        const int sx = x - (j - c);
                        if (boundary == Boundary::zero) {
                            if (sy < 0 || sy >= img.height || sx < 0 || sx >= img.width) continue;
                            acc += w[static_cast<std::size_t>(i) * k + j] * img.at(sy, sx, ch);
                        } else {
                            acc += w[static_cast<std::size_t>(i) * k + j] *
                                   img.at(reflect_index(sy, img.height),
                                          reflect_index(sx, img.width), ch);
                        }
                    }
                }
                out.at(y, x, ch) = acc;
            }
        }
    }
    return out;
}

}  // namespace detail

inline ImagePlane convolve(const ImagePlane& img, const Kernel2D& k,
                           Boundary boundary = Boundary::reflect) {
    return detail::filter2d(img, k.size, k.weights.data(), boundary);
}

inline ImagePlane convolve(const ImagePlane& img, const Psf& k,
                           Boundary boundary = Boundary::reflect) {
    return detail::filter2d(img, k.size, k.weights.data(), boundary);
}

inline Kernel2D rot180(const Kernel2D& k) {
    Kernel2D out = k;
    std::reverse(out.weights.begin(), out.weights.end());
    return out;
}

inline Psf rot180(const Psf& k) {
    Psf out = k;
    std::reverse(out.weights.begin(), out.weights.end());
    return out;
}

// Correlation is convolution with the flipped kernel; routing through the
// same loop keeps the identity bit-exact.
inline ImagePlane correlate(const ImagePlane& img, const Psf& k,
                            Boundary boundary = Boundary::reflect) {
    return convolve(img, rot180(k), boundary);
}

inline ImagePlane correlate(const ImagePlane& img, const Kernel2D& k,
                            Boundary boundary = Boundary::reflect) {
    return convolve(img, rot180(k), boundary);
}

/// ITU-R BT.601 luminance. Grayscale input is passed through unchanged.
inline ImagePlane to_luminance(const ImagePlane& img) {
    if (img.channels == 1) return img;
    if (img.channels != 3) throw ContractError("to_luminance: expected 1 or 3 channels");
    ImagePlane out(img.height, img.width, 1);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            out.at(y, x) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
                           0.114 * img.at(y, x, 2);
        }
    }
    return out;
}

/// 4-neighbor Laplacian [[0,1,0],[1,-4,1],[0,1,0]], reflect boundary.
/// Single-channel input only; convert with to_luminance first.
inline ImagePlane laplacian(const ImagePlane& img) {
    if (img.channels != 1) throw ContractError("laplacian: single-channel input required");
    static const Kernel2D kLap(3, {0, 1, 0, 1, -4, 1, 0, 1, 0});
    return convolve(img, kLap, Boundary::reflect);
}

/// Rasterizes a length-by-angle line segment into a unit-sum kernel of
/// size length x length, stepping along the dominant axis with linear
/// weight splitting along the minor axis (exact rows/columns/diagonals at
/// 0/45/90 degrees, antialiased in between).
inline Psf make_motion_psf(int length, double angle_deg) {
    if (length < 3 || length % 2 == 0)
        throw ContractError("make_motion_psf: length must be odd and >= 3");
    const double rad = angle_deg * 3.14159265358979323846 / 180.0;
    const double dx = std::cos(rad);
    const double dy = std::sin(rad);
    const int c = length / 2;
    std::vector<double> w(static_cast<std::size_t>(length) * length, 0.0);
    const bool x_major = std::abs(dx) >= std::abs(dy);
    const double slope = x_major ? dy / dx : dx / dy;
    auto deposit = [&](int py, int px, double amount) {
        if (std::abs(py) <= c && std::abs(px) <= c)
            w[static_cast<std::size_t>(c + py) * length + (c + px)] += amount;
    };
    for (int t = -c; t <= c; ++t) {
        double minor = t * slope;
        if (std::abs(minor - std::round(minor)) < 1e-9) minor = std::round(minor);
        const int lo = static_cast<int>(std::floor(minor));
        const double frac = minor - lo;
        if (x_major) {
            deposit(lo, t, 1.0 - frac);
            deposit(lo + 1, t, frac);
        } else {
            deposit(t, lo, 1.0 - frac);
            deposit(t, lo + 1, frac);
        }
    }
    double s = 0.0;
    for (double v : w) s += v;
    for (double& v : w) v /= s;
    return Psf(length, std::move(w));
}

enum class DegradationKind { none, gaussian_noise, motion_blur, both };

inline std::string to_string(DegradationKind k) {
    switch (k) {
        case DegradationKind::none: return "none";
        case DegradationKind::gaussian_noise: return "gaussian-noise";
        case DegradationKind::motion_blur: return "motion-blur";
        case DegradationKind::both: return "both";
    }
    return "?";
}

struct DegradationSpec {
    DegradationKind kind = DegradationKind::none;
    double noise_sigma = 0.0;   // fraction of dynamic range
    int blur_length = 0;        // pixels, odd
    double blur_angle = 0.0;    // degrees
    std::uint64_t seed = 0;

    void validate() const {
        const bool has_noise =
            kind == DegradationKind::gaussian_noise || kind == DegradationKind::both;
        const bool has_blur =
            kind == DegradationKind::motion_blur || kind == DegradationKind::both;
        if (has_noise && !(noise_sigma > 0.0))
            throw ContractError("DegradationSpec: noise requires noise_sigma > 0");
        if (has_blur && (blur_length < 3 || blur_length % 2 == 0))
            throw ContractError("DegradationSpec: blur requires odd blur_length >= 3");
    }
};

/// Cuts the image into non-overlapping PxP patches in row-major order and
/// flattens each channel-last: result is N x (P*P*C) row-major, with
/// N = (H/P)*(W/P).
inline std::vector<double> patchify(const ImagePlane& img, int patch) {
    if (patch <= 0 || img.height % patch != 0 || img.width % patch != 0)
        throw ContractError(
            "patchify: image dims not divisible by patch size; center-crop at the dataset layer");
    const int ny = img.height / patch, nx = img.width / patch;
    const std::size_t row = static_cast<std::size_t>(patch) * patch * img.channels;
    std::vector<double> out(static_cast<std::size_t>(ny) * nx * row);
    std::size_t i = 0;
    for (int py = 0; py < ny; ++py)
        for (int px = 0; px < nx; ++px)
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int c = 0; c < img.channels; ++c)
                        out[i++] = img.at(py * patch + dy, px * patch + dx, c);
    return out;
}

/// Inverse of patchify for single-channel planes (used by the mask head).
inline ImagePlane depatchify(const std::vector<double>& rows, int n_patches, int patch,
                             int height, int width) {
    const int ny = height / patch, nx = width / patch;
    if (ny * nx != n_patches ||
        rows.size() != static_cast<std::size_t>(n_patches) * patch * patch)
        throw ContractError("depatchify: shape mismatch");
    ImagePlane out(height, width, 1);
    std::size_t i = 0;
    for (int py = 0; py < ny; ++py)
        for (int px = 0; px < nx; ++px)
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    out.at(py * patch + dy, px * patch + dx) = rows[i++];
    return out;
}

/// Applies blur then noise (when both), clamped to [0,1]. Pure in (img, spec).
inline ImagePlane degrade(const ImagePlane& img, const DegradationSpec& spec) {
    spec.validate();
    if (spec.kind == DegradationKind::none) return img;
    ImagePlane out = img;
    if (spec.kind == DegradationKind::motion_blur || spec.kind == DegradationKind::both) {
        out = convolve(out, make_motion_psf(spec.blur_length, spec.blur_angle),
                       Boundary::reflect);
    }
    if (spec.kind == DegradationKind::gaussian_noise || spec.kind == DegradationKind::both) {
        Rng rng(spec.seed);
        for (double& v : out.data) v += spec.noise_sigma * rng.normal();
    }
    for (double& v : out.data) v = clamp01(v);
    return out;
}

}  // namespace modseg
