// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "modseg/common.hpp"
#include "modseg/image.hpp"
#include "modseg/image_io.hpp"
#include "modseg/metrics.hpp"

namespace modseg {

/// One dataset entry: degraded input, sharp reference, ground-truth mask.
struct QuadrantSample {
    ImagePlane blurred;
    ImagePlane sharp;
    Mask mask;
    std::string source_path;
};

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
};

/// Loads a 4-column composite: [input | restored slot | sharp | mask].
/// Column 2 is ignored whether blank or populated.
inline QuadrantSample load_quadrant_file(const std::string& path) {
    const ImagePlane composite = read_image(path);
    if (composite.width % 4 != 0)
        throw FormatError("quadrant file width not divisible by 4: " + path);
    const int qw = composite.width / 4;
    const int h = composite.height;

    auto column = [&](int idx) {
        ImagePlane out(h, qw, composite.channels);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < qw; ++x)
                for (int c = 0; c < composite.channels; ++c)
                    out.at(y, x, c) = composite.at(y, idx * qw + x, c);
        return out;
    };

    QuadrantSample s;
    s.source_path = path;
    s.blurred = column(0);
    s.sharp = column(2);

    const ImagePlane mask_plane = to_luminance(column(3));
    for (double v : mask_plane.data) {
        if (v > 0.1 && v < 0.9)
            throw FormatError("mask column is not binary within tolerance: " + path);
    }
    s.mask = binarize(mask_plane, 0.5);
    return s;
}

/// Writes the 4-column ground-truth layout (restored slot left black).
inline void write_quadrant_file(const std::string& path, const QuadrantSample& s) {
    const int h = s.sharp.height, qw = s.sharp.width, c = s.sharp.channels;
    if (!s.blurred.same_shape(s.sharp) || s.mask.height != h || s.mask.width != qw)
        throw ContractError("write_quadrant_file: plane shapes differ");
    ImagePlane composite(h, qw * 4, c, 0.0);
    auto paste = [&](const ImagePlane& p, int idx) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < qw; ++x)
                for (int ch = 0; ch < c; ++ch) composite.at(y, idx * qw + x, ch) = p.at(y, x, ch);
    };
    paste(s.blurred, 0);
    paste(s.sharp, 2);
    ImagePlane mask_img = mask_to_image(s.mask);
    if (c == 3) {
        ImagePlane m3(h, qw, 3);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < qw; ++x)
                for (int ch = 0; ch < 3; ++ch) m3.at(y, x, ch) = mask_img.at(y, x);
        paste(m3, 3);
    } else {
        paste(mask_img, 3);
    }
    write_image(path, composite);
}

/// Writes the 6-column result layout: input, restored, sharp, ground-truth
/// mask, predicted mask, overlay (prediction green, ground truth red).
inline void write_result_composite(const std::string& path, const QuadrantSample& s,
                                   const ImagePlane& restored, const Mask& predicted) {
    const int h = s.sharp.height, qw = s.sharp.width;
    ImagePlane composite(h, qw * 6, 3, 0.0);
    auto paste = [&](const ImagePlane& p, int idx) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < qw; ++x)
                for (int ch = 0; ch < 3; ++ch)
                    composite.at(y, idx * qw + x, ch) =
                        p.channels == 3 ? p.at(y, x, ch) : p.at(y, x);
    };
    paste(s.blurred, 0);
    paste(restored, 1);
    paste(s.sharp, 2);
    paste(mask_to_image(s.mask), 3);
    paste(mask_to_image(predicted), 4);

    // overlay on the input frame
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < qw; ++x) {
            double r = s.blurred.channels == 3 ? s.blurred.at(y, x, 0) : s.blurred.at(y, x);
            double g = s.blurred.channels == 3 ? s.blurred.at(y, x, 1) : s.blurred.at(y, x);
            double b = s.blurred.channels == 3 ? s.blurred.at(y, x, 2) : s.blurred.at(y, x);
            if (s.mask.at(y, x)) r = 1.0;
            if (predicted.at(y, x)) g = 1.0;
            composite.at(y, 5 * qw + x, 0) = r;
            composite.at(y, 5 * qw + x, 1) = g;
            composite.at(y, 5 * qw + x, 2) = b;
        }
    write_image(path, composite);
}

// ---- synthetic corpus ----

// Corpus knobs. The defaults keep the four categories separable under the
// router statistics: scene edge energy must dominate the Laplacian noise
// floor (20 sigma^2) while edge density stays low enough that the noise MAD
// lift clears the scene's own high-pass content.
struct SynthSpec {
    int image_size = 64;
    double fg_min = 0.05, fg_max = 0.4;         // mask foreground fraction
    double edge_min = 0.055, edge_max = 0.070;  // boundary-adjacent pixel fraction
    double noise_sigma_lo = 0.040, noise_sigma_hi = 0.048;
    std::vector<int> blur_lengths = {11, 13};
    int shapes_min = 3, shapes_max = 5;
};

/// Degradation category cycled by sample index: none, noise, blur, both.
inline DegradationKind synth_category(std::size_t index) {
    switch (index % 4) {
        case 0: return DegradationKind::none;
        case 1: return DegradationKind::gaussian_noise;
        case 2: return DegradationKind::motion_blur;
        default: return DegradationKind::both;
    }
}

/// Short tag used in synthetic file names.
inline const char* category_tag(DegradationKind k) {
    switch (k) {
        case DegradationKind::none: return "none";
        case DegradationKind::gaussian_noise: return "noise";
        case DegradationKind::motion_blur: return "blur";
        case DegradationKind::both: return "both";
    }
    return "?";
}

/// Recovers the category tag embedded in synthetic file names
/// (…_none.png, …_noise.png, …_blur.png, …_both.png).
inline std::optional<DegradationKind> parse_category_tag(const std::string& name) {
    auto has = [&](const char* tag) { return name.find(tag) != std::string::npos; };
    if (has("_none.")) return DegradationKind::none;
    if (has("_noise.")) return DegradationKind::gaussian_noise;
    if (has("_blur.")) return DegradationKind::motion_blur;
    if (has("_both.")) return DegradationKind::both;
    return std::nullopt;
}

namespace detail {

// Shapes-on-texture scene with an exact mask: every foreground pixel was
// painted by an ellipse or ribbon. Background texture is low-frequency only
// so it is invisible to the 3x3 router filters.
inline void paint_scene(int size, Rng& rng, ImagePlane& img, Mask& mask) {
    img = ImagePlane(size, size, 1);
    mask = Mask(size, size);

    const double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
    const double ph1 = rng.uniform(0.0, 6.28), ph2 = rng.uniform(0.0, 6.28);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double v = 0.14 + 0.03 * std::sin(2 * 3.14159265 * fx * x / size + ph1) +
                       0.03 * std::sin(2 * 3.14159265 * fy * y / size + ph2);
            img.at(y, x) = clamp01(v);
        }

    const int nshapes = 3 + static_cast<int>(rng.index(3));
    for (int s = 0; s < nshapes; ++s) {
        const double inten = rng.uniform(0.86, 0.95);
        if (rng.uniform() < 0.5) {
            // ellipse
            const double cy = rng.uniform(8, size - 8), cx = rng.uniform(8, size - 8);
            const double ry = rng.uniform(3, 9), rx = rng.uniform(3, 9);
            const double th = rng.uniform(0.0, 3.14159265);
            const double ct = std::cos(th), st = std::sin(th);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double dy = y - cy, dx = x - cx;
                    const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
                    if (u * u / (rx * rx) + v * v / (ry * ry) <= 1.0) {
                        img.at(y, x) = inten;
                        mask.at(y, x) = 1;
                    }
                }
        } else {
            // ribbon: thick segment
            const double y0 = rng.uniform(4, size - 4), x0 = rng.uniform(4, size - 4);
            const double ang = rng.uniform(0.0, 3.14159265);
            const double len = rng.uniform(12, 30), half = rng.uniform(1.0, 2.5);
            const double dy = std::sin(ang), dx = std::cos(ang);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double py = y - y0, px = x - x0;
                    const double t = px * dx + py * dy;
                    const double d = std::abs(-px * dy + py * dx);
                    if (t >= -len / 2 && t <= len / 2 && d <= half) {
                        img.at(y, x) = inten;
                        mask.at(y, x) = 1;
                    }
                }
        }
    }
}

// Fraction of pixels adjacent to a mask boundary (either side).
inline double edge_fraction(const Mask& mask) {
    std::size_t n = 0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            const std::uint8_t v = mask.at(y, x);
            const bool edge = (y > 0 && mask.at(y - 1, x) != v) ||
                              (y + 1 < mask.height && mask.at(y + 1, x) != v) ||
                              (x > 0 && mask.at(y, x - 1) != v) ||
                              (x + 1 < mask.width && mask.at(y, x + 1) != v);
            n += edge;
        }
    return static_cast<double>(n) / (static_cast<double>(mask.height) * mask.width);
}

}  // namespace detail

/// Deterministic synthetic corpus; categories cycle through
/// none/noise/blur/both so every quarter of the corpus shares a category.
inline std::vector<QuadrantSample> synth_corpus(int n, const SynthSpec& spec,
                                                std::uint64_t seed) {
    if (n < 4) throw ContractError("synth_corpus: need at least 4 samples");
    Rng rng(seed);
    std::vector<QuadrantSample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        ImagePlane scene;
        Mask mask;
        ImagePlane best_scene;
        Mask best_mask;
        double best_dist = 1e18;
        const double total = static_cast<double>(spec.image_size) * spec.image_size;
        for (int attempt = 0; attempt < 500; ++attempt) {
            detail::paint_scene(spec.image_size, rng, scene, mask);
            const double frac = mask.foreground_count() / total;
            const double edges = detail::edge_fraction(mask);
            auto band_dist = [](double v, double lo, double hi) {
                return v < lo ? lo - v : (v > hi ? v - hi : 0.0);
            };
            const double dist = band_dist(frac, spec.fg_min, spec.fg_max) +
                                band_dist(edges, spec.edge_min, spec.edge_max);
            if (dist < best_dist) {
                best_dist = dist;
                best_scene = scene;
                best_mask = mask;
            }
            if (dist == 0.0) break;
        }
        scene = std::move(best_scene);
        mask = std::move(best_mask);

        const DegradationKind kind = synth_category(i);
        DegradationSpec d;
        d.kind = kind;
        d.seed = rng.next_u64();
        if (kind == DegradationKind::gaussian_noise || kind == DegradationKind::both)
            d.noise_sigma = rng.uniform(spec.noise_sigma_lo, spec.noise_sigma_hi);
        if (kind == DegradationKind::motion_blur || kind == DegradationKind::both) {
            d.blur_length = spec.blur_lengths[rng.index(spec.blur_lengths.size())];
            d.blur_angle = rng.uniform(0.0, 180.0);
        }

        QuadrantSample s;
        s.sharp = scene;
        s.blurred = degrade(scene, d);
        s.mask = mask;
        s.source_path = "synth_" + std::to_string(i) + "_" + category_tag(kind) + ".png";
        out.push_back(std::move(s));
    }
    return out;
}

/// Seeded shuffle, then prefix split. Disjoint and exhaustive.
inline std::pair<std::vector<QuadrantSample>, std::vector<QuadrantSample>> split(
    const std::vector<QuadrantSample>& samples, const SplitSpec& spec) {
    if (samples.size() < 2) throw ContractError("split: need at least 2 samples");
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(spec.seed);
    rng.shuffle(idx);
    std::size_t n_train = static_cast<std::size_t>(
        std::llround(spec.train_fraction * static_cast<double>(samples.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, samples.size() - 1);
    std::pair<std::vector<QuadrantSample>, std::vector<QuadrantSample>> out;
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < n_train ? out.first : out.second).push_back(samples[idx[i]]);
    return out;
}

// ---- manifests ----

inline void write_manifest(const std::string& path, const std::vector<std::string>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write manifest: " + path);
    for (const auto& e : entries) out << e << "\n";
}

inline std::vector<std::string> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot read manifest: " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] != '#') out.push_back(line);
    }
    return out;
}

inline std::vector<QuadrantSample> load_corpus(const std::vector<std::string>& paths) {
    std::vector<QuadrantSample> out;
    out.reserve(paths.size());
    for (const auto& p : paths) out.push_back(load_quadrant_file(p));
    return out;
}

/// Center crop used when a sample is larger than the model input.
inline ImagePlane center_crop(const ImagePlane& img, int size) {
    if (img.height < size || img.width < size)
        throw ContractError("center_crop: image smaller than crop size");
    const int oy = (img.height - size) / 2, ox = (img.width - size) / 2;
    ImagePlane out(size, size, img.channels);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(oy + y, ox + x, c);
    return out;
}

}  // namespace modseg
