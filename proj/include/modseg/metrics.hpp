// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "modseg/common.hpp"
#include "modseg/image.hpp"

namespace modseg {

/// Binary segmentation mask; 1 = foreground.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }

    std::size_t foreground_count() const {
        std::size_t n = 0;
        for (auto v : data) n += (v != 0);
        return n;
    }

    bool same_shape(const Mask& o) const { return height == o.height && width == o.width; }
};

/// Threshold a single-channel plane into a mask (value > threshold = foreground).
inline Mask binarize(const ImagePlane& img, double threshold = 0.5) {
    if (img.channels != 1) throw ContractError("binarize: single-channel input required");
    Mask m(img.height, img.width);
    for (std::size_t i = 0; i < img.data.size(); ++i) m.data[i] = img.data[i] > threshold ? 1 : 0;
    return m;
}

inline ImagePlane mask_to_image(const Mask& m) {
    ImagePlane img(m.height, m.width, 1);
    for (std::size_t i = 0; i < m.data.size(); ++i) img.data[i] = m.data[i] ? 1.0 : 0.0;
    return img;
}

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::uint64_t total() const { return tp + fp + fn + tn; }
};

inline ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
    if (!pred.same_shape(gt)) throw ContractError("confusion: mask shapes differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] != 0;
        const bool g = gt.data[i] != 0;
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

/// Dice score 2TP / (2TP + FP + FN). Two empty masks score 1.0 (agreement on
/// absence).
inline double dice(const ConfusionCounts& c) {
    const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
    if (denom == 0) return 1.0;
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

inline double dice(const Mask& pred, const Mask& gt) { return dice(confusion(pred, gt)); }

/// PSNR in dB with peak 1.0, capped at 99.0 for identical inputs.
inline double psnr(const ImagePlane& a, const ImagePlane& b) {
    if (!a.same_shape(b)) throw ContractError("psnr: image shapes differ");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse <= 0.0) return 99.0;
    const double db = 10.0 * std::log10(1.0 / mse);
    return db > 99.0 ? 99.0 : db;
}

}  // namespace modseg
