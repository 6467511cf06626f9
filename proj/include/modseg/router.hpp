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
#include <string>
#include <utility>
#include <vector>

#include "modseg/common.hpp"
#include "modseg/image.hpp"

// Per-frame quality inspection. Blur is measured as the variance of the
// Laplacian response (low = blurred), noise as the mean absolute deviation
// about the median of a high-pass response (high = noisy). Both statistics
// are computed on the luminance plane.

namespace modseg {

enum class Route { clean, noisy, blurred, noisy_blurred };

inline std::string to_string(Route r) {
    switch (r) {
        case Route::clean: return "clean";
        case Route::noisy: return "noisy";
        case Route::blurred: return "blurred";
        case Route::noisy_blurred: return "noisy-blurred";
    }
    return "?";
}

/// Pure mapping from the two degradation flags to a route.
inline Route route_for(bool is_noisy, bool is_blurred) {
    if (is_noisy && is_blurred) return Route::noisy_blurred;
    if (is_noisy) return Route::noisy;
    if (is_blurred) return Route::blurred;
    return Route::clean;
}

struct QualityThresholds {
    double lap_var_min = 0.0;  // below => blurred
    double hp_mad_max = 0.0;   // above => noisy

    void validate() const {
        if (!(std::isfinite(lap_var_min) && lap_var_min >= 0.0) ||
            !(std::isfinite(hp_mad_max) && hp_mad_max >= 0.0))
            throw ContractError("QualityThresholds: values must be finite and >= 0");
    }
};

struct QualityReport {
    double lap_variance = 0.0;
    double hp_mad = 0.0;
    bool is_blurred = false;
    bool is_noisy = false;
    Route route = Route::clean;
};

/// Population variance of the Laplacian response. Lower means blurrier.
inline double laplacian_variance(const ImagePlane& img) {
    const ImagePlane lap = laplacian(to_luminance(img));
    double mean = 0.0;
    for (double v : lap.data) mean += v;
    mean /= static_cast<double>(lap.data.size());
    double var = 0.0;
    for (double v : lap.data) var += (v - mean) * (v - mean);
    return var / static_cast<double>(lap.data.size());
}

/// MAD about the median of the high-pass response (identity minus 3x3 box).
inline double highpass_mad(const ImagePlane& img) {
    static const Kernel2D kHighpass(3, {-1.0 / 9, -1.0 / 9, -1.0 / 9, -1.0 / 9, 8.0 / 9,
                                        -1.0 / 9, -1.0 / 9, -1.0 / 9, -1.0 / 9});
    ImagePlane hp = convolve(to_luminance(img), kHighpass, Boundary::reflect);
    std::vector<double> vals = hp.data;
    const std::size_t mid = vals.size() / 2;
    std::nth_element(vals.begin(), vals.begin() + mid, vals.end());
    double median = vals[mid];
    if (vals.size() % 2 == 0) {
        std::nth_element(vals.begin(), vals.begin() + mid - 1, vals.begin() + mid);
        median = 0.5 * (median + vals[mid - 1]);
    }
    double mad = 0.0;
    for (double v : hp.data) mad += std::abs(v - median);
    return mad / static_cast<double>(hp.data.size());
}

inline QualityReport classify(const ImagePlane& img, const QualityThresholds& th) {
    th.validate();
    QualityReport r;
    r.lap_variance = laplacian_variance(img);
    r.hp_mad = highpass_mad(img);
    r.is_blurred = r.lap_variance < th.lap_var_min;
    r.is_noisy = r.hp_mad > th.hp_mad_max;
    r.route = route_for(r.is_noisy, r.is_blurred);
    return r;
}

namespace detail {

// 1-D threshold sweep. Candidates are midpoints of adjacent distinct
// observed values (the value itself when all observations coincide); the
// winner maximizes balanced accuracy, ties broken toward the midpoint of the
// two class-conditional means.
inline double sweep_threshold(const std::vector<double>& positive,
                              const std::vector<double>& negative, bool positive_below) {
    std::vector<double> all = positive;
    all.insert(all.end(), negative.begin(), negative.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());

    std::vector<double> candidates;
    for (std::size_t i = 0; i + 1 < all.size(); ++i)
        candidates.push_back(0.5 * (all[i] + all[i + 1]));
    if (candidates.empty()) candidates.push_back(all.front());

    auto balanced_accuracy = [&](double t) {
        std::size_t pos_hit = 0, neg_hit = 0;
        for (double v : positive) pos_hit += positive_below ? (v < t) : (v > t);
        for (double v : negative) neg_hit += positive_below ? !(v < t) : !(v > t);
        return 0.5 * (static_cast<double>(pos_hit) / positive.size() +
                      static_cast<double>(neg_hit) / negative.size());
    };

    double mean_pos = 0.0, mean_neg = 0.0;
    for (double v : positive) mean_pos += v;
    for (double v : negative) mean_neg += v;
    const double class_mid = 0.5 * (mean_pos / positive.size() + mean_neg / negative.size());

    double best_t = candidates.front(), best_acc = -1.0;
    for (double t : candidates) {
        const double acc = balanced_accuracy(t);
        if (acc > best_acc + 1e-15 ||
            (std::abs(acc - best_acc) <= 1e-15 &&
             std::abs(t - class_mid) < std::abs(best_t - class_mid))) {
            best_acc = acc;
            best_t = t;
        }
    }
    return best_t;
}

}  // namespace detail

/// Fits both thresholds on a labeled corpus by 1-D sweep. Requires at least
/// one example on each side of each statistic.
inline QualityThresholds calibrate_thresholds(
    const std::vector<std::pair<const ImagePlane*, Route>>& labeled) {
    std::vector<double> lap_blur, lap_sharp, mad_noisy, mad_quiet;
    for (const auto& [img, route] : labeled) {
        const double lv = laplacian_variance(*img);
        const double hm = highpass_mad(*img);
        const bool blurred = route == Route::blurred || route == Route::noisy_blurred;
        const bool noisy = route == Route::noisy || route == Route::noisy_blurred;
        (blurred ? lap_blur : lap_sharp).push_back(lv);
        (noisy ? mad_noisy : mad_quiet).push_back(hm);
    }
    if (lap_blur.empty()) throw CalibrationError("calibration corpus has no blurred examples");
    if (lap_sharp.empty()) throw CalibrationError("calibration corpus has no sharp examples");
    if (mad_noisy.empty()) throw CalibrationError("calibration corpus has no noisy examples");
    if (mad_quiet.empty()) throw CalibrationError("calibration corpus has no clean examples");

    QualityThresholds th;
    th.lap_var_min = detail::sweep_threshold(lap_blur, lap_sharp, /*positive_below=*/true);
    th.hp_mad_max = detail::sweep_threshold(mad_noisy, mad_quiet, /*positive_below=*/false);
    return th;
}

/// Convenience overload for owned images.
inline QualityThresholds calibrate_thresholds(
    const std::vector<std::pair<ImagePlane, Route>>& labeled) {
    std::vector<std::pair<const ImagePlane*, Route>> refs;
    refs.reserve(labeled.size());
    for (const auto& [img, route] : labeled) refs.emplace_back(&img, route);
    return calibrate_thresholds(refs);
}

inline Route route_for_category(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::none: return Route::clean;
        case DegradationKind::gaussian_noise: return Route::noisy;
        case DegradationKind::motion_blur: return Route::blurred;
        case DegradationKind::both: return Route::noisy_blurred;
    }
    return Route::clean;
}

}  // namespace modseg
