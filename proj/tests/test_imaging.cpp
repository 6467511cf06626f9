// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "modseg/image.hpp"
#include "modseg/image_io.hpp"
#include "modseg/metrics.hpp"

using namespace modseg;

namespace {

// Independent O(n^2 k^2) convolution oracle. True convolution: the kernel is
// flipped relative to the image. Kept deliberately separate from the library
// implementation.
ImagePlane naive_convolve(const ImagePlane& img, int k, const std::vector<double>& w,
                          Boundary boundary) {
    const int c = k / 2;
    ImagePlane out(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int ch = 0; ch < img.channels; ++ch) {
                double acc = 0.0;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) {
                        int sy = y - (i - c);
                        int sx = x - (j - c);
                        if (boundary == Boundary::zero) {
                            if (sy < 0 || sy >= img.height || sx < 0 || sx >= img.width) continue;
                        } else {
                            if (sy < 0) sy = -sy - 1;
                            if (sy >= img.height) sy = 2 * img.height - 1 - sy;
                            if (sx < 0) sx = -sx - 1;
                            if (sx >= img.width) sx = 2 * img.width - 1 - sx;
                        }
                        acc += w[static_cast<std::size_t>(i) * k + j] * img.at(sy, sx, ch);
                    }
                out.at(y, x, ch) = acc;
            }
    return out;
}

ImagePlane random_image(int h, int w, int c, std::uint64_t seed) {
    Rng rng(seed);
    ImagePlane img(h, w, c);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

double max_abs_diff(const ImagePlane& a, const ImagePlane& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace

TEST_CASE("convolve: identity kernel returns the image exactly") {
    const auto img = random_image(7, 9, 3, 1);
    const auto out = convolve(img, Kernel2D::identity(3));
    REQUIRE(out.data == img.data);
}

TEST_CASE("convolve: constant image through any PSF stays constant") {
    ImagePlane img(8, 8, 1, 0.37);
    Rng rng(2);
    std::vector<double> w(25);
    double s = 0.0;
    for (double& v : w) {
        v = rng.uniform();
        s += v;
    }
    for (double& v : w) v /= s;
    const auto out = convolve(img, Psf(5, w), Boundary::reflect);
    for (double v : out.data) REQUIRE(v == Catch::Approx(0.37).margin(1e-9));
}

TEST_CASE("convolve: 5x5 ramp through box3 equals the sliding mean oracle") {
    ImagePlane img(5, 5, 1);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) img.at(y, x) = y * 5 + x;
    const auto box = Kernel2D::box(3);
    const auto out = convolve(img, box, Boundary::reflect);
    const auto expect = naive_convolve(img, 3, box.weights, Boundary::reflect);
    REQUIRE(max_abs_diff(out, expect) < 1e-12);
    // interior value is the plain 3x3 mean
    double mean = 0.0;
    for (int y = 1; y <= 3; ++y)
        for (int x = 1; x <= 3; ++x) mean += img.at(y, x);
    mean /= 9.0;
    REQUIRE(out.at(2, 2) == Catch::Approx(mean).margin(1e-12));
}

TEST_CASE("convolve matches the brute-force oracle on random inputs") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const auto img = random_image(11, 8, seed % 2 ? 3 : 1, seed);
        Rng rng(100 + seed);
        std::vector<double> w(9);
        for (double& v : w) v = rng.uniform(-1.0, 1.0);
        for (auto boundary : {Boundary::reflect, Boundary::zero}) {
            const auto out = convolve(img, Kernel2D(3, w), boundary);
            const auto expect = naive_convolve(img, 3, w, boundary);
            REQUIRE(max_abs_diff(out, expect) < 1e-12);
        }
    }
}

TEST_CASE("convolve: kernel larger than image is a dimension error") {
    const auto img = random_image(4, 4, 1, 3);
    REQUIRE_THROWS_AS(convolve(img, Kernel2D::box(5)), ContractError);
}

TEST_CASE("convolve is linear") {
    const auto x = random_image(9, 9, 1, 10);
    const auto y = random_image(9, 9, 1, 11);
    Rng rng(12);
    std::vector<double> w(9);
    for (double& v : w) v = rng.uniform(-1.0, 1.0);
    const Kernel2D k(3, w);
    const double a = 0.7, b = -1.3;
    ImagePlane mix(9, 9, 1);
    for (std::size_t i = 0; i < mix.data.size(); ++i)
        mix.data[i] = a * x.data[i] + b * y.data[i];
    const auto lhs = convolve(mix, k);
    const auto cx = convolve(x, k);
    const auto cy = convolve(y, k);
    for (std::size_t i = 0; i < lhs.data.size(); ++i)
        REQUIRE(lhs.data[i] == Catch::Approx(a * cx.data[i] + b * cy.data[i]).margin(1e-9));
}

TEST_CASE("convolve with a symmetric PSF preserves the image mean under reflect") {
    const auto img = random_image(32, 32, 1, 13);
    double mean_in = 0.0;
    for (double v : img.data) mean_in += v;
    mean_in /= img.data.size();

    // centered separable gaussian
    std::vector<double> g(25);
    double s = 0.0;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            g[i * 5 + j] = std::exp(-((i - 2) * (i - 2) + (j - 2) * (j - 2)) / 2.0);
            s += g[i * 5 + j];
        }
    for (double& v : g) v /= s;

    for (const auto& psf :
         {make_motion_psf(9, 0.0), make_motion_psf(9, 90.0), Psf::flat(5), Psf(5, g)}) {
        const auto out = convolve(img, psf, Boundary::reflect);
        double mean_out = 0.0;
        for (double v : out.data) mean_out += v;
        mean_out /= out.data.size();
        REQUIRE(mean_out == Catch::Approx(mean_in).margin(1e-6));
    }
}

TEST_CASE("correlate equals convolve with the kernel rotated 180 degrees") {
    const auto img = random_image(10, 12, 1, 20);
    Rng rng(21);
    std::vector<double> w(9);
    double s = 0.0;
    for (double& v : w) {
        v = rng.uniform();
        s += v;
    }
    for (double& v : w) v /= s;
    const Psf k(3, w);
    const auto corr = correlate(img, k);
    const auto conv = convolve(img, rot180(k));
    REQUIRE(corr.data == conv.data);  // bit-exact by construction
}

TEST_CASE("correlate: symmetric kernel equals convolve; identity passes through") {
    const auto img = random_image(8, 8, 1, 22);
    const auto sym = Psf::flat(3);
    REQUIRE(correlate(img, sym).data == convolve(img, sym).data);
    REQUIRE(correlate(img, Psf::identity(3)).data == img.data);
}

TEST_CASE("correlate matches a brute-force flipped-kernel loop on an asymmetric kernel") {
    const auto img = random_image(6, 7, 1, 23);
    std::vector<double> w = {0.5, 0.1, 0.0, 0.2, 0.1, 0.0, 0.1, 0.0, 0.0};
    const Psf k(3, w);
    std::vector<double> flipped(w.rbegin(), w.rend());
    const auto expect = naive_convolve(img, 3, flipped, Boundary::reflect);
    const auto got = correlate(img, k);
    REQUIRE(max_abs_diff(got, expect) < 1e-12);
}

TEST_CASE("laplacian: constants vanish, ramps vanish in the interior") {
    ImagePlane flat(6, 6, 1, 0.5);
    for (double v : laplacian(flat).data) REQUIRE(v == Catch::Approx(0.0).margin(1e-12));

    ImagePlane ramp(6, 6, 1);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) ramp.at(y, x) = 0.1 * x + 0.05 * y;
    const auto lap = laplacian(ramp);
    for (int y = 1; y < 5; ++y)
        for (int x = 1; x < 5; ++x) REQUIRE(lap.at(y, x) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("laplacian: single bright pixel reproduces the kernel pattern") {
    ImagePlane img(7, 7, 1, 0.0);
    img.at(3, 3) = 1.0;
    const auto lap = laplacian(img);
    REQUIRE(lap.at(3, 3) == Catch::Approx(-4.0));
    REQUIRE(lap.at(2, 3) == Catch::Approx(1.0));
    REQUIRE(lap.at(4, 3) == Catch::Approx(1.0));
    REQUIRE(lap.at(3, 2) == Catch::Approx(1.0));
    REQUIRE(lap.at(3, 4) == Catch::Approx(1.0));
    REQUIRE(lap.at(2, 2) == Catch::Approx(0.0));
}

TEST_CASE("laplacian rejects multi-channel input") {
    REQUIRE_THROWS_AS(laplacian(random_image(4, 4, 3, 30)), ContractError);
}

TEST_CASE("make_motion_psf: axis-aligned and diagonal cases") {
    const auto h0 = make_motion_psf(3, 0.0);
    REQUIRE(h0.at(1, 0) == Catch::Approx(1.0 / 3));
    REQUIRE(h0.at(1, 1) == Catch::Approx(1.0 / 3));
    REQUIRE(h0.at(1, 2) == Catch::Approx(1.0 / 3));
    REQUIRE(h0.at(0, 1) == 0.0);

    const auto h90 = make_motion_psf(3, 90.0);
    REQUIRE(h90.at(0, 1) == Catch::Approx(1.0 / 3));
    REQUIRE(h90.at(1, 1) == Catch::Approx(1.0 / 3));
    REQUIRE(h90.at(2, 1) == Catch::Approx(1.0 / 3));

    const auto h45 = make_motion_psf(5, 45.0);
    int nonzero = 0;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            if (h45.at(i, j) > 0) {
                ++nonzero;
                REQUIRE(i == j);  // one diagonal
                REQUIRE(h45.at(i, j) == Catch::Approx(0.2));
            }
    REQUIRE(nonzero == 5);

    REQUIRE(std::abs(make_motion_psf(9, 37.0).sum() - 1.0) < 1e-12);
    REQUIRE_THROWS_AS(make_motion_psf(4, 0.0), ContractError);
    REQUIRE_THROWS_AS(make_motion_psf(1, 0.0), ContractError);
}

TEST_CASE("degrade: kind none is the identity; fixed seed is bit-deterministic") {
    const auto img = random_image(16, 16, 1, 40);
    DegradationSpec none;
    REQUIRE(degrade(img, none).data == img.data);

    DegradationSpec noise{DegradationKind::gaussian_noise, 0.1, 0, 0.0, 77};
    const auto a = degrade(img, noise);
    const auto b = degrade(img, noise);
    REQUIRE(a.data == b.data);
    REQUIRE(a.data != img.data);
    for (double v : a.data) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
}

TEST_CASE("degrade: motion blur widens a vertical edge") {
    ImagePlane img(32, 32, 1, 0.0);
    for (int y = 0; y < 32; ++y)
        for (int x = 16; x < 32; ++x) img.at(y, x) = 1.0;
    auto count_intermediate = [](const ImagePlane& p) {
        int n = 0;
        for (double v : p.data)
            if (v > 0.05 && v < 0.95) ++n;
        return n;
    };
    DegradationSpec blur{DegradationKind::motion_blur, 0.0, 7, 0.0, 0};
    const auto out = degrade(img, blur);
    REQUIRE(count_intermediate(out) > count_intermediate(img));
}

TEST_CASE("degrade validates its spec") {
    DegradationSpec bad_noise{DegradationKind::gaussian_noise, 0.0, 0, 0.0, 0};
    REQUIRE_THROWS_AS(bad_noise.validate(), ContractError);
    DegradationSpec bad_blur{DegradationKind::motion_blur, 0.0, 2, 0.0, 0};
    REQUIRE_THROWS_AS(bad_blur.validate(), ContractError);
    DegradationSpec both{DegradationKind::both, 0.05, 5, 45.0, 3};
    REQUIRE_NOTHROW(both.validate());
}

TEST_CASE("operations keep finite outputs on valid input") {
    const auto img = random_image(16, 16, 3, 50);
    DegradationSpec spec{DegradationKind::both, 0.2, 9, 123.0, 9};
    const auto noisy = degrade(img, spec);
    const auto lum = to_luminance(noisy);
    const auto lap = laplacian(lum);
    for (double v : lap.data) REQUIRE(std::isfinite(v));
}

// ---- metrics ----

TEST_CASE("confusion counts match a hand tally on 4x4 masks") {
    //   pred         gt
    //   1100         1010
    //   0110         0110
    //   0000         0011
    //   1111         0000
    Mask pred(4, 4), gt(4, 4);
    const int p[16] = {1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1, 1, 1, 1};
    const int g[16] = {1, 0, 1, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0};
    for (int i = 0; i < 16; ++i) {
        pred.data[i] = static_cast<std::uint8_t>(p[i]);
        gt.data[i] = static_cast<std::uint8_t>(g[i]);
    }
    // by hand: tp pixels {0, 5, 6}; fp {1, 12, 13, 14, 15}; fn {2, 10, 11}; rest tn
    const auto c = confusion(pred, gt);
    REQUIRE(c.tp == 3);
    REQUIRE(c.fp == 5);
    REQUIRE(c.fn == 3);
    REQUIRE(c.tn == 5);
    REQUIRE(c.total() == 16);
}

TEST_CASE("confusion: equal and complementary masks") {
    Mask a(3, 3);
    a.at(0, 0) = 1;
    a.at(1, 2) = 1;
    auto c = confusion(a, a);
    REQUIRE(c.fp == 0);
    REQUIRE(c.fn == 0);

    Mask b(3, 3);
    for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] = a.data[i] ? 0 : 1;
    c = confusion(b, a);
    REQUIRE(c.tp == 0);
    REQUIRE(c.tn == 0);
}

TEST_CASE("dice: exact values and conventions") {
    Mask a(2, 2), b(2, 2);
    a.at(0, 0) = 1;
    b.at(0, 0) = 1;
    REQUIRE(dice(a, b) == 1.0);

    ConfusionCounts c{2, 1, 1, 0};
    REQUIRE(dice(c) == Catch::Approx(4.0 / 6.0));

    Mask d(2, 2), e(2, 2);
    d.at(0, 0) = 1;
    e.at(1, 1) = 1;
    REQUIRE(dice(d, e) == 0.0);

    Mask empty1(2, 2), empty2(2, 2);
    REQUIRE(dice(empty1, empty2) == 1.0);

    REQUIRE_THROWS_AS(dice(Mask(2, 2), Mask(3, 3)), ContractError);
}

TEST_CASE("dice symmetry and range over random mask pairs") {
    Rng rng(60);
    for (int trial = 0; trial < 200; ++trial) {
        Mask a(5, 5), b(5, 5);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            a.data[i] = rng.uniform() < 0.4 ? 1 : 0;
            b.data[i] = rng.uniform() < 0.4 ? 1 : 0;
        }
        const double ab = dice(a, b);
        REQUIRE(ab == dice(b, a));
        REQUIRE(ab >= 0.0);
        REQUIRE(ab <= 1.0);
        if (a.foreground_count() > 0) REQUIRE(dice(a, a) == 1.0);
        REQUIRE(confusion(a, b).total() == 25);
    }
}

TEST_CASE("psnr: cap, closed form, and independent MSE expression") {
    const auto img = random_image(8, 8, 1, 70);
    REQUIRE(psnr(img, img) == 99.0);

    ImagePlane a(4, 4, 1, 0.5), b(4, 4, 1, 0.6);
    REQUIRE(psnr(a, b) == Catch::Approx(20.0).margin(1e-9));

    const auto x = random_image(8, 8, 1, 71);
    const auto y = random_image(8, 8, 1, 72);
    double mse = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i)
        mse += (x.data[i] - y.data[i]) * (x.data[i] - y.data[i]);
    mse /= x.data.size();
    REQUIRE(psnr(x, y) == Catch::Approx(10.0 * std::log10(1.0 / mse)).margin(1e-12));

    REQUIRE_THROWS_AS(psnr(ImagePlane(2, 2, 1), ImagePlane(3, 3, 1)), ContractError);
}

// ---- image I/O ----

TEST_CASE("PGM/PPM/PNG round-trips preserve quantized pixels") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "modseg_io_test";
    fs::create_directories(dir);

    auto quantized = [](const ImagePlane& img) {
        ImagePlane q = img;
        for (double& v : q.data) v = detail::quantize8(v) / 255.0;
        return q;
    };

    const auto gray = random_image(13, 9, 1, 80);
    const auto rgb = random_image(7, 11, 3, 81);

    for (const char* ext : {".pgm", ".png"}) {
        const std::string path = (dir / (std::string("gray") + ext)).string();
        write_image(path, gray);
        const auto back = read_image(path);
        REQUIRE(back.same_shape(gray));
        REQUIRE(max_abs_diff(back, quantized(gray)) < 1e-12);
    }
    for (const char* ext : {".ppm", ".png"}) {
        const std::string path = (dir / (std::string("rgb") + ext)).string();
        write_image(path, rgb);
        const auto back = read_image(path);
        REQUIRE(back.same_shape(rgb));
        REQUIRE(max_abs_diff(back, quantized(rgb)) < 1e-12);
    }
}

TEST_CASE("PNG reader handles RGBA input by dropping alpha") {
    // Hand-build a 2x2 RGBA PNG (color type 6, filter 0 rows).
    const std::uint8_t px[2][2][4] = {
        {{255, 0, 0, 255}, {0, 255, 0, 128}},
        {{0, 0, 255, 0}, {10, 20, 30, 255}},
    };
    std::vector<std::uint8_t> raw;
    for (int y = 0; y < 2; ++y) {
        raw.push_back(0);
        for (int x = 0; x < 2; ++x)
            for (int c = 0; c < 4; ++c) raw.push_back(px[y][x][c]);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> zbuf(bound);
    REQUIRE(compress2(zbuf.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) == Z_OK);
    zbuf.resize(bound);

    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<std::uint8_t> png(sig, sig + 8);
    std::vector<std::uint8_t> ihdr;
    detail::put_be32(ihdr, 2);
    detail::put_be32(ihdr, 2);
    ihdr.push_back(8);
    ihdr.push_back(6);
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::png_chunk(png, "IHDR", ihdr);
    detail::png_chunk(png, "IDAT", zbuf);
    detail::png_chunk(png, "IEND", {});

    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "modseg_io_test";
    fs::create_directories(dir);
    const std::string path = (dir / "rgba.png").string();
    detail::write_file_bytes(path, png);

    const auto img = read_image(path);
    REQUIRE(img.channels == 3);
    REQUIRE(img.at(0, 0, 0) == Catch::Approx(1.0));
    REQUIRE(img.at(0, 1, 1) == Catch::Approx(1.0));
    REQUIRE(img.at(1, 0, 2) == Catch::Approx(1.0));
    REQUIRE(img.at(1, 1, 0) == Catch::Approx(10.0 / 255));
}

TEST_CASE("image I/O error paths") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "modseg_io_test";
    fs::create_directories(dir);

    REQUIRE_THROWS_AS(read_image((dir / "missing.png").string()), FormatError);

    const std::string junk = (dir / "junk.png").string();
    detail::write_file_bytes(junk, {1, 2, 3, 4});
    REQUIRE_THROWS_AS(read_image(junk), FormatError);

    REQUIRE_THROWS_AS(write_image((dir / "x.pgm").string(), ImagePlane(2, 2, 3)), ContractError);
    REQUIRE_THROWS_AS(write_image((dir / "x.bmp").string(), ImagePlane(2, 2, 1)), ContractError);
}
