// Copyright (c) the modseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <zlib.h>

#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "modseg/common.hpp"
#include "modseg/image.hpp"

// 8-bit image I/O: binary PGM (P5) / PPM (P6) with maxval 255, and PNG
// (bit depth 8, color types 0/2/4/6, no interlacing). Pixel values map
// linearly between [0,255] and [0,1].

namespace modseg {
namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write: " + path);
}

inline std::uint8_t quantize8(double v) {
    const long q = std::lround(clamp01(v) * 255.0);
    return static_cast<std::uint8_t>(q < 0 ? 0 : (q > 255 ? 255 : q));
}

// ---- PNM (P5/P6) ----

inline int pnm_next_int(const std::vector<std::uint8_t>& b, std::size_t& pos,
                        const std::string& path) {
    // skip whitespace and '#' comments
    while (pos < b.size()) {
        if (b[pos] == '#') {
            while (pos < b.size() && b[pos] != '\n') ++pos;
        } else if (std::isspace(b[pos])) {
            ++pos;
        } else {
            break;
        }
    }
    if (pos >= b.size() || !std::isdigit(b[pos])) throw FormatError("bad PNM header: " + path);
    int v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) {
        v = v * 10 + (b[pos] - '0');
        ++pos;
    }
    return v;
}

inline ImagePlane decode_pnm(const std::vector<std::uint8_t>& b, const std::string& path) {
    if (b.size() < 2) throw FormatError("truncated PNM: " + path);
    const int channels = (b[1] == '5') ? 1 : 3;
    std::size_t pos = 2;
    const int w = pnm_next_int(b, pos, path);
    const int h = pnm_next_int(b, pos, path);
    const int maxval = pnm_next_int(b, pos, path);
    if (maxval != 255) throw FormatError("PNM maxval must be 255: " + path);
    ++pos;  // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(w) * h * channels;
    if (b.size() - pos < need) throw FormatError("truncated PNM pixel data: " + path);
    ImagePlane img(h, w, channels);
    for (std::size_t i = 0; i < need; ++i) img.data[i] = b[pos + i] / 255.0;
    return img;
}

inline std::vector<std::uint8_t> encode_pnm(const ImagePlane& img) {
    const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                               std::to_string(img.width) + " " + std::to_string(img.height) +
                               "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.size());
    for (double v : img.data) out.push_back(quantize8(v));
    return out;
}

// ---- PNG ----

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t type_at = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uLong crc = crc32(0L, out.data() + type_at, static_cast<uInt>(4 + data.size()));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

inline std::uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
    if (pb <= pc) return static_cast<std::uint8_t>(b);
    return static_cast<std::uint8_t>(c);
}

inline std::vector<std::uint8_t> encode_png(const ImagePlane& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ContractError("PNG writer supports 1 or 3 channels");
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<std::uint8_t> out(sig, sig + 8);

    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(img.width));
    put_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);                                    // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : 2);            // color type
    ihdr.push_back(0);                                    // compression
    ihdr.push_back(0);                                    // filter
    ihdr.push_back(0);                                    // interlace
    png_chunk(out, "IHDR", ihdr);

    // raw scanlines, filter type 0 per row
    const std::size_t rowbytes = static_cast<std::size_t>(img.width) * img.channels;
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(img.height) * (rowbytes + 1));
    std::size_t i = 0;
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);
        for (std::size_t k = 0; k < rowbytes; ++k) raw.push_back(quantize8(img.data[i++]));
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> zbuf(bound);
    if (compress2(zbuf.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw NumericError("PNG deflate failed");
    zbuf.resize(bound);
    png_chunk(out, "IDAT", zbuf);
    png_chunk(out, "IEND", {});
    return out;
}

inline ImagePlane decode_png(const std::vector<std::uint8_t>& b, const std::string& path) {
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (b.size() < 8 || std::memcmp(b.data(), sig, 8) != 0)
        throw FormatError("not a PNG file: " + path);

    int w = 0, h = 0, bit_depth = 0, color_type = 0;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    bool saw_ihdr = false, saw_iend = false;
    while (pos + 8 <= b.size() && !saw_iend) {
        const std::uint32_t len = get_be32(&b[pos]);
        if (pos + 12 + len > b.size()) throw FormatError("truncated PNG chunk: " + path);
        const char* type = reinterpret_cast<const char*>(&b[pos + 4]);
        const std::uint8_t* data = &b[pos + 8];
        const std::uint32_t crc_stored = get_be32(&b[pos + 8 + len]);
        const uLong crc_calc = crc32(0L, &b[pos + 4], 4 + len);
        if (crc_stored != static_cast<std::uint32_t>(crc_calc))
            throw FormatError("PNG chunk CRC mismatch: " + path);

        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw FormatError("bad IHDR: " + path);
            w = static_cast<int>(get_be32(data));
            h = static_cast<int>(get_be32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw FormatError("interlaced PNG not supported: " + path);
            if (bit_depth != 8) throw FormatError("only 8-bit PNG supported: " + path);
            if (color_type != 0 && color_type != 2 && color_type != 4 && color_type != 6)
                throw FormatError("unsupported PNG color type: " + path);
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || !saw_iend || idat.empty() || w <= 0 || h <= 0)
        throw FormatError("malformed PNG: " + path);

    const int src_ch = (color_type == 0) ? 1 : (color_type == 2) ? 3 : (color_type == 4) ? 2 : 4;
    const std::size_t rowbytes = static_cast<std::size_t>(w) * src_ch;
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (rowbytes + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw FormatError("PNG inflate failed: " + path);

    // unfilter in place into a flat pixel buffer
    std::vector<std::uint8_t> pix(static_cast<std::size_t>(h) * rowbytes);
    const int bpp = src_ch;
    for (int y = 0; y < h; ++y) {
        const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (rowbytes + 1)];
        const std::uint8_t* src = &raw[static_cast<std::size_t>(y) * (rowbytes + 1) + 1];
        std::uint8_t* dst = &pix[static_cast<std::size_t>(y) * rowbytes];
        const std::uint8_t* up = y > 0 ? &pix[static_cast<std::size_t>(y - 1) * rowbytes] : nullptr;
        for (std::size_t x = 0; x < rowbytes; ++x) {
            const int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
            const int bb = up ? up[x] : 0;
            const int cc = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += bb; break;
                case 3: v += (a + bb) / 2; break;
                case 4: v += paeth(a, bb, cc); break;
                default: throw FormatError("bad PNG filter type: " + path);
            }
            dst[x] = static_cast<std::uint8_t>(v & 0xFF);
        }
    }

    const int out_ch = (src_ch >= 3) ? 3 : 1;  // alpha dropped
    ImagePlane img(h, w, out_ch);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::uint8_t* p = &pix[(static_cast<std::size_t>(y) * w + x) * src_ch];
            for (int c = 0; c < out_ch; ++c) img.at(y, x, c) = p[c] / 255.0;
        }
    }
    return img;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

/// Reads PNG/PGM/PPM, sniffing the format from the file contents.
inline ImagePlane read_image(const std::string& path) {
    const auto bytes = detail::read_file_bytes(path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6'))
        return detail::decode_pnm(bytes, path);
    if (bytes.size() >= 8 && bytes[0] == 137) return detail::decode_png(bytes, path);
    throw FormatError("unrecognized image format: " + path);
}

/// Writes by extension: .png, .pgm (grayscale), .ppm (RGB). 8-bit quantization.
inline void write_image(const std::string& path, const ImagePlane& img) {
    if (detail::ends_with(path, ".png")) {
        detail::write_file_bytes(path, detail::encode_png(img));
    } else if (detail::ends_with(path, ".pgm")) {
        if (img.channels != 1) throw ContractError("PGM requires a single channel: " + path);
        detail::write_file_bytes(path, detail::encode_pnm(img));
    } else if (detail::ends_with(path, ".ppm")) {
        if (img.channels != 3) throw ContractError("PPM requires three channels: " + path);
        detail::write_file_bytes(path, detail::encode_pnm(img));
    } else {
        throw ContractError("unsupported image extension (use .png/.pgm/.ppm): " + path);
    }
}

}  // namespace modseg
