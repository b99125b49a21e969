#pragma once

// Binary portable graymap (P5, maxval 255), used for mask output.

#include <cctype>
#include <filesystem>
#include <string>
#include <vector>

#include "lseg/metrics.hpp"
#include "lseg/nifti.hpp"
#include "lseg/preprocess.hpp"

namespace lseg {

// Binary mask (0/1) -> 0/255 image.
inline std::vector<std::uint8_t> encode_pgm(const Mask& mask) {
    require_rank(mask.shape(), 2, "encode_pgm mask");
    const std::string header =
        "P5\n" + std::to_string(mask.dim(1)) + " " + std::to_string(mask.dim(0)) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (auto v : mask.data()) out.push_back(v ? 255 : 0);
    return out;
}

// Intensities in [0, 1] -> round(255 v), clamped.
inline std::vector<std::uint8_t> encode_pgm_gray(const Image& img) {
    require_rank(img.shape(), 2, "encode_pgm_gray image");
    const std::string header = "P5\n" + std::to_string(img.dim(1)) + " " + std::to_string(img.dim(0)) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (float v : img.data()) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    return out;
}

// Any P5 image with maxval 255; pixels > 127 become 1.
inline Mask decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>") {
    auto fail = [&](const std::string& what) { return DataError("pgm '" + source + "': " + what); };
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&](const char* what) {
        skip_space();
        std::size_t v = 0, digits = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos]) && digits < 9) {
            v = v * 10 + (bytes[pos++] - '0');
            ++digits;
        }
        if (digits == 0) throw fail(std::string("missing ") + what);
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw fail("bad magic: expected \"P5\"");
    pos = 2;
    const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
    if (maxval != 255) throw fail("unsupported maxval " + std::to_string(maxval));
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("malformed header");
    ++pos;
    if (bytes.size() - pos != w * h) throw fail("payload is " + std::to_string(bytes.size() - pos) +
                                                " bytes, expected " + std::to_string(w * h));
    Mask m({h, w});
    for (std::size_t i = 0; i < w * h; ++i) m[i] = bytes[pos + i] > 127 ? 1 : 0;
    return m;
}

inline void write_pgm(const std::filesystem::path& path, const Mask& mask) { write_file_bytes(path, encode_pgm(mask)); }

inline Mask read_pgm(const std::filesystem::path& path) { return decode_pgm(read_file_bytes(path), path.string()); }

}  // namespace lseg
