#pragma once

// Minimal NIfTI-1 single-file (.nii, uncompressed) reader and writer.
//
// Supported: magic "n+1", datatypes uint8 / int16 / float32, either byte
// order (detected from dim[0]). Orientation matrices are ignored; the voxel
// grid is taken as stored. Voxels are returned as [Z, Y, X] so each axial
// slice is a contiguous [Y, X] plane.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "lseg/tensor.hpp"

namespace lseg {

enum class NiftiDatatype : std::int16_t { uint8 = 2, int16 = 4, float32 = 16 };

inline std::size_t datatype_bytes(NiftiDatatype t) {
    switch (t) {
        case NiftiDatatype::uint8: return 1;
        case NiftiDatatype::int16: return 2;
        case NiftiDatatype::float32: return 4;
    }
    return 0;
}

struct Volume {
    std::size_t dim_x = 0, dim_y = 0, dim_z = 0;
    Tensor<float> voxels;  // [Z, Y, X], Hounsfield units after slope/intercept
    NiftiDatatype source_dtype = NiftiDatatype::float32;

    std::size_t slices() const { return dim_z; }

    Tensor<float> slice(std::size_t z) const {
        const std::size_t plane = dim_x * dim_y;
        std::vector<float> out(voxels.data().begin() + static_cast<std::ptrdiff_t>(z * plane),
                               voxels.data().begin() + static_cast<std::ptrdiff_t>((z + 1) * plane));
        return Tensor<float>({dim_y, dim_x}, std::move(out));
    }
};

namespace nifti_detail {

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kDataOffset = 352;

inline constexpr std::size_t kOffDim = 40;
inline constexpr std::size_t kOffDatatype = 70;
inline constexpr std::size_t kOffBitpix = 72;
inline constexpr std::size_t kOffPixdim = 76;
inline constexpr std::size_t kOffVoxOffset = 108;
inline constexpr std::size_t kOffSclSlope = 112;
inline constexpr std::size_t kOffSclInter = 116;
inline constexpr std::size_t kOffMagic = 344;

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

    template <typename U>
    U get(std::size_t off) const {
        std::uint8_t raw[sizeof(U)];
        std::memcpy(raw, bytes_.data() + off, sizeof(U));
        if (swap_) std::reverse(raw, raw + sizeof(U));
        U v;
        std::memcpy(&v, raw, sizeof(U));
        return v;
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    bool swap_;
};

inline bool host_little_endian() { return std::endian::native == std::endian::little; }

template <typename U>
void put(std::vector<std::uint8_t>& bytes, std::size_t off, U value, bool big_endian) {
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, &value, sizeof(U));
    if (big_endian == host_little_endian()) std::reverse(raw, raw + sizeof(U));
    std::memcpy(bytes.data() + off, raw, sizeof(U));
}

}  // namespace nifti_detail

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Volume parse_nifti(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>") {
    using namespace nifti_detail;
    auto fail = [&source](const std::string& what) { return DataError("nifti '" + source + "': " + what); };
    if (bytes.size() < kHeaderSize) throw fail("truncated header (" + std::to_string(bytes.size()) + " bytes)");

    const char* magic = reinterpret_cast<const char*>(bytes.data() + kOffMagic);
    if (std::memcmp(magic, "ni1\0", 4) == 0) throw fail("unsupported: detached header (magic \"ni1\")");
    if (std::memcmp(magic, "n+1\0", 4) != 0) throw fail("bad magic: expected \"n+1\"");

    // dim[0] must be in [1, 7]; if it is not in file order, the file is in
    // the other byte order.
    bool swap = false;
    {
        const auto d0 = Reader(bytes, false).get<std::int16_t>(kOffDim);
        if (d0 < 1 || d0 > 7) {
            swap = true;
            const auto d0s = Reader(bytes, true).get<std::int16_t>(kOffDim);
            if (d0s < 1 || d0s > 7) throw fail("bad dim[0]: " + std::to_string(d0) + " in either byte order");
        }
    }
    const Reader r(bytes, swap);
    const auto sizeof_hdr = r.get<std::int32_t>(0);
    if (sizeof_hdr != 348) throw fail("bad sizeof_hdr: " + std::to_string(sizeof_hdr));

    const auto ndim = r.get<std::int16_t>(kOffDim);
    std::size_t dims[3] = {1, 1, 1};
    for (int i = 1; i <= std::min<int>(ndim, 3); ++i) {
        const auto d = r.get<std::int16_t>(kOffDim + 2 * static_cast<std::size_t>(i));
        if (d < 1) throw fail("bad dim[" + std::to_string(i) + "]: " + std::to_string(d));
        dims[i - 1] = static_cast<std::size_t>(d);
    }
    for (int i = 4; i <= ndim; ++i) {
        if (r.get<std::int16_t>(kOffDim + 2 * static_cast<std::size_t>(i)) > 1) {
            throw fail("unsupported: dim[" + std::to_string(i) + "] > 1 (only 3-D volumes)");
        }
    }

    const auto dt = r.get<std::int16_t>(kOffDatatype);
    NiftiDatatype dtype;
    switch (dt) {
        case 2: dtype = NiftiDatatype::uint8; break;
        case 4: dtype = NiftiDatatype::int16; break;
        case 16: dtype = NiftiDatatype::float32; break;
        default: throw fail("unsupported datatype: " + std::to_string(dt));
    }

    const float vox_offset_f = r.get<float>(kOffVoxOffset);
    if (!(vox_offset_f >= static_cast<float>(kHeaderSize))) {
        throw fail("bad vox_offset: " + std::to_string(vox_offset_f));
    }
    const auto vox_offset = static_cast<std::size_t>(vox_offset_f);
    float slope = r.get<float>(kOffSclSlope);
    const float inter_raw = r.get<float>(kOffSclInter);
    if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;
    const float inter = std::isfinite(inter_raw) ? inter_raw : 0.0f;

    const std::size_t count = dims[0] * dims[1] * dims[2];
    const std::size_t width = datatype_bytes(dtype);
    if (bytes.size() < vox_offset || bytes.size() - vox_offset < count * width) {
        throw fail("truncated payload: need " + std::to_string(count * width) + " bytes at vox_offset " +
                   std::to_string(vox_offset) + ", file has " + std::to_string(bytes.size()));
    }

    Volume vol;
    vol.dim_x = dims[0];
    vol.dim_y = dims[1];
    vol.dim_z = dims[2];
    vol.source_dtype = dtype;
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t off = vox_offset + i * width;
        double raw = 0.0;
        switch (dtype) {
            case NiftiDatatype::uint8: raw = bytes[off]; break;
            case NiftiDatatype::int16: raw = r.get<std::int16_t>(off); break;
            case NiftiDatatype::float32: raw = r.get<float>(off); break;
        }
        data[i] = static_cast<float>(raw * static_cast<double>(slope) + static_cast<double>(inter));
    }
    vol.voxels = Tensor<float>({vol.dim_z, vol.dim_y, vol.dim_x}, std::move(data));
    return vol;
}

inline Volume read_nifti(const std::filesystem::path& path) { return parse_nifti(read_file_bytes(path), path.string()); }

struct NiftiWriteOptions {
    NiftiDatatype dtype = NiftiDatatype::int16;
    float slope = 1.0f;
    float inter = 0.0f;
    bool big_endian = false;
};

// Stored value = (voxel - inter) / slope, rounded for integer types.
inline std::vector<std::uint8_t> encode_nifti(const Tensor<float>& voxels, const NiftiWriteOptions& opt = {}) {
    using namespace nifti_detail;
    require_rank(voxels.shape(), 3, "encode_nifti voxels");
    const std::size_t z = voxels.dim(0), y = voxels.dim(1), x = voxels.dim(2);
    if (x > 32767 || y > 32767 || z > 32767) throw DataError("nifti: dimension too large for int16 header field");
    const std::size_t width = datatype_bytes(opt.dtype);
    std::vector<std::uint8_t> bytes(kDataOffset + voxels.size() * width, 0);
    const bool be = opt.big_endian;
    put<std::int32_t>(bytes, 0, 348, be);
    const std::int16_t dim[8] = {3, static_cast<std::int16_t>(x), static_cast<std::int16_t>(y),
                                 static_cast<std::int16_t>(z), 1, 1, 1, 1};
    for (std::size_t i = 0; i < 8; ++i) put<std::int16_t>(bytes, kOffDim + 2 * i, dim[i], be);
    put<std::int16_t>(bytes, kOffDatatype, static_cast<std::int16_t>(opt.dtype), be);
    put<std::int16_t>(bytes, kOffBitpix, static_cast<std::int16_t>(8 * width), be);
    for (std::size_t i = 0; i < 8; ++i) put<float>(bytes, kOffPixdim + 4 * i, 1.0f, be);
    put<float>(bytes, kOffVoxOffset, static_cast<float>(kDataOffset), be);
    put<float>(bytes, kOffSclSlope, opt.slope, be);
    put<float>(bytes, kOffSclInter, opt.inter, be);
    std::memcpy(bytes.data() + kOffMagic, "n+1\0", 4);

    const double slope = opt.slope == 0.0f ? 1.0 : opt.slope;
    for (std::size_t i = 0; i < voxels.size(); ++i) {
        const double stored = (static_cast<double>(voxels[i]) - opt.inter) / slope;
        const std::size_t off = kDataOffset + i * width;
        switch (opt.dtype) {
            case NiftiDatatype::uint8:
                bytes[off] = static_cast<std::uint8_t>(std::clamp(std::lround(stored), 0L, 255L));
                break;
            case NiftiDatatype::int16:
                put<std::int16_t>(bytes, off,
                                  static_cast<std::int16_t>(std::clamp(std::lround(stored), -32768L, 32767L)), be);
                break;
            case NiftiDatatype::float32: put<float>(bytes, off, static_cast<float>(stored), be); break;
        }
    }
    return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for '" + path.string() + "'");
}

inline void write_nifti(const std::filesystem::path& path, const Tensor<float>& voxels,
                        const NiftiWriteOptions& opt = {}) {
    write_file_bytes(path, encode_nifti(voxels, opt));
}

}  // namespace lseg
