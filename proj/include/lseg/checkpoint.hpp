#pragma once

// Binary checkpoint of named tensors.
//
// Layout (all integers unsigned 32-bit little-endian):
//   "SSEG" | version | entry count |
//   per entry: name length | name bytes | rank | extents[rank] |
//              float32 little-endian payload (product of extents values)
// The file ends exactly after the last entry.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "lseg/model.hpp"
#include "lseg/nifti.hpp"

namespace lseg {

inline constexpr char kCheckpointMagic[4] = {'S', 'S', 'E', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor<float> tensor;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::vector<NamedTensor> entries;
};

namespace ckpt_detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Cursor {
public:
    explicit Cursor(const std::vector<std::uint8_t>& b) : bytes_(b) {}

    void need(std::size_t n, const std::string& what) const {
        if (bytes_.size() - pos_ < n) throw DataError("checkpoint truncated while reading " + what);
    }
    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        pos_ += 4;
        return v;
    }
    const std::uint8_t* take(std::size_t n, const std::string& what) {
        need(n, what);
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline std::vector<std::uint8_t> serialize(const Checkpoint& ck) {
    using ckpt_detail::put_u32;
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
    put_u32(out, ck.version);
    put_u32(out, static_cast<std::uint32_t>(ck.entries.size()));
    for (const auto& e : ck.entries) {
        put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        put_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
        for (auto d : e.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : e.tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

inline Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
    ckpt_detail::Cursor cur(bytes);
    const std::uint8_t* magic = cur.take(4, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw DataError("checkpoint: bad magic (expected \"SSEG\")");
    Checkpoint ck;
    ck.version = cur.u32("version");
    if (ck.version != kCheckpointVersion) {
        throw DataError("checkpoint: unsupported version " + std::to_string(ck.version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    const std::uint32_t count = cur.u32("entry count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string where = "entry " + std::to_string(i);
        const std::uint32_t len = cur.u32(where + " name length");
        if (len == 0 || len > 4096) throw DataError("checkpoint: " + where + " has invalid name length");
        const auto* name = cur.take(len, where + " name");
        NamedTensor e;
        e.name.assign(reinterpret_cast<const char*>(name), len);
        const std::uint32_t rank = cur.u32(where + " rank");
        if (rank > 8) throw DataError("checkpoint: entry '" + e.name + "' has invalid rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = cur.u32("entry '" + e.name + "' extents");
        const std::size_t n = numel(shape);
        if (n > cur.remaining() / 4) throw DataError("checkpoint truncated in payload of entry '" + e.name + "'");
        std::vector<float> data(n);
        for (auto& v : data) v = std::bit_cast<float>(cur.u32("payload"));
        e.tensor = Tensor<float>(std::move(shape), std::move(data));
        ck.entries.push_back(std::move(e));
    }
    if (cur.remaining() != 0) throw DataError("checkpoint: " + std::to_string(cur.remaining()) + " trailing bytes");
    return ck;
}

// Written to a temporary sibling and renamed into place.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    write_file_bytes(tmp, serialize(ck));
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

template <typename T>
Checkpoint to_checkpoint(ModelParams<T>& m) {
    Checkpoint ck;
    for (auto& e : m.entries()) ck.entries.push_back({e.name, e.tensor().template cast<float>()});
    return ck;
}

// Copies checkpoint tensors into the model. Entry names and shapes must match
// the model's entries one for one, in order.
template <typename T>
void apply_checkpoint(ModelParams<T>& m, const Checkpoint& ck) {
    auto entries = m.entries();
    const std::size_t n = std::min(entries.size(), ck.entries.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto& src = ck.entries[i];
        auto& dst = entries[i];
        if (src.name != dst.name) {
            throw SpecMismatchError("checkpoint entry " + std::to_string(i) + " is '" + src.name + "', model expects '" +
                                    dst.name + "'");
        }
        if (src.tensor.shape() != dst.tensor().shape()) {
            throw SpecMismatchError("checkpoint entry '" + src.name + "' has shape " + to_string(src.tensor.shape()) +
                                    ", model expects " + to_string(dst.tensor().shape()));
        }
    }
    if (ck.entries.size() != entries.size()) {
        const std::string first = ck.entries.size() > n ? ck.entries[n].name : entries[n].name;
        throw SpecMismatchError("checkpoint has " + std::to_string(ck.entries.size()) + " entries, model has " +
                                std::to_string(entries.size()) + "; first unmatched entry '" + first + "'");
    }
    for (std::size_t i = 0; i < n; ++i) entries[i].tensor() = ck.entries[i].tensor.template cast<T>();
}

template <typename T>
ModelParams<T> load_model(const ModelSpec& spec, const Checkpoint& ck) {
    ModelParams<T> m = ModelParams<T>::skeleton(spec);
    apply_checkpoint(m, ck);
    return m;
}

}  // namespace lseg
