// Checkpoint container. Binary layout, all little-endian:
//   magic "ATRC" | u32 format version | u32 entry count
//   per entry: u32 name length | UTF-8 name | u32 rank | u64 extents[rank]
//              | f32 values[prod(extents)]
// Round trips are bit-exact; non-float payloads (seeds, counters) are
// bit-packed into f32 lanes via pack_u64/unpack_u64.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "atrc/tensor.hpp"

namespace atrc {

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Tensor tensor;  // 32-bit values
};

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

inline void write_f32_le(std::ostream& os, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_le(os, bits);
}

inline float read_f32_le(std::istream& is) {
    std::uint32_t bits = read_le<std::uint32_t>(is);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
    os.write("ATRC", 4);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.tensor.rank()));
        for (std::size_t ext : e.tensor.shape()) detail::write_le<std::uint64_t>(os, ext);
        for (std::size_t i = 0; i < e.tensor.size(); ++i) detail::write_f32_le(os, e.tensor[i]);
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "ATRC", 4) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in '" + path + "'");
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::read_le<std::uint32_t>(is);
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint32_t e = 0; e < count; ++e) {
        const auto name_len = detail::read_le<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rank = detail::read_le<std::uint32_t>(is);
        Shape shape(rank);
        std::size_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
            n *= shape[i];
        }
        std::vector<float> data(n);
        for (std::size_t i = 0; i < n; ++i) data[i] = detail::read_f32_le(is);
        if (!is) throw std::runtime_error("load_checkpoint: truncated file '" + path + "'");
        entries.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    return entries;
}

// 64-bit payloads ride in two f32 lanes, bit pattern preserved.
inline void pack_u64(std::uint64_t v, float& lo, float& hi) {
    std::uint32_t lo32 = static_cast<std::uint32_t>(v & 0xffffffffULL);
    std::uint32_t hi32 = static_cast<std::uint32_t>(v >> 32);
    std::memcpy(&lo, &lo32, 4);
    std::memcpy(&hi, &hi32, 4);
}

inline std::uint64_t unpack_u64(float lo, float hi) {
    std::uint32_t lo32, hi32;
    std::memcpy(&lo32, &lo, 4);
    std::memcpy(&hi32, &hi, 4);
    return static_cast<std::uint64_t>(lo32) | (static_cast<std::uint64_t>(hi32) << 32);
}

}  // namespace atrc
