#pragma once

// Canonical binary container for parameter checkpoints and round updates.
// The byte counts this format produces are the communication ledger's
// ground truth, so the layout is normative and deterministic:
//
//   "FFMS" | version u16 | flags u16 | count u32
//   per entry: name_len u16 | name | role u8 | rank u8 | dims u32*rank
//              | payload f32-LE * prod(dims)
//   crc32 u32   (IEEE, over all preceding bytes)
//
// flags: bit0 = is-update, bit1 = trainable-subset-only.
//
// Integrity-first decoding: after a fixed minimum-length check, the CRC is
// verified before any structural field is interpreted. A single corrupted
// bit anywhere therefore always surfaces as CrcError, never as a confusing
// structural error from garbage lengths.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "bytes.hpp"
#include "errors.hpp"
#include "tensor.hpp"

namespace fedseg {

inline constexpr uint16_t kWireVersion = 1;
inline constexpr uint16_t kFlagIsUpdate = 1u << 0;
inline constexpr uint16_t kFlagTrainableOnly = 1u << 1;
// magic + version + flags + count + crc
inline constexpr size_t kWireFixedBytes = 4 + 2 + 2 + 4 + 4;

// --------------------------------------------------------------------------

inline uint32_t crc32(const uint8_t* data, size_t n, uint32_t seed = 0) {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = seed ^ 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

inline uint32_t crc32(const std::vector<uint8_t>& v) { return crc32(v.data(), v.size()); }

// --------------------------------------------------------------------------

struct WireEntry {
    std::string name;
    uint8_t role = 0;
    Tensor<float> value;
};

struct ParamContainer {
    uint16_t version = kWireVersion;
    bool is_update = false;
    bool trainable_only = false;
    std::vector<WireEntry> entries;
};

inline size_t entry_bytes(const WireEntry& e) {
    return 2 + e.name.size() + 1 + 1 + 4 * static_cast<size_t>(e.value.rank()) +
           4 * static_cast<size_t>(e.value.numel());
}

// Exact size of serialize(c) without producing the bytes.
inline size_t measure_bytes(const ParamContainer& c) {
    size_t n = kWireFixedBytes;
    for (const auto& e : c.entries) n += entry_bytes(e);
    return n;
}

inline std::vector<uint8_t> serialize(const ParamContainer& c) {
    ByteWriter w;
    w.raw("FFMS", 4);
    w.u16(c.version);
    uint16_t flags = (c.is_update ? kFlagIsUpdate : 0) |
                     (c.trainable_only ? kFlagTrainableOnly : 0);
    w.u16(flags);
    if (c.entries.size() > 0xFFFFFFFFull)
        throw FormatError("too many entries for a u32 count");
    w.u32(static_cast<uint32_t>(c.entries.size()));
    for (const auto& e : c.entries) {
        if (e.name.size() > 0xFFFF)
            throw FormatError("parameter name longer than 65535 bytes: " +
                              e.name.substr(0, 32) + "...");
        if (e.value.rank() > 255)
            throw FormatError("tensor rank exceeds u8 for entry: " + e.name);
        if (e.value.numel() == 0)
            throw FormatError("empty tensor cannot be serialized: " + e.name);
        w.u16(static_cast<uint16_t>(e.name.size()));
        w.raw(e.name.data(), e.name.size());
        w.u8(e.role);
        w.u8(static_cast<uint8_t>(e.value.rank()));
        for (int d : e.value.shape) w.u32(static_cast<uint32_t>(d));
        for (float v : e.value.data) w.f32(v);
    }
    w.u32(crc32(w.bytes()));
    return w.take();
}

inline ParamContainer deserialize(const uint8_t* data, size_t size) {
    if (size < kWireFixedBytes)
        throw TruncationError("container of " + std::to_string(size) +
                              " bytes is below the fixed minimum of " +
                              std::to_string(kWireFixedBytes));
    // Verify integrity before trusting any length field.
    uint32_t stored = static_cast<uint32_t>(data[size - 4]) |
                      static_cast<uint32_t>(data[size - 3]) << 8 |
                      static_cast<uint32_t>(data[size - 2]) << 16 |
                      static_cast<uint32_t>(data[size - 1]) << 24;
    uint32_t actual = crc32(data, size - 4);
    if (stored != actual)
        throw CrcError("checksum mismatch: stored " + std::to_string(stored) +
                       ", computed " + std::to_string(actual));

    ByteReader r(data, size - 4);
    if (r.str(4) != "FFMS") throw BadMagicError("not a parameter container");
    uint16_t version = r.u16();
    if (version != kWireVersion)
        throw BadVersionError("unsupported container version " + std::to_string(version));
    uint16_t flags = r.u16();
    if (flags & ~(kFlagIsUpdate | kFlagTrainableOnly))
        throw FormatError("unknown flag bits set: " + std::to_string(flags));
    uint32_t count = r.u32();

    ParamContainer c;
    c.version = version;
    c.is_update = (flags & kFlagIsUpdate) != 0;
    c.trainable_only = (flags & kFlagTrainableOnly) != 0;
    c.entries.reserve(std::min<uint64_t>(count, r.remaining() / 8));
    for (uint32_t i = 0; i < count; ++i) {
        WireEntry e;
        uint16_t name_len = r.u16();
        e.name = r.str(name_len);
        e.role = r.u8();
        uint8_t rank = r.u8();
        if (rank == 0) throw FormatError("zero-rank tensor in entry: " + e.name);
        std::vector<int> shape;
        uint64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            uint32_t dim = r.u32();
            if (dim == 0) throw FormatError("zero dimension in entry: " + e.name);
            if (dim > 0x7FFFFFFFu)
                throw FormatError("dimension exceeds supported range in entry: " + e.name);
            numel *= dim;
            // A payload that cannot possibly fit in the remaining bytes is a
            // cut or lying stream; bail before allocating anything huge.
            if (numel > r.remaining() / 4 + 1)
                throw TruncationError("declared payload for '" + e.name +
                                      "' exceeds the container");
            shape.push_back(static_cast<int>(dim));
        }
        e.value = Tensor<float>(shape);
        for (uint64_t k = 0; k < numel; ++k) e.value.data[k] = r.f32();
        c.entries.push_back(std::move(e));
    }
    if (r.remaining() != 0)
        throw FormatError(std::to_string(r.remaining()) +
                          " trailing bytes after the declared entries");
    return c;
}

inline ParamContainer deserialize(const std::vector<uint8_t>& bytes) {
    return deserialize(bytes.data(), bytes.size());
}

// --------------------------------------------------------------------------
// .ffms files.

inline void save_container(const ParamContainer& c, const std::string& path) {
    auto bytes = serialize(c);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write: " + path);
}

inline ParamContainer load_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open container file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

} // namespace fedseg
