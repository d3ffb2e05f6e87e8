#pragma once

// Little-endian byte packing used by the corpus files and the parameter
// container. Explicit byte arithmetic keeps the on-disk format independent
// of host endianness.

#include <bit>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"

namespace fedseg {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559,
              "wire formats require IEEE-754 binary32");

class ByteWriter {
public:
    const std::vector<uint8_t>& bytes() const { return buf_; }
    std::vector<uint8_t> take() { return std::move(buf_); }
    size_t size() const { return buf_.size(); }

    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) {
        buf_.push_back(static_cast<uint8_t>(v));
        buf_.push_back(static_cast<uint8_t>(v >> 8));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }

private:
    std::vector<uint8_t> buf_;
};

// Bounds-checked reader; running past the end means the stream was cut off.
class ByteReader {
public:
    ByteReader(const uint8_t* data, size_t size) : p_(data), n_(size) {}
    explicit ByteReader(const std::vector<uint8_t>& v) : p_(v.data()), n_(v.size()) {}

    size_t remaining() const { return n_ - off_; }
    size_t offset() const { return off_; }

    uint8_t u8() {
        need(1);
        return p_[off_++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(p_[off_] | (p_[off_ + 1] << 8));
        off_ += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p_[off_ + i]) << (8 * i);
        off_ += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p_[off_ + i]) << (8 * i);
        off_ += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p_ + off_), n);
        off_ += n;
        return s;
    }
    void raw(void* dst, size_t n) {
        need(n);
        std::memcpy(dst, p_ + off_, n);
        off_ += n;
    }

private:
    const uint8_t* p_;
    size_t n_;
    size_t off_ = 0;

    void need(size_t n) const {
        if (off_ + n > n_)
            throw TruncationError("byte stream ends after " + std::to_string(n_) +
                                  " bytes; needed " + std::to_string(off_ + n));
    }
};

} // namespace fedseg
