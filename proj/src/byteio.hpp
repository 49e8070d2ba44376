#pragma once

// Little-endian byte encoding shared by the checkpoint and raw-tensor formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "cfrpn/data.hpp"

namespace cfrpn::io {

static_assert(std::endian::native == std::endian::little, "byte formats assume a little-endian host");

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void magic(const std::array<char, 4>& m) { raw(m.data(), 4); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }

    const std::vector<std::uint8_t>& bytes() const noexcept { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(std::span<const std::uint8_t> bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    std::uint8_t u8() { return take<std::uint8_t>(); }
    std::uint32_t u32() { return take<std::uint32_t>(); }
    std::uint64_t u64() { return take<std::uint64_t>(); }
    float f32() { return take<float>(); }
    double f64() { return take<double>(); }
    std::string str() {
        const auto n = u32();
        require(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void raw(void* dst, std::size_t n) {
        require(n);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    void expect_magic(const std::array<char, 4>& m) {
        require(4);
        if (std::memcmp(bytes_.data() + pos_, m.data(), 4) != 0) {
            throw DataError(source_ + ": bad magic, expected '" + std::string(m.data(), 4) + "'");
        }
        pos_ += 4;
    }

    /// Throws unless at least n more bytes remain.
    void require(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw DataError(source_ + ": truncated at offset " + std::to_string(pos_) + ", need " + std::to_string(n) +
                            " more bytes, have " + std::to_string(bytes_.size() - pos_));
        }
    }

    void expect_end() const {
        if (pos_ != bytes_.size()) {
            throw DataError(source_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes after offset " +
                            std::to_string(pos_));
        }
    }

    std::size_t position() const noexcept { return pos_; }
    const std::string& source() const noexcept { return source_; }

private:
    template <typename V>
    V take() {
        require(sizeof(V));
        V v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
        pos_ += sizeof(V);
        return v;
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    std::string source_;
};

}  // namespace cfrpn::io
