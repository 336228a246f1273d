#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxcvae::io {

// All file formats are little-endian; bytes are written explicitly so the
// layout does not depend on host endianness.

inline void write_u16(std::ostream& os, std::uint16_t v) {
    char b[2] = {char(v & 0xFF), char((v >> 8) & 0xFF)};
    os.write(b, 2);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

inline void write_f32(std::ostream& os, float v) {
    write_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_f32_array(std::ostream& os, const float* p, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(p), std::streamsize(n * 4));
    } else {
        for (std::size_t i = 0; i < n; ++i) write_f32(os, p[i]);
    }
}

[[noreturn]] inline void fail(const std::string& context, const std::string& what) {
    throw std::runtime_error(context + ": " + what);
}

inline void read_exact(std::istream& is, char* out, std::size_t n, const std::string& context) {
    is.read(out, std::streamsize(n));
    if (std::size_t(is.gcount()) != n) fail(context, "file truncated");
}

inline std::uint16_t read_u16(std::istream& is, const std::string& context) {
    unsigned char b[2];
    read_exact(is, reinterpret_cast<char*>(b), 2, context);
    return std::uint16_t(b[0] | (b[1] << 8));
}

inline std::uint32_t read_u32(std::istream& is, const std::string& context) {
    unsigned char b[4];
    read_exact(is, reinterpret_cast<char*>(b), 4, context);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline std::uint64_t read_u64(std::istream& is, const std::string& context) {
    unsigned char b[8];
    read_exact(is, reinterpret_cast<char*>(b), 8, context);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline float read_f32(std::istream& is, const std::string& context) {
    return std::bit_cast<float>(read_u32(is, context));
}

inline void read_f32_array(std::istream& is, float* out, std::size_t n, const std::string& context) {
    if constexpr (std::endian::native == std::endian::little) {
        read_exact(is, reinterpret_cast<char*>(out), n * 4, context);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = read_f32(is, context);
    }
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& context) {
    char got[4];
    read_exact(is, got, 4, context);
    if (std::memcmp(got, magic, 4) != 0)
        fail(context, std::string("bad magic, expected '") + magic + "'");
}

inline void expect_eof(std::istream& is, const std::string& context) {
    char c;
    is.read(&c, 1);
    if (!is.eof()) fail(context, "trailing bytes after declared payload");
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(path, "cannot open for writing");
    return os;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(path, "cannot open for reading");
    return is;
}

}  // namespace voxcvae::io
