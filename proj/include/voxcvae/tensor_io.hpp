#pragma once

#include <string>

#include "voxcvae/serialize.hpp"
#include "voxcvae/tensor.hpp"

namespace voxcvae {

// TNSR container: magic `TNSR`, version u32, rank u32, extents u32 each,
// float32 payload; little-endian throughout.

inline constexpr std::uint32_t kTnsrVersion = 1;

inline void save_tnsr(const std::string& path, const Tensor& t) {
    auto os = io::open_output(path);
    os.write("TNSR", 4);
    io::write_u32(os, kTnsrVersion);
    io::write_u32(os, std::uint32_t(t.rank()));
    for (int e : t.shape) io::write_u32(os, std::uint32_t(e));
    io::write_f32_array(os, t.ptr(), t.numel());
    if (!os) io::fail(path, "write failed");
}

inline Tensor load_tnsr(const std::string& path) {
    auto is = io::open_input(path);
    io::expect_magic(is, "TNSR", path);
    std::uint32_t version = io::read_u32(is, path);
    if (version != kTnsrVersion)
        io::fail(path, "unsupported version " + std::to_string(version));
    std::uint32_t rank = io::read_u32(is, path);
    if (rank > 16) io::fail(path, "implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = int(io::read_u32(is, path));
    Tensor t(shape);
    io::read_f32_array(is, t.ptr(), t.numel(), path);
    io::expect_eof(is, path);
    return t;
}

}  // namespace voxcvae
