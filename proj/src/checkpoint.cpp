#include <string>

#include "voxcvae/model.hpp"
#include "voxcvae/serialize.hpp"

namespace voxcvae {

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void save_checkpoint(Cvae& model, const std::string& path) {
    auto os = io::open_output(path);
    os.write("CVAE", 4);
    io::write_u32(os, kCheckpointVersion);
    std::string cfg = model.cfg.to_text();
    io::write_u32(os, std::uint32_t(cfg.size()));
    os.write(cfg.data(), std::streamsize(cfg.size()));
    auto state = model.state();
    io::write_u32(os, std::uint32_t(state.size()));
    for (const auto& entry : state) {
        io::write_u16(os, std::uint16_t(entry.name.size()));
        os.write(entry.name.data(), std::streamsize(entry.name.size()));
        io::write_u32(os, std::uint32_t(entry.tensor->rank()));
        for (int e : entry.tensor->shape) io::write_u32(os, std::uint32_t(e));
        io::write_f32_array(os, entry.tensor->ptr(), entry.tensor->numel());
    }
    if (!os) io::fail(path, "write failed");
}

Cvae load_checkpoint(const std::string& path) {
    auto is = io::open_input(path);
    io::expect_magic(is, "CVAE", path);
    std::uint32_t version = io::read_u32(is, path);
    if (version != kCheckpointVersion)
        io::fail(path, "unsupported checkpoint version " + std::to_string(version));
    std::uint32_t cfg_len = io::read_u32(is, path);
    if (cfg_len > (1u << 20)) io::fail(path, "implausible config length");
    std::string cfg_text(cfg_len, '\0');
    io::read_exact(is, cfg_text.data(), cfg_len, path);
    Cvae model(ModelConfig::from_text(cfg_text));

    auto state = model.state();
    std::uint32_t count = io::read_u32(is, path);
    if (count != state.size())
        io::fail(path, "checkpoint holds " + std::to_string(count) + " tensors, model needs " +
                           std::to_string(state.size()));
    for (auto& entry : state) {
        std::uint16_t name_len = io::read_u16(is, path);
        std::string name(name_len, '\0');
        io::read_exact(is, name.data(), name_len, path);
        if (name != entry.name)
            io::fail(path, "tensor name mismatch, expected '" + entry.name + "' got '" + name +
                               "'");
        std::uint32_t rank = io::read_u32(is, path);
        if (rank != std::uint32_t(entry.tensor->rank()))
            io::fail(path, "rank mismatch for '" + name + "'");
        Shape shape(rank);
        for (auto& e : shape) e = int(io::read_u32(is, path));
        if (shape != entry.tensor->shape)
            io::fail(path, "shape mismatch for '" + name + "': checkpoint " + shape_str(shape) +
                               " vs model " + shape_str(entry.tensor->shape));
        io::read_f32_array(is, entry.tensor->ptr(), entry.tensor->numel(), path);
    }
    io::expect_eof(is, path);
    return model;
}

Cvae load_checkpoint(const std::string& path, Profile expected_profile) {
    Cvae model = load_checkpoint(path);
    if (model.cfg.profile != expected_profile)
        io::fail(path, "checkpoint profile '" + to_string(model.cfg.profile) +
                           "' does not match requested profile '" + to_string(expected_profile) +
                           "'");
    return model;
}

}  // namespace voxcvae
