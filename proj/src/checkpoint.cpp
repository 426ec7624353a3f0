#include "lisa/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace lisa {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts unsupported");

namespace {

constexpr uint32_t kVersion = 1;

void put_u32(std::ofstream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::ofstream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
uint32_t get_u32(std::ifstream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
uint64_t get_u64(std::ifstream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

}  // namespace

const CheckpointArray& Checkpoint::at(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end())
        throw std::runtime_error("checkpoint: missing array '" + name + "'");
    return it->second;
}

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + file.string());
    out.write("LISA", 4);
    put_u32(out, kVersion);
    put_u64(out, ckpt.config_text.size());
    out.write(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
    put_u64(out, ckpt.arrays.size());
    for (const auto& [name, arr] : ckpt.arrays) {
        if (static_cast<int64_t>(arr.values.size()) != numel(arr.shape))
            throw std::invalid_argument("checkpoint: shape/value mismatch in '" + name + "'");
        put_u64(out, name.size());
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u64(out, arr.shape.size());
        for (int d : arr.shape) put_u64(out, static_cast<uint64_t>(d));
        put_u64(out, arr.values.size());
        out.write(reinterpret_cast<const char*>(arr.values.data()),
                  static_cast<std::streamsize>(arr.values.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + file.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (std::string(magic, 4) != "LISA")
        throw std::runtime_error("not a LISA checkpoint: " + file.string());
    const uint32_t version = get_u32(in);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.config_text.resize(get_u64(in));
    in.read(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
    const uint64_t n = get_u64(in);
    for (uint64_t i = 0; i < n; ++i) {
        std::string name(get_u64(in), '\0');
        in.read(name.data(), static_cast<std::streamsize>(name.size()));
        CheckpointArray arr;
        arr.shape.resize(get_u64(in));
        for (auto& d : arr.shape) d = static_cast<int>(get_u64(in));
        arr.values.resize(get_u64(in));
        in.read(reinterpret_cast<char*>(arr.values.data()),
                static_cast<std::streamsize>(arr.values.size() * sizeof(double)));
        if (!in) throw std::runtime_error("truncated checkpoint: " + file.string());
        ckpt.arrays.emplace(std::move(name), std::move(arr));
    }
    return ckpt;
}

}  // namespace lisa
