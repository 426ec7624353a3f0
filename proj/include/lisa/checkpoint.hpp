#pragma once

#include "lisa/autodiff.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lisa {

// Versioned binary container: magic "LISA", u32 version, length-prefixed
// config echo, then length-prefixed named float64 arrays with explicit
// shapes. Everything little-endian.
struct CheckpointArray {
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::string config_text;
    std::map<std::string, CheckpointArray> arrays;

    bool has(const std::string& name) const { return arrays.count(name) > 0; }
    const CheckpointArray& at(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace lisa
