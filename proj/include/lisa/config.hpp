#pragma once

#include "lisa/trainer.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace lisa {

// Flat key=value run configuration: greppable, diffable, trivially parsed.
// Unknown keys are rejected with their line number; every run writes the
// fully-resolved config (defaults expanded) next to its outputs.
struct RunConfig {
    TrainConfig train;
    std::string dataset_dir;
    std::string out_dir;
    int eval_episodes = 1;        // episodes per instruction
    std::string eval_seeds = "0";  // comma-separated environment seeds

    static RunConfig defaults();
    static RunConfig parse_file(const std::filesystem::path& file);
    static RunConfig parse_text(const std::string& text, const std::string& origin);
    // Deterministic writeback; parse(writeback()) == *this.
    std::string writeback() const;

    std::vector<uint64_t> eval_seed_list() const;
};

}  // namespace lisa
