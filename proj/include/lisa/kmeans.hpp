#pragma once

#include "lisa/gridworld.hpp"

#include <cstdint>
#include <vector>

namespace lisa {

// Unsupervised baseline: cluster concatenated language-state vectors with
// Lloyd's algorithm (k-means++ init) and use the assigned centers as skill
// codes. The language part is a frozen random token embedding, mean-pooled,
// so the only trainable path from language to actions is the chosen center.
struct KmeansSkills {
    int k = 0;
    int lang_dim = 0;
    int feature_dim = 0;  // lang_dim + kObsDim
    uint64_t lang_seed = 0;
    std::vector<double> lang_table;  // vocab x lang_dim, frozen
    std::vector<double> centers;     // k x feature_dim

    std::vector<double> feature(const std::vector<int>& token_ids,
                                const std::vector<uint16_t>& sparse_obs) const;
    int assign(const std::vector<double>& feat) const;  // nearest center, lowest-index ties
    const double* center(int i) const { return centers.data() + static_cast<size_t>(i) * feature_dim; }
};

// Lloyd iterations over every per-timestep language-state vector in the
// dataset. Empty clusters are reseeded from the point farthest from its
// center. Deterministic in seed.
KmeansSkills fit_kmeans_skills(const std::vector<TrajectoryRecord>& records, int k,
                               int iterations, uint64_t seed, int vocab_size,
                               int lang_dim = 32);

// Plain Lloyd's with k-means++ on arbitrary points (exposed for tests).
std::vector<double> lloyd_kmeans(const std::vector<std::vector<double>>& points, int k,
                                 int iterations, uint64_t seed);

}  // namespace lisa
