#include "lisa/kmeans.hpp"

#include "lisa/rng.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace lisa {

namespace {

double sq_dist(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return s;
}

}  // namespace

std::vector<double> KmeansSkills::feature(const std::vector<int>& token_ids,
                                          const std::vector<uint16_t>& sparse_obs) const {
    std::vector<double> f(static_cast<size_t>(feature_dim), 0.0);
    if (token_ids.empty()) throw std::invalid_argument("kmeans feature: empty instruction");
    for (int t : token_ids) {
        const double* row = lang_table.data() + static_cast<size_t>(t) * lang_dim;
        for (int j = 0; j < lang_dim; ++j) f[j] += row[j];
    }
    for (int j = 0; j < lang_dim; ++j) f[j] /= static_cast<double>(token_ids.size());
    for (uint16_t i : sparse_obs) f[lang_dim + i] = 1.0;
    return f;
}

int KmeansSkills::assign(const std::vector<double>& feat) const {
    int best = 0;
    double best_d = 0.0;
    for (int i = 0; i < k; ++i) {
        const double d = sq_dist(feat.data(), center(i), feature_dim);
        if (i == 0 || d < best_d) {
            best = i;
            best_d = d;
        }
    }
    return best;
}

std::vector<double> lloyd_kmeans(const std::vector<std::vector<double>>& points, int k,
                                 int iterations, uint64_t seed) {
    if (points.empty()) throw std::invalid_argument("kmeans: no points");
    if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
    const int d = static_cast<int>(points[0].size());
    const int n = static_cast<int>(points.size());
    std::mt19937_64 rng(seed);

    // k-means++ seeding
    std::vector<double> centers;
    centers.reserve(static_cast<size_t>(k) * d);
    std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
    {
        const int first = static_cast<int>(rng() % n);
        centers.insert(centers.end(), points[first].begin(), points[first].end());
    }
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            const double dd =
                sq_dist(points[i].data(), centers.data() + static_cast<size_t>(c - 1) * d, d);
            min_d[i] = std::min(min_d[i], dd);
            total += min_d[i];
        }
        int pick = 0;
        if (total > 0.0) {
            // draw proportional to squared distance using a fixed-point scan
            const double r = (static_cast<double>(rng() >> 11) / 9007199254740992.0) * total;
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += min_d[i];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<int>(rng() % n);
        }
        centers.insert(centers.end(), points[pick].begin(), points[pick].end());
    }

    std::vector<int> owner(n, 0);
    for (int it = 0; it < iterations; ++it) {
        bool moved = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double dd =
                    sq_dist(points[i].data(), centers.data() + static_cast<size_t>(c) * d, d);
                if (dd < best_d) {
                    best = c;
                    best_d = dd;
                }
            }
            if (owner[i] != best) moved = true;
            owner[i] = best;
        }
        std::vector<double> sums(static_cast<size_t>(k) * d, 0.0);
        std::vector<int> counts(k, 0);
        for (int i = 0; i < n; ++i) {
            ++counts[owner[i]];
            double* s = sums.data() + static_cast<size_t>(owner[i]) * d;
            for (int j = 0; j < d; ++j) s[j] += points[i][j];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                for (int j = 0; j < d; ++j)
                    centers[static_cast<size_t>(c) * d + j] = sums[static_cast<size_t>(c) * d + j] / counts[c];
            } else {
                // reseed an empty cluster from the point farthest from its center
                int far = 0;
                double far_d = -1.0;
                for (int i = 0; i < n; ++i) {
                    const double dd = sq_dist(
                        points[i].data(), centers.data() + static_cast<size_t>(owner[i]) * d, d);
                    if (dd > far_d) {
                        far_d = dd;
                        far = i;
                    }
                }
                for (int j = 0; j < d; ++j)
                    centers[static_cast<size_t>(c) * d + j] = points[far][j];
                moved = true;
            }
        }
        if (!moved && it > 0) break;
    }
    return centers;
}

KmeansSkills fit_kmeans_skills(const std::vector<TrajectoryRecord>& records, int k,
                               int iterations, uint64_t seed, int vocab_size, int lang_dim) {
    KmeansSkills ks;
    ks.k = k;
    ks.lang_dim = lang_dim;
    ks.feature_dim = lang_dim + kObsDim;
    ks.lang_seed = seed_stream(seed, "kmeans-lang");
    {
        std::mt19937_64 rng(ks.lang_seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        ks.lang_table.resize(static_cast<size_t>(vocab_size) * lang_dim);
        for (auto& v : ks.lang_table) v = normal(rng);
    }
    std::vector<std::vector<double>> points;
    for (const auto& r : records)
        for (const auto& st : r.states) points.push_back(ks.feature(r.token_ids, st));
    ks.centers = lloyd_kmeans(points, k, iterations, seed_stream(seed, "kmeans-fit"));
    return ks;
}

}  // namespace lisa
