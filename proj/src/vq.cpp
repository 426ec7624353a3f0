#include "lisa/vq.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lisa {

Codebook Codebook::random_init(int k, int d, std::mt19937_64& rng, double decay,
                               double laplace_eps) {
    if (k <= 0 || d <= 0) throw std::invalid_argument("Codebook: K and D must be positive");
    if (decay <= 0.0 || decay >= 1.0)
        throw std::invalid_argument("Codebook: decay must lie in (0,1)");
    Codebook cb;
    cb.k = k;
    cb.d = d;
    cb.decay = decay;
    cb.laplace_eps = laplace_eps;
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    cb.vectors.resize(static_cast<size_t>(k) * d);
    for (auto& v : cb.vectors) v = normal(rng);
    cb.ema_cluster_size.assign(k, 0.0);
    cb.ema_sum.assign(static_cast<size_t>(k) * d, 0.0);
    return cb;
}

void Codebook::validate() const {
    if (k <= 0 || d <= 0 || vectors.size() != static_cast<size_t>(k) * d ||
        ema_cluster_size.size() != static_cast<size_t>(k) ||
        ema_sum.size() != static_cast<size_t>(k) * d)
        throw std::invalid_argument("Codebook: inconsistent sizes");
    for (double v : vectors)
        if (!std::isfinite(v)) throw std::runtime_error("Codebook: non-finite row entry");
    for (double n : ema_cluster_size)
        if (n < 0.0) throw std::runtime_error("Codebook: negative cluster size");
}

QuantizeResult quantize(const Codebook& cb, const Tensor& z_tilde) {
    if (z_tilde.ndim() != 1 || z_tilde.dim(0) != cb.d)
        throw std::invalid_argument("quantize: expected [" + std::to_string(cb.d) +
                                    "], got " + shape_str(z_tilde.shape()));
    const auto& z = z_tilde.values();
    for (double v : z)
        if (!std::isfinite(v)) throw std::runtime_error("quantize: non-finite input");

    int best = 0;
    double best_dist = 0.0;
    for (int i = 0; i < cb.k; ++i) {
        const double* c = cb.row(i);
        double dist = 0.0;
        for (int j = 0; j < cb.d; ++j) {
            const double diff = z[j] - c[j];
            dist += diff * diff;
        }
        if (i == 0 || dist < best_dist) {  // strict <: ties keep the lowest index
            best = i;
            best_dist = dist;
        }
    }

    QuantizeResult r;
    r.code_index = best;
    r.code_vector.assign(cb.row(best), cb.row(best) + cb.d);
    Tensor code_const = Tensor::from_values({cb.d}, r.code_vector);
    // The codebook side is a constant here (EMA-trained), so the sg[] in
    // ||sg[q(z)] - z||^2 is implicit: the gradient is 2(z - q(z)) into z.
    r.commitment_loss = sum_all(square(sub(z_tilde, code_const)));
    r.straight_through = straight_through(z_tilde, {cb.d}, r.code_vector);
    return r;
}

void ema_update(Codebook& cb,
                const std::vector<std::pair<int, std::vector<double>>>& assignments) {
    const int k = cb.k, d = cb.d;
    std::vector<double> counts(k, 0.0);
    std::vector<double> sums(static_cast<size_t>(k) * d, 0.0);
    for (const auto& [idx, z] : assignments) {
        if (idx < 0 || idx >= k)
            throw std::invalid_argument("ema_update: code index " + std::to_string(idx) +
                                        " out of range [0," + std::to_string(k) + ")");
        if (static_cast<int>(z.size()) != d)
            throw std::invalid_argument("ema_update: embedding length mismatch");
        counts[idx] += 1.0;
        double* s = sums.data() + static_cast<size_t>(idx) * d;
        for (int j = 0; j < d; ++j) s[j] += z[j];
    }

    const double g = cb.decay;
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
        cb.ema_cluster_size[i] = g * cb.ema_cluster_size[i] + (1.0 - g) * counts[i];
        total += cb.ema_cluster_size[i];
    }
    for (size_t i = 0; i < cb.ema_sum.size(); ++i)
        cb.ema_sum[i] = g * cb.ema_sum[i] + (1.0 - g) * sums[i];

    // With no mass anywhere there is nothing to move toward; rows keep their
    // init. Once total > 0 each Laplace-smoothed denominator is positive.
    if (total == 0.0) return;
    for (int i = 0; i < k; ++i) {
        const double smoothed = (cb.ema_cluster_size[i] + cb.laplace_eps) /
                                (total + k * cb.laplace_eps) * total;
        double* row = cb.vectors.data() + static_cast<size_t>(i) * d;
        const double* m = cb.ema_sum.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) row[j] = m[j] / smoothed;
    }
}

double perplexity(const Codebook& cb, const std::vector<int>& recent_indices) {
    if (recent_indices.empty()) throw std::invalid_argument("perplexity: empty index list");
    std::vector<double> counts(cb.k, 0.0);
    for (int i : recent_indices) {
        if (i < 0 || i >= cb.k)
            throw std::invalid_argument("perplexity: index " + std::to_string(i) +
                                        " out of range");
        counts[i] += 1.0;
    }
    const double n = static_cast<double>(recent_indices.size());
    double h = 0.0;
    for (double c : counts) {
        if (c == 0.0) continue;
        const double p = c / n;
        h -= p * std::log(p);
    }
    return std::exp(h);
}

double mi_estimate(const Codebook& cb, const std::vector<std::vector<double>>& embeds) {
    const int k = cb.k, d = cb.d;
    std::vector<double> code_sq(k, 0.0);
    for (int i = 0; i < k; ++i) {
        const double* c = cb.row(i);
        for (int j = 0; j < d; ++j) code_sq[i] += c[j] * c[j];
    }

    auto h2 = [](const std::vector<double>& p) {
        double h = 0.0;
        for (double v : p)
            if (v > 0.0) h -= v * std::log2(v);
        return h;
    };

    std::vector<double> marginal(k, 0.0);
    double mean_cond_entropy = 0.0;
    std::vector<double> cond(k);
    for (const auto& z : embeds) {
        if (static_cast<int>(z.size()) != d)
            throw std::invalid_argument("mi_estimate: embedding length " +
                                        std::to_string(z.size()) + " vs D=" + std::to_string(d));
        double zsq = 0.0;
        for (double v : z) zsq += v * v;
        // distance = -(|z|^2 - 2 z.c + |c|^2), then softmax(distance / 2)
        double best = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < k; ++i) {
            const double* c = cb.row(i);
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += z[j] * c[j];
            cond[i] = -(zsq - 2.0 * dot + code_sq[i]) / 2.0;
            best = std::max(best, cond[i]);
        }
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            cond[i] = std::exp(cond[i] - best);
            sum += cond[i];
        }
        for (int i = 0; i < k; ++i) cond[i] /= sum;
        for (int i = 0; i < k; ++i) marginal[i] += cond[i];
        mean_cond_entropy += h2(cond);
    }
    const double b = static_cast<double>(embeds.size());
    if (b == 0.0) throw std::invalid_argument("mi_estimate: empty batch");
    for (double& m : marginal) m /= b;
    mean_cond_entropy /= b;
    return h2(marginal) - mean_cond_entropy;
}

}  // namespace lisa
