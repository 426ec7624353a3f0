#pragma once

#include "lisa/autodiff.hpp"

#include <random>
#include <utility>
#include <vector>

namespace lisa {

// K learnable D-dimensional skill codes with the moving-average statistics
// that train them. The codebook is not a gradient parameter: rows move only
// through ema_update.
struct Codebook {
    int k = 0;
    int d = 0;
    double decay = 0.99;
    double laplace_eps = 1e-5;
    std::vector<double> vectors;           // K x D, row-major
    std::vector<double> ema_cluster_size;  // K
    std::vector<double> ema_sum;           // K x D

    // Rows i.i.d. N(0, 1/D); EMA moments start at zero.
    static Codebook random_init(int k, int d, std::mt19937_64& rng, double decay = 0.99,
                                double laplace_eps = 1e-5);
    const double* row(int i) const { return vectors.data() + static_cast<size_t>(i) * d; }
    void validate() const;
};

struct QuantizeResult {
    int code_index = -1;
    std::vector<double> code_vector;  // row `code_index` at lookup time
    Tensor commitment_loss;   // ||sg[q(z)] - z||^2; gradient reaches z only
    Tensor straight_through;  // forward equals code_vector; backward is identity to z
};

// Nearest codebook row under L2, ties broken by lowest index.
QuantizeResult quantize(const Codebook& cb, const Tensor& z_tilde);

// Moving-average codebook update from one training batch of assignments.
// n_k <- decay n_k + (1-decay) count_k ; m_k <- decay m_k + (1-decay) sum_k ;
// rows <- m_k / ((n_k + eps)/(N + K eps) * N) with N the total count.
// Codes with no assignments still decay; nothing ever becomes NaN/Inf.
// Single-writer: callers serialize updates per codebook.
void ema_update(Codebook& cb,
                const std::vector<std::pair<int, std::vector<double>>>& assignments);

// exp of the Shannon entropy (nats) of the empirical code distribution.
// 1 = collapse to one code, K = uniform usage.
double perplexity(const Codebook& cb, const std::vector<int>& recent_indices);

// Mutual information (bits) between codes and embeddings, treating p(l|z) as
// an isotropic Gaussian at each code: per-sample softmax(-(|z|^2 - 2 z.C^T +
// |C|^2)/2) over codes, then H2(marginal) - mean H2(conditional). No
// gradients. embeds is B rows of D values.
double mi_estimate(const Codebook& cb, const std::vector<std::vector<double>>& embeds);

}  // namespace lisa
