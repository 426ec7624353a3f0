#pragma once

#include "lisa/autodiff.hpp"
#include "lisa/rng.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace lisa {

struct TransformerConfig {
    int n_layers = 1;
    int embed_dim = 64;  // paper-scale is 128; desk default trains on CPU in minutes
    int n_heads = 4;
    double dropout = 0.1;
    int max_seq_len = 192;

    void validate() const;  // throws std::invalid_argument
    int head_dim() const { return embed_dim / n_heads; }
};

// Named parameter registry. Iteration is lexicographic by name; the optimizer
// and checkpoints both rely on that stable order.
struct ParamStore {
    std::map<std::string, Tensor> params;

    Tensor add(const std::string& name, Shape shape, std::mt19937_64& rng, double stddev);
    Tensor add_const(const std::string& name, Shape shape, double fill);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return params.count(name) > 0; }
    int64_t scalar_count() const;
    int64_t scalar_count(const std::string& prefix) const;
    void zero_grads();
    std::vector<std::pair<std::string, Tensor>> with_prefix(const std::string& prefix) const;
};

struct WarmupSchedule {
    int warmup_steps = 0;
    double base_lr = 0.0;

    // base_lr * min(1, t / warmup_steps); lr(0) == 0 whenever warmup_steps > 0.
    double lr(int64_t step) const;
};

// Adam with bias correction for one parameter group. A tensor with no grad
// buffer is treated as having an all-zero gradient.
class Adam {
public:
    Adam(double base_lr, int warmup_steps, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    void step(const std::vector<std::pair<std::string, Tensor>>& group);
    int64_t step_count() const { return t_; }
    double current_lr() const { return schedule_.lr(t_); }
    const WarmupSchedule& schedule() const { return schedule_; }

private:
    WarmupSchedule schedule_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// Seed source for train-mode dropout. Masks depend only on (base, draw
// order), so a single-threaded forward pass is reproducible bit-for-bit.
struct DropoutState {
    uint64_t base = 0;
    uint64_t counter = 0;
    uint64_t next() { return seed_stream(base, "dropout-site", counter++); }
};

// One pre-norm transformer block (causal self-attention + GELU MLP, residual
// connections). Parameter names live under `prefix/`.
struct BlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

BlockParams make_block(ParamStore& store, const std::string& prefix,
                       const TransformerConfig& cfg, std::mt19937_64& rng);

// Causal self-attention block forward over tokens [T, embed_dim]. Position t
// attends to positions <= t. The language prefix occupies the first
// prefix_len positions; because it precedes everything, position order alone
// already makes it visible to every later position (no bidirectional prefix
// attention). prefix_len is validated against T.
Tensor block_forward(const BlockParams& p, const TransformerConfig& cfg, const Tensor& tokens,
                     int prefix_len, DropoutState* drop);

// Stack of cfg.n_layers blocks sharing one config.
struct TransformerStack {
    std::vector<BlockParams> blocks;
};

TransformerStack make_stack(ParamStore& store, const std::string& prefix,
                            const TransformerConfig& cfg, std::mt19937_64& rng);
Tensor stack_forward(const TransformerStack& s, const TransformerConfig& cfg,
                     const Tensor& tokens, int prefix_len, DropoutState* drop);

// Learned positional table [max_seq_len, embed_dim]; the first T rows are
// added to token embeddings. Prefix and sequence positions share one axis.
Tensor make_positional_table(ParamStore& store, const std::string& name,
                             const TransformerConfig& cfg, std::mt19937_64& rng);
Tensor positional_embed(const Tensor& table, int t_len);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Scalar parameters of one block: attention 4E^2+4E, MLP 8E^2+5E, norms 4E.
int64_t block_param_count(const TransformerConfig& cfg);

}  // namespace lisa
