#include "lisa/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace lisa {

void TransformerConfig::validate() const {
    if (n_layers <= 0 || embed_dim <= 0 || n_heads <= 0 || max_seq_len <= 0)
        throw std::invalid_argument("TransformerConfig: all dimensions must be positive");
    if (embed_dim % n_heads != 0)
        throw std::invalid_argument("TransformerConfig: embed_dim " + std::to_string(embed_dim) +
                                    " not divisible by n_heads " + std::to_string(n_heads));
    if (dropout < 0.0 || dropout > 1.0)
        throw std::invalid_argument("TransformerConfig: dropout outside [0,1]");
}

Tensor ParamStore::add(const std::string& name, Shape shape, std::mt19937_64& rng,
                       double stddev) {
    if (params.count(name))
        throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    std::normal_distribution<double> normal(0.0, stddev);
    std::vector<double> v(static_cast<size_t>(numel(shape)));
    for (auto& x : v) x = normal(rng);
    Tensor t = Tensor::from_values(std::move(shape), std::move(v), /*requires_grad=*/true);
    params.emplace(name, t);
    return t;
}

Tensor ParamStore::add_const(const std::string& name, Shape shape, double fill) {
    if (params.count(name))
        throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    std::vector<double> v(static_cast<size_t>(numel(shape)), fill);
    Tensor t = Tensor::from_values(std::move(shape), std::move(v), /*requires_grad=*/true);
    params.emplace(name, t);
    return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return it->second;
}

int64_t ParamStore::scalar_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
}

int64_t ParamStore::scalar_count(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [name, t] : params)
        if (name.rfind(prefix, 0) == 0) n += t.size();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
}

std::vector<std::pair<std::string, Tensor>> ParamStore::with_prefix(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : params)
        if (name.rfind(prefix, 0) == 0) out.emplace_back(name, t);
    return out;
}

double WarmupSchedule::lr(int64_t step) const {
    if (warmup_steps <= 0) return base_lr;
    const double f = static_cast<double>(step) / static_cast<double>(warmup_steps);
    return base_lr * std::min(1.0, f);
}

Adam::Adam(double base_lr, int warmup_steps, double beta1, double beta2, double eps)
    : schedule_{warmup_steps, base_lr}, beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<std::pair<std::string, Tensor>>& group) {
    ++t_;
    const double lr = schedule_.lr(t_);
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, tensor] : group) {
        auto& [m, v] = moments_[name];
        if (m.empty()) {
            m.assign(tensor.values().size(), 0.0);
            v.assign(tensor.values().size(), 0.0);
        }
        if (m.size() != tensor.values().size())
            throw std::invalid_argument("Adam: parameter " + name + " changed size");
        const std::vector<double>* g = tensor.has_grad() ? &tensor.node->grad : nullptr;
        auto& p = tensor.node->values;
        for (size_t i = 0; i < p.size(); ++i) {
            const double gi = g ? (*g)[i] : 0.0;
            if (!std::isfinite(gi))
                throw std::runtime_error("Adam: non-finite gradient in parameter " + name);
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

BlockParams make_block(ParamStore& store, const std::string& prefix,
                       const TransformerConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const int e = cfg.embed_dim;
    const double w_std = 1.0 / std::sqrt(static_cast<double>(e));
    const double mlp_std = 1.0 / std::sqrt(static_cast<double>(4 * e));
    BlockParams p;
    p.ln1_g = store.add_const(prefix + "/ln1/g", {e}, 1.0);
    p.ln1_b = store.add_const(prefix + "/ln1/b", {e}, 0.0);
    p.wq = store.add(prefix + "/attn/wq", {e, e}, rng, w_std);
    p.bq = store.add_const(prefix + "/attn/bq", {e}, 0.0);
    p.wk = store.add(prefix + "/attn/wk", {e, e}, rng, w_std);
    p.bk = store.add_const(prefix + "/attn/bk", {e}, 0.0);
    p.wv = store.add(prefix + "/attn/wv", {e, e}, rng, w_std);
    p.bv = store.add_const(prefix + "/attn/bv", {e}, 0.0);
    p.wo = store.add(prefix + "/attn/wo", {e, e}, rng, w_std);
    p.bo = store.add_const(prefix + "/attn/bo", {e}, 0.0);
    p.ln2_g = store.add_const(prefix + "/ln2/g", {e}, 1.0);
    p.ln2_b = store.add_const(prefix + "/ln2/b", {e}, 0.0);
    p.w1 = store.add(prefix + "/mlp/w1", {e, 4 * e}, rng, w_std);
    p.b1 = store.add_const(prefix + "/mlp/b1", {4 * e}, 0.0);
    p.w2 = store.add(prefix + "/mlp/w2", {4 * e, e}, rng, mlp_std);
    p.b2 = store.add_const(prefix + "/mlp/b2", {e}, 0.0);
    return p;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

namespace {

std::vector<uint8_t> causal_mask(int t_len) {
    std::vector<uint8_t> mask(static_cast<size_t>(t_len) * t_len, 0);
    for (int i = 0; i < t_len; ++i)
        for (int j = i + 1; j < t_len; ++j) mask[static_cast<size_t>(i) * t_len + j] = 1;
    return mask;
}

Tensor maybe_dropout(const Tensor& x, const TransformerConfig& cfg, DropoutState* drop) {
    if (!drop || cfg.dropout == 0.0) return x;
    return dropout(x, cfg.dropout, /*train=*/true, drop->next());
}

}  // namespace

Tensor block_forward(const BlockParams& p, const TransformerConfig& cfg, const Tensor& tokens,
                     int prefix_len, DropoutState* drop) {
    cfg.validate();
    if (tokens.ndim() != 2 || tokens.dim(1) != cfg.embed_dim)
        throw std::invalid_argument("block_forward: tokens must be [T," +
                                    std::to_string(cfg.embed_dim) + "], got " +
                                    shape_str(tokens.shape()));
    const int t_len = tokens.dim(0);
    if (t_len > cfg.max_seq_len)
        throw std::invalid_argument("block_forward: sequence length " + std::to_string(t_len) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    if (prefix_len < 0 || prefix_len > t_len)
        throw std::invalid_argument("block_forward: prefix_len out of range");

    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto mask = causal_mask(t_len);

    Tensor x = layer_norm(tokens, p.ln1_g, p.ln1_b);
    Tensor q = linear(x, p.wq, p.bq);
    Tensor k = linear(x, p.wk, p.bk);
    Tensor v = linear(x, p.wv, p.bv);

    std::vector<Tensor> heads;
    heads.reserve(cfg.n_heads);
    for (int h = 0; h < cfg.n_heads; ++h) {
        Tensor qh = slice(q, 1, h * dh, dh);
        Tensor kh = slice(k, 1, h * dh, dh);
        Tensor vh = slice(v, 1, h * dh, dh);
        Tensor scores = scalar_mul(matmul(qh, transpose(kh)), scale);
        Tensor probs = softmax(masked_fill_neg_inf(scores, mask));
        probs = maybe_dropout(probs, cfg, drop);
        heads.push_back(matmul(probs, vh));
    }
    Tensor ctx = cfg.n_heads == 1 ? heads[0] : concat(heads, 1);
    Tensor attn_out = maybe_dropout(linear(ctx, p.wo, p.bo), cfg, drop);
    Tensor y = add(tokens, attn_out);

    Tensor z = layer_norm(y, p.ln2_g, p.ln2_b);
    Tensor h1 = gelu(linear(z, p.w1, p.b1));
    Tensor mlp_out = maybe_dropout(linear(h1, p.w2, p.b2), cfg, drop);
    return add(y, mlp_out);
}

TransformerStack make_stack(ParamStore& store, const std::string& prefix,
                            const TransformerConfig& cfg, std::mt19937_64& rng) {
    TransformerStack s;
    for (int i = 0; i < cfg.n_layers; ++i)
        s.blocks.push_back(make_block(store, prefix + "/block" + std::to_string(i), cfg, rng));
    return s;
}

Tensor stack_forward(const TransformerStack& s, const TransformerConfig& cfg,
                     const Tensor& tokens, int prefix_len, DropoutState* drop) {
    Tensor x = tokens;
    for (const auto& b : s.blocks) x = block_forward(b, cfg, x, prefix_len, drop);
    return x;
}

Tensor make_positional_table(ParamStore& store, const std::string& name,
                             const TransformerConfig& cfg, std::mt19937_64& rng) {
    return store.add(name, {cfg.max_seq_len, cfg.embed_dim}, rng, 0.05);
}

Tensor positional_embed(const Tensor& table, int t_len) {
    if (t_len > table.dim(0))
        throw std::invalid_argument("positional_embed: length " + std::to_string(t_len) +
                                    " overflows table of " + std::to_string(table.dim(0)));
    return slice(table, 0, 0, t_len);
}

int64_t block_param_count(const TransformerConfig& cfg) {
    const int64_t e = cfg.embed_dim;
    return 12 * e * e + 13 * e;
}

}  // namespace lisa
