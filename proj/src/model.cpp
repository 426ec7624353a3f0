#include "lisa/model.hpp"

#include "lisa/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace lisa {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::lisa: return "lisa";
        case Variant::flat: return "flat";
        case Variant::mlp_predictor: return "mlp-predictor";
        case Variant::continuous: return "continuous";
        case Variant::kmeans: return "kmeans";
    }
    return "?";
}

Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::lisa, Variant::flat, Variant::mlp_predictor,
                      Variant::continuous, Variant::kmeans})
        if (s == variant_name(v)) return v;
    throw std::invalid_argument("unknown variant '" + s +
                                "' (expected lisa|flat|mlp-predictor|continuous|kmeans)");
}

void ModelConfig::validate() const {
    if (horizon < 1) throw std::invalid_argument("ModelConfig: horizon must be >= 1");
    if (code_dim < 1) throw std::invalid_argument("ModelConfig: code_dim must be >= 1");
    if (vocab_size < 1) throw std::invalid_argument("ModelConfig: vocab_size unset");
    if (obs_dim < 1 || n_actions < 1 || max_lang_len < 1 || predictor_context < 1)
        throw std::invalid_argument("ModelConfig: bad dimensions");
    if (variant == Variant::kmeans && kmeans_feature_dim < 1)
        throw std::invalid_argument("ModelConfig: kmeans_feature_dim unset");
    predictor_tf().validate();
}

TransformerConfig ModelConfig::predictor_tf() const {
    return {n_layers, embed_dim, n_heads, dropout, max_lang_len + predictor_context};
}

TransformerConfig ModelConfig::policy_tf() const {
    return {n_layers, embed_dim, n_heads, dropout, horizon + 1};
}

TransformerConfig ModelConfig::flat_tf() const {
    return {flat_layers, embed_dim, n_heads, dropout, max_lang_len + predictor_context};
}

int ModelConfig::code_input_dim() const {
    return variant == Variant::kmeans ? kmeans_feature_dim : code_dim;
}

LisaModel make_model(const ModelConfig& cfg, uint64_t init_seed) {
    cfg.validate();
    LisaModel m;
    m.cfg = cfg;
    std::mt19937_64 rng(seed_stream(init_seed, "init"));
    const int e = cfg.embed_dim;
    const double w_std = 1.0 / std::sqrt(static_cast<double>(e));

    if (cfg.variant != Variant::kmeans) {
        // Strong language features at init: the skill codes must cluster by
        // instruction content before the observation pathway matures, the
        // same asymmetry a pretrained text encoder provides at full scale.
        m.lang_embed = m.params.add("lang/embed", {cfg.vocab_size, e}, rng, 0.5);
        m.lang_embed.set_tag("lang");
        m.lang_pos = m.params.add("lang/pos", {cfg.max_lang_len, e}, rng, 0.05);
        m.lang_pos.set_tag("lang");
    }

    // Observation encoder is shared by every observation consumer and lives
    // in the policy parameter group.
    // Starts deliberately small (the policy group grows it quickly): early
    // skill codes should be shaped by language rather than raw state detail.
    m.obs_w = m.params.add("policy/obs/w", {cfg.obs_dim, e}, rng, 0.015);
    m.obs_b = m.params.add_const("policy/obs/b", {e}, 0.0);

    const bool has_policy = cfg.variant != Variant::flat;
    if (has_policy) {
        const TransformerConfig ptf = cfg.policy_tf();
        m.policy_stack = make_stack(m.params, "policy/tf", ptf, rng);
        m.policy_pos = make_positional_table(m.params, "policy/pos", ptf, rng);
        m.policy_lng = m.params.add_const("policy/ln/g", {e}, 1.0);
        m.policy_lnb = m.params.add_const("policy/ln/b", {e}, 0.0);
        m.code_proj_w = m.params.add("policy/code_proj/w", {cfg.code_input_dim(), e}, rng,
                                     1.0 / std::sqrt(static_cast<double>(cfg.code_input_dim())));
        m.code_proj_b = m.params.add_const("policy/code_proj/b", {e}, 0.0);
        m.action_w = m.params.add("policy/action/w", {e, cfg.n_actions}, rng, w_std);
        m.action_b = m.params.add_const("policy/action/b", {cfg.n_actions}, 0.0);
    }

    switch (cfg.variant) {
        case Variant::lisa:
        case Variant::continuous: {
            const TransformerConfig ftf = cfg.predictor_tf();
            m.predictor_stack = make_stack(m.params, "predictor/tf", ftf, rng);
            m.predictor_pos = make_positional_table(m.params, "predictor/pos", ftf, rng);
            m.predictor_lng = m.params.add_const("predictor/ln/g", {e}, 1.0);
            m.predictor_lnb = m.params.add_const("predictor/ln/b", {e}, 0.0);
            m.predictor_proj_w = m.params.add("predictor/proj/w", {e, cfg.code_dim}, rng, w_std);
            m.predictor_proj_b = m.params.add_const("predictor/proj/b", {cfg.code_dim}, 0.0);
            break;
        }
        case Variant::mlp_predictor: {
            const int hidden = 4 * e;
            m.mlp_w1 = m.params.add("predictor/mlp/w1", {2 * e, hidden}, rng,
                                    1.0 / std::sqrt(2.0 * e));
            m.mlp_b1 = m.params.add_const("predictor/mlp/b1", {hidden}, 0.0);
            m.mlp_w2 = m.params.add("predictor/mlp/w2", {hidden, cfg.code_dim}, rng,
                                    1.0 / std::sqrt(static_cast<double>(hidden)));
            m.mlp_b2 = m.params.add_const("predictor/mlp/b2", {cfg.code_dim}, 0.0);
            break;
        }
        case Variant::flat: {
            const TransformerConfig ftf = cfg.flat_tf();
            m.flat_stack = make_stack(m.params, "policy/flat", ftf, rng);
            m.flat_pos = make_positional_table(m.params, "policy/flat_pos", ftf, rng);
            m.flat_lng = m.params.add_const("policy/flat_ln/g", {e}, 1.0);
            m.flat_lnb = m.params.add_const("policy/flat_ln/b", {e}, 0.0);
            m.flat_action_w = m.params.add("policy/flat_action/w", {e, cfg.n_actions}, rng, w_std);
            m.flat_action_b = m.params.add_const("policy/flat_action/b", {cfg.n_actions}, 0.0);
            break;
        }
        case Variant::kmeans:
            break;  // policy side only; codes come from the clustering
    }
    return m;
}

Tensor encode_language(const LisaModel& m, const std::vector<int>& token_ids) {
    if (token_ids.empty()) throw std::invalid_argument("encode_language: empty instruction");
    if (static_cast<int>(token_ids.size()) > m.cfg.max_lang_len)
        throw std::invalid_argument("encode_language: instruction longer than max_lang_len");
    Tensor tok = embedding_lookup(m.lang_embed, token_ids);
    Tensor out = add(tok, positional_embed(m.lang_pos, static_cast<int>(token_ids.size())));
    out.set_tag("lang");
    return out;
}

Tensor encode_observations(const LisaModel& m,
                           const std::vector<std::vector<uint16_t>>& sparse_obs) {
    if (sparse_obs.empty()) throw std::invalid_argument("encode_observations: no states");
    std::vector<std::vector<int>> rows(sparse_obs.size());
    for (size_t i = 0; i < sparse_obs.size(); ++i)
        rows[i].assign(sparse_obs[i].begin(), sparse_obs[i].end());
    return add(rows_sum_lookup(m.obs_w, rows), m.obs_b);
}

namespace {

// [lang ; states] with one shared positional axis, run through a stack and a
// final norm.
Tensor prefixed_stack_forward(const TransformerStack& stack, const TransformerConfig& tf,
                              const Tensor& lang, const Tensor& states, const Tensor& pos_table,
                              const Tensor& lng, const Tensor& lnb, DropoutState* drop) {
    const int prefix = lang.dim(0);
    Tensor seq = concat({lang, states}, 0);
    seq = add(seq, positional_embed(pos_table, seq.dim(0)));
    Tensor h = stack_forward(stack, tf, seq, prefix, drop);
    return layer_norm(h, lng, lnb);
}

}  // namespace

Tensor predict_skills_at(const LisaModel& m, const std::vector<int>& token_ids,
                         const Tensor& obs_embeds, const std::vector<int>& positions,
                         DropoutState* drop) {
    if (m.cfg.variant != Variant::lisa && m.cfg.variant != Variant::continuous)
        throw std::logic_error("predict_skills_at: wrong variant");
    const int t_len = obs_embeds.dim(0);
    int start = 0;
    if (t_len > m.cfg.predictor_context) start = t_len - m.cfg.predictor_context;
    Tensor states = start == 0 ? obs_embeds : slice(obs_embeds, 0, start, t_len - start);

    Tensor lang = encode_language(m, token_ids);
    Tensor h = prefixed_stack_forward(m.predictor_stack, m.cfg.predictor_tf(), lang, states,
                                      m.predictor_pos, m.predictor_lng, m.predictor_lnb, drop);
    const int prefix = lang.dim(0);
    std::vector<Tensor> rows;
    rows.reserve(positions.size());
    for (int p : positions) {
        if (p < 0 || p >= t_len)
            throw std::invalid_argument("predict_skills_at: position out of range");
        if (p < start)
            throw std::invalid_argument("predict_skills_at: position truncated by context cap");
        rows.push_back(slice(h, 0, prefix + (p - start), 1));
    }
    Tensor picked = rows.size() == 1 ? rows[0] : concat(rows, 0);
    return linear(picked, m.predictor_proj_w, m.predictor_proj_b);
}

Tensor predict_skill(const LisaModel& m, const std::vector<int>& token_ids,
                     const Tensor& obs_embeds, DropoutState* drop) {
    Tensor z = predict_skills_at(m, token_ids, obs_embeds, {obs_embeds.dim(0) - 1}, drop);
    return reshape(z, {m.cfg.code_dim});
}

Tensor mlp_predict_skill(const LisaModel& m, const std::vector<int>& token_ids,
                         const Tensor& current_obs_embed, DropoutState* drop) {
    if (m.cfg.variant != Variant::mlp_predictor)
        throw std::logic_error("mlp_predict_skill: wrong variant");
    Tensor lang = encode_language(m, token_ids);
    Tensor pooled = mean_axis(lang, 0);  // [E]
    Tensor state = current_obs_embed.ndim() == 2
                       ? reshape(current_obs_embed, {m.cfg.embed_dim})
                       : current_obs_embed;
    Tensor x = reshape(concat({pooled, state}, 0), {1, 2 * m.cfg.embed_dim});
    Tensor h = gelu(linear(x, m.mlp_w1, m.mlp_b1));
    if (drop && m.cfg.dropout > 0.0) h = dropout(h, m.cfg.dropout, true, drop->next());
    return reshape(linear(h, m.mlp_w2, m.mlp_b2), {m.cfg.code_dim});
}

Tensor policy_logits(const LisaModel& m, const Tensor& code_vec, const Tensor& window_obs,
                     DropoutState* drop) {
    if (m.cfg.variant == Variant::flat)
        throw std::logic_error("policy_logits: flat variant has no skill policy");
    const int w = window_obs.dim(0);
    if (w > m.cfg.horizon)
        throw std::invalid_argument("policy_logits: window of " + std::to_string(w) +
                                    " exceeds horizon " + std::to_string(m.cfg.horizon));
    Tensor code_tok = matmul(reshape(code_vec, {1, m.cfg.code_input_dim()}), m.code_proj_w);
    code_tok = add(code_tok, m.code_proj_b);
    Tensor h = prefixed_stack_forward(m.policy_stack, m.cfg.policy_tf(), code_tok, window_obs,
                                      m.policy_pos, m.policy_lng, m.policy_lnb, drop);
    return linear(slice(h, 0, 1, w), m.action_w, m.action_b);
}

Tensor flat_logits(const LisaModel& m, const std::vector<int>& token_ids,
                   const Tensor& obs_embeds, DropoutState* drop) {
    if (m.cfg.variant != Variant::flat)
        throw std::logic_error("flat_logits: model is not the flat variant");
    const int t_len = obs_embeds.dim(0);
    int start = 0;
    if (t_len > m.cfg.predictor_context) start = t_len - m.cfg.predictor_context;
    Tensor states = start == 0 ? obs_embeds : slice(obs_embeds, 0, start, t_len - start);
    Tensor lang = encode_language(m, token_ids);
    Tensor h = prefixed_stack_forward(m.flat_stack, m.cfg.flat_tf(), lang, states, m.flat_pos,
                                      m.flat_lng, m.flat_lnb, drop);
    return linear(slice(h, 0, lang.dim(0), states.dim(0)), m.flat_action_w, m.flat_action_b);
}

void assert_no_language_path(const Tensor& out) {
    std::unordered_set<const detail::Node*> seen;
    std::vector<const detail::Node*> stack{out.node.get()};
    while (!stack.empty()) {
        const detail::Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        if (n->tag == "lang")
            throw std::logic_error(
                "bottleneck violated: language nodes reachable outside the quantized code");
        if (n->op == "straight_through") continue;  // the one sanctioned crossing
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
}

int64_t total_param_count(const LisaModel& m) { return m.params.scalar_count(); }

}  // namespace lisa
