#pragma once

#include "lisa/gridworld.hpp"
#include "lisa/nn.hpp"
#include "lisa/vq.hpp"

#include <optional>
#include <string>
#include <vector>

namespace lisa {

enum class Variant { lisa, flat, mlp_predictor, continuous, kmeans };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
    int embed_dim = 64;
    int n_heads = 4;
    int n_layers = 1;      // per module; the flat baseline uses flat_layers
    int flat_layers = 2;   // parameter-matched against predictor+policy
    double dropout = 0.1;
    int vocab_size = 0;    // from the dataset manifest
    int obs_dim = kObsDim;
    int n_actions = kNumActions;
    int code_dim = 16;         // D
    int horizon = 10;          // H: skill persistence and policy window
    int max_lang_len = 24;
    int predictor_context = 64;  // most recent states visible to the predictor
    Variant variant = Variant::lisa;
    int kmeans_feature_dim = 0;  // code vector length for the kmeans variant

    void validate() const;
    TransformerConfig predictor_tf() const;
    TransformerConfig policy_tf() const;
    TransformerConfig flat_tf() const;
    int code_input_dim() const;  // D, or the kmeans feature length
};

// All trainable parameters for one variant. Parameter-name prefixes define
// the optimizer groups: lang/ (language encoder), predictor/ (skill
// predictor), policy/ (everything that consumes observations or emits
// actions, including the shared observation encoder).
struct LisaModel {
    ModelConfig cfg;
    ParamStore params;

    // language encoder (absent for kmeans)
    Tensor lang_embed, lang_pos;
    // shared observation encoder
    Tensor obs_w, obs_b;
    // skill predictor, transformer form
    TransformerStack predictor_stack;
    Tensor predictor_pos, predictor_lng, predictor_lnb, predictor_proj_w, predictor_proj_b;
    // skill predictor, state-based MLP form
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    // skill-conditioned policy
    TransformerStack policy_stack;
    Tensor policy_pos, policy_lng, policy_lnb, code_proj_w, code_proj_b, action_w, action_b;
    // flat baseline
    TransformerStack flat_stack;
    Tensor flat_pos, flat_lng, flat_lnb, flat_action_w, flat_action_b;
};

LisaModel make_model(const ModelConfig& cfg, uint64_t init_seed);

// Per-token language embeddings plus positional rows: [L, E]. Output nodes
// are tagged "lang" for the bottleneck audit. L may be 0 rows never occurs:
// instructions are non-empty.
Tensor encode_language(const LisaModel& m, const std::vector<int>& token_ids);

// Sparse one-hot observations -> [n, E] via the shared linear encoder.
Tensor encode_observations(const LisaModel& m,
                           const std::vector<std::vector<uint16_t>>& sparse_obs);

// Transformer skill predictor. obs_embeds rows are s_0..s_{T-1}; returns
// pre-quantization codes read at the given state positions (each row t
// conditions on language plus s_0..s_t): [positions.size(), D]. States
// beyond predictor_context most recent are dropped, language is always kept.
Tensor predict_skills_at(const LisaModel& m, const std::vector<int>& token_ids,
                         const Tensor& obs_embeds, const std::vector<int>& positions,
                         DropoutState* drop);
// Single-position convenience used at rollout time: conditions on all of
// obs_embeds and reads the final position.
Tensor predict_skill(const LisaModel& m, const std::vector<int>& token_ids,
                     const Tensor& obs_embeds, DropoutState* drop);

// State-based MLP predictor variant (mean-pooled language + current state).
Tensor mlp_predict_skill(const LisaModel& m, const std::vector<int>& token_ids,
                         const Tensor& current_obs_embed, DropoutState* drop);

// Skill-conditioned policy over one segment window: [code token ;
// window states]. window_obs has W <= horizon rows; returns [W, n_actions]
// where row j are the logits for the action taken at window state j.
Tensor policy_logits(const LisaModel& m, const Tensor& code_vec, const Tensor& window_obs,
                     DropoutState* drop);

// Flat language-conditioned baseline: [lang ; states] -> [T, n_actions].
// Context slides to the most recent predictor_context states, matching the
// longest sequences seen in training.
Tensor flat_logits(const LisaModel& m, const std::vector<int>& token_ids,
                   const Tensor& obs_embeds, DropoutState* drop);

// Walks the ancestry of `out`, refusing to cross straight_through nodes, and
// throws std::logic_error if any node tagged "lang" is reachable: the only
// language path into a LISA policy is the quantized code.
void assert_no_language_path(const Tensor& out);

int64_t total_param_count(const LisaModel& m);

}  // namespace lisa
