#pragma once

#include "lisa/checkpoint.hpp"
#include "lisa/gridworld.hpp"
#include "lisa/kmeans.hpp"
#include "lisa/model.hpp"
#include "lisa/vq.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lisa {

struct TrainConfig {
    // skill space
    int num_skills = 20;   // K
    int code_dim = 16;     // D
    int horizon = 10;      // H
    double vq_weight = 0.25;
    // optimization; the three groups keep their own learning rates
    int batch_size = 128;
    int iterations = 2500;
    int warmup_steps = 100;
    double lr_policy = 1e-4;
    double lr_predictor = 1e-5;
    double lr_lang = 1e-6;
    double ema_decay = 0.99;
    uint64_t seed = 0;
    Variant variant = Variant::lisa;
    bool freeze_codebook = false;
    bool freeze_skills = false;  // transfer mode: codebook + predictor + language held fixed
    // architecture
    int embed_dim = 64;
    int n_heads = 4;
    int n_layers = 1;
    int flat_layers = 2;
    double dropout = 0.1;
    int predictor_context = 64;
    // probes
    int probe_every = 250;
    int probe_episodes = 20;
    // kmeans variant
    int kmeans_iterations = 25;
    int kmeans_lang_dim = 32;

    void validate() const;
    ModelConfig model_config(int vocab_size) const;
};

struct TrainMetricsRow {
    int64_t iter = 0;
    double bc_loss = 0, vq_loss = 0, total_loss = 0, mi_bits = 0, perplexity = 0;
    std::optional<double> probe_success;
    double lr_policy = 0;
    double wall_ms = 0;
};

// Dataset splits held in memory (states stay sparse).
struct TrainData {
    DatasetManifest manifest;
    std::vector<TrajectoryRecord> train, eval_seen, eval_unseen;

    static TrainData load(const std::filesystem::path& dir, bool with_eval = true);
    int vocab_size() const { return static_cast<int>(manifest.vocab.size()); }
};

// Runnable policy reconstructed from training or a checkpoint.
struct ModelBundle {
    TrainConfig cfg;
    LisaModel model;
    Codebook codebook;    // k == 0 for flat/kmeans
    KmeansSkills kmeans;  // k == 0 unless the kmeans variant
};

Checkpoint bundle_to_checkpoint(const ModelBundle& b, const std::string& config_echo,
                                int64_t iteration);
ModelBundle bundle_from_checkpoint(const Checkpoint& ckpt);

class Trainer {
public:
    Trainer(const TrainConfig& cfg, const TrainData* data);

    // warm-start: load every weight and keep training all of it.
    // freeze-skills: load every weight but permanently stop updates to the
    // codebook (EMA), skill predictor, and language encoder.
    void init_from_checkpoint(const Checkpoint& ckpt, bool freeze_skills);

    TrainMetricsRow train_step();
    // Full loop: metrics.csv + ckpt_final.bin / ckpt_best.bin under out_dir.
    std::vector<TrainMetricsRow> run(const std::filesystem::path& out_dir,
                                     const std::string& config_echo);

    const ModelBundle& bundle() const { return bundle_; }
    ModelBundle& bundle() { return bundle_; }
    int64_t iteration() const { return iteration_; }
    double probe(int episodes);  // greedy success rate on the probe set

private:
    const TrainData* data_;
    ModelBundle bundle_;
    std::vector<Adam> opts_;  // policy, predictor, lang
    int64_t iteration_ = 0;
    bool skills_frozen_ = false;

    TrainMetricsRow step_lisa_family(const std::vector<const TrajectoryRecord*>& batch);
    TrainMetricsRow step_flat(const std::vector<const TrajectoryRecord*>& batch);
};

void write_metrics_csv(const std::filesystem::path& file,
                       const std::vector<TrainMetricsRow>& rows);
std::vector<TrainMetricsRow> read_metrics_csv(const std::filesystem::path& file);

}  // namespace lisa
