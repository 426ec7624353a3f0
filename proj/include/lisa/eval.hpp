#pragma once

#include "lisa/trainer.hpp"

#include <map>
#include <string>
#include <vector>

namespace lisa {

struct EpisodeLog {
    int instruction_index = -1;
    uint64_t env_seed = 0;
    bool success = false;
    int steps = 0;
    std::vector<std::pair<int, int>> codes;  // (timestep, code index); empty for flat
};

// One greedy episode. For hierarchical variants the skill is re-predicted
// and re-quantized every horizon steps; the flat variant conditions on
// language directly. Never mutates the bundle.
EpisodeLog run_episode(const ModelBundle& b, GridState start, const Instruction& instr);

struct EvalReport {
    std::string split;
    int max_steps = 0;
    int episodes = 0;
    int successes = 0;
    double success_rate = 0.0;
    struct SeedOutcome {
        uint64_t seed;
        int episodes, successes;
    };
    std::vector<SeedOutcome> per_seed;
    struct InstructionOutcome {
        std::string instruction;
        int episodes, successes;
    };
    std::vector<InstructionOutcome> per_instruction;
    std::vector<EpisodeLog> episode_logs;
    std::vector<std::string> instructions;
    std::vector<std::vector<int>> instruction_tokens;
    std::vector<std::vector<long long>> skill_word_counts;  // K x vocab
    double codebook_perplexity = 0.0;  // of the codes used across episodes
    std::string notes;
};

// Rolls out every instruction of a split. Episode 0 of the first seed uses
// the record's own layout; further episodes regenerate fresh layouts for the
// same instruction. Parameters are read-only throughout.
EvalReport rollout_eval(const ModelBundle& b, const std::vector<TrajectoryRecord>& split,
                        const std::string& split_name, int episodes_per_instruction,
                        const std::vector<uint64_t>& env_seeds, int max_steps);

// Unseen-composition evaluation: verifies the split is disjoint from the
// train signatures, then evaluates with a doubled episode cap.
EvalReport composition_eval(const ModelBundle& b, const TrainData& data,
                            int episodes_per_instruction,
                            const std::vector<uint64_t>& env_seeds);

void write_report_json(const std::filesystem::path& file, const EvalReport& r);

struct HeatmapExport {
    std::vector<std::string> vocab;
    int k = 0;
    std::vector<std::vector<long long>> raw;     // K x vocab
    std::vector<std::vector<double>> col_norm;   // columns sum to 1 where total > 0
    std::vector<std::vector<double>> row_norm;   // rows sum to 1 where total > 0
};

// Appendix-style attribution: every episode contributes every token of its
// instruction to every distinct code used in that episode.
HeatmapExport skill_language_heatmap(const EvalReport& report, int k,
                                     const std::vector<std::string>& vocab);
void write_heatmap_csvs(const HeatmapExport& h, const std::filesystem::path& dir,
                        const std::string& prefix);

struct FixedSkillSummary {
    int code_index = -1;
    int episodes = 0;
    // subgoal-type completion events observed while the code was forced
    std::map<std::string, int> subgoal_completions;
    std::vector<EpisodeLog> logs;
};

// Runs the policy with one code forced for entire episodes and counts which
// subgoal types the behavior completes (pickups, door-openings, newly-faced
// objects).
FixedSkillSummary fixed_skill_rollout(const ModelBundle& b,
                                      const std::vector<TrajectoryRecord>& split,
                                      int code_index, int episodes, int max_steps);
void write_behavior_csv(const std::filesystem::path& file, const FixedSkillSummary& s);

struct AblationSetting {
    std::string key;  // "horizon" | "num_skills" | "codes"
    std::string value;
};

struct AblationRow {
    AblationSetting setting;
    double success_rate = 0.0;
    double final_mi = 0.0;
    std::string dataset_hash;
};

// One full training + seen-split evaluation per setting, shared dataset and
// seed. Writes runs under out_dir/<key>_<value>/.
std::vector<AblationRow> ablation_runner(const TrainConfig& base, const TrainData& data,
                                         const std::vector<AblationSetting>& sweep,
                                         const std::filesystem::path& out_dir,
                                         int eval_episodes_per_instruction);
void write_ablation_csv(const std::filesystem::path& file,
                        const std::vector<AblationRow>& rows);

}  // namespace lisa
