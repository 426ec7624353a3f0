#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace lisa {

// Deterministic compositional gridworld: an 8x8 grid whose outer ring is
// wall, a closed instruction grammar over colored objects, a scripted BFS
// expert, and a JSONL dataset generator with an unseen-composition holdout.

enum class Kind : uint8_t { ball = 0, box = 1, key = 2, door = 3 };
enum class Verb : uint8_t { goto_obj = 0, pickup = 1, open = 2 };

constexpr int kNumKinds = 4;
constexpr int kNumColors = 6;
constexpr int kGridSize = 8;
constexpr int kNumActions = 6;  // 0..5: left, right, forward, pickup, drop, toggle
constexpr int kDefaultMaxSteps = 64;

// Per-cell channels: empty, wall, kind x color, door-open, agent-dir(4).
constexpr int kCellChannels = 2 + kNumKinds * kNumColors + 1 + 4;
// Trailing block: carried-object one-hot (none + kind x color). A carried
// object additionally shows its kind/color channels at the agent's cell.
constexpr int kCarryChannels = 1 + kNumKinds * kNumColors;
constexpr int kObsDim = kGridSize * kGridSize * kCellChannels + kCarryChannels;

const char* kind_name(Kind k);
const char* color_name(int c);
const char* verb_name(Verb v);

struct Subgoal {
    Verb verb;
    int color;  // 0..5
    Kind kind;

    bool operator==(const Subgoal&) const = default;
};

std::string subgoal_str(const Subgoal& g);                     // "goto:red:ball"
std::string signature(const std::vector<Subgoal>& subgoals);  // joined with '|'

struct Instruction {
    std::vector<Subgoal> subgoals;  // 1..3, targets pairwise distinct (color,kind)
    std::string text;
    std::vector<int> token_ids;
};

struct Object {
    Kind kind;
    int color;
    int x, y;
    bool open = false;     // doors only
    bool carried = false;  // in hand; x,y then track the agent
};

struct GridState {
    int width = kGridSize, height = kGridSize;
    int agent_x = 1, agent_y = 1;
    int agent_dir = 0;  // 0 east, 1 south, 2 west, 3 north
    std::vector<Object> objects;
    int step_count = 0;
    int max_steps = kDefaultMaxSteps;
    std::vector<Subgoal> subgoals;
    int completed = 0;  // subgoals are tracked strictly in order

    bool is_wall(int x, int y) const;
    int object_at(int x, int y) const;  // index of non-carried object, or -1
    int carried_index() const;          // or -1
    bool succeeded() const { return completed == static_cast<int>(subgoals.size()); }
    bool done() const { return succeeded() || step_count >= max_steps; }
    void settle_subgoals();  // advances `completed` over already-satisfied goals
};

// Grid dynamics. Invalid moves are no-ops; done is success-or-step-cap.
std::pair<GridState, bool> step(const GridState& state, int action);

// --- grammar ---------------------------------------------------------------

const std::vector<std::string>& vocabulary();  // index 0 is the padding token
int pad_token();
std::vector<int> tokenize(const std::string& text);       // unknown word throws
std::string detokenize(const std::vector<int>& ids);
std::string render_instruction(const std::vector<Subgoal>& subgoals, uint64_t style_seed);

// --- observation encoding ---------------------------------------------------

// Ascending list of active one-hot indices (the dense vector is 0/1).
std::vector<uint16_t> encode_observation(const GridState& state);
std::vector<double> to_dense(const std::vector<uint16_t>& sparse, int dim = kObsDim);
// Rebuilds the grid geometry from an encoding; subgoals/max_steps are not
// part of the observation and must be supplied.
GridState decode_observation(const std::vector<uint16_t>& sparse,
                             std::vector<Subgoal> subgoals, int max_steps);

// --- task generation and the expert ------------------------------------------

struct Task {
    GridState state;
    Instruction instruction;
};

// Deterministic in seed. Places every target so the subgoal sequence is
// satisfiable (verified by solving with the expert) and all placed objects
// have pairwise distinct (color, kind).
Task generate_task(uint64_t seed, int n_subgoals);
// Same, for a caller-chosen subgoal sequence (fresh layouts for a fixed
// instruction).
Task generate_task_with_signature(uint64_t seed, const std::vector<Subgoal>& subgoals);
// Samples a subgoal sequence only.
std::vector<Subgoal> sample_signature(uint64_t seed, int n_subgoals);

struct TrajectoryRecord {
    std::string instruction;
    std::vector<int> token_ids;
    std::vector<std::vector<uint16_t>> states;  // sparse encodings, one per action
    std::vector<int> actions;
    std::vector<Subgoal> subgoals;
};

struct NavSegment {
    int subgoal_index;
    int start_t;   // timestep of the first navigation action
    int len;       // number of left/right/forward actions
    bool is_drop;  // heading for a free cell to drop the held object
};

struct ExpertResult {
    TrajectoryRecord traj;
    std::vector<NavSegment> segments;
};

// Scripted optimal expert: solves subgoals in order via shortest paths over
// (position, direction); every navigation segment length equals the BFS
// distance to its goal set. Throws if the task is unsolvable.
ExpertResult expert_rollout(const GridState& start, const Instruction& instr);

// Replays record.actions from the decoded initial state; true iff every
// recorded observation matches and the episode ends in success.
bool replays_to_success(const TrajectoryRecord& record, int max_steps = kDefaultMaxSteps);

// --- datasets ----------------------------------------------------------------

struct DatasetConfig {
    int n_train = 1000;
    int n_eval_seen = 100;
    int n_eval_unseen = 100;
    uint64_t seed = 0;
    int max_steps = kDefaultMaxSteps;
};

struct DatasetManifest {
    DatasetConfig config;
    std::vector<std::string> vocab;
    std::vector<std::string> train_signatures;  // sorted, unique
    double unseen_fraction_unseen_split = 0.0;  // 1.0 by construction
    double unseen_fraction_seen_split = 0.0;
    std::string config_hash;
};

// Writes train.jsonl / eval_seen.jsonl / eval_unseen.jsonl / manifest.json.
// Unseen-split instructions are subgoal sequences absent from train while
// every constituent subgoal appears in train. Byte-identical given identical
// config.
DatasetManifest build_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir);

std::vector<TrajectoryRecord> load_jsonl(const std::filesystem::path& file);
DatasetManifest load_manifest(const std::filesystem::path& file);

}  // namespace lisa
