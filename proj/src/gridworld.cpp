#include "lisa/gridworld.hpp"

#include "lisa/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <queue>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace lisa {

namespace {

constexpr std::array<int, 4> kDx = {1, 0, -1, 0};  // east, south, west, north
constexpr std::array<int, 4> kDy = {0, 1, 0, -1};

constexpr int kActLeft = 0, kActRight = 1, kActForward = 2;
constexpr int kActPickup = 3, kActDrop = 4, kActToggle = 5;

const std::array<const char*, 4> kKindNames = {"ball", "box", "key", "door"};
const std::array<const char*, 6> kColorNames = {"red", "green", "blue",
                                                "purple", "yellow", "grey"};
const std::array<const char*, 3> kVerbNames = {"goto", "pickup", "open"};

// Unbiased-enough bounded draw that only uses raw engine output, so dataset
// bytes do not depend on the standard library's distribution internals.
uint64_t draw(std::mt19937_64& rng, uint64_t n) { return rng() % n; }

}  // namespace

const char* kind_name(Kind k) { return kKindNames[static_cast<int>(k)]; }
const char* color_name(int c) {
    if (c < 0 || c >= kNumColors) throw std::invalid_argument("color out of range");
    return kColorNames[c];
}
const char* verb_name(Verb v) { return kVerbNames[static_cast<int>(v)]; }

std::string subgoal_str(const Subgoal& g) {
    return std::string(verb_name(g.verb)) + ":" + color_name(g.color) + ":" +
           kind_name(g.kind);
}

std::string signature(const std::vector<Subgoal>& subgoals) {
    std::string s;
    for (size_t i = 0; i < subgoals.size(); ++i) {
        if (i) s += "|";
        s += subgoal_str(subgoals[i]);
    }
    return s;
}

// --- GridState ---------------------------------------------------------------

bool GridState::is_wall(int x, int y) const {
    return x <= 0 || y <= 0 || x >= width - 1 || y >= height - 1;
}

int GridState::object_at(int x, int y) const {
    for (size_t i = 0; i < objects.size(); ++i)
        if (!objects[i].carried && objects[i].x == x && objects[i].y == y)
            return static_cast<int>(i);
    return -1;
}

int GridState::carried_index() const {
    for (size_t i = 0; i < objects.size(); ++i)
        if (objects[i].carried) return static_cast<int>(i);
    return -1;
}

void GridState::settle_subgoals() {
    while (!succeeded()) {
        const Subgoal& g = subgoals[completed];
        bool sat = false;
        switch (g.verb) {
            case Verb::goto_obj: {
                const int fx = agent_x + kDx[agent_dir], fy = agent_y + kDy[agent_dir];
                const int idx = object_at(fx, fy);
                sat = idx >= 0 && objects[idx].kind == g.kind && objects[idx].color == g.color;
                break;
            }
            case Verb::pickup: {
                const int c = carried_index();
                sat = c >= 0 && objects[c].kind == g.kind && objects[c].color == g.color;
                break;
            }
            case Verb::open: {
                for (const auto& o : objects)
                    if (o.kind == Kind::door && o.color == g.color && o.open) sat = true;
                break;
            }
        }
        if (!sat) break;
        ++completed;
    }
}

std::pair<GridState, bool> step(const GridState& state, int action) {
    if (action < 0 || action >= kNumActions)
        throw std::invalid_argument("step: action " + std::to_string(action) +
                                    " outside 0.." + std::to_string(kNumActions - 1));
    GridState st = state;
    if (st.done()) return {st, true};

    const int fx = st.agent_x + kDx[st.agent_dir];
    const int fy = st.agent_y + kDy[st.agent_dir];
    switch (action) {
        case kActLeft:
            st.agent_dir = (st.agent_dir + 3) % 4;
            break;
        case kActRight:
            st.agent_dir = (st.agent_dir + 1) % 4;
            break;
        case kActForward:
            if (!st.is_wall(fx, fy) && st.object_at(fx, fy) < 0) {
                st.agent_x = fx;
                st.agent_y = fy;
            }
            break;
        case kActPickup: {
            const int idx = st.object_at(fx, fy);
            if (idx >= 0 && st.objects[idx].kind != Kind::door && st.carried_index() < 0)
                st.objects[idx].carried = true;
            break;
        }
        case kActDrop: {
            const int c = st.carried_index();
            if (c >= 0 && !st.is_wall(fx, fy) && st.object_at(fx, fy) < 0) {
                st.objects[c].carried = false;
                st.objects[c].x = fx;
                st.objects[c].y = fy;
            }
            break;
        }
        case kActToggle: {
            const int idx = st.object_at(fx, fy);
            if (idx >= 0 && st.objects[idx].kind == Kind::door)
                st.objects[idx].open = !st.objects[idx].open;
            break;
        }
        default:
            break;
    }
    const int c = st.carried_index();
    if (c >= 0) {
        st.objects[c].x = st.agent_x;
        st.objects[c].y = st.agent_y;
    }
    ++st.step_count;
    st.settle_subgoals();
    return {st, st.done()};
}

// --- grammar -----------------------------------------------------------------

const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> vocab = [] {
        std::vector<std::string> v = {"<pad>", "go", "to", "the", "pick",
                                      "up",    "open", "then", "and"};
        for (const char* c : kColorNames) v.push_back(c);
        for (const char* k : kKindNames) v.push_back(k);
        return v;
    }();
    return vocab;
}

int pad_token() { return 0; }

std::vector<int> tokenize(const std::string& text) {
    static const std::map<std::string, int> index = [] {
        std::map<std::string, int> m;
        const auto& v = vocabulary();
        for (size_t i = 0; i < v.size(); ++i) m[v[i]] = static_cast<int>(i);
        return m;
    }();
    std::vector<int> ids;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
        auto it = index.find(word);
        if (it == index.end())
            throw std::invalid_argument("tokenize: unknown token '" + word + "'");
        ids.push_back(it->second);
    }
    return ids;
}

std::string detokenize(const std::vector<int>& ids) {
    const auto& v = vocabulary();
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= static_cast<int>(v.size()))
            throw std::invalid_argument("detokenize: id out of range");
        if (i) out += " ";
        out += v[ids[i]];
    }
    return out;
}

std::string render_instruction(const std::vector<Subgoal>& subgoals, uint64_t style_seed) {
    std::mt19937_64 rng(style_seed);
    std::string text;
    for (size_t i = 0; i < subgoals.size(); ++i) {
        if (i) text += draw(rng, 2) ? " and " : " then ";
        const auto& g = subgoals[i];
        switch (g.verb) {
            case Verb::goto_obj:
                text += std::string("go to the ") + color_name(g.color) + " " + kind_name(g.kind);
                break;
            case Verb::pickup:
                text += std::string("pick up the ") + color_name(g.color) + " " +
                        kind_name(g.kind);
                break;
            case Verb::open:
                text += std::string("open the ") + color_name(g.color) + " door";
                break;
        }
    }
    return text;
}

// --- observation encoding -----------------------------------------------------

std::vector<uint16_t> encode_observation(const GridState& st) {
    std::vector<uint16_t> idx;
    for (int y = 0; y < st.height; ++y) {
        for (int x = 0; x < st.width; ++x) {
            const int base = (y * st.width + x) * kCellChannels;
            if (st.is_wall(x, y)) {
                idx.push_back(static_cast<uint16_t>(base + 1));
                continue;
            }
            const int o = st.object_at(x, y);
            if (o >= 0) {
                const auto& obj = st.objects[o];
                idx.push_back(static_cast<uint16_t>(
                    base + 2 + static_cast<int>(obj.kind) * kNumColors + obj.color));
                if (obj.kind == Kind::door && obj.open)
                    idx.push_back(static_cast<uint16_t>(base + 2 + kNumKinds * kNumColors));
            } else {
                idx.push_back(static_cast<uint16_t>(base + 0));
            }
            if (x == st.agent_x && y == st.agent_y) {
                idx.push_back(static_cast<uint16_t>(base + 2 + kNumKinds * kNumColors + 1 +
                                                    st.agent_dir));
                const int c = st.carried_index();
                if (c >= 0)
                    idx.push_back(static_cast<uint16_t>(
                        base + 2 + static_cast<int>(st.objects[c].kind) * kNumColors +
                        st.objects[c].color));
            }
        }
    }
    const int carry_base = kGridSize * kGridSize * kCellChannels;
    const int c = st.carried_index();
    if (c < 0)
        idx.push_back(static_cast<uint16_t>(carry_base));
    else
        idx.push_back(static_cast<uint16_t>(
            carry_base + 1 + static_cast<int>(st.objects[c].kind) * kNumColors +
            st.objects[c].color));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<double> to_dense(const std::vector<uint16_t>& sparse, int dim) {
    std::vector<double> v(static_cast<size_t>(dim), 0.0);
    for (uint16_t i : sparse) {
        if (i >= dim) throw std::invalid_argument("to_dense: index out of range");
        v[i] = 1.0;
    }
    return v;
}

GridState decode_observation(const std::vector<uint16_t>& sparse,
                             std::vector<Subgoal> subgoals, int max_steps) {
    std::set<int> on(sparse.begin(), sparse.end());
    GridState st;
    st.max_steps = max_steps;
    st.subgoals = std::move(subgoals);

    const int carry_base = kGridSize * kGridSize * kCellChannels;
    int carried_kc = -1;
    for (int i = 0; i < kCarryChannels; ++i)
        if (on.count(carry_base + i)) carried_kc = i - 1;  // -1 means empty hand

    bool agent_found = false;
    for (int y = 0; y < kGridSize; ++y) {
        for (int x = 0; x < kGridSize; ++x) {
            const int base = (y * kGridSize + x) * kCellChannels;
            for (int d = 0; d < 4; ++d) {
                if (on.count(base + 2 + kNumKinds * kNumColors + 1 + d)) {
                    if (agent_found)
                        throw std::invalid_argument("decode_observation: multiple agents");
                    st.agent_x = x;
                    st.agent_y = y;
                    st.agent_dir = d;
                    agent_found = true;
                }
            }
        }
    }
    if (!agent_found) throw std::invalid_argument("decode_observation: no agent channel");

    for (int y = 0; y < kGridSize; ++y) {
        for (int x = 0; x < kGridSize; ++x) {
            const int base = (y * kGridSize + x) * kCellChannels;
            const bool at_agent = x == st.agent_x && y == st.agent_y;
            for (int kc = 0; kc < kNumKinds * kNumColors; ++kc) {
                if (!on.count(base + 2 + kc)) continue;
                Object o;
                o.kind = static_cast<Kind>(kc / kNumColors);
                o.color = kc % kNumColors;
                o.x = x;
                o.y = y;
                if (at_agent && kc == carried_kc) {
                    o.carried = true;
                } else {
                    o.open = on.count(base + 2 + kNumKinds * kNumColors) > 0;
                }
                st.objects.push_back(o);
            }
        }
    }
    if ((carried_kc >= 0) != (st.carried_index() >= 0))
        throw std::invalid_argument("decode_observation: inconsistent carry channels");
    return st;
}

// --- expert -------------------------------------------------------------------

namespace {

struct Plan {
    std::vector<int> actions;  // left/right/forward only
};

// Shortest path over (x, y, dir) with unit-cost rotations and forward moves.
// Returns false when no goal state is reachable.
template <typename GoalFn>
bool bfs_plan(const GridState& st, GoalFn&& is_goal, Plan& out) {
    const int w = st.width, h = st.height;
    const int n_states = w * h * 4;
    auto pack = [w](int x, int y, int d) { return (y * w + x) * 4 + d; };
    std::vector<int> prev(n_states, -1), prev_action(n_states, -1);
    std::vector<uint8_t> seen(n_states, 0);

    const int start = pack(st.agent_x, st.agent_y, st.agent_dir);
    std::queue<int> q;
    q.push(start);
    seen[start] = 1;
    int goal = is_goal(st.agent_x, st.agent_y, st.agent_dir) ? start : -1;
    while (goal < 0 && !q.empty()) {
        const int cur = q.front();
        q.pop();
        const int d = cur % 4, cell = cur / 4;
        const int x = cell % w, y = cell / w;
        const std::array<std::pair<int, int>, 3> moves = {{
            {kActLeft, pack(x, y, (d + 3) % 4)},
            {kActRight, pack(x, y, (d + 1) % 4)},
            {kActForward, -1},
        }};
        for (auto [action, next] : moves) {
            if (action == kActForward) {
                const int nx = x + kDx[d], ny = y + kDy[d];
                if (st.is_wall(nx, ny) || st.object_at(nx, ny) >= 0) continue;
                next = pack(nx, ny, d);
            }
            if (seen[next]) continue;
            seen[next] = 1;
            prev[next] = cur;
            prev_action[next] = action;
            const int nd = next % 4, ncell = next / 4;
            if (is_goal(ncell % w, ncell / w, nd)) {
                goal = next;
                break;
            }
            q.push(next);
        }
    }
    if (goal < 0) return false;
    out.actions.clear();
    for (int s = goal; s != start; s = prev[s]) out.actions.push_back(prev_action[s]);
    std::reverse(out.actions.begin(), out.actions.end());
    return true;
}

}  // namespace

ExpertResult expert_rollout(const GridState& start, const Instruction& instr) {
    ExpertResult res;
    res.traj.instruction = instr.text;
    res.traj.token_ids = instr.token_ids;
    res.traj.subgoals = instr.subgoals;

    GridState st = start;
    st.subgoals = instr.subgoals;
    st.settle_subgoals();

    auto emit = [&](int action) {
        if (st.step_count >= st.max_steps)
            throw std::runtime_error("expert_rollout: exceeded the episode step cap");
        res.traj.states.push_back(encode_observation(st));
        res.traj.actions.push_back(action);
        auto [next, done] = step(st, action);
        st = std::move(next);
        (void)done;
    };
    auto run_nav = [&](const Plan& plan, int subgoal_index, bool is_drop) {
        res.segments.push_back({subgoal_index, static_cast<int>(res.traj.actions.size()),
                                static_cast<int>(plan.actions.size()), is_drop});
        for (int a : plan.actions) emit(a);
    };

    int guard = 0;
    while (!st.succeeded()) {
        if (++guard > 16) throw std::runtime_error("expert_rollout: planner did not converge");
        const int sg = st.completed;
        const Subgoal g = st.subgoals[sg];  // by value: emit() replaces st

        if (g.verb == Verb::pickup && st.carried_index() >= 0) {
            Plan drop_plan;
            if (!bfs_plan(st, [&](int x, int y, int d) {
                    const int fx = x + kDx[d], fy = y + kDy[d];
                    return !st.is_wall(fx, fy) && st.object_at(fx, fy) < 0;
                }, drop_plan))
                throw std::runtime_error("expert_rollout: nowhere to drop the held object");
            run_nav(drop_plan, sg, /*is_drop=*/true);
            emit(kActDrop);
            continue;
        }

        int target = -1;
        for (size_t i = 0; i < st.objects.size(); ++i)
            if (!st.objects[i].carried && st.objects[i].kind == g.kind &&
                st.objects[i].color == g.color)
                target = static_cast<int>(i);
        if (target < 0)
            throw std::runtime_error("expert_rollout: target object missing: " +
                                     subgoal_str(g));
        const int tx = st.objects[target].x, ty = st.objects[target].y;
        Plan nav;
        if (!bfs_plan(st, [&](int x, int y, int d) {
                return x + kDx[d] == tx && y + kDy[d] == ty;
            }, nav))
            throw std::runtime_error("expert_rollout: target unreachable: " + subgoal_str(g));
        run_nav(nav, sg, /*is_drop=*/false);

        switch (g.verb) {
            case Verb::goto_obj:
                break;  // facing the target completed it during the last move
            case Verb::pickup:
                emit(kActPickup);
                break;
            case Verb::open:
                emit(kActToggle);
                break;
        }
        if (st.completed == sg)
            throw std::runtime_error("expert_rollout: subgoal did not complete: " +
                                     subgoal_str(g));
    }
    return res;
}

bool replays_to_success(const TrajectoryRecord& record, int max_steps) {
    if (record.states.size() != record.actions.size()) return false;
    GridState st;
    if (record.states.empty()) {
        // Degenerate instantly-complete task: nothing to verify beyond success.
        return true;
    }
    st = decode_observation(record.states[0], record.subgoals, max_steps);
    st.settle_subgoals();
    for (size_t t = 0; t < record.actions.size(); ++t) {
        if (encode_observation(st) != record.states[t]) return false;
        if (st.done() && t + 1 < record.actions.size()) return false;
        auto [next, done] = step(st, record.actions[t]);
        st = std::move(next);
        (void)done;
    }
    return st.succeeded();
}

// --- task generation ------------------------------------------------------------

std::vector<Subgoal> sample_signature(uint64_t seed, int n_subgoals) {
    if (n_subgoals < 1 || n_subgoals > 3)
        throw std::invalid_argument("sample_signature: n_subgoals must be 1..3");
    std::mt19937_64 rng(seed);
    std::vector<Subgoal> sig;
    std::set<std::pair<int, int>> used;  // (kind, color)
    while (static_cast<int>(sig.size()) < n_subgoals) {
        const int kind = static_cast<int>(draw(rng, kNumKinds));
        const int color = static_cast<int>(draw(rng, kNumColors));
        if (!used.insert({kind, color}).second) continue;
        Verb verb;
        if (static_cast<Kind>(kind) == Kind::door)
            verb = draw(rng, 2) ? Verb::open : Verb::goto_obj;
        else
            verb = draw(rng, 2) ? Verb::pickup : Verb::goto_obj;
        sig.push_back({verb, color, static_cast<Kind>(kind)});
    }
    return sig;
}

Task generate_task_with_signature(uint64_t seed, const std::vector<Subgoal>& subgoals) {
    if (subgoals.empty() || subgoals.size() > 3)
        throw std::invalid_argument("generate_task: 1..3 subgoals required");
    {
        std::set<std::pair<int, int>> targets;
        for (const auto& g : subgoals) {
            if (g.verb == Verb::open && g.kind != Kind::door)
                throw std::invalid_argument("generate_task: open applies only to doors");
            if (g.verb == Verb::pickup && g.kind == Kind::door)
                throw std::invalid_argument("generate_task: doors cannot be picked up");
            if (!targets.insert({static_cast<int>(g.kind), g.color}).second)
                throw std::invalid_argument("generate_task: duplicate target in signature");
        }
    }

    for (int attempt = 0; attempt < 100; ++attempt) {
        std::mt19937_64 rng(seed_stream(seed, "layout", attempt));
        GridState st;
        st.subgoals = subgoals;

        // Targets first, then distractors; all (color, kind) pairs distinct.
        std::set<std::pair<int, int>> used;
        for (const auto& g : subgoals) used.insert({static_cast<int>(g.kind), g.color});
        const int n_extra =
            1 + static_cast<int>(draw(rng, 6 - static_cast<uint64_t>(subgoals.size())));
        std::vector<std::pair<int, int>> kinds_colors;  // targets first, in subgoal order
        for (const auto& g : subgoals) kinds_colors.push_back({static_cast<int>(g.kind), g.color});
        while (static_cast<int>(kinds_colors.size()) < static_cast<int>(subgoals.size()) + n_extra) {
            const int kind = static_cast<int>(draw(rng, kNumKinds));
            const int color = static_cast<int>(draw(rng, kNumColors));
            if (!used.insert({kind, color}).second) continue;
            kinds_colors.push_back({kind, color});
        }

        // Objects sit on a spaced anchor lattice (never adjacent, always
        // approachable); the agent may start anywhere. This keeps the layout
        // distribution desk-sized so low-data policies can generalize across
        // placements instead of memorizing the grid.
        static constexpr std::array<std::pair<int, int>, 9> kAnchors = {
            {{1, 1}, {3, 1}, {5, 1}, {1, 3}, {3, 3}, {5, 3}, {1, 5}, {3, 5}, {5, 5}}};
        std::set<std::pair<int, int>> cells;
        auto free_cell = [&](std::mt19937_64& r) {
            while (true) {
                const auto& cell = kAnchors[draw(r, kAnchors.size())];
                if (cells.insert(cell).second) return cell;
            }
        };
        for (auto [kind, color] : kinds_colors) {
            auto [x, y] = free_cell(rng);
            st.objects.push_back({static_cast<Kind>(kind), color, x, y, false, false});
        }

        bool placed_agent = false;
        for (int pose = 0; pose < 50 && !placed_agent; ++pose) {
            const int x = 1 + static_cast<int>(draw(rng, kGridSize - 2));
            const int y = 1 + static_cast<int>(draw(rng, kGridSize - 2));
            if (cells.count({x, y})) continue;
            st.agent_x = x;
            st.agent_y = y;
            st.agent_dir = static_cast<int>(draw(rng, 4));
            GridState probe = st;
            probe.settle_subgoals();
            if (probe.completed == 0) placed_agent = true;  // no freebie first subgoal
        }
        if (!placed_agent) continue;

        Task task;
        task.state = st;
        task.instruction.subgoals = subgoals;
        task.instruction.text = render_instruction(subgoals, seed_stream(seed, "style"));
        task.instruction.token_ids = tokenize(task.instruction.text);
        try {
            auto er = expert_rollout(task.state, task.instruction);
            if (static_cast<int>(er.traj.actions.size()) <= st.max_steps) return task;
        } catch (const std::runtime_error&) {
            // blocked layout; try the next placement
        }
    }
    throw std::runtime_error("generate_task: unsatisfiable placement after bounded retries");
}

Task generate_task(uint64_t seed, int n_subgoals) {
    return generate_task_with_signature(
        seed, sample_signature(seed_stream(seed, "sig"), n_subgoals));
}

// --- datasets ---------------------------------------------------------------------

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

void append_record_json(std::string& out, const TrajectoryRecord& rec) {
    out += "{\"instruction\":";
    out += json(rec.instruction).dump();
    out += ",\"token_ids\":[";
    for (size_t i = 0; i < rec.token_ids.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(rec.token_ids[i]);
    }
    out += "],\"states\":[";
    for (size_t s = 0; s < rec.states.size(); ++s) {
        if (s) out += ",";
        out += "[";
        std::vector<char> dense(kObsDim, '0');
        for (uint16_t i : rec.states[s]) dense[i] = '1';
        for (int i = 0; i < kObsDim; ++i) {
            if (i) out += ",";
            out += dense[i];
        }
        out += "]";
    }
    out += "],\"actions\":[";
    for (size_t i = 0; i < rec.actions.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(rec.actions[i]);
    }
    out += "],\"subgoals\":[";
    for (size_t i = 0; i < rec.subgoals.size(); ++i) {
        if (i) out += ",";
        const auto& g = rec.subgoals[i];
        out += std::string("[\"") + verb_name(g.verb) + "\",\"" + color_name(g.color) +
               "\",\"" + kind_name(g.kind) + "\"]";
    }
    out += "]}\n";
}

void write_jsonl(const std::filesystem::path& file, const std::vector<TrajectoryRecord>& recs) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + file.string());
    std::string buf;
    for (const auto& r : recs) {
        buf.clear();
        append_record_json(buf, r);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
}

Subgoal parse_subgoal(const std::string& verb, const std::string& color,
                      const std::string& kind) {
    Subgoal g{};
    bool ok = false;
    for (int i = 0; i < 3; ++i)
        if (verb == kVerbNames[i]) {
            g.verb = static_cast<Verb>(i);
            ok = true;
        }
    if (!ok) throw std::runtime_error("unknown verb: " + verb);
    ok = false;
    for (int i = 0; i < kNumColors; ++i)
        if (color == kColorNames[i]) {
            g.color = i;
            ok = true;
        }
    if (!ok) throw std::runtime_error("unknown color: " + color);
    ok = false;
    for (int i = 0; i < kNumKinds; ++i)
        if (kind == kKindNames[i]) {
            g.kind = static_cast<Kind>(i);
            ok = true;
        }
    if (!ok) throw std::runtime_error("unknown kind: " + kind);
    return g;
}

std::string fnv_hex(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace

std::vector<TrajectoryRecord> load_jsonl(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open dataset: " + file.string());
    std::vector<TrajectoryRecord> recs;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": " +
                                     e.what());
        }
        TrajectoryRecord r;
        r.instruction = j.at("instruction").get<std::string>();
        r.token_ids = j.at("token_ids").get<std::vector<int>>();
        for (const auto& st : j.at("states")) {
            std::vector<uint16_t> sparse;
            int idx = 0;
            for (const auto& v : st) {
                if (v.get<int>() != 0) sparse.push_back(static_cast<uint16_t>(idx));
                ++idx;
            }
            if (idx != kObsDim)
                throw std::runtime_error(file.string() + ":" + std::to_string(lineno) +
                                         ": observation dim " + std::to_string(idx));
            r.states.push_back(std::move(sparse));
        }
        r.actions = j.at("actions").get<std::vector<int>>();
        for (const auto& sg : j.at("subgoals"))
            r.subgoals.push_back(parse_subgoal(sg.at(0).get<std::string>(),
                                               sg.at(1).get<std::string>(),
                                               sg.at(2).get<std::string>()));
        recs.push_back(std::move(r));
    }
    return recs;
}

DatasetManifest build_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
    if (cfg.n_train <= 0) throw std::invalid_argument("build_dataset: n_train must be positive");
    std::filesystem::create_directories(out_dir);

    // 1. Unseen-composition holdout: length-2..3 sequences, distinct within the
    //    split. (A length-1 sequence cannot be unseen while its constituent is
    //    seen, so those are excluded by construction.)
    std::vector<TrajectoryRecord> unseen;
    std::set<std::string> unseen_sigs;
    for (int i = 0; i < cfg.n_eval_unseen; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 200)
                throw std::runtime_error("build_dataset: cannot satisfy holdout constraint");
            const uint64_t s = seed_stream(cfg.seed, "unseen-sig",
                                           static_cast<uint64_t>(i) * 1000 + attempt);
            const int n_sub = 2 + static_cast<int>(s % 2);
            auto sig = sample_signature(s, n_sub);
            if (!unseen_sigs.insert(signature(sig)).second) continue;
            Task t = generate_task_with_signature(seed_stream(cfg.seed, "unseen-layout", i), sig);
            t.state.max_steps = cfg.max_steps;
            unseen.push_back(expert_rollout(t.state, t.instruction).traj);
            break;
        }
    }

    // 2. Train: rejection-sample signatures against the holdout.
    std::vector<TrajectoryRecord> train;
    for (int i = 0; i < cfg.n_train; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 200)
                throw std::runtime_error("build_dataset: train sampling stuck");
            const uint64_t s = seed_stream(cfg.seed, "train-sig",
                                           static_cast<uint64_t>(i) * 1000 + attempt);
            const int n_sub = 1 + static_cast<int>(s % 3);
            auto sig = sample_signature(s, n_sub);
            if (unseen_sigs.count(signature(sig))) continue;
            Task t = generate_task_with_signature(seed_stream(cfg.seed, "train-layout", i), sig);
            t.state.max_steps = cfg.max_steps;
            train.push_back(expert_rollout(t.state, t.instruction).traj);
            break;
        }
    }

    // 3. Coverage repair: every constituent of the unseen split must appear in
    //    train; replace tail records with single-subgoal tasks until it holds.
    {
        std::set<std::string> needed;
        for (const auto& r : unseen)
            for (const auto& g : r.subgoals) needed.insert(subgoal_str(g));
        int replace_slot = cfg.n_train - 1;
        int repair_idx = 0;
        while (true) {
            std::set<std::string> have;
            for (const auto& r : train)
                for (const auto& g : r.subgoals) have.insert(subgoal_str(g));
            std::vector<std::string> missing;
            for (const auto& n : needed)
                if (!have.count(n)) missing.push_back(n);
            if (missing.empty()) break;
            if (replace_slot < 0)
                throw std::runtime_error("build_dataset: train too small to cover holdout");
            // find the concrete subgoal behind the missing string
            Subgoal g{};
            bool found = false;
            for (const auto& r : unseen) {
                for (const auto& cand : r.subgoals)
                    if (subgoal_str(cand) == missing.front()) {
                        g = cand;
                        found = true;
                    }
            }
            if (!found) throw std::runtime_error("build_dataset: internal repair error");
            Task t = generate_task_with_signature(
                seed_stream(cfg.seed, "repair-layout", repair_idx++), {g});
            t.state.max_steps = cfg.max_steps;
            train[replace_slot--] = expert_rollout(t.state, t.instruction).traj;
        }
    }

    std::set<std::string> train_sigs;
    for (const auto& r : train) train_sigs.insert(signature(r.subgoals));

    // 4. Seen eval: train signatures, fresh layouts.
    std::vector<TrajectoryRecord> seen;
    for (int i = 0; i < cfg.n_eval_seen; ++i) {
        const uint64_t s = seed_stream(cfg.seed, "seen-pick", i);
        const auto& src = train[s % train.size()];
        Task t = generate_task_with_signature(seed_stream(cfg.seed, "seen-layout", i),
                                              src.subgoals);
        t.state.max_steps = cfg.max_steps;
        seen.push_back(expert_rollout(t.state, t.instruction).traj);
    }

    write_jsonl(out_dir / "train.jsonl", train);
    write_jsonl(out_dir / "eval_seen.jsonl", seen);
    write_jsonl(out_dir / "eval_unseen.jsonl", unseen);

    DatasetManifest man;
    man.config = cfg;
    man.vocab = vocabulary();
    man.train_signatures.assign(train_sigs.begin(), train_sigs.end());
    int unseen_miss = 0;
    for (const auto& r : unseen)
        if (!train_sigs.count(signature(r.subgoals))) ++unseen_miss;
    man.unseen_fraction_unseen_split =
        unseen.empty() ? 0.0 : static_cast<double>(unseen_miss) / unseen.size();
    int seen_miss = 0;
    for (const auto& r : seen)
        if (!train_sigs.count(signature(r.subgoals))) ++seen_miss;
    man.unseen_fraction_seen_split =
        seen.empty() ? 0.0 : static_cast<double>(seen_miss) / seen.size();
    {
        std::ostringstream cfg_text;
        cfg_text << "n_train=" << cfg.n_train << ";n_eval_seen=" << cfg.n_eval_seen
                 << ";n_eval_unseen=" << cfg.n_eval_unseen << ";seed=" << cfg.seed
                 << ";max_steps=" << cfg.max_steps << ";obs_dim=" << kObsDim;
        man.config_hash = fnv_hex(cfg_text.str());
    }

    ordered_json j;
    j["n_train"] = cfg.n_train;
    j["n_eval_seen"] = cfg.n_eval_seen;
    j["n_eval_unseen"] = cfg.n_eval_unseen;
    j["seed"] = cfg.seed;
    j["max_steps"] = cfg.max_steps;
    j["obs_dim"] = kObsDim;
    j["n_actions"] = kNumActions;
    j["vocab"] = man.vocab;
    j["train_signatures"] = man.train_signatures;
    j["unseen_fraction"] = {{"eval_unseen", man.unseen_fraction_unseen_split},
                            {"eval_seen", man.unseen_fraction_seen_split}};
    j["config_hash"] = man.config_hash;
    std::ofstream out(out_dir / "manifest.json", std::ios::binary);
    out << j.dump(2) << "\n";
    return man;
}

DatasetManifest load_manifest(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open manifest: " + file.string());
    json j = json::parse(in);
    DatasetManifest man;
    man.config.n_train = j.at("n_train").get<int>();
    man.config.n_eval_seen = j.at("n_eval_seen").get<int>();
    man.config.n_eval_unseen = j.at("n_eval_unseen").get<int>();
    man.config.seed = j.at("seed").get<uint64_t>();
    man.config.max_steps = j.at("max_steps").get<int>();
    if (j.at("obs_dim").get<int>() != kObsDim)
        throw std::runtime_error("manifest: incompatible observation dim");
    man.vocab = j.at("vocab").get<std::vector<std::string>>();
    man.train_signatures = j.at("train_signatures").get<std::vector<std::string>>();
    man.unseen_fraction_unseen_split = j.at("unseen_fraction").at("eval_unseen").get<double>();
    man.unseen_fraction_seen_split = j.at("unseen_fraction").at("eval_seen").get<double>();
    man.config_hash = j.at("config_hash").get<std::string>();
    return man;
}

}  // namespace lisa
