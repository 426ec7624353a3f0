#include "lisa/eval.hpp"

#include "lisa/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

namespace lisa {

namespace {

int argmax_row(const Tensor& logits, int row) {
    const int c = logits.dim(1);
    const double* v = logits.values().data() + static_cast<size_t>(row) * c;
    int best = 0;
    for (int j = 1; j < c; ++j)
        if (v[j] > v[best]) best = j;  // ties keep the lowest action index
    return best;
}

struct SegmentCode {
    std::vector<double> values;  // conditioning vector fed to the policy
    int index = -1;              // codebook/cluster index when discrete
};

SegmentCode next_code(const ModelBundle& b, const std::vector<int>& tokens,
                      const std::vector<std::vector<uint16_t>>& history) {
    const LisaModel& m = b.model;
    SegmentCode out;
    switch (b.cfg.variant) {
        case Variant::lisa: {
            Tensor obs = encode_observations(m, history);
            Tensor z = predict_skill(m, tokens, obs, nullptr);
            QuantizeResult qr = quantize(b.codebook, z);
            out.values = qr.code_vector;
            out.index = qr.code_index;
            break;
        }
        case Variant::continuous: {
            Tensor obs = encode_observations(m, history);
            out.values = predict_skill(m, tokens, obs, nullptr).values();
            break;
        }
        case Variant::mlp_predictor: {
            Tensor cur = encode_observations(m, {history.back()});
            Tensor z = mlp_predict_skill(m, tokens, cur, nullptr);
            QuantizeResult qr = quantize(b.codebook, z);
            out.values = qr.code_vector;
            out.index = qr.code_index;
            break;
        }
        case Variant::kmeans: {
            out.index = b.kmeans.assign(b.kmeans.feature(tokens, history.back()));
            out.values.assign(b.kmeans.center(out.index),
                              b.kmeans.center(out.index) + b.kmeans.feature_dim);
            break;
        }
        case Variant::flat:
            throw std::logic_error("next_code: flat variant has no skill codes");
    }
    return out;
}

EpisodeLog run_episode_impl(const ModelBundle& b, GridState st, const Instruction& instr,
                            const std::vector<double>* forced_code, int forced_index) {
    const LisaModel& m = b.model;
    const int h = b.cfg.horizon;
    st.subgoals = instr.subgoals;
    st.settle_subgoals();

    EpisodeLog log;
    std::vector<std::vector<uint16_t>> history;
    SegmentCode code;
    int seg_start = 0;

    while (!st.done()) {
        history.push_back(encode_observation(st));
        const int t = static_cast<int>(history.size()) - 1;

        int action;
        if (b.cfg.variant == Variant::flat) {
            Tensor obs = encode_observations(m, history);
            Tensor logits = flat_logits(m, instr.token_ids, obs, nullptr);
            action = argmax_row(logits, logits.dim(0) - 1);
        } else {
            if (t % h == 0) {
                seg_start = t;
                if (forced_code) {
                    code.values = *forced_code;
                    code.index = forced_index;
                } else {
                    code = next_code(b, instr.token_ids, history);
                }
                if (code.index >= 0) log.codes.emplace_back(t, code.index);
            }
            std::vector<std::vector<uint16_t>> window(history.begin() + seg_start,
                                                      history.end());
            Tensor win = encode_observations(m, window);
            Tensor code_vec = Tensor::from_values(
                {static_cast<int>(code.values.size())}, code.values);
            Tensor logits = policy_logits(m, code_vec, win, nullptr);
            action = argmax_row(logits, logits.dim(0) - 1);
        }
        st = step(st, action).first;
    }
    log.success = st.succeeded();
    log.steps = static_cast<int>(history.size());
    return log;
}

}  // namespace

EpisodeLog run_episode(const ModelBundle& b, GridState start, const Instruction& instr) {
    return run_episode_impl(b, std::move(start), instr, nullptr, -1);
}

EvalReport rollout_eval(const ModelBundle& b, const std::vector<TrajectoryRecord>& split,
                        const std::string& split_name, int episodes_per_instruction,
                        const std::vector<uint64_t>& env_seeds, int max_steps) {
    if (split.empty()) throw std::invalid_argument("rollout_eval: empty instruction set");
    if (episodes_per_instruction < 1 || env_seeds.empty())
        throw std::invalid_argument("rollout_eval: need at least one episode and seed");

    EvalReport r;
    r.split = split_name;
    r.max_steps = max_steps;
    for (const auto& rec : split) {
        r.instructions.push_back(rec.instruction);
        r.instruction_tokens.push_back(rec.token_ids);
        r.per_instruction.push_back({rec.instruction, 0, 0});
    }

    for (uint64_t seed : env_seeds) {
        int seed_eps = 0, seed_ok = 0;
        for (size_t j = 0; j < split.size(); ++j) {
            const auto& rec = split[j];
            Instruction instr{rec.subgoals, rec.instruction, rec.token_ids};
            for (int e = 0; e < episodes_per_instruction; ++e) {
                GridState start;
                if (seed == env_seeds.front() && e == 0) {
                    start = decode_observation(rec.states.at(0), rec.subgoals, max_steps);
                } else {
                    Task t = generate_task_with_signature(
                        seed_stream(seed, "eval-layout", j * 131 + e), rec.subgoals);
                    start = t.state;
                }
                start.max_steps = max_steps;
                EpisodeLog log = run_episode(b, start, instr);
                log.instruction_index = static_cast<int>(j);
                log.env_seed = seed;
                ++r.episodes;
                ++seed_eps;
                ++r.per_instruction[j].episodes;
                if (log.success) {
                    ++r.successes;
                    ++seed_ok;
                    ++r.per_instruction[j].successes;
                }
                r.episode_logs.push_back(std::move(log));
            }
        }
        r.per_seed.push_back({seed, seed_eps, seed_ok});
    }
    r.success_rate = static_cast<double>(r.successes) / r.episodes;

    const int k = b.codebook.k > 0 ? b.codebook.k : b.kmeans.k;
    if (k > 0) {
        HeatmapExport h = skill_language_heatmap(r, k, vocabulary());
        r.skill_word_counts = h.raw;
        std::vector<int> used;
        for (const auto& log : r.episode_logs)
            for (const auto& [t, idx] : log.codes) used.push_back(idx);
        if (!used.empty()) {
            Codebook stub;
            stub.k = k;
            stub.d = 1;
            stub.vectors.assign(k, 0.0);
            stub.ema_cluster_size.assign(k, 0.0);
            stub.ema_sum.assign(k, 0.0);
            r.codebook_perplexity = perplexity(b.codebook.k > 0 ? b.codebook : stub, used);
        }
    }
    r.notes =
        "token-code attribution follows the all-tokens-per-used-code rule, which is "
        "noisy when instructions share tokens";
    return r;
}

EvalReport composition_eval(const ModelBundle& b, const TrainData& data,
                            int episodes_per_instruction,
                            const std::vector<uint64_t>& env_seeds) {
    if (data.eval_unseen.empty())
        throw std::invalid_argument("composition_eval: dataset has no unseen split");
    std::set<std::string> train_sigs(data.manifest.train_signatures.begin(),
                                     data.manifest.train_signatures.end());
    for (const auto& rec : data.eval_unseen)
        if (train_sigs.count(signature(rec.subgoals)))
            throw std::runtime_error("composition_eval: instruction leaked into train: " +
                                     rec.instruction);
    return rollout_eval(b, data.eval_unseen, "unseen", episodes_per_instruction, env_seeds,
                        2 * data.manifest.config.max_steps);
}

void write_report_json(const std::filesystem::path& file, const EvalReport& r) {
    nlohmann::ordered_json j;
    j["split"] = r.split;
    j["max_steps"] = r.max_steps;
    j["episodes"] = r.episodes;
    j["successes"] = r.successes;
    j["success_rate"] = r.success_rate;
    for (const auto& s : r.per_seed)
        j["per_seed"].push_back({{"seed", s.seed},
                                 {"episodes", s.episodes},
                                 {"successes", s.successes}});
    for (const auto& p : r.per_instruction)
        j["per_instruction"].push_back({{"instruction", p.instruction},
                                        {"episodes", p.episodes},
                                        {"successes", p.successes}});
    for (const auto& log : r.episode_logs) {
        nlohmann::ordered_json codes = nlohmann::ordered_json::array();
        for (const auto& [t, idx] : log.codes) codes.push_back({t, idx});
        j["episodes_detail"].push_back({{"instruction_index", log.instruction_index},
                                        {"env_seed", log.env_seed},
                                        {"success", log.success},
                                        {"steps", log.steps},
                                        {"codes", codes}});
    }
    j["skill_word_counts"] = r.skill_word_counts;
    j["vocab"] = vocabulary();
    j["codebook_perplexity"] = r.codebook_perplexity;
    j["notes"] = r.notes;
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write report: " + file.string());
    out << j.dump(2) << "\n";
}

HeatmapExport skill_language_heatmap(const EvalReport& report, int k,
                                     const std::vector<std::string>& vocab) {
    if (report.episode_logs.empty())
        throw std::invalid_argument("skill_language_heatmap: empty episode logs");
    HeatmapExport h;
    h.vocab = vocab;
    h.k = k;
    const int v = static_cast<int>(vocab.size());
    h.raw.assign(k, std::vector<long long>(v, 0));
    for (const auto& log : report.episode_logs) {
        std::set<int> used;
        for (const auto& [t, idx] : log.codes) used.insert(idx);
        const auto& tokens = report.instruction_tokens.at(log.instruction_index);
        for (int code : used)
            for (int tok : tokens) ++h.raw.at(code).at(tok);
    }
    h.col_norm.assign(k, std::vector<double>(v, 0.0));
    h.row_norm.assign(k, std::vector<double>(v, 0.0));
    for (int c = 0; c < v; ++c) {
        long long total = 0;
        for (int i = 0; i < k; ++i) total += h.raw[i][c];
        if (total > 0)
            for (int i = 0; i < k; ++i)
                h.col_norm[i][c] = static_cast<double>(h.raw[i][c]) / total;
    }
    for (int i = 0; i < k; ++i) {
        long long total = 0;
        for (int c = 0; c < v; ++c) total += h.raw[i][c];
        if (total > 0)
            for (int c = 0; c < v; ++c)
                h.row_norm[i][c] = static_cast<double>(h.raw[i][c]) / total;
    }
    return h;
}

void write_heatmap_csvs(const HeatmapExport& h, const std::filesystem::path& dir,
                        const std::string& prefix) {
    auto write = [&](const std::string& name, auto getter) {
        std::ofstream out(dir / (prefix + name), std::ios::binary);
        if (!out) throw std::runtime_error("cannot write heatmap csv");
        out << "code";
        for (const auto& w : h.vocab) out << "," << w;
        out << "\n";
        char buf[40];
        for (int i = 0; i < h.k; ++i) {
            out << i;
            for (size_t c = 0; c < h.vocab.size(); ++c) {
                snprintf(buf, sizeof buf, "%.9g", getter(i, static_cast<int>(c)));
                out << "," << buf;
            }
            out << "\n";
        }
    };
    write("heatmap_raw.csv",
          [&](int i, int c) { return static_cast<double>(h.raw[i][c]); });
    write("heatmap_colnorm.csv", [&](int i, int c) { return h.col_norm[i][c]; });
    write("heatmap_rownorm.csv", [&](int i, int c) { return h.row_norm[i][c]; });
}

FixedSkillSummary fixed_skill_rollout(const ModelBundle& b,
                                      const std::vector<TrajectoryRecord>& split,
                                      int code_index, int episodes, int max_steps) {
    if (b.codebook.k == 0) throw std::invalid_argument("fixed_skill_rollout: no codebook");
    if (code_index < 0 || code_index >= b.codebook.k)
        throw std::invalid_argument("fixed_skill_rollout: code index out of range");
    if (split.empty()) throw std::invalid_argument("fixed_skill_rollout: empty split");

    std::vector<double> code(b.codebook.row(code_index),
                             b.codebook.row(code_index) + b.codebook.d);
    FixedSkillSummary sum;
    sum.code_index = code_index;
    for (int e = 0; e < episodes; ++e) {
        const auto& rec = split[e % split.size()];
        GridState st = decode_observation(rec.states.at(0), rec.subgoals, max_steps);
        Instruction instr{rec.subgoals, rec.instruction, rec.token_ids};

        // replicate run_episode with the forced code, watching transitions
        GridState cur = st;
        cur.subgoals = instr.subgoals;
        cur.settle_subgoals();
        std::vector<std::vector<uint16_t>> history;
        std::set<int> goto_credited;
        std::set<std::string> episode_events;  // each subgoal type at most once per episode
        EpisodeLog log;
        int seg_start = 0;
        while (!cur.done()) {
            history.push_back(encode_observation(cur));
            const int t = static_cast<int>(history.size()) - 1;
            if (t % b.cfg.horizon == 0) {
                seg_start = t;
                log.codes.emplace_back(t, code_index);
            }
            std::vector<std::vector<uint16_t>> window(history.begin() + seg_start,
                                                      history.end());
            Tensor win = encode_observations(b.model, window);
            Tensor code_vec = Tensor::from_values({b.codebook.d}, code);
            Tensor logits = policy_logits(b.model, code_vec, win, nullptr);
            const int action = argmax_row(logits, logits.dim(0) - 1);

            const GridState prev = cur;
            cur = step(cur, action).first;

            // behavior events
            const int carried_now = cur.carried_index();
            if (carried_now >= 0 && carried_now != prev.carried_index()) {
                const auto& o = cur.objects[carried_now];
                episode_events.insert(subgoal_str({Verb::pickup, o.color, o.kind}));
            }
            for (size_t i = 0; i < cur.objects.size(); ++i)
                if (cur.objects[i].kind == Kind::door && cur.objects[i].open &&
                    !prev.objects[i].open)
                    episode_events.insert(
                        subgoal_str({Verb::open, cur.objects[i].color, Kind::door}));
            const int faced = cur.object_at(cur.agent_x + (cur.agent_dir == 0) -
                                                (cur.agent_dir == 2),
                                            cur.agent_y + (cur.agent_dir == 1) -
                                                (cur.agent_dir == 3));
            if (faced >= 0 && goto_credited.insert(faced).second) {
                const auto& o = cur.objects[faced];
                episode_events.insert(subgoal_str({Verb::goto_obj, o.color, o.kind}));
            }
        }
        for (const auto& ev : episode_events) ++sum.subgoal_completions[ev];
        log.success = cur.succeeded();
        log.steps = static_cast<int>(history.size());
        log.instruction_index = e % static_cast<int>(split.size());
        sum.logs.push_back(std::move(log));
        ++sum.episodes;
    }
    return sum;
}

void write_behavior_csv(const std::filesystem::path& file, const FixedSkillSummary& s) {
    std::vector<std::pair<std::string, int>> rows(s.subgoal_completions.begin(),
                                                  s.subgoal_completions.end());
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write behavior csv: " + file.string());
    out << "subgoal,completions\n";
    for (const auto& [name, count] : rows) out << name << "," << count << "\n";
}

std::vector<AblationRow> ablation_runner(const TrainConfig& base, const TrainData& data,
                                         const std::vector<AblationSetting>& sweep,
                                         const std::filesystem::path& out_dir,
                                         int eval_episodes_per_instruction) {
    std::vector<AblationRow> rows;
    for (const auto& s : sweep) {
        TrainConfig cfg = base;
        if (s.key == "horizon")
            cfg.horizon = std::stoi(s.value);
        else if (s.key == "num_skills")
            cfg.num_skills = std::stoi(s.value);
        else if (s.key == "codes")
            cfg.variant = s.value == "continuous" ? Variant::continuous : Variant::lisa;
        else
            throw std::invalid_argument("ablation_runner: unknown key " + s.key);

        const auto run_dir = out_dir / (s.key + "_" + s.value);
        Trainer trainer(cfg, &data);
        auto metrics = trainer.run(run_dir, "ablation " + s.key + "=" + s.value);
        EvalReport rep = rollout_eval(trainer.bundle(), data.eval_seen, "seen",
                                      eval_episodes_per_instruction, {0},
                                      data.manifest.config.max_steps);
        write_report_json(run_dir / "report_seen.json", rep);
        AblationRow row;
        row.setting = s;
        row.success_rate = rep.success_rate;
        row.final_mi = metrics.empty() ? 0.0 : metrics.back().mi_bits;
        row.dataset_hash = data.manifest.config_hash;
        rows.push_back(row);
    }
    return rows;
}

void write_ablation_csv(const std::filesystem::path& file,
                        const std::vector<AblationRow>& rows) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write ablation csv: " + file.string());
    out << "setting,value,success_rate,final_mi,dataset_hash\n";
    char buf[64];
    for (const auto& r : rows) {
        snprintf(buf, sizeof buf, "%.9g,%.9g", r.success_rate, r.final_mi);
        out << r.setting.key << "," << r.setting.value << "," << buf << ","
            << r.dataset_hash << "\n";
    }
}

}  // namespace lisa
