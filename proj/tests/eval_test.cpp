#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "lisa/eval.hpp"
#include "lisa/rng.hpp"

#include <cmath>
#include <filesystem>
#include <set>

using namespace lisa;
namespace fs = std::filesystem;

namespace {

const TrainData& tiny_data() {
    static const TrainData data = [] {
        const fs::path dir = fs::temp_directory_path() / "lisa_eval_test_ds";
        if (!fs::exists(dir / "manifest.json")) {
            DatasetConfig cfg;
            cfg.n_train = 40;
            cfg.n_eval_seen = 10;
            cfg.n_eval_unseen = 8;
            cfg.seed = 17;
            build_dataset(cfg, dir);
        }
        return TrainData::load(dir);
    }();
    return data;
}

ModelBundle untrained_bundle(Variant v = Variant::lisa) {
    TrainConfig cfg;
    cfg.variant = v;
    cfg.embed_dim = 32;
    cfg.n_heads = 2;
    cfg.code_dim = 8;
    cfg.num_skills = 6;
    cfg.horizon = 5;
    cfg.seed = 33;
    ModelBundle b{cfg, make_model(cfg.model_config(tiny_data().vocab_size()), cfg.seed),
                  {}, {}};
    std::mt19937_64 rng(seed_stream(cfg.seed, "codebook"));
    b.codebook = Codebook::random_init(cfg.num_skills, cfg.code_dim, rng, cfg.ema_decay);
    return b;
}

uint64_t param_hash(const ParamStore& store) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : store.params)
        for (double v : t.values()) {
            uint64_t bits;
            static_assert(sizeof bits == sizeof v);
            std::memcpy(&bits, &v, sizeof bits);
            h ^= bits;
            h *= 1099511628211ull;
        }
    return h;
}

}  // namespace

TEST_CASE("expert actions replayed through the evaluation loop score 100%") {
    int ok = 0, n = 0;
    for (const auto& rec : tiny_data().eval_seen) {
        GridState st = decode_observation(rec.states.at(0), rec.subgoals, 64);
        st.settle_subgoals();
        for (int a : rec.actions) st = step(st, a).first;
        ok += st.succeeded();
        ++n;
    }
    CHECK(ok == n);
}

TEST_CASE("untrained model stays near chance on 3-subgoal tasks") {
    ModelBundle b = untrained_bundle();
    std::vector<TrajectoryRecord> hard;
    for (const auto& rec : tiny_data().eval_unseen)
        if (rec.subgoals.size() >= 3) hard.push_back(rec);
    if (hard.empty())
        for (const auto& rec : tiny_data().eval_unseen)
            if (rec.subgoals.size() >= 2) hard.push_back(rec);
    REQUIRE(!hard.empty());
    EvalReport r = rollout_eval(b, hard, "unseen", 2, {0}, 64);
    CHECK(r.success_rate < 0.10);
}

TEST_CASE("report accounting matches a manual recount and params stay fixed") {
    ModelBundle b = untrained_bundle();
    const uint64_t before = param_hash(b.model.params);
    EvalReport r = rollout_eval(b, tiny_data().eval_seen, "seen", 2, {0, 1}, 64);
    CHECK(param_hash(b.model.params) == before);

    int successes = 0;
    for (const auto& log : r.episode_logs) successes += log.success;
    CHECK(r.successes == successes);
    CHECK(r.success_rate == doctest::Approx(double(successes) / r.episodes));
    CHECK(r.episodes == static_cast<int>(tiny_data().eval_seen.size()) * 2 * 2);
    int per_instruction_total = 0;
    for (const auto& p : r.per_instruction) per_instruction_total += p.successes;
    CHECK(per_instruction_total == successes);

    // skill persistence: codes only change at horizon boundaries
    for (const auto& log : r.episode_logs)
        for (size_t i = 0; i < log.codes.size(); ++i)
            CHECK(log.codes[i].first == static_cast<int>(i) * b.cfg.horizon);
}

TEST_CASE("paired evaluations consume identical instruction and seed streams") {
    ModelBundle lisa_b = untrained_bundle(Variant::lisa);
    ModelBundle flat_b = untrained_bundle(Variant::flat);
    EvalReport a = rollout_eval(lisa_b, tiny_data().eval_seen, "seen", 1, {0, 7}, 64);
    EvalReport c = rollout_eval(flat_b, tiny_data().eval_seen, "seen", 1, {0, 7}, 64);
    CHECK(a.instructions == c.instructions);
    REQUIRE(a.episode_logs.size() == c.episode_logs.size());
    for (size_t i = 0; i < a.episode_logs.size(); ++i) {
        CHECK(a.episode_logs[i].instruction_index == c.episode_logs[i].instruction_index);
        CHECK(a.episode_logs[i].env_seed == c.episode_logs[i].env_seed);
    }
}

TEST_CASE("composition_eval doubles the cap and verifies disjointness") {
    ModelBundle b = untrained_bundle();
    EvalReport r = composition_eval(b, tiny_data(), 1, {0});
    CHECK(r.max_steps == 128);
    CHECK(r.split == "unseen");

    TrainData poisoned = tiny_data();
    poisoned.manifest.train_signatures.push_back(
        signature(poisoned.eval_unseen.front().subgoals));
    CHECK_THROWS_WITH_AS(composition_eval(b, poisoned, 1, {0}),
                         doctest::Contains("leaked"), std::runtime_error);
}

TEST_CASE("heatmap: unit entries, normalization, recount oracle") {
    EvalReport r;
    r.split = "seen";
    r.instructions = {"go to the red ball"};
    r.instruction_tokens = {tokenize("go to the red ball")};
    EpisodeLog log;
    log.instruction_index = 0;
    log.codes = {{0, 3}, {5, 3}};  // one distinct code used twice
    log.success = true;
    r.episode_logs.push_back(log);

    HeatmapExport h = skill_language_heatmap(r, 6, vocabulary());
    long long total = 0, row3 = 0;
    for (int i = 0; i < 6; ++i)
        for (size_t c = 0; c < vocabulary().size(); ++c) {
            total += h.raw[i][c];
            if (i == 3) row3 += h.raw[i][c];
            if (h.raw[i][c] != 0) CHECK(h.raw[i][c] == 1);  // unit entries
        }
    CHECK(total == 5);
    CHECK(row3 == 5);

    for (size_t c = 0; c < vocabulary().size(); ++c) {
        double col = 0;
        long long raw_col = 0;
        for (int i = 0; i < 6; ++i) {
            col += h.col_norm[i][c];
            raw_col += h.raw[i][c];
        }
        if (raw_col > 0) CHECK(col == doctest::Approx(1.0));
    }

    // independent recount from the raw logs
    std::vector<std::vector<long long>> recount(6,
                                                std::vector<long long>(vocabulary().size(), 0));
    for (const auto& lg : r.episode_logs) {
        std::set<int> codes;
        for (auto& [t, c] : lg.codes) codes.insert(c);
        for (int c : codes)
            for (int tok : r.instruction_tokens[lg.instruction_index]) ++recount[c][tok];
    }
    CHECK(recount == h.raw);
}

TEST_CASE("fixed-skill rollouts use exactly one code and bounded counts") {
    ModelBundle b = untrained_bundle();
    FixedSkillSummary s = fixed_skill_rollout(b, tiny_data().eval_seen, 2, 5, 64);
    CHECK(s.episodes == 5);
    std::set<int> codes;
    for (const auto& log : s.logs)
        for (auto& [t, c] : log.codes) codes.insert(c);
    CHECK(codes == std::set<int>{2});
    for (const auto& [name, count] : s.subgoal_completions) {
        CHECK(count >= 0);
        CHECK(count <= s.episodes);
    }
    CHECK_THROWS_AS(fixed_skill_rollout(b, tiny_data().eval_seen, 99, 2, 64),
                    std::invalid_argument);
}

TEST_CASE("kmeans: degenerate K and separated blobs") {
    std::vector<std::vector<double>> points;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> noise(0.0, 1e-9);
    std::vector<double> mean_all(2, 0.0);
    for (int i = 0; i < 40; ++i) {
        const bool right = i % 2 == 0;
        std::vector<double> p = {right ? 10.0 + noise(rng) : -10.0 + noise(rng), noise(rng)};
        mean_all[0] += p[0] / 40.0;
        mean_all[1] += p[1] / 40.0;
        points.push_back(p);
    }
    auto one = lloyd_kmeans(points, 1, 20, 3);
    CHECK(one[0] == doctest::Approx(mean_all[0]).epsilon(1e-9));
    CHECK(one[1] == doctest::Approx(mean_all[1]).epsilon(1e-9));

    auto two = lloyd_kmeans(points, 2, 30, 3);
    const double lo = std::min(two[0], two[2]), hi = std::max(two[0], two[2]);
    CHECK(std::abs(lo + 10.0) < 1e-6);
    CHECK(std::abs(hi - 10.0) < 1e-6);
}

TEST_CASE("ablation runner: rows match the sweep and share the dataset hash") {
    const fs::path dir = fs::temp_directory_path() / "lisa_ablation_test";
    fs::remove_all(dir);
    TrainConfig base;
    base.embed_dim = 32;
    base.n_heads = 2;
    base.code_dim = 8;
    base.num_skills = 6;
    base.batch_size = 4;
    base.iterations = 3;
    base.probe_every = 0;
    base.seed = 2;
    std::vector<AblationSetting> sweep = {{"horizon", "1"}, {"horizon", "5"}};
    auto rows = ablation_runner(base, tiny_data(), sweep, dir, 1);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].dataset_hash == rows[1].dataset_hash);
    CHECK(rows[0].setting.value == "1");
    write_ablation_csv(dir / "ablation.csv", rows);
    CHECK(fs::exists(dir / "ablation.csv"));
    fs::remove_all(dir);
}
