#include "lisa/config.hpp"
#include "lisa/eval.hpp"
#include "lisa/gridworld.hpp"
#include "lisa/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace lisa;

namespace {

int cmd_gen_data(int n_train, int n_eval, int n_unseen, uint64_t seed, int max_steps,
                 const std::string& out) {
    DatasetConfig cfg;
    cfg.n_train = n_train;
    cfg.n_eval_seen = n_eval;
    cfg.n_eval_unseen = n_unseen;
    cfg.seed = seed;
    cfg.max_steps = max_steps;
    DatasetManifest man = build_dataset(cfg, out);
    std::cout << "wrote " << out << ": train=" << n_train << " eval_seen=" << n_eval
              << " eval_unseen=" << n_unseen << "\n"
              << "vocab=" << man.vocab.size()
              << " distinct train signatures=" << man.train_signatures.size() << "\n"
              << "unseen fraction: eval_unseen=" << man.unseen_fraction_unseen_split
              << " eval_seen=" << man.unseen_fraction_seen_split << "\n"
              << "config hash: " << man.config_hash << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& variant_flag,
              const std::string& init_from, bool freeze_skills, std::optional<uint64_t> seed,
              const std::string& data_flag, const std::string& out_flag,
              std::optional<int> iterations) {
    RunConfig cfg = config_path.empty() ? RunConfig::defaults()
                                        : RunConfig::parse_file(config_path);
    if (!variant_flag.empty()) cfg.train.variant = parse_variant(variant_flag);
    if (seed) cfg.train.seed = *seed;
    if (!data_flag.empty()) cfg.dataset_dir = data_flag;
    if (!out_flag.empty()) cfg.out_dir = out_flag;
    if (iterations) cfg.train.iterations = *iterations;
    if (freeze_skills && init_from.empty())
        throw std::invalid_argument("--freeze-skills requires --init-from");
    if (cfg.dataset_dir.empty()) throw std::invalid_argument("no dataset_dir configured");
    if (cfg.out_dir.empty()) throw std::invalid_argument("no out_dir configured");

    TrainData data = TrainData::load(cfg.dataset_dir);
    Trainer trainer(cfg.train, &data);
    if (!init_from.empty())
        trainer.init_from_checkpoint(load_checkpoint(init_from), freeze_skills);

    fs::create_directories(cfg.out_dir);
    const std::string resolved = cfg.writeback();
    {
        std::ofstream out(fs::path(cfg.out_dir) / "config.resolved", std::ios::binary);
        out << resolved;
    }
    auto rows = trainer.run(cfg.out_dir, resolved);
    const auto& last = rows.back();
    std::cout << "trained " << variant_name(cfg.train.variant) << " for " << rows.size()
              << " iterations\n"
              << "final: bc=" << last.bc_loss << " vq=" << last.vq_loss
              << " mi_bits=" << last.mi_bits << " perplexity=" << last.perplexity;
    if (last.probe_success) std::cout << " probe_success=" << *last.probe_success;
    std::cout << "\ncheckpoints: " << (fs::path(cfg.out_dir) / "ckpt_final.bin").string()
              << ", ckpt_best.bin\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& split, int fixed_skill, int episodes,
             const std::string& seeds_csv, const std::string& out_flag) {
    ModelBundle bundle = bundle_from_checkpoint(load_checkpoint(ckpt_path));
    TrainData data = TrainData::load(data_dir);
    fs::path out_dir = out_flag.empty() ? fs::path(ckpt_path).parent_path() : fs::path(out_flag);
    fs::create_directories(out_dir);

    std::vector<uint64_t> seeds;
    {
        std::istringstream in(seeds_csv);
        std::string part;
        while (std::getline(in, part, ','))
            if (!part.empty()) seeds.push_back(std::stoull(part));
    }
    if (seeds.empty()) seeds.push_back(0);

    if (fixed_skill >= 0) {
        FixedSkillSummary s = fixed_skill_rollout(bundle, data.eval_seen, fixed_skill,
                                                  episodes * static_cast<int>(seeds.size()),
                                                  data.manifest.config.max_steps);
        const fs::path file =
            out_dir / ("behavior_code" + std::to_string(fixed_skill) + ".csv");
        write_behavior_csv(file, s);
        int distinct = 0;
        {
            std::set<int> codes;
            for (const auto& log : s.logs)
                for (auto& [t, c] : log.codes) codes.insert(c);
            distinct = static_cast<int>(codes.size());
        }
        std::cout << "fixed-skill " << fixed_skill << ": episodes=" << s.episodes
                  << " distinct codes in log=" << distinct << "\n"
                  << "behavior profile: " << file.string() << "\n";
        return 0;
    }

    EvalReport report;
    if (split == "seen") {
        if (data.eval_seen.empty())
            throw std::invalid_argument("dataset has no seen eval split");
        report = rollout_eval(bundle, data.eval_seen, "seen", episodes, seeds,
                              data.manifest.config.max_steps);
    } else if (split == "unseen") {
        if (data.eval_unseen.empty())
            throw std::invalid_argument("dataset manifest has no unseen split");
        report = composition_eval(bundle, data, episodes, seeds);
    } else {
        throw std::invalid_argument("--split must be seen or unseen");
    }
    write_report_json(out_dir / ("report_" + split + ".json"), report);
    if (!report.skill_word_counts.empty()) {
        HeatmapExport h = skill_language_heatmap(
            report, static_cast<int>(report.skill_word_counts.size()), vocabulary());
        write_heatmap_csvs(h, out_dir, split + "_");
    }
    std::cout << "split=" << split << " episodes=" << report.episodes
              << " success_rate=" << report.success_rate
              << " codebook_perplexity=" << report.codebook_perplexity << "\n"
              << "report: " << (out_dir / ("report_" + split + ".json")).string() << "\n";
    return 0;
}

struct RunSummary {
    std::string run;
    std::string split;
    std::vector<double> successes;
};

std::vector<RunSummary> collect_reports(const fs::path& dir) {
    std::vector<RunSummary> out;
    auto scan = [&](const fs::path& run_dir) {
        for (const char* split : {"seen", "unseen"}) {
            const fs::path f = run_dir / ("report_" + std::string(split) + ".json");
            if (!fs::exists(f)) continue;
            std::ifstream in(f);
            nlohmann::json j = nlohmann::json::parse(in);
            RunSummary s;
            s.run = run_dir.string();
            s.split = split;
            s.successes.push_back(j.at("success_rate").get<double>());
            out.push_back(std::move(s));
        }
    };
    scan(dir);
    if (fs::is_directory(dir))
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory()) scan(e.path());
    return out;
}

int cmd_analyze(const std::string& run_dir, const std::string& compare_dir) {
    const fs::path dir = run_dir;
    const fs::path metrics = dir / "metrics.csv";
    if (!fs::exists(metrics))
        throw std::invalid_argument("no metrics.csv under " + run_dir);

    // Extract the MI column textually so it matches the source bytes.
    {
        std::ifstream in(metrics);
        std::ofstream out(dir / "mi_curve.csv", std::ios::binary);
        std::string line;
        bool header = true;
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::string field;
            std::vector<std::string> fields;
            while (std::getline(ls, field, ',')) fields.push_back(field);
            if (fields.size() < 5) continue;
            out << fields[0] << "," << fields[4] << "\n";
            (void)header;
        }
    }
    std::cout << "mi curve: " << (dir / "mi_curve.csv").string() << "\n";

    // Re-emit normalized heatmaps from any report in the run dir.
    for (const char* split : {"seen", "unseen"}) {
        const fs::path f = dir / ("report_" + std::string(split) + ".json");
        if (!fs::exists(f)) continue;
        std::ifstream in(f);
        nlohmann::json j = nlohmann::json::parse(in);
        EvalReport rep;
        rep.skill_word_counts =
            j.at("skill_word_counts").get<std::vector<std::vector<long long>>>();
        if (rep.skill_word_counts.empty()) continue;
        HeatmapExport h;
        h.vocab = j.at("vocab").get<std::vector<std::string>>();
        h.k = static_cast<int>(rep.skill_word_counts.size());
        h.raw = rep.skill_word_counts;
        const int v = static_cast<int>(h.vocab.size());
        h.col_norm.assign(h.k, std::vector<double>(v, 0.0));
        h.row_norm.assign(h.k, std::vector<double>(v, 0.0));
        for (int c = 0; c < v; ++c) {
            long long total = 0;
            for (int i = 0; i < h.k; ++i) total += h.raw[i][c];
            if (total > 0)
                for (int i = 0; i < h.k; ++i)
                    h.col_norm[i][c] = static_cast<double>(h.raw[i][c]) / total;
        }
        for (int i = 0; i < h.k; ++i) {
            long long total = 0;
            for (int c = 0; c < v; ++c) total += h.raw[i][c];
            if (total > 0)
                for (int c = 0; c < v; ++c)
                    h.row_norm[i][c] = static_cast<double>(h.raw[i][c]) / total;
        }
        write_heatmap_csvs(h, dir, std::string(split) + "_");
        std::cout << "heatmaps for split " << split << " re-emitted\n";
    }

    // Paired comparison table over per-seed runs.
    auto rows_for = [](const fs::path& d) {
        std::map<std::string, std::vector<double>> by_split;
        for (const auto& s : collect_reports(d))
            for (double v : s.successes) by_split[s.split].push_back(v);
        return by_split;
    };
    std::ofstream table(dir / "comparison.csv", std::ios::binary);
    table << "run,split,n_runs,mean_success,std\n";
    auto emit = [&](const std::string& name, const fs::path& d) {
        for (const auto& [split, vals] : rows_for(d)) {
            double mean = 0.0;
            for (double v : vals) mean += v;
            mean /= vals.size();
            std::string stddev = "n/a";
            if (vals.size() >= 2) {
                double var = 0.0;
                for (double v : vals) var += (v - mean) * (v - mean);
                var /= (vals.size() - 1);
                char buf[32];
                snprintf(buf, sizeof buf, "%.6g", std::sqrt(var));
                stddev = buf;
            }
            char mbuf[32];
            snprintf(mbuf, sizeof mbuf, "%.6g", mean);
            table << name << "," << split << "," << vals.size() << "," << mbuf << ","
                  << stddev << "\n";
            std::cout << name << " " << split << ": mean=" << mbuf << " std=" << stddev
                      << " over " << vals.size() << " run(s)\n";
        }
    };
    emit(run_dir, dir);
    if (!compare_dir.empty()) emit(compare_dir, compare_dir);
    std::cout << "comparison table: " << (dir / "comparison.csv").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical language-conditioned imitation learning on a gridworld"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate expert demonstration datasets");
    int n_train = 1000, n_eval = 100, n_unseen = 100, max_steps = kDefaultMaxSteps;
    uint64_t gen_seed = 0;
    std::string gen_out;
    gen->add_option("--n-train", n_train, "training trajectories");
    gen->add_option("--n-eval", n_eval, "seen-eval instructions");
    gen->add_option("--n-unseen", n_unseen, "unseen-composition instructions");
    gen->add_option("--seed", gen_seed, "root seed");
    gen->add_option("--max-steps", max_steps, "episode step cap");
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* train = app.add_subcommand("train", "train a model per Algorithm settings");
    std::string config_path, variant_flag, init_from, data_flag, out_flag;
    bool freeze_skills = false;
    std::optional<uint64_t> train_seed;
    std::optional<int> train_iters;
    train->add_option("--config", config_path, "key=value config file");
    train->add_option("--variant", variant_flag,
                      "lisa|flat|mlp-predictor|continuous|kmeans");
    train->add_option("--init-from", init_from, "checkpoint to warm-start from");
    train->add_flag("--freeze-skills", freeze_skills,
                    "hold codebook/predictor/language fixed (needs --init-from)");
    train->add_option("--seed", train_seed, "override config seed");
    train->add_option("--data", data_flag, "override dataset_dir");
    train->add_option("--out", out_flag, "override out_dir");
    train->add_option("--iterations", train_iters, "override iteration count");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ckpt_path, split = "seen", eval_seeds = "0", eval_out, eval_data;
    int fixed_skill = -1, episodes = 1;
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--split", split, "seen|unseen");
    eval->add_option("--fixed-skill", fixed_skill, "force one code for whole episodes");
    eval->add_option("--episodes", episodes, "episodes per instruction");
    eval->add_option("--seeds", eval_seeds, "comma-separated environment seeds");
    eval->add_option("--out", eval_out, "output directory (default: checkpoint dir)");

    auto* analyze = app.add_subcommand("analyze", "extract MI curves, heatmaps, comparisons");
    std::string run_dir, compare_dir;
    analyze->add_option("--run-dir", run_dir, "run directory with metrics.csv")->required();
    analyze->add_option("--compare", compare_dir, "second run directory");

    try {
        app.parse(argc, argv);
        if (gen->parsed())
            return cmd_gen_data(n_train, n_eval, n_unseen, gen_seed, max_steps, gen_out);
        if (train->parsed())
            return cmd_train(config_path, variant_flag, init_from, freeze_skills, train_seed,
                             data_flag, out_flag, train_iters);
        if (eval->parsed())
            return cmd_eval(ckpt_path, eval_data, split, fixed_skill, episodes, eval_seeds,
                            eval_out);
        if (analyze->parsed()) return cmd_analyze(run_dir, compare_dir);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
