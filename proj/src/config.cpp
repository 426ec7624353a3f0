#include "lisa/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace lisa {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
    char buf[40];
    snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: key '" + key + "' wants true/false, got '" + v + "'");
}

}  // namespace

RunConfig RunConfig::defaults() { return RunConfig{}; }

RunConfig RunConfig::parse_text(const std::string& text, const std::string& origin) {
    RunConfig c = defaults();
    using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
    static const std::map<std::string, Setter> setters = {
        {"dataset_dir", [](RunConfig& c, const std::string& v, const std::string&) { c.dataset_dir = v; }},
        {"out_dir", [](RunConfig& c, const std::string& v, const std::string&) { c.out_dir = v; }},
        {"variant", [](RunConfig& c, const std::string& v, const std::string&) { c.train.variant = parse_variant(v); }},
        {"seed", [](RunConfig& c, const std::string& v, const std::string&) { c.train.seed = std::stoull(v); }},
        {"num_skills", [](RunConfig& c, const std::string& v, const std::string&) { c.train.num_skills = std::stoi(v); }},
        {"code_dim", [](RunConfig& c, const std::string& v, const std::string&) { c.train.code_dim = std::stoi(v); }},
        {"horizon", [](RunConfig& c, const std::string& v, const std::string&) { c.train.horizon = std::stoi(v); }},
        {"vq_weight", [](RunConfig& c, const std::string& v, const std::string&) { c.train.vq_weight = std::stod(v); }},
        {"batch_size", [](RunConfig& c, const std::string& v, const std::string&) { c.train.batch_size = std::stoi(v); }},
        {"iterations", [](RunConfig& c, const std::string& v, const std::string&) { c.train.iterations = std::stoi(v); }},
        {"warmup_steps", [](RunConfig& c, const std::string& v, const std::string&) { c.train.warmup_steps = std::stoi(v); }},
        {"lr_policy", [](RunConfig& c, const std::string& v, const std::string&) { c.train.lr_policy = std::stod(v); }},
        {"lr_predictor", [](RunConfig& c, const std::string& v, const std::string&) { c.train.lr_predictor = std::stod(v); }},
        {"lr_lang", [](RunConfig& c, const std::string& v, const std::string&) { c.train.lr_lang = std::stod(v); }},
        {"ema_decay", [](RunConfig& c, const std::string& v, const std::string&) { c.train.ema_decay = std::stod(v); }},
        {"freeze_codebook", [](RunConfig& c, const std::string& v, const std::string& k) { c.train.freeze_codebook = parse_bool(v, k); }},
        {"embed_dim", [](RunConfig& c, const std::string& v, const std::string&) { c.train.embed_dim = std::stoi(v); }},
        {"n_heads", [](RunConfig& c, const std::string& v, const std::string&) { c.train.n_heads = std::stoi(v); }},
        {"n_layers", [](RunConfig& c, const std::string& v, const std::string&) { c.train.n_layers = std::stoi(v); }},
        {"flat_layers", [](RunConfig& c, const std::string& v, const std::string&) { c.train.flat_layers = std::stoi(v); }},
        {"dropout", [](RunConfig& c, const std::string& v, const std::string&) { c.train.dropout = std::stod(v); }},
        {"predictor_context", [](RunConfig& c, const std::string& v, const std::string&) { c.train.predictor_context = std::stoi(v); }},
        {"probe_every", [](RunConfig& c, const std::string& v, const std::string&) { c.train.probe_every = std::stoi(v); }},
        {"probe_episodes", [](RunConfig& c, const std::string& v, const std::string&) { c.train.probe_episodes = std::stoi(v); }},
        {"kmeans_iterations", [](RunConfig& c, const std::string& v, const std::string&) { c.train.kmeans_iterations = std::stoi(v); }},
        {"kmeans_lang_dim", [](RunConfig& c, const std::string& v, const std::string&) { c.train.kmeans_lang_dim = std::stoi(v); }},
        {"eval_episodes", [](RunConfig& c, const std::string& v, const std::string&) { c.eval_episodes = std::stoi(v); }},
        {"eval_seeds", [](RunConfig& c, const std::string& v, const std::string&) { c.eval_seeds = v; }},
    };

    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                        ": expected key=value, got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end())
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                        ": unknown key '" + key + "'");
        try {
            it->second(c, value, key);
        } catch (const std::invalid_argument&) {
            throw;
        } catch (const std::exception& e) {
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": key '" +
                                        key + "': " + e.what());
        }
    }
    return c;
}

RunConfig RunConfig::parse_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open config: " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str(), file.string());
}

std::string RunConfig::writeback() const {
    std::ostringstream out;
    out << "dataset_dir = " << dataset_dir << "\n";
    out << "out_dir = " << out_dir << "\n";
    out << "variant = " << variant_name(train.variant) << "\n";
    out << "seed = " << train.seed << "\n";
    out << "num_skills = " << train.num_skills << "\n";
    out << "code_dim = " << train.code_dim << "\n";
    out << "horizon = " << train.horizon << "\n";
    out << "vq_weight = " << fmt_double(train.vq_weight) << "\n";
    out << "batch_size = " << train.batch_size << "\n";
    out << "iterations = " << train.iterations << "\n";
    out << "warmup_steps = " << train.warmup_steps << "\n";
    out << "lr_policy = " << fmt_double(train.lr_policy) << "\n";
    out << "lr_predictor = " << fmt_double(train.lr_predictor) << "\n";
    out << "lr_lang = " << fmt_double(train.lr_lang) << "\n";
    out << "ema_decay = " << fmt_double(train.ema_decay) << "\n";
    out << "freeze_codebook = " << (train.freeze_codebook ? "true" : "false") << "\n";
    out << "embed_dim = " << train.embed_dim << "\n";
    out << "n_heads = " << train.n_heads << "\n";
    out << "n_layers = " << train.n_layers << "\n";
    out << "flat_layers = " << train.flat_layers << "\n";
    out << "dropout = " << fmt_double(train.dropout) << "\n";
    out << "predictor_context = " << train.predictor_context << "\n";
    out << "probe_every = " << train.probe_every << "\n";
    out << "probe_episodes = " << train.probe_episodes << "\n";
    out << "kmeans_iterations = " << train.kmeans_iterations << "\n";
    out << "kmeans_lang_dim = " << train.kmeans_lang_dim << "\n";
    out << "eval_episodes = " << eval_episodes << "\n";
    out << "eval_seeds = " << eval_seeds << "\n";
    return out.str();
}

std::vector<uint64_t> RunConfig::eval_seed_list() const {
    std::vector<uint64_t> seeds;
    std::istringstream in(eval_seeds);
    std::string part;
    while (std::getline(in, part, ',')) {
        part = trim(part);
        if (!part.empty()) seeds.push_back(std::stoull(part));
    }
    if (seeds.empty()) throw std::invalid_argument("config: eval_seeds is empty");
    return seeds;
}

}  // namespace lisa
