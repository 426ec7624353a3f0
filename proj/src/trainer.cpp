#include "lisa/trainer.hpp"

#include "lisa/eval.hpp"
#include "lisa/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lisa {

void TrainConfig::validate() const {
    if (horizon < 1) throw std::invalid_argument("TrainConfig: horizon must be >= 1");
    if (vq_weight < 0.0) throw std::invalid_argument("TrainConfig: vq_weight must be >= 0");
    if (lr_policy <= 0.0 || lr_predictor <= 0.0 || lr_lang <= 0.0)
        throw std::invalid_argument("TrainConfig: learning rates must be positive");
    if (num_skills < 1 || code_dim < 1) throw std::invalid_argument("TrainConfig: K and D >= 1");
    if (batch_size < 1 || iterations < 1)
        throw std::invalid_argument("TrainConfig: batch size and iterations must be positive");
    if (ema_decay <= 0.0 || ema_decay >= 1.0)
        throw std::invalid_argument("TrainConfig: ema_decay must lie in (0,1)");
}

ModelConfig TrainConfig::model_config(int vocab_size) const {
    ModelConfig mc;
    mc.embed_dim = embed_dim;
    mc.n_heads = n_heads;
    mc.n_layers = n_layers;
    mc.flat_layers = flat_layers;
    mc.dropout = dropout;
    mc.vocab_size = vocab_size;
    mc.code_dim = code_dim;
    mc.horizon = horizon;
    mc.predictor_context = predictor_context;
    mc.variant = variant;
    if (variant == Variant::kmeans) mc.kmeans_feature_dim = kmeans_lang_dim + kObsDim;
    return mc;
}

TrainData TrainData::load(const std::filesystem::path& dir, bool with_eval) {
    TrainData d;
    d.manifest = load_manifest(dir / "manifest.json");
    d.train = load_jsonl(dir / "train.jsonl");
    if (with_eval) {
        if (d.manifest.config.n_eval_seen > 0) d.eval_seen = load_jsonl(dir / "eval_seen.jsonl");
        if (d.manifest.config.n_eval_unseen > 0)
            d.eval_unseen = load_jsonl(dir / "eval_unseen.jsonl");
    }
    if (static_cast<int>(d.train.size()) != d.manifest.config.n_train)
        throw std::runtime_error("dataset: train.jsonl does not match the manifest count");
    return d;
}

namespace {

void pack_u64(std::vector<double>& v, uint64_t x) {
    v.push_back(static_cast<double>(x >> 32));
    v.push_back(static_cast<double>(x & 0xffffffffull));
}

uint64_t unpack_u64(const std::vector<double>& v, size_t at) {
    return (static_cast<uint64_t>(v.at(at)) << 32) | static_cast<uint64_t>(v.at(at + 1));
}

Tensor fold_add(const std::vector<Tensor>& terms) {
    Tensor acc = terms.front();
    for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return acc;
}

Codebook stub_codebook(int k) {
    Codebook cb;
    cb.k = k;
    cb.d = 1;
    cb.vectors.assign(static_cast<size_t>(k), 0.0);
    cb.ema_cluster_size.assign(static_cast<size_t>(k), 0.0);
    cb.ema_sum.assign(static_cast<size_t>(k), 0.0);
    return cb;
}

}  // namespace

Checkpoint bundle_to_checkpoint(const ModelBundle& b, const std::string& config_echo,
                                int64_t iteration) {
    Checkpoint ck;
    ck.config_text = config_echo;
    for (const auto& [name, t] : b.model.params.params)
        ck.arrays["param/" + name] = {t.shape(), t.values()};

    const auto& c = b.cfg;
    std::vector<double> meta = {static_cast<double>(static_cast<int>(c.variant)),
                                static_cast<double>(c.num_skills),
                                static_cast<double>(c.code_dim),
                                static_cast<double>(c.horizon),
                                static_cast<double>(c.embed_dim),
                                static_cast<double>(c.n_heads),
                                static_cast<double>(c.n_layers),
                                static_cast<double>(c.flat_layers),
                                static_cast<double>(c.predictor_context),
                                static_cast<double>(b.model.cfg.vocab_size),
                                static_cast<double>(c.kmeans_lang_dim),
                                c.vq_weight,
                                c.ema_decay,
                                c.dropout};
    ck.arrays["meta/config"] = {{static_cast<int>(meta.size())}, meta};
    std::vector<double> rngst;
    pack_u64(rngst, c.seed);
    rngst.push_back(static_cast<double>(iteration));
    ck.arrays["rng/state"] = {{3}, rngst};

    if (b.codebook.k > 0) {
        ck.arrays["codebook/vectors"] = {{b.codebook.k, b.codebook.d}, b.codebook.vectors};
        ck.arrays["codebook/ema_cluster_size"] = {{b.codebook.k}, b.codebook.ema_cluster_size};
        ck.arrays["codebook/ema_sum"] = {{b.codebook.k, b.codebook.d}, b.codebook.ema_sum};
        ck.arrays["codebook/meta"] = {{2}, {b.codebook.decay, b.codebook.laplace_eps}};
    }
    if (b.kmeans.k > 0) {
        ck.arrays["kmeans/centers"] = {{b.kmeans.k, b.kmeans.feature_dim}, b.kmeans.centers};
        ck.arrays["kmeans/lang_table"] =
            {{b.model.cfg.vocab_size, b.kmeans.lang_dim}, b.kmeans.lang_table};
        std::vector<double> km = {static_cast<double>(b.kmeans.k),
                                  static_cast<double>(b.kmeans.lang_dim),
                                  static_cast<double>(b.kmeans.feature_dim)};
        pack_u64(km, b.kmeans.lang_seed);
        ck.arrays["kmeans/meta"] = {{5}, km};
    }
    return ck;
}

ModelBundle bundle_from_checkpoint(const Checkpoint& ck) {
    const auto& meta = ck.at("meta/config").values;
    TrainConfig cfg;
    cfg.variant = static_cast<Variant>(static_cast<int>(meta.at(0)));
    cfg.num_skills = static_cast<int>(meta.at(1));
    cfg.code_dim = static_cast<int>(meta.at(2));
    cfg.horizon = static_cast<int>(meta.at(3));
    cfg.embed_dim = static_cast<int>(meta.at(4));
    cfg.n_heads = static_cast<int>(meta.at(5));
    cfg.n_layers = static_cast<int>(meta.at(6));
    cfg.flat_layers = static_cast<int>(meta.at(7));
    cfg.predictor_context = static_cast<int>(meta.at(8));
    const int vocab_size = static_cast<int>(meta.at(9));
    cfg.kmeans_lang_dim = static_cast<int>(meta.at(10));
    cfg.vq_weight = meta.at(11);
    cfg.ema_decay = meta.at(12);
    cfg.dropout = meta.at(13);
    cfg.seed = unpack_u64(ck.at("rng/state").values, 0);

    ModelBundle b{cfg, make_model(cfg.model_config(vocab_size), cfg.seed), {}, {}};
    std::string mismatches;
    for (auto& [name, t] : b.model.params.params) {
        const std::string key = "param/" + name;
        if (!ck.has(key)) {
            mismatches += " missing:" + name;
            continue;
        }
        const auto& arr = ck.at(key);
        if (arr.shape != t.shape()) {
            mismatches += " shape:" + name;
            continue;
        }
        t.mutable_values() = arr.values;
    }
    if (!mismatches.empty())
        throw std::runtime_error("checkpoint/model mismatch:" + mismatches);

    if (ck.has("codebook/vectors")) {
        const auto& vec = ck.at("codebook/vectors");
        Codebook cb;
        cb.k = vec.shape.at(0);
        cb.d = vec.shape.at(1);
        cb.vectors = vec.values;
        cb.ema_cluster_size = ck.at("codebook/ema_cluster_size").values;
        cb.ema_sum = ck.at("codebook/ema_sum").values;
        cb.decay = ck.at("codebook/meta").values.at(0);
        cb.laplace_eps = ck.at("codebook/meta").values.at(1);
        cb.validate();
        b.codebook = std::move(cb);
    }
    if (ck.has("kmeans/centers")) {
        const auto& km = ck.at("kmeans/meta").values;
        b.kmeans.k = static_cast<int>(km.at(0));
        b.kmeans.lang_dim = static_cast<int>(km.at(1));
        b.kmeans.feature_dim = static_cast<int>(km.at(2));
        b.kmeans.lang_seed = unpack_u64(km, 3);
        b.kmeans.centers = ck.at("kmeans/centers").values;
        b.kmeans.lang_table = ck.at("kmeans/lang_table").values;
    }
    return b;
}

Trainer::Trainer(const TrainConfig& cfg, const TrainData* data)
    : data_(data),
      bundle_{cfg, make_model(cfg.model_config(data->vocab_size()), cfg.seed), {}, {}} {
    cfg.validate();
    const bool uses_codebook = cfg.variant == Variant::lisa ||
                               cfg.variant == Variant::mlp_predictor;
    if (uses_codebook) {
        std::mt19937_64 rng(seed_stream(cfg.seed, "codebook"));
        bundle_.codebook =
            Codebook::random_init(cfg.num_skills, cfg.code_dim, rng, cfg.ema_decay);
    }
    if (cfg.variant == Variant::kmeans)
        bundle_.kmeans = fit_kmeans_skills(data->train, cfg.num_skills, cfg.kmeans_iterations,
                                           cfg.seed, data->vocab_size(), cfg.kmeans_lang_dim);
    opts_.emplace_back(cfg.lr_policy, cfg.warmup_steps);
    opts_.emplace_back(cfg.lr_predictor, cfg.warmup_steps);
    opts_.emplace_back(cfg.lr_lang, cfg.warmup_steps);
}

void Trainer::init_from_checkpoint(const Checkpoint& ck, bool freeze_skills) {
    ModelBundle loaded = bundle_from_checkpoint(ck);
    if (loaded.cfg.num_skills != bundle_.cfg.num_skills ||
        loaded.cfg.code_dim != bundle_.cfg.code_dim)
        throw std::runtime_error(
            "transfer: checkpoint skill space mismatch: num_skills " +
            std::to_string(loaded.cfg.num_skills) + " vs " +
            std::to_string(bundle_.cfg.num_skills) + ", code_dim " +
            std::to_string(loaded.cfg.code_dim) + " vs " +
            std::to_string(bundle_.cfg.code_dim));
    if (loaded.cfg.variant != bundle_.cfg.variant)
        throw std::runtime_error("transfer: checkpoint variant mismatch");
    std::string mismatches;
    for (auto& [name, t] : bundle_.model.params.params) {
        auto it = loaded.model.params.params.find(name);
        if (it == loaded.model.params.params.end()) {
            mismatches += " missing:" + name;
            continue;
        }
        if (it->second.shape() != t.shape()) {
            mismatches += " shape:" + name;
            continue;
        }
        t.mutable_values() = it->second.values();
    }
    if (!mismatches.empty()) throw std::runtime_error("transfer: parameter mismatch:" + mismatches);
    bundle_.codebook = loaded.codebook;
    bundle_.kmeans = loaded.kmeans;
    skills_frozen_ = freeze_skills;
}

namespace {

std::vector<const TrajectoryRecord*> sample_batch(const std::vector<TrajectoryRecord>& pool,
                                                  int batch_size, uint64_t seed, int64_t iter) {
    std::mt19937_64 rng(seed_stream(seed, "batch", static_cast<uint64_t>(iter)));
    std::vector<const TrajectoryRecord*> batch;
    batch.reserve(batch_size);
    for (int i = 0; i < batch_size; ++i)
        batch.push_back(&pool[rng() % pool.size()]);
    return batch;
}

}  // namespace

TrainMetricsRow Trainer::step_lisa_family(const std::vector<const TrajectoryRecord*>& batch) {
    const TrainConfig& cfg = bundle_.cfg;
    LisaModel& m = bundle_.model;
    Codebook& cb = bundle_.codebook;
    const bool quantized =
        cfg.variant == Variant::lisa || cfg.variant == Variant::mlp_predictor;
    const bool kmeans = cfg.variant == Variant::kmeans;
    DropoutState drop{seed_stream(cfg.seed, "dropout", static_cast<uint64_t>(iteration_)), 0};

    m.params.zero_grads();
    double bc_sum = 0.0, vq_sum = 0.0;
    std::vector<std::pair<int, std::vector<double>>> assignments;
    std::vector<std::vector<double>> z_batch;
    std::vector<int> code_indices;
    const int h = cfg.horizon;

    for (size_t bi = 0; bi < batch.size(); ++bi) {
        const TrajectoryRecord& rec = *batch[bi];
        const int t_len = static_cast<int>(rec.actions.size());
        if (t_len == 0) continue;
        Tensor obs = encode_observations(m, rec.states);
        const int n_windows = (t_len + h - 1) / h;

        Tensor z_rows;
        if (cfg.variant == Variant::lisa || cfg.variant == Variant::continuous) {
            std::vector<int> positions;
            for (int w = 0; w < n_windows; ++w) positions.push_back(w * h);
            z_rows = predict_skills_at(m, rec.token_ids, obs, positions, &drop);
        }

        std::vector<Tensor> bc_terms, vq_terms;
        for (int w = 0; w < n_windows; ++w) {
            const int start = w * h;
            const int len = std::min(h, t_len - start);
            Tensor code;
            if (kmeans) {
                const int idx = bundle_.kmeans.assign(
                    bundle_.kmeans.feature(rec.token_ids, rec.states[start]));
                code_indices.push_back(idx);
                code = Tensor::from_values(
                    {bundle_.kmeans.feature_dim},
                    std::vector<double>(bundle_.kmeans.center(idx),
                                        bundle_.kmeans.center(idx) + bundle_.kmeans.feature_dim));
            } else {
                Tensor z_w =
                    cfg.variant == Variant::mlp_predictor
                        ? mlp_predict_skill(m, rec.token_ids, slice(obs, 0, start, 1), &drop)
                        : reshape(slice(z_rows, 0, w, 1), {cfg.code_dim});
                if (cfg.variant == Variant::continuous) {
                    code = z_w;
                } else {
                    QuantizeResult qr = quantize(cb, z_w);
                    code = qr.straight_through;
                    vq_terms.push_back(qr.commitment_loss);
                    assignments.emplace_back(qr.code_index, z_w.values());
                    code_indices.push_back(qr.code_index);
                    z_batch.push_back(z_w.values());
                }
            }
            Tensor win = slice(obs, 0, start, len);
            Tensor logits = policy_logits(m, code, win, &drop);
            std::vector<int> targets(rec.actions.begin() + start,
                                     rec.actions.begin() + start + len);
            bc_terms.push_back(scalar_mul(cross_entropy(logits, targets),
                                          static_cast<double>(len) / t_len));
        }
        Tensor bc_i = fold_add(bc_terms);
        Tensor vq_i = vq_terms.empty()
                          ? Tensor::scalar(0.0)
                          : scalar_mul(fold_add(vq_terms), 1.0 / n_windows);
        Tensor loss_i = add(bc_i, scalar_mul(vq_i, cfg.vq_weight));
        if (!std::isfinite(loss_i.item()))
            throw std::runtime_error("train_step: non-finite loss at batch index " +
                                     std::to_string(bi) + " (iteration " +
                                     std::to_string(iteration_) + ")");
        backward(scalar_mul(loss_i, 1.0 / static_cast<double>(batch.size())));
        bc_sum += bc_i.item();
        vq_sum += vq_i.item();
    }

    opts_[0].step(m.params.with_prefix("policy/"));
    if (!skills_frozen_) {
        opts_[1].step(m.params.with_prefix("predictor/"));
        opts_[2].step(m.params.with_prefix("lang/"));
    }
    if (quantized && !cfg.freeze_codebook && !skills_frozen_) ema_update(cb, assignments);

    TrainMetricsRow row;
    row.iter = iteration_;
    row.bc_loss = bc_sum / batch.size();
    row.vq_loss = vq_sum / batch.size();
    row.total_loss = row.bc_loss + cfg.vq_weight * row.vq_loss;
    row.mi_bits = z_batch.empty() ? 0.0 : mi_estimate(cb, z_batch);
    if (!code_indices.empty())
        row.perplexity = perplexity(quantized ? cb : stub_codebook(bundle_.kmeans.k),
                                    code_indices);
    row.lr_policy = opts_[0].current_lr();
    return row;
}

TrainMetricsRow Trainer::step_flat(const std::vector<const TrajectoryRecord*>& batch) {
    const TrainConfig& cfg = bundle_.cfg;
    LisaModel& m = bundle_.model;
    DropoutState drop{seed_stream(cfg.seed, "dropout", static_cast<uint64_t>(iteration_)), 0};
    m.params.zero_grads();
    double bc_sum = 0.0;
    for (size_t bi = 0; bi < batch.size(); ++bi) {
        const TrajectoryRecord& rec = *batch[bi];
        const int t_len = static_cast<int>(rec.actions.size());
        if (t_len == 0) continue;
        Tensor obs = encode_observations(m, rec.states);
        Tensor logits = flat_logits(m, rec.token_ids, obs, &drop);
        // context cap drops the oldest states; align targets with the slice
        const int kept = logits.dim(0);
        std::vector<int> targets(rec.actions.end() - kept, rec.actions.end());
        Tensor bc_i = cross_entropy(logits, targets);
        if (!std::isfinite(bc_i.item()))
            throw std::runtime_error("train_step: non-finite loss at batch index " +
                                     std::to_string(bi));
        backward(scalar_mul(bc_i, 1.0 / static_cast<double>(batch.size())));
        bc_sum += bc_i.item();
    }
    opts_[0].step(m.params.with_prefix("policy/"));
    opts_[2].step(m.params.with_prefix("lang/"));

    TrainMetricsRow row;
    row.iter = iteration_;
    row.bc_loss = bc_sum / batch.size();
    row.total_loss = row.bc_loss;
    row.lr_policy = opts_[0].current_lr();
    return row;
}

TrainMetricsRow Trainer::train_step() {
    const auto t0 = std::chrono::steady_clock::now();
    ++iteration_;
    auto batch =
        sample_batch(data_->train, bundle_.cfg.batch_size, bundle_.cfg.seed, iteration_);
    TrainMetricsRow row = bundle_.cfg.variant == Variant::flat ? step_flat(batch)
                                                               : step_lisa_family(batch);
    row.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    return row;
}

double Trainer::probe(int episodes) {
    const auto& pool = data_->eval_seen.empty() ? data_->train : data_->eval_seen;
    const int n = std::min<int>(episodes, static_cast<int>(pool.size()));
    int ok = 0;
    for (int i = 0; i < n; ++i) {
        const auto& rec = pool[i];
        GridState start = decode_observation(rec.states.at(0), rec.subgoals,
                                             data_->manifest.config.max_steps);
        Instruction instr{rec.subgoals, rec.instruction, rec.token_ids};
        if (run_episode(bundle_, start, instr).success) ++ok;
    }
    return n == 0 ? 0.0 : static_cast<double>(ok) / n;
}

std::vector<TrainMetricsRow> Trainer::run(const std::filesystem::path& out_dir,
                                          const std::string& config_echo) {
    std::filesystem::create_directories(out_dir);
    std::vector<TrainMetricsRow> rows;
    rows.reserve(bundle_.cfg.iterations);
    double best = -1.0;
    for (int it = 1; it <= bundle_.cfg.iterations; ++it) {
        TrainMetricsRow row = train_step();
        const bool probe_now =
            (bundle_.cfg.probe_every > 0 && it % bundle_.cfg.probe_every == 0) ||
            it == bundle_.cfg.iterations;
        if (probe_now) {
            row.probe_success = probe(bundle_.cfg.probe_episodes);
            if (*row.probe_success > best) {
                best = *row.probe_success;
                save_checkpoint(out_dir / "ckpt_best.bin",
                                bundle_to_checkpoint(bundle_, config_echo, iteration_));
            }
        }
        rows.push_back(row);
    }
    save_checkpoint(out_dir / "ckpt_final.bin",
                    bundle_to_checkpoint(bundle_, config_echo, iteration_));
    if (best < 0.0)
        save_checkpoint(out_dir / "ckpt_best.bin",
                        bundle_to_checkpoint(bundle_, config_echo, iteration_));
    write_metrics_csv(out_dir / "metrics.csv", rows);
    return rows;
}

void write_metrics_csv(const std::filesystem::path& file,
                       const std::vector<TrainMetricsRow>& rows) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write metrics: " + file.string());
    out << "iter,bc_loss,vq_loss,total_loss,mi_bits,perplexity,probe_success,lr_policy,"
           "wall_ms\n";
    char buf[352];
    for (const auto& r : rows) {
        std::string probe = r.probe_success ? [&] {
            char p[48];
            snprintf(p, sizeof p, "%.9g", *r.probe_success);
            return std::string(p);
        }() : std::string();
        snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%s,%.9g,%.3f\n",
                 static_cast<long long>(r.iter), r.bc_loss, r.vq_loss, r.total_loss,
                 r.mi_bits, r.perplexity, probe.c_str(), r.lr_policy, r.wall_ms);
        out << buf;
    }
}

std::vector<TrainMetricsRow> read_metrics_csv(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read metrics: " + file.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty metrics file");
    std::vector<TrainMetricsRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() < 9) throw std::runtime_error("bad metrics row: " + line);
        TrainMetricsRow r;
        r.iter = std::stoll(fields[0]);
        r.bc_loss = std::stod(fields[1]);
        r.vq_loss = std::stod(fields[2]);
        r.total_loss = std::stod(fields[3]);
        r.mi_bits = std::stod(fields[4]);
        r.perplexity = std::stod(fields[5]);
        if (!fields[6].empty()) r.probe_success = std::stod(fields[6]);
        r.lr_policy = std::stod(fields[7]);
        r.wall_ms = std::stod(fields[8]);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace lisa
