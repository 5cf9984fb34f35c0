#pragma once

// Experiment runner: configuration documents, content-addressed run directories, the run log,
// and one function per CLI command. Every artifact except runs.jsonl is a pure function of
// the resolved configuration.

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ivae/causal.hpp"
#include "ivae/datagen.hpp"
#include "ivae/errors.hpp"
#include "ivae/eval.hpp"
#include "ivae/model.hpp"

namespace ivae {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

struct EvalOptions {
    CorrelationKind correlation = CorrelationKind::pearson;
    bool use_samples = false;  // MCC on one posterior sample per row instead of the posterior mean
    bool affine_alignment = true;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalOptions, correlation, use_samples, affine_alignment)

// Empty lists fall back to the single value in the data / model sections.
struct SweepGrid {
    std::vector<std::size_t> latent_dims;
    std::vector<std::size_t> segments;
    std::vector<std::uint64_t> seeds;
    std::vector<VariantSpec> variants;
    std::vector<double> betas;  // expands every beta_vae / beta_tc_vae entry of `variants`
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SweepGrid, latent_dims, segments, seeds, variants, betas)

struct CausalOptions {
    std::size_t repetitions = 20;
    HsicConfig hsic;
    bool alternate_direction = false;  // swap x columns on odd repetitions, flipping the true direction
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CausalOptions, repetitions, hsic, alternate_direction)

struct ExperimentConfig {
    int schema_version = kSchemaVersion;
    std::string command;
    std::uint64_t seed = 0;  // overrides the seed fields of data, model and train
    GenConfig data;
    ModelConfig model;
    TrainConfig train;
    EvalOptions eval;
    SweepGrid sweep;
    CausalOptions causal;
    std::string dataset;     // stem of an existing dataset; empty generates one from `data`
    std::string checkpoint;  // stem of a checkpoint (eval)
    std::string output_dir;  // used when neither --out nor IVAE_LAB_OUT is given
    std::size_t parallel = 1;

    void validate() const {
        if (schema_version != kSchemaVersion)
            throw ConfigError("config: schema_version " + std::to_string(schema_version) + " is not supported (expected " +
                              std::to_string(kSchemaVersion) + ")");
        data.validate();
        model.validate();
        train.schedule.validate();
        if (parallel < 1) throw ConfigError("config: parallel must be >= 1");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, schema_version, command, seed, data, model, train,
                                                eval, sweep, causal, dataset, checkpoint, output_dir, parallel)

// ---- parsing ------------------------------------------------------------------------------

namespace detail {

// `given` must be reproduced by parse-then-serialize: catches unknown keys, unknown enum
// strings (which the enum macros would otherwise map silently) and out-of-range integers.
inline void strict_match(const json& given, const json& parsed, const std::string& path) {
    if (given.is_object()) {
        if (!parsed.is_object()) throw ConfigError("config: '" + path + "' must be an object");
        for (const auto& [k, v] : given.items()) {
            const std::string p = path.empty() ? k : path + "." + k;
            if (!parsed.contains(k)) throw ConfigError("config: unknown key '" + p + "'");
            strict_match(v, parsed.at(k), p);
        }
    } else if (given.is_array()) {
        if (!parsed.is_array() || parsed.size() != given.size()) throw ConfigError("config: '" + path + "' malformed");
        for (std::size_t i = 0; i < given.size(); ++i) strict_match(given[i], parsed[i], path + "[" + std::to_string(i) + "]");
    } else if (given.is_string()) {
        if (given != parsed) throw ConfigError("config: invalid value " + given.dump() + " for '" + path + "'");
    } else if (given.is_number()) {
        const double a = given.get<double>(), b = parsed.is_number() ? parsed.get<double>() : std::nan("");
        if (!(std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a))))
            throw ConfigError("config: value " + given.dump() + " for '" + path + "' is out of range");
    }
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
    if (!j.is_object()) throw ConfigError("config: document must be a JSON object");
    ExperimentConfig cfg;
    try {
        cfg = j.get<ExperimentConfig>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    detail::strict_match(j, json(cfg), "");
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return parse_config(j);
}

// Seeds of the sections follow the global seed.
inline ExperimentConfig resolved(ExperimentConfig cfg) {
    cfg.data.seed = cfg.seed;
    cfg.model.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    cfg.causal.hsic.seed = cfg.seed;
    return cfg;
}

// Hash over everything that determines artifacts (not where they go or how many workers).
inline std::string config_hash(const ExperimentConfig& cfg) {
    json j = cfg;
    j.erase("output_dir");
    j.erase("parallel");
    j["causal"]["hsic"].erase("threads");
    return hex64(fnv1a64(j.dump()));
}

// JSON Schema (draft 2020-12) derived from the defaults, with enum choices spelled out.
inline json config_schema() {
    const std::map<std::string, json> enums = {
        {"command", {"generate", "train", "eval", "sweep", "causal", "demo-2d"}},
        {"family", {"gaussian_mean_var", "gaussian_var", "laplace_scale", "gaussian_location"}},
        {"variant.kind", {"ivae", "vae", "beta_vae", "beta_tc_vae"}},
        {"schedule.kind", {"constant", "multiplicative_decay"}},
        {"likelihood", {"gaussian", "bernoulli"}},
        {"observation", {"gaussian", "bernoulli"}},
        {"baseline_prior", {"standard_normal", "standard_laplace"}},
        {"lambda_kind", {"lookup_table", "mlp"}},
        {"mixing_activation", {"leaky_relu", "smooth_leaky"}},
        {"variant", {"normal", "easy_classify", "causal_sem"}},
        {"correlation", {"pearson", "spearman"}},
    };
    // `key` is "parent.name" so that same-named fields of different sections stay distinct
    std::function<json(const json&, const std::string&)> walk = [&](const json& v, const std::string& key) -> json {
        const std::string name = key.substr(key.find('.') + 1);
        json s;
        if (v.is_object()) {
            s["type"] = "object";
            s["additionalProperties"] = false;
            for (const auto& [k, sub] : v.items()) s["properties"][k] = walk(sub, name + "." + k);
        } else if (v.is_array()) {
            s["type"] = "array";
            if (name == "variants") s["items"] = walk(json(VariantSpec{}), "variant");
            else if (name == "betas") s["items"] = {{"type", "number"}};
            else s["items"] = {{"type", "integer"}, {"minimum", 0}};
        } else if (v.is_string()) {
            s["type"] = "string";
            auto it = enums.find(key);
            if (it == enums.end()) it = enums.find(name);
            if (it != enums.end()) s["enum"] = it->second;
        } else if (v.is_boolean()) {
            s["type"] = "boolean";
        } else if (v.is_number_unsigned()) {
            s["type"] = "integer";
            s["minimum"] = 0;
        } else if (v.is_number_integer()) {
            s["type"] = "integer";
        } else {
            s["type"] = "number";
        }
        if (!v.is_object() && !v.is_array()) s["default"] = v;
        return s;
    };
    json schema = walk(json(ExperimentConfig{}), "");
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema";
    schema["title"] = "ivae-lab experiment configuration";
    schema["properties"]["schema_version"]["const"] = kSchemaVersion;
    schema["properties"]["command"]["enum"] = enums.at("command");
    return schema;
}

// ---- run log ------------------------------------------------------------------------------

inline fs::path output_root(const std::string& out_flag, const ExperimentConfig& cfg) {
    if (!out_flag.empty()) return out_flag;
    if (const char* env = std::getenv("IVAE_LAB_OUT"); env && *env) return env;
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    return "ivae-runs";
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto us = std::chrono::duration_cast<std::chrono::microseconds>(now.time_since_epoch()).count() % 1000000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%06ldZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<long>(us));
    return buf;
}

struct RunRecord {
    std::string run_id;
    std::string config_hash;
    std::string command;
    std::string started;
    std::string finished;
    json metrics = json::object();
    std::vector<std::string> artifacts;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunRecord, run_id, config_hash, command, started, finished, metrics,
                                                artifacts)

// Append-only JSON-lines log at <root>/runs.jsonl; ids are unique within the log.
class RunLog {
public:
    explicit RunLog(fs::path root) : path_(std::move(root) / "runs.jsonl") {}

    std::string append(RunRecord rec) {
        std::lock_guard<std::mutex> lock(mutex());
        std::set<std::string> ids;
        if (std::ifstream is(path_); is) {
            std::string line;
            while (std::getline(is, line))
                if (!line.empty()) ids.insert(json::parse(line).value("run_id", ""));
        }
        std::size_t k = ids.size();
        do rec.run_id = rec.config_hash + "-" + std::to_string(k++);
        while (ids.count(rec.run_id));
        fs::create_directories(path_.parent_path());
        std::ofstream os(path_, std::ios::app);
        if (!os) throw std::runtime_error("run log: cannot open " + path_.string());
        os << json(rec).dump() << '\n';
        return rec.run_id;
    }

    std::vector<RunRecord> read() const {
        std::vector<RunRecord> out;
        std::ifstream is(path_);
        std::string line;
        while (std::getline(is, line))
            if (!line.empty()) out.push_back(json::parse(line).get<RunRecord>());
        return out;
    }

    const fs::path& path() const { return path_; }

private:
    static std::mutex& mutex() {
        static std::mutex m;
        return m;
    }
    fs::path path_;
};

// ---- shared helpers -----------------------------------------------------------------------

inline void write_json(const fs::path& p, const json& j) {
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << j.dump(2) << '\n';
}

inline std::string csv_num(double v) {
    if (!std::isfinite(v)) return "";
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

inline Dataset obtain_dataset(const ExperimentConfig& cfg, const fs::path& run_dir, std::vector<std::string>& artifacts) {
    if (!cfg.dataset.empty()) return load_dataset(cfg.dataset);
    Dataset ds = generate_dataset(cfg.data);
    save_dataset(run_dir / "dataset", ds);
    artifacts.push_back((run_dir / "dataset.json").string());
    return ds;
}

struct Metrics {
    double elbo = std::nan("");
    double elbo_se = std::nan("");
    double mcc = std::nan("");
    double r2 = std::nan("");
    double r2_conditioning = std::nan("");  // smallest / largest singular value of A
    std::optional<EvalReport> report;
};

inline json to_json(const Metrics& m) {
    json j = {{"elbo", m.elbo}, {"elbo_se", m.elbo_se}};
    j["mcc"] = std::isfinite(m.mcc) ? json(m.mcc) : json(nullptr);
    j["r2"] = std::isfinite(m.r2) ? json(m.r2) : json(nullptr);
    j["alignment_conditioning"] = std::isfinite(m.r2_conditioning) ? json(m.r2_conditioning) : json(nullptr);
    return j;
}

// ELBO on the full data; MCC and sufficient-statistic alignment when latent and source
// dimensions agree.
inline Metrics evaluate_model(const Model& m, const Dataset& ds, const EvalOptions& opt, std::uint64_t seed) {
    Metrics out;
    ElboOptions eo;
    eo.dataset_size = ds.size();
    const auto est = evaluate_elbo(m, ds.x, ds.u, derive_seed(seed, 0xE1B0), eo);
    out.elbo = est.mean;
    out.elbo_se = est.standard_error;
    if (m.latent_dim() != ds.config.n) return out;
    const auto ps = posterior_stats(m, ds.x, ds.u, derive_seed(seed, 0x5A));
    const Tensor& zh = opt.use_samples ? ps.sample : ps.mean;
    EvalReport rep = mcc(to_matrix(ds.z_star), to_matrix(zh), opt.correlation);
    if (opt.use_samples) rep.notes.push_back("estimates are single posterior samples");
    out.mcc = rep.mcc;
    if (opt.affine_alignment) {
        const ExpFamilySpec spec{ds.config.family, ds.config.n};
        NoGradGuard no_grad;
        try {
            const auto al = affine_align(to_matrix(sufficient_stats(spec, ds.z_star)), to_matrix(sufficient_stats(spec, zh)));
            out.r2 = al.mean_r2;
            out.r2_conditioning = al.largest_singular > 0 ? al.smallest_singular / al.largest_singular : 0.0;
            rep.alignment_r2 = al.mean_r2;
            if (al.ridge_used) rep.notes.push_back("alignment used the ridge fallback");
        } catch (const DomainError& e) {
            rep.notes.push_back(e.what());
        }
    }
    out.report = std::move(rep);
    return out;
}

inline void write_latents_csv(const fs::path& p, const Dataset& ds, const Tensor& z, const std::string& prefix) {
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << "segment";
    for (std::size_t i = 0; i < z.cols(); ++i) os << ',' << prefix << i + 1;
    os << '\n';
    os.precision(10);
    for (std::size_t r = 0; r < z.rows(); ++r) {
        os << ds.segment[r];
        for (std::size_t i = 0; i < z.cols(); ++i) os << ',' << z.at(r, i);
        os << '\n';
    }
}

struct CommandResult {
    fs::path run_dir;
    json summary;  // printed as one JSON line on stdout
};

inline fs::path make_run_dir(const fs::path& root, const ExperimentConfig& cfg, const std::string& command) {
    const fs::path dir = root / (command + "-" + config_hash(cfg));
    fs::create_directories(dir);
    json c = cfg;
    c["command"] = command;
    write_json(dir / "config.json", c);
    return dir;
}

inline void log_run(const fs::path& root, const ExperimentConfig& cfg, const std::string& command,
                    const std::string& started, json metrics, std::vector<std::string> artifacts) {
    RunRecord rec;
    rec.config_hash = config_hash(cfg);
    rec.command = command;
    rec.started = started;
    rec.finished = utc_timestamp();
    rec.metrics = std::move(metrics);
    rec.artifacts = std::move(artifacts);
    RunLog(root).append(std::move(rec));
}

// ---- commands -----------------------------------------------------------------------------

inline CommandResult cmd_generate(const ExperimentConfig& in, const fs::path& root) {
    const auto started = utc_timestamp();
    const ExperimentConfig cfg = resolved(in);
    const fs::path dir = make_run_dir(root, cfg, "generate");
    const Dataset ds = generate_dataset(cfg.data);
    const std::string sum = save_dataset(dir / "dataset", ds);
    export_csv(dir / "dataset.csv", ds);
    std::vector<std::string> art = {(dir / "dataset.json").string(), (dir / "dataset.bin").string(),
                                    (dir / "dataset.csv").string()};
    log_run(root, cfg, "generate", started, {{"checksum", sum}}, art);
    return {dir, {{"command", "generate"}, {"run_dir", dir.string()}, {"checksum", sum}, {"N", ds.size()}}};
}

// Trains with a checkpoint after every epoch; rerunning the same config resumes from it.
inline CommandResult cmd_train(const ExperimentConfig& in, const fs::path& root) {
    const auto started = utc_timestamp();
    const ExperimentConfig cfg = resolved(in);
    const fs::path dir = make_run_dir(root, cfg, "train");
    std::vector<std::string> art;
    const Dataset ds = obtain_dataset(cfg, dir, art);
    const std::string hash = config_hash(cfg);
    const fs::path stem = dir / "model";

    Model model;
    TrainState state;
    std::vector<std::pair<double, double>> trace;  // (elbo, lr) per epoch
    bool resumed = false;
    if (fs::exists(stem.string() + ".json")) {
        LoadedModel lm = load_model(stem);
        if (lm.meta.at("extra").value("config_hash", "") == hash) {
            model = std::move(lm.model);
            state = std::move(lm.state);
            for (const auto& row : lm.meta.at("extra").at("trace")) trace.emplace_back(row[0].get<double>(), row[1].get<double>());
            resumed = true;
        }
    }
    if (!resumed) model = make_model(cfg.model, ds.config.d, ds.config.M);
    if (model.obs_dim != ds.config.d || model.aux_dim != ds.config.M)
        throw ConfigError("train: model dimensions do not match the dataset");

    auto write_trace = [&] {
        std::ofstream os(dir / "trace.csv");
        os << "epoch,elbo,lr\n";
        os.precision(12);
        for (std::size_t e = 0; e < trace.size(); ++e) os << e << ',' << trace[e].first << ',' << trace[e].second << '\n';
    };
    auto checkpoint = [&] {
        json tr = json::array();
        for (auto [e, lr] : trace) tr.push_back({e, lr});
        save_model(stem, model, state, {{"config_hash", hash}, {"trace", tr}, {"dataset_checksum", dataset_checksum(ds)}});
    };
    if (state.epochs_done < cfg.train.epochs) {
        TrainConfig tc = cfg.train;
        tc.epochs = cfg.train.epochs - state.epochs_done;
        train(model, ds.x, ds.u, tc, state, [&](std::size_t, double elbo) {
            trace.emplace_back(elbo, state.adam.lr);
            checkpoint();
            write_trace();
        });
    } else if (!resumed) {
        checkpoint();
    }
    write_trace();

    const Metrics met = evaluate_model(model, ds, cfg.eval, cfg.seed);
    json metrics = to_json(met);
    metrics["epochs"] = state.epochs_done;
    metrics["final_train_elbo"] = trace.empty() ? json(nullptr) : json(trace.back().first);
    metrics["uses_aux"] = model.config.variant.uses_aux();
    metrics["variant"] = variant_label(model.config.variant);
    metrics["resumed"] = resumed;
    json stored = metrics;
    stored.erase("resumed");
    write_json(dir / "metrics.json", stored);
    art.insert(art.end(), {(stem.string() + ".json"), (stem.string() + ".bin"), (dir / "trace.csv").string(),
                           (dir / "metrics.json").string()});
    log_run(root, cfg, "train", started, metrics, art);
    metrics["command"] = "train";
    metrics["run_dir"] = dir.string();
    return {dir, metrics};
}

inline CommandResult cmd_eval(const ExperimentConfig& in, const fs::path& root) {
    const auto started = utc_timestamp();
    const ExperimentConfig cfg = resolved(in);
    if (cfg.checkpoint.empty()) throw ConfigError("eval: 'checkpoint' must name a checkpoint stem");
    if (cfg.dataset.empty()) throw ConfigError("eval: 'dataset' must name a dataset stem");
    const LoadedModel lm = load_model(cfg.checkpoint);
    const Dataset ds = load_dataset(cfg.dataset);
    if (lm.model.obs_dim != ds.config.d || lm.model.aux_dim != ds.config.M)
        throw ConfigError("eval: checkpoint expects d=" + std::to_string(lm.model.obs_dim) + ", M=" +
                          std::to_string(lm.model.aux_dim) + " but the dataset has d=" + std::to_string(ds.config.d) +
                          ", M=" + std::to_string(ds.config.M));
    if (lm.model.latent_dim() != ds.config.n)
        throw ConfigError("eval: checkpoint latent dimension " + std::to_string(lm.model.latent_dim()) +
                          " differs from the dataset's source dimension " + std::to_string(ds.config.n));
    const fs::path dir = make_run_dir(root, cfg, "eval");
    const Metrics met = evaluate_model(lm.model, ds, cfg.eval, cfg.seed);
    json report = to_json(*met.report);
    report["elbo"] = met.elbo;
    report["elbo_se"] = met.elbo_se;
    report["variant"] = variant_label(lm.model.config.variant);
    report["checkpoint"] = cfg.checkpoint;
    report["dataset"] = cfg.dataset;
    write_json(dir / "report.json", report);
    std::ostringstream row;
    row << variant_label(lm.model.config.variant) << ',' << csv_num(met.elbo) << ',' << csv_num(met.mcc) << ','
        << csv_num(met.r2) << ',' << json(cfg.eval.correlation).get<std::string>();
    {
        std::ofstream os(dir / "summary.csv");
        os << "variant,elbo,mcc,r2,correlation\n" << row.str() << '\n';
    }
    log_run(root, cfg, "eval", started, to_json(met), {(dir / "report.json").string(), (dir / "summary.csv").string()});
    json s = to_json(met);
    s["command"] = "eval";
    s["run_dir"] = dir.string();
    s["summary_row"] = row.str();
    return {dir, s};
}

// ---- sweep --------------------------------------------------------------------------------

struct SweepCell {
    std::size_t index = 0;
    std::size_t M = 0;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    VariantSpec variant;
};

inline std::vector<SweepCell> sweep_cells(const ExperimentConfig& cfg) {
    const auto& g = cfg.sweep;
    std::vector<std::size_t> Ms = g.segments.empty() ? std::vector<std::size_t>{cfg.data.M} : g.segments;
    std::vector<std::size_t> ns = g.latent_dims.empty() ? std::vector<std::size_t>{cfg.model.latent_dim} : g.latent_dims;
    std::vector<std::uint64_t> seeds = g.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : g.seeds;
    std::vector<VariantSpec> variants;
    for (const auto& v : g.variants.empty() ? std::vector<VariantSpec>{cfg.model.variant} : g.variants) {
        const bool weighted = v.kind == Variant::beta_vae || v.kind == Variant::beta_tc_vae;
        if (weighted && !g.betas.empty()) {
            for (double b : g.betas) {
                VariantSpec w = v;
                w.beta = b;
                variants.push_back(w);
            }
        } else {
            variants.push_back(v);
        }
    }
    std::vector<SweepCell> cells;
    for (auto M : Ms)
        for (auto n : ns)
            for (auto s : seeds)
                for (const auto& v : variants) cells.push_back({cells.size(), M, n, s, v});
    return cells;
}

struct CellResult {
    SweepCell cell;
    Metrics metrics;
    double final_train_elbo = std::nan("");
    std::string dir;
};

// Runs `count` independent jobs on up to `workers` threads; job i writes only slot i.
inline void run_parallel(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job) {
    workers = std::max<std::size_t>(1, std::min(workers, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(count);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < count;) {
                try {
                    job(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline CellResult run_cell(const ExperimentConfig& base, const SweepCell& cell, const fs::path& cells_dir) {
    ExperimentConfig cfg = base;
    cfg.seed = cell.seed;
    cfg.data.M = cell.M;
    cfg.model.latent_dim = cell.n;
    cfg.model.variant = cell.variant;
    cfg.sweep = {};
    cfg = resolved(cfg);
    const fs::path dir = cells_dir / config_hash(cfg);
    fs::create_directories(dir);
    json c = cfg;
    c["command"] = "train";
    write_json(dir / "config.json", c);
    const Dataset ds = cfg.dataset.empty() ? generate_dataset(cfg.data) : load_dataset(cfg.dataset);
    Model m = make_model(cfg.model, ds.config.d, ds.config.M);
    TrainState st;
    auto tr = train(m, ds.x, ds.u, cfg.train, st);
    save_model(dir / "model", m, st, {{"config_hash", config_hash(cfg)}});
    CellResult r;
    r.cell = cell;
    r.metrics = evaluate_model(m, ds, cfg.eval, cfg.seed);
    r.final_train_elbo = tr.elbo_trace.empty() ? std::nan("") : tr.elbo_trace.back();
    r.dir = dir.string();
    write_json(dir / "metrics.json", to_json(r.metrics));
    return r;
}

inline CommandResult cmd_sweep(const ExperimentConfig& in, const fs::path& root, std::size_t parallel) {
    const auto started = utc_timestamp();
    const ExperimentConfig cfg = resolved(in);
    const fs::path dir = make_run_dir(root, cfg, "sweep");
    const auto cells = sweep_cells(cfg);
    std::vector<CellResult> results(cells.size());
    run_parallel(cells.size(), parallel, [&](std::size_t i) { results[i] = run_cell(cfg, cells[i], dir / "cells"); });

    {
        std::ofstream os(dir / "results.csv");
        os << "cell,M,n,seed,variant,beta,final_train_elbo,elbo,elbo_se,mcc,r2,dir\n";
        for (const auto& r : results) {
            const auto& v = r.cell.variant;
            os << r.cell.index << ',' << r.cell.M << ',' << r.cell.n << ',' << r.cell.seed << ','
               << json(v.kind).get<std::string>() << ',' << csv_num(v.beta) << ',' << csv_num(r.final_train_elbo) << ','
               << csv_num(r.metrics.elbo) << ',' << csv_num(r.metrics.elbo_se) << ',' << csv_num(r.metrics.mcc) << ','
               << csv_num(r.metrics.r2) << ',' << fs::relative(r.dir, dir).string() << '\n';
        }
    }
    {
        std::ofstream os(dir / "elbo_vs_mcc.csv");
        os << "variant,n,seed,elbo,mcc\n";
        for (const auto& r : results)
            if (std::isfinite(r.metrics.mcc))
                os << variant_label(r.cell.variant) << ',' << r.cell.n << ',' << r.cell.seed << ','
                   << csv_num(r.metrics.elbo) << ',' << csv_num(r.metrics.mcc) << '\n';
    }
    json summary = {{"command", "sweep"}, {"run_dir", dir.string()}, {"cells", results.size()}};
    std::vector<std::string> art = {(dir / "results.csv").string(), (dir / "elbo_vs_mcc.csv").string()};

    // dimension selection over the latent-dimension axis (ivae cells, ELBO averaged over the rest)
    std::map<int, std::pair<double, int>> acc;
    for (const auto& r : results)
        if (r.cell.variant.kind == Variant::ivae) {
            auto& a = acc[static_cast<int>(r.cell.n)];
            a.first += r.metrics.elbo;
            a.second += 1;
        }
    if (acc.size() >= 4) {
        std::map<int, double> curve;
        for (auto [n, a] : acc) curve[n] = a.first / a.second;
        const KneeResult k = select_dimension(curve);
        json kj = {{"status", k.status == KneeStatus::ok ? "ok" : "no_knee"},
                   {"knee", k.knee ? json(*k.knee) : json(nullptr)},
                   {"elbo_by_n", curve},
                   {"smoothed", k.smoothed},
                   {"curvature", k.curvature}};
        write_json(dir / "knee.json", kj);
        art.push_back((dir / "knee.json").string());
        summary["knee"] = kj["knee"];
    }
    log_run(root, cfg, "sweep", started, summary, art);
    return {dir, summary};
}

// ---- causal -------------------------------------------------------------------------------

inline Verdict true_direction(DataVariant v, bool swapped) {
    // causal_sem: x2 reads both disturbances; easy_classify: x2 is the second source itself
    const Verdict base = v == DataVariant::easy_classify ? Verdict::x2_causes_x1 : Verdict::x1_causes_x2;
    if (!swapped) return base;
    return base == Verdict::x1_causes_x2 ? Verdict::x2_causes_x1 : Verdict::x1_causes_x2;
}

struct CausalRep {
    CausalDecision decision;
    Verdict truth = Verdict::none;
    double disturbance_mcc = 0.0;
};

inline CausalRep run_causal_rep(const ExperimentConfig& cfg, std::size_t r) {
    GenConfig g = cfg.data;
    if (g.variant == DataVariant::normal) g.variant = DataVariant::causal_sem;
    g.seed = derive_seed(cfg.seed, r);
    Dataset ds = generate_dataset(g);
    ModelConfig mc = cfg.model;
    mc.seed = g.seed;
    mc.family = g.family;
    TrainConfig tc = cfg.train;
    tc.seed = g.seed;
    Matrix n_hat;
    if (g.variant == DataVariant::causal_sem) {
        n_hat = recover_disturbances(ds, mc, tc).n_hat;
    } else {
        mc.latent_dim = 2;
        mc.variant = {};
        Model m = make_model(mc, 2, g.M);
        train(m, ds.x, ds.u, tc);
        n_hat = to_matrix(posterior_stats(m, ds.x, ds.u).mean);
    }
    Matrix x = to_matrix(ds.x);
    const bool swapped = cfg.causal.alternate_direction && r % 2 == 1;
    if (swapped) x.col(0).swap(x.col(1));
    HsicConfig h = cfg.causal.hsic;
    h.seed = derive_seed(g.seed, 0x751C);
    CausalRep rep;
    rep.decision = decide_direction(x, n_hat, h);
    rep.truth = true_direction(g.variant, swapped);
    rep.disturbance_mcc = mcc(to_matrix(ds.z_star), n_hat).mcc;
    return rep;
}

inline CommandResult cmd_causal(const ExperimentConfig& in, const fs::path& root, std::size_t parallel) {
    const auto started = utc_timestamp();
    const ExperimentConfig cfg = resolved(in);
    if (cfg.causal.repetitions < 1) throw ConfigError("causal: repetitions must be >= 1");
    cfg.causal.hsic.validate();
    {
        GenConfig g = cfg.data;
        if (g.variant == DataVariant::normal) g.variant = DataVariant::causal_sem;
        g.validate();
    }
    const fs::path dir = make_run_dir(root, cfg, "causal");
    std::vector<CausalRep> reps(cfg.causal.repetitions);
    run_parallel(reps.size(), parallel, [&](std::size_t r) { reps[r] = run_causal_rep(cfg, r); });

    std::size_t correct = 0, wrong = 0, none = 0;
    {
        std::ofstream os(dir / "decisions.jsonl");
        for (std::size_t r = 0; r < reps.size(); ++r) {
            const auto& rep = reps[r];
            json j = to_json(rep.decision);
            j["repetition"] = r;
            j["truth"] = rep.truth;
            j["disturbance_mcc"] = rep.disturbance_mcc;
            os << j.dump() << '\n';
            if (rep.decision.verdict == Verdict::none) ++none;
            else if (rep.decision.verdict == rep.truth) ++correct;
            else ++wrong;
        }
    }
    const double R = static_cast<double>(reps.size());
    json agg = {{"repetitions", reps.size()},
                {"correct", correct},
                {"wrong", wrong},
                {"none", none},
                {"correct_rate", correct / R},
                {"wrong_rate", wrong / R},
                {"alpha", cfg.causal.hsic.alpha},
                {"num_perms", cfg.causal.hsic.num_perms},
                {"thresholds_note", "acceptance thresholds (>= 70% correct, <= 10% wrong) are project choices"}};
    write_json(dir / "aggregate.json", agg);
    log_run(root, cfg, "causal", started, agg, {(dir / "decisions.jsonl").string(), (dir / "aggregate.json").string()});
    agg["command"] = "causal";
    agg["run_dir"] = dir.string();
    return {dir, agg};
}

// ---- 2-D demo -----------------------------------------------------------------------------

// Figure-style data for n = d = 2: sources and observations by segment, and posterior means of
// an iVAE and a VAE trained on the same data.
inline CommandResult cmd_demo_2d(const ExperimentConfig& in, const fs::path& root) {
    const auto started = utc_timestamp();
    ExperimentConfig cfg = resolved(in);
    if (cfg.data.n != 2 || cfg.data.d != 2) throw ConfigError("demo-2d: needs n = d = 2");
    const fs::path dir = make_run_dir(root, cfg, "demo-2d");
    const Dataset ds = generate_dataset(cfg.data);
    save_dataset(dir / "dataset", ds);
    write_latents_csv(dir / "sources.csv", ds, ds.z_star, "z");
    write_latents_csv(dir / "observations.csv", ds, ds.x, "x");
    json summary = {{"command", "demo-2d"}, {"run_dir", dir.string()}};
    std::vector<std::string> art = {(dir / "sources.csv").string(), (dir / "observations.csv").string()};
    for (Variant v : {Variant::ivae, Variant::vae}) {
        ModelConfig mc = cfg.model;
        mc.latent_dim = 2;
        mc.family = cfg.data.family;
        mc.variant = {};
        mc.variant.kind = v;
        Model m = make_model(mc, 2, cfg.data.M);
        TrainState st;
        train(m, ds.x, ds.u, cfg.train, st);
        const std::string name = v == Variant::ivae ? "ivae" : "vae";
        save_model(dir / ("model_" + name), m, st);
        const Metrics met = evaluate_model(m, ds, cfg.eval, cfg.seed);
        const auto ps = posterior_stats(m, ds.x, ds.u, derive_seed(cfg.seed, 0x5A));
        write_latents_csv(dir / ("latents_" + name + ".csv"), ds, cfg.eval.use_samples ? ps.sample : ps.mean, "z");
        art.push_back((dir / ("latents_" + name + ".csv")).string());
        summary[name] = to_json(met);
    }
    write_json(dir / "summary.json", summary);
    log_run(root, cfg, "demo-2d", started, summary, art);
    return {dir, summary};
}

inline CommandResult run_command(const std::string& command, ExperimentConfig cfg, const fs::path& root,
                                 std::size_t parallel) {
    if (command == "generate") return cmd_generate(cfg, root);
    if (command == "train") return cmd_train(cfg, root);
    if (command == "eval") return cmd_eval(cfg, root);
    if (command == "sweep") return cmd_sweep(cfg, root, parallel);
    if (command == "causal") return cmd_causal(cfg, root, parallel);
    if (command == "demo-2d") return cmd_demo_2d(cfg, root);
    throw ConfigError("unknown command '" + command + "'");
}

}  // namespace ivae
