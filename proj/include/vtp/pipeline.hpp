// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vtp/attention.hpp"
#include "vtp/common.hpp"
#include "vtp/gapnet.hpp"
#include "vtp/pruning.hpp"
#include "vtp/rng.hpp"
#include "vtp/scenesim.hpp"
#include "vtp/search.hpp"
#include "vtp/stats.hpp"

namespace vtp {

inline constexpr int kPipelineSchemaVersion = 1;

// --- Run configuration ---------------------------------------------------------

struct RunPaths {
    std::string dataset_dir = "data";
    std::string checkpoint_dir = "checkpoints";
    std::string report_dir = "reports";

    void validate() const {
        require(!dataset_dir.empty() && !checkpoint_dir.empty() && !report_dir.empty(),
                "run config: paths must be non-empty");
        require(dataset_dir != checkpoint_dir && dataset_dir != report_dir &&
                    checkpoint_dir != report_dir,
                "run config: paths must be pairwise distinct");
    }
};

struct ScenePool {
    int n_min = 8;
    int n_max = 24;
    SceneDims dims;
    int train_count = 2000;
    int val_count = 200;
    int test_count = 200;
    double noise_sigma = 0.25;   // teacher logit jitter
    double plant_focus = 6.0;    // softmax gain turning affinities into the plant
    double plant_gain = 4.0;     // kappa: plant strength inside the teacher stack
    int teacher_layers = 8;
    int teacher_heads = 4;

    void validate() const {
        require(n_min >= 1 && n_min <= n_max, "scene pool: need 1 <= n_min <= n_max");
        dims.validate();
        require(train_count >= 1 && val_count >= 1 && test_count >= 1,
                "scene pool: every split needs at least one sample");
        require(noise_sigma >= 0.0, "scene pool: noise_sigma must be non-negative");
        require(plant_focus > 0.0, "scene pool: plant_focus must be positive");
        require(plant_gain > 0.0, "scene pool: plant_gain must be positive");
        require(teacher_layers >= 1 && teacher_heads >= 1,
                "scene pool: teacher shape must be positive");
    }
};

// Cost-model dimensions of the (synthetic) target model; the per-sample token
// counts are filled in from each scene.
struct CostDims {
    int depth = 8;
    double d_model = 1024.0;
    double d_ff = 4096.0;

    void validate() const {
        require(depth >= 1 && d_model > 0.0 && d_ff > 0.0,
                "cost dims: all dimensions must be positive");
    }
};

struct EvalConfig {
    std::vector<double> budgets{1.0, 0.65, 0.35, 0.10};
    int recall_k = 10;

    void validate() const {
        require(!budgets.empty(), "eval config: need at least one budget");
        for (double b : budgets)
            require(b > 0.0 && b <= 1.0, "eval config: budgets must lie in (0, 1]");
        require(recall_k >= 1, "eval config: recall_k must be positive");
    }
};

struct RunConfig {
    std::uint64_t seed = 7;
    RunPaths paths;
    ScenePool scene;
    GapConfig gap;
    CostDims flops;
    std::vector<int> baseline_counts{24, 16, 12, 8, 6, 4, 3, 2};
    SearchConfig search;
    EvalConfig eval;

    void validate() const {
        paths.validate();
        scene.validate();
        gap.validate();
        flops.validate();
        require(gap.hidden_dim == scene.dims.d && gap.d_p == scene.dims.d_p &&
                    gap.d_v == scene.dims.d_v,
                "run config: predictor widths must match scene dims");
        require(static_cast<int>(baseline_counts.size()) == flops.depth,
                "run config: one baseline count per model layer");
        for (int c : baseline_counts)
            require(c >= 1, "run config: baseline counts must be positive");
        search.validate();
        eval.validate();
    }
};

// The reference desk-scale run (mirrored by configs/desk.json): every field
// is the struct default except the bisection range, which must reach the
// keep-everything strategy (alpha_max * min_k theta0_k >= 1).
inline RunConfig desk_run_config() {
    RunConfig cfg;
    cfg.search.alpha_max = 32.0;
    return cfg;
}

inline nlohmann::json to_json(const RunConfig& c) {
    return nlohmann::json{
        {"schema_version", kPipelineSchemaVersion},
        {"seed", c.seed},
        {"paths",
         {{"dataset_dir", c.paths.dataset_dir},
          {"checkpoint_dir", c.paths.checkpoint_dir},
          {"report_dir", c.paths.report_dir}}},
        {"scene",
         {{"n_min", c.scene.n_min},
          {"n_max", c.scene.n_max},
          {"d", c.scene.dims.d},
          {"d_p", c.scene.dims.d_p},
          {"d_v", c.scene.dims.d_v},
          {"train_count", c.scene.train_count},
          {"val_count", c.scene.val_count},
          {"test_count", c.scene.test_count},
          {"noise_sigma", c.scene.noise_sigma},
          {"plant_focus", c.scene.plant_focus},
          {"plant_gain", c.scene.plant_gain},
          {"teacher_layers", c.scene.teacher_layers},
          {"teacher_heads", c.scene.teacher_heads}}},
        {"gap", to_json(c.gap)},
        {"flops", {{"depth", c.flops.depth}, {"d_model", c.flops.d_model}, {"d_ff", c.flops.d_ff}}},
        {"baseline_counts", c.baseline_counts},
        {"search",
         {{"epsilon", c.search.epsilon},
          {"alpha_min", c.search.alpha_min},
          {"alpha_max", c.search.alpha_max},
          {"max_iters", c.search.max_iters},
          {"min_retain", c.search.min_retain},
          {"monotone_depth", c.search.monotone_depth}}},
        {"eval", {{"budgets", c.eval.budgets}, {"recall_k", c.eval.recall_k}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        if (j.at("schema_version").get<int>() != kPipelineSchemaVersion)
            throw ConfigError("run config: unsupported schema version");
        c.seed = j.at("seed").get<std::uint64_t>();
        const nlohmann::json& p = j.at("paths");
        c.paths.dataset_dir = p.at("dataset_dir").get<std::string>();
        c.paths.checkpoint_dir = p.at("checkpoint_dir").get<std::string>();
        c.paths.report_dir = p.at("report_dir").get<std::string>();
        const nlohmann::json& s = j.at("scene");
        c.scene.n_min = s.at("n_min").get<int>();
        c.scene.n_max = s.at("n_max").get<int>();
        c.scene.dims.d = s.at("d").get<int>();
        c.scene.dims.d_p = s.at("d_p").get<int>();
        c.scene.dims.d_v = s.at("d_v").get<int>();
        c.scene.train_count = s.at("train_count").get<int>();
        c.scene.val_count = s.at("val_count").get<int>();
        c.scene.test_count = s.at("test_count").get<int>();
        c.scene.noise_sigma = s.at("noise_sigma").get<double>();
        c.scene.plant_focus = s.at("plant_focus").get<double>();
        c.scene.plant_gain = s.at("plant_gain").get<double>();
        c.scene.teacher_layers = s.at("teacher_layers").get<int>();
        c.scene.teacher_heads = s.at("teacher_heads").get<int>();
        c.gap = gap_config_from_json(j.at("gap"));
        const nlohmann::json& f = j.at("flops");
        c.flops.depth = f.at("depth").get<int>();
        c.flops.d_model = f.at("d_model").get<double>();
        c.flops.d_ff = f.at("d_ff").get<double>();
        c.baseline_counts = j.at("baseline_counts").get<std::vector<int>>();
        const nlohmann::json& q = j.at("search");
        c.search.epsilon = q.at("epsilon").get<double>();
        c.search.alpha_min = q.at("alpha_min").get<double>();
        c.search.alpha_max = q.at("alpha_max").get<double>();
        c.search.max_iters = q.at("max_iters").get<int>();
        c.search.min_retain = q.at("min_retain").get<int>();
        c.search.monotone_depth = q.at("monotone_depth").get<bool>();
        const nlohmann::json& e = j.at("eval");
        c.eval.budgets = e.at("budgets").get<std::vector<double>>();
        c.eval.recall_k = e.at("recall_k").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config: malformed JSON: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    } catch (const SchemaError& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

// Environment variables may override paths, and only paths; everything that
// affects numbers stays in the config file (and in its hash).
inline void apply_env_overrides(RunConfig& cfg) {
    if (const char* v = std::getenv("VTP_DATASET_DIR")) cfg.paths.dataset_dir = v;
    if (const char* v = std::getenv("VTP_CHECKPOINT_DIR")) cfg.paths.checkpoint_dir = v;
    if (const char* v = std::getenv("VTP_REPORT_DIR")) cfg.paths.report_dir = v;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config file: malformed JSON: ") + e.what());
    }
    RunConfig cfg = run_config_from_json(j);
    apply_env_overrides(cfg);
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

// Fingerprint of everything that affects produced numbers. Paths are
// excluded so artifacts can be relocated without invalidating them.
inline std::string config_hash(const RunConfig& cfg) {
    nlohmann::json j = to_json(cfg);
    j.erase("paths");
    return to_hex(fnv1a64(j.dump()));
}

inline FlopsModel flops_for(const CostDims& dims, int n_objects, int text_len) {
    FlopsModel fm;
    fm.depth = dims.depth;
    fm.d_model = dims.d_model;
    fm.d_ff = dims.d_ff;
    fm.n_objects = n_objects;
    fm.text_len = text_len;
    return fm;
}

// --- Artifact paths and IO helpers -----------------------------------------------

inline const std::vector<std::string>& split_names() {
    static const std::vector<std::string> names{"train", "val", "test"};
    return names;
}

inline int split_count(const RunConfig& cfg, const std::string& split) {
    if (split == "train") return cfg.scene.train_count;
    if (split == "val") return cfg.scene.val_count;
    if (split == "test") return cfg.scene.test_count;
    throw std::invalid_argument("unknown split: " + split);
}

inline std::string dataset_path(const RunConfig& cfg, const std::string& split) {
    return (std::filesystem::path(cfg.paths.dataset_dir) / (split + ".jsonl")).string();
}

inline std::string dataset_manifest_path(const RunConfig& cfg) {
    return (std::filesystem::path(cfg.paths.dataset_dir) / "dataset_manifest.json").string();
}

inline std::string oracle_path(const RunConfig& cfg, const std::string& split) {
    return (std::filesystem::path(cfg.paths.dataset_dir) / ("oracle_" + split + ".jsonl"))
        .string();
}

inline std::string oracle_manifest_path(const RunConfig& cfg) {
    return (std::filesystem::path(cfg.paths.dataset_dir) / "oracle_manifest.json").string();
}

inline std::string checkpoint_bin_path(const RunConfig& cfg) {
    return (std::filesystem::path(cfg.paths.checkpoint_dir) / "gap.bin").string();
}

inline std::string checkpoint_manifest_path(const RunConfig& cfg) {
    return (std::filesystem::path(cfg.paths.checkpoint_dir) / "gap.json").string();
}

inline std::string strategies_path(const RunConfig& cfg) {
    return (std::filesystem::path(cfg.paths.checkpoint_dir) / "strategies.json").string();
}

inline std::string loss_history_path(const RunConfig& cfg) {
    return (std::filesystem::path(cfg.paths.report_dir) / "loss_history.csv").string();
}

inline std::string extract_audit_path(const RunConfig& cfg, const std::string& split) {
    return (std::filesystem::path(cfg.paths.report_dir) / ("extract_audit_" + split + ".csv"))
        .string();
}

inline std::string search_trace_path(const RunConfig& cfg, double budget) {
    char tag[32];
    std::snprintf(tag, sizeof(tag), "%g", budget);
    return (std::filesystem::path(cfg.paths.report_dir) /
            ("search_trace_" + std::string(tag) + ".csv"))
        .string();
}

inline std::string eval_path(const RunConfig& cfg) {
    return (std::filesystem::path(cfg.paths.report_dir) / "eval.json").string();
}

inline std::string report_path(const RunConfig& cfg) {
    return (std::filesystem::path(cfg.paths.report_dir) / "report.csv").string();
}

namespace detail {

inline void write_text_file(const std::string& path, const std::string& content) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline nlohmann::json read_json_artifact(const std::string& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError(what + " not found: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(what + ": malformed JSON: " + e.what());
    }
    return j;
}

inline void require_artifact_hash(const nlohmann::json& j, const std::string& expect,
                                  const std::string& what) {
    std::string got;
    try {
        got = j.at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception&) {
        throw SchemaError(what + ": missing config hash");
    }
    if (got != expect)
        throw ConfigError(what + ": config hash mismatch (artifact " + got +
                          ", current config " + expect + ")");
}

inline std::uint64_t sample_seed(const RunConfig& cfg, int split_idx, int index) {
    return mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(split_idx) + 1),
                    static_cast<std::uint64_t>(index));
}

}  // namespace detail

// --- Dataset records ---------------------------------------------------------------

struct DatasetRecord {
    SceneSample sample;
    PlantedRelevance plant;
};

inline DatasetRecord make_record(const RunConfig& cfg, int split_idx, int index) {
    const std::uint64_t seed = detail::sample_seed(cfg, split_idx, index);
    Rng size_rng(mix_seed(seed, 0x57Eull));
    const int n = size_rng.uniform_int(cfg.scene.n_min, cfg.scene.n_max);
    DatasetRecord rec;
    rec.sample = generate_scene(n, cfg.scene.dims, seed);
    rec.plant = plant_for_scene(rec.sample, cfg.scene.plant_focus, cfg.scene.noise_sigma,
                                mix_seed(seed, 0x9Aull));
    return rec;
}

inline std::vector<DatasetRecord> load_dataset(const RunConfig& cfg, const std::string& split) {
    const std::string path = dataset_path(cfg, split);
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("dataset split not found: " + path);
    std::vector<DatasetRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("dataset line: malformed JSON: " + std::string(e.what()));
        }
        DatasetRecord rec;
        try {
            rec.sample = scene_sample_from_json(j.at("sample"));
            rec.plant = planted_relevance_from_json(j.at("plant"));
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("dataset line: malformed JSON: " + std::string(e.what()));
        }
        require(rec.plant.relevance.size() == rec.sample.n,
                "dataset line: plant length does not match scene");
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw MissingArtifactError("empty dataset split: " + path);
    return records;
}

inline std::vector<ImportanceMap> load_oracles(const RunConfig& cfg, const std::string& split) {
    const std::string path = oracle_path(cfg, split);
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("oracle split not found: " + path);
    std::vector<ImportanceMap> maps;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const nlohmann::json j = nlohmann::json::parse(line);
            maps.push_back(importance_map_from_json(j.at("oracle")));
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("oracle line: malformed JSON: " + std::string(e.what()));
        }
    }
    if (maps.empty()) throw MissingArtifactError("empty oracle split: " + path);
    return maps;
}

// --- Stage: gen ----------------------------------------------------------------------

inline void cmd_gen(const RunConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.paths.dataset_dir);
    int total = 0;
    for (std::size_t sidx = 0; sidx < split_names().size(); ++sidx) {
        const std::string& split = split_names()[sidx];
        const int count = split_count(cfg, split);
        std::string body;
        for (int i = 0; i < count; ++i) {
            const DatasetRecord rec = make_record(cfg, static_cast<int>(sidx), i);
            nlohmann::json line{{"sample", to_json(rec.sample)}, {"plant", to_json(rec.plant)}};
            body += line.dump();
            body += '\n';
        }
        detail::write_text_file(dataset_path(cfg, split), body);
        total += count;
    }
    const nlohmann::json manifest{{"schema_version", kPipelineSchemaVersion},
                                  {"config_hash", config_hash(cfg)},
                                  {"seed", cfg.seed},
                                  {"splits",
                                   {{"train", cfg.scene.train_count},
                                    {"val", cfg.scene.val_count},
                                    {"test", cfg.scene.test_count}}}};
    detail::write_text_file(dataset_manifest_path(cfg), manifest.dump(2) + "\n");
    std::cout << "gen: wrote " << total << " samples across " << split_names().size()
              << " splits under " << cfg.paths.dataset_dir << "\n";
}

// --- Stage: extract --------------------------------------------------------------------

inline void verify_dataset_manifest(const RunConfig& cfg) {
    const nlohmann::json manifest =
        detail::read_json_artifact(dataset_manifest_path(cfg), "dataset manifest");
    detail::require_artifact_hash(manifest, config_hash(cfg), "dataset manifest");
}

inline void cmd_extract(const RunConfig& cfg) {
    cfg.validate();
    verify_dataset_manifest(cfg);
    std::filesystem::create_directories(cfg.paths.report_dir);
    int total = 0;
    for (const std::string& split : split_names()) {
        const std::vector<DatasetRecord> records = load_dataset(cfg, split);
        std::string body;
        std::string audit = "index,spearman_oracle_vs_plant\n";
        char buf[96];
        for (std::size_t i = 0; i < records.size(); ++i) {
            const DatasetRecord& rec = records[i];
            const AttentionStack stack =
                planted_teacher_stack(rec.sample, rec.plant, cfg.scene.teacher_layers,
                                      cfg.scene.teacher_heads, cfg.scene.plant_gain);
            const ComponentScores comp = aggregate_components(stack);
            const ImportanceMap oracle = build_oracle(stack);
            const double rho = spearman(oracle.scores, rec.plant.relevance);
            nlohmann::json line{
                {"oracle", to_json(oracle)},
                {"components",
                 {{"self", std::vector<double>(comp.self.data(), comp.self.data() + comp.self.size())},
                  {"prompt",
                   std::vector<double>(comp.prompt.data(), comp.prompt.data() + comp.prompt.size())},
                  {"text", std::vector<double>(comp.text.data(), comp.text.data() + comp.text.size())}}},
                {"spearman_vs_plant", rho}};
            body += line.dump();
            body += '\n';
            std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, rho);
            audit += buf;
        }
        detail::write_text_file(oracle_path(cfg, split), body);
        detail::write_text_file(extract_audit_path(cfg, split), audit);
        total += static_cast<int>(records.size());
    }
    const nlohmann::json manifest{{"schema_version", kPipelineSchemaVersion},
                                  {"config_hash", config_hash(cfg)},
                                  {"splits",
                                   {{"train", cfg.scene.train_count},
                                    {"val", cfg.scene.val_count},
                                    {"test", cfg.scene.test_count}}}};
    detail::write_text_file(oracle_manifest_path(cfg), manifest.dump(2) + "\n");
    std::cout << "extract: wrote oracle maps for " << total << " samples under "
              << cfg.paths.dataset_dir << "\n";
}

inline void verify_oracle_manifest(const RunConfig& cfg) {
    const nlohmann::json manifest =
        detail::read_json_artifact(oracle_manifest_path(cfg), "oracle manifest");
    detail::require_artifact_hash(manifest, config_hash(cfg), "oracle manifest");
}

// --- Stage: train ---------------------------------------------------------------------

inline std::vector<SceneSample> scenes_of(const std::vector<DatasetRecord>& records) {
    std::vector<SceneSample> out;
    out.reserve(records.size());
    for (const DatasetRecord& r : records) out.push_back(r.sample);
    return out;
}

inline void cmd_train(const RunConfig& cfg) {
    cfg.validate();
    verify_dataset_manifest(cfg);
    verify_oracle_manifest(cfg);
    const std::vector<SceneSample> train_scenes = scenes_of(load_dataset(cfg, "train"));
    const std::vector<SceneSample> val_scenes = scenes_of(load_dataset(cfg, "val"));
    const std::vector<ImportanceMap> train_oracles = load_oracles(cfg, "train");
    const std::vector<ImportanceMap> val_oracles = load_oracles(cfg, "val");
    require(train_scenes.size() == train_oracles.size() &&
                val_scenes.size() == val_oracles.size(),
            "train: dataset and oracle counts disagree");

    const TrainResult result =
        train_gap(train_scenes, train_oracles, cfg.gap, &val_scenes, &val_oracles);

    std::filesystem::create_directories(cfg.paths.checkpoint_dir);
    std::filesystem::create_directories(cfg.paths.report_dir);
    const nlohmann::json extra{{"config_hash", config_hash(cfg)},
                               {"best_epoch", result.best_epoch},
                               {"final_train_total", result.history.empty()
                                                         ? 0.0
                                                         : result.history.back().total}};
    save_gap_checkpoint(checkpoint_bin_path(cfg), checkpoint_manifest_path(cfg), result.params,
                        extra);
    detail::write_text_file(loss_history_path(cfg), loss_history_to_csv(result.history));
    std::cout << "train: " << cfg.gap.epochs << " epochs on " << train_scenes.size()
              << " samples; checkpoint under " << cfg.paths.checkpoint_dir << "\n";
}

inline GapParams load_checkpoint_checked(const RunConfig& cfg) {
    nlohmann::json extra;
    const GapParams params =
        load_gap_checkpoint(checkpoint_bin_path(cfg), checkpoint_manifest_path(cfg), &extra);
    detail::require_artifact_hash(extra, config_hash(cfg), "checkpoint");
    return params;
}

// --- Stage: search ---------------------------------------------------------------------

inline void cmd_search(const RunConfig& cfg) {
    cfg.validate();
    verify_dataset_manifest(cfg);
    const GapParams params = load_checkpoint_checked(cfg);
    const std::vector<DatasetRecord> val = load_dataset(cfg, "val");

    std::vector<CostSample> batch;
    std::vector<Vec> score_vecs;
    batch.reserve(val.size());
    score_vecs.reserve(val.size());
    for (const DatasetRecord& rec : val) {
        CostSample cs;
        cs.scores = gap_forward(rec.sample, params).ahat.scores;
        cs.flops = flops_for(cfg.flops, rec.sample.n,
                             static_cast<int>(rec.sample.prompt_tokens.size() +
                                              rec.sample.gen_tokens.size()));
        score_vecs.push_back(cs.scores);
        batch.push_back(std::move(cs));
    }
    const BaselineThresholds p0 = init_baseline_from_static(cfg.baseline_counts, score_vecs);

    std::filesystem::create_directories(cfg.paths.report_dir);
    nlohmann::json entries = nlohmann::json::array();
    for (double budget : cfg.eval.budgets) {
        SearchConfig sc = cfg.search;
        sc.budget = budget;
        sc.budget_is_fraction = true;
        std::vector<SearchTraceRow> trace;
        const SearchResult result = search(batch, p0, sc, &trace);
        detail::write_text_file(search_trace_path(cfg, budget), search_trace_to_csv(trace));
        nlohmann::json entry = to_json(result);
        entry["budget"] = budget;
        entries.push_back(std::move(entry));
    }
    const nlohmann::json out{{"schema_version", kPipelineSchemaVersion},
                             {"config_hash", config_hash(cfg)},
                             {"baseline",
                              std::vector<double>(p0.thetas.data(),
                                                  p0.thetas.data() + p0.thetas.size())},
                             {"entries", entries}};
    detail::write_text_file(strategies_path(cfg), out.dump(2) + "\n");
    std::cout << "search: " << cfg.eval.budgets.size() << " budget points over "
              << val.size() << " validation samples\n";
}

// --- Stage: eval -----------------------------------------------------------------------

struct EvalRow {
    double budget = 0.0;
    std::string method;
    double flops_fraction = 0.0;   // achieved visual FLOPs / unpruned visual FLOPs
    double flops_reduction = 0.0;  // 1 - flops_fraction
    double accuracy = 0.0;         // teacher answer preserved under the schedule
    double recall = 0.0;           // top-k overlap of the arm's scores with the oracle
};

inline nlohmann::json to_json(const EvalRow& r) {
    return nlohmann::json{{"budget", r.budget},
                          {"method", r.method},
                          {"flops_fraction", r.flops_fraction},
                          {"flops_reduction", r.flops_reduction},
                          {"accuracy", r.accuracy},
                          {"recall", r.recall}};
}

inline EvalRow eval_row_from_json(const nlohmann::json& j) {
    EvalRow r;
    try {
        r.budget = j.at("budget").get<double>();
        r.method = j.at("method").get<std::string>();
        r.flops_fraction = j.at("flops_fraction").get<double>();
        r.flops_reduction = j.at("flops_reduction").get<double>();
        r.accuracy = j.at("accuracy").get<double>();
        r.recall = j.at("recall").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("eval row: malformed JSON: ") + e.what());
    }
    return r;
}

inline const std::vector<std::string>& eval_methods() {
    static const std::vector<std::string> methods{"gap_sap", "gap_fixed", "oracle_fixed",
                                                  "random_fixed"};
    return methods;
}

namespace detail {

// Largest uniform per-layer retention whose visual cost fits the budget.
inline int max_uniform_retention(const FlopsModel& fm, double budget_fraction) {
    const double limit = budget_fraction * visual_flops(fm);
    int best = 1;
    for (int r = 1; r <= fm.n_objects; ++r) {
        const double cost = static_cast<double>(fm.depth) * layer_visual_flops(fm, 3 * r);
        if (cost <= limit) best = r;
    }
    return best;
}

inline PruneSchedule uniform_schedule(const Vec& scores, int r, int depth) {
    return schedule_from_counts(scores, std::vector<int>(static_cast<std::size_t>(depth), r));
}

}  // namespace detail

inline std::vector<EvalRow> cmd_eval(const RunConfig& cfg) {
    cfg.validate();
    verify_dataset_manifest(cfg);
    verify_oracle_manifest(cfg);
    const GapParams params = load_checkpoint_checked(cfg);
    const std::vector<DatasetRecord> test = load_dataset(cfg, "test");
    const std::vector<ImportanceMap> oracles = load_oracles(cfg, "test");
    require(test.size() == oracles.size(), "eval: dataset and oracle counts disagree");

    const nlohmann::json strategies =
        detail::read_json_artifact(strategies_path(cfg), "strategy file");
    detail::require_artifact_hash(strategies, config_hash(cfg), "strategy file");

    // Per-sample state shared across budgets.
    struct SampleState {
        Vec gap_scores;
        Vec random_scores;
        FlopsModel flops;
        double unpruned = 0.0;
    };
    std::vector<SampleState> state;
    state.reserve(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
        SampleState st;
        st.gap_scores = gap_forward(test[i].sample, params).ahat.scores;
        Rng rng(mix_seed(cfg.seed, 0xE7A10000ull + i));
        st.random_scores = Vec(test[i].sample.n);
        for (int k = 0; k < test[i].sample.n; ++k) st.random_scores[k] = rng.uniform(0.0, 1.0);
        st.flops = flops_for(cfg.flops, test[i].sample.n,
                             static_cast<int>(test[i].sample.prompt_tokens.size() +
                                              test[i].sample.gen_tokens.size()));
        st.unpruned = visual_flops(st.flops);
        state.push_back(std::move(st));
    }

    std::vector<EvalRow> rows;
    for (const nlohmann::json& entry : strategies.at("entries")) {
        const double budget = entry.at("budget").get<double>();
        const SearchResult found = search_result_from_json(entry);

        struct Acc {
            double cost = 0.0;
            double correct = 0.0;
            double recall = 0.0;
        };
        std::vector<Acc> acc(eval_methods().size());

        for (std::size_t i = 0; i < test.size(); ++i) {
            const SampleState& st = state[i];
            const SceneSample& sample = test[i].sample;
            const Vec& oracle = oracles[i].scores;
            const int uniform_r = detail::max_uniform_retention(st.flops, budget);

            for (std::size_t m = 0; m < eval_methods().size(); ++m) {
                const std::string& method = eval_methods()[m];
                PruneSchedule sched;
                const Vec* arm_scores = &st.gap_scores;
                if (method == "gap_sap") {
                    sched = build_schedule(st.gap_scores, found.strategy);
                } else if (method == "gap_fixed") {
                    sched = detail::uniform_schedule(st.gap_scores, uniform_r, cfg.flops.depth);
                } else if (method == "oracle_fixed") {
                    sched = detail::uniform_schedule(oracle, uniform_r, cfg.flops.depth);
                    arm_scores = &oracle;
                } else {
                    sched = detail::uniform_schedule(st.random_scores, uniform_r,
                                                     cfg.flops.depth);
                    arm_scores = &st.random_scores;
                }
                acc[m].cost += visual_flops(st.flops, &sched);
                acc[m].correct += teacher_answer_under_pruning(sample, sched) ? 1.0 : 0.0;
                acc[m].recall += top_k_overlap(*arm_scores, oracle, cfg.eval.recall_k);
            }
        }

        double unpruned_total = 0.0;
        for (const SampleState& st : state) unpruned_total += st.unpruned;
        for (std::size_t m = 0; m < eval_methods().size(); ++m) {
            EvalRow row;
            row.budget = budget;
            row.method = eval_methods()[m];
            row.flops_fraction = acc[m].cost / unpruned_total;
            row.flops_reduction = 1.0 - row.flops_fraction;
            row.accuracy = acc[m].correct / static_cast<double>(test.size());
            row.recall = acc[m].recall / static_cast<double>(test.size());
            rows.push_back(std::move(row));
        }
    }

    nlohmann::json rows_json = nlohmann::json::array();
    for (const EvalRow& r : rows) rows_json.push_back(to_json(r));
    const nlohmann::json out{{"schema_version", kPipelineSchemaVersion},
                             {"config_hash", config_hash(cfg)},
                             {"samples", static_cast<int>(test.size())},
                             {"rows", rows_json}};
    std::filesystem::create_directories(cfg.paths.report_dir);
    detail::write_text_file(eval_path(cfg), out.dump(2) + "\n");
    std::cout << "eval: " << rows.size() << " rows over " << test.size() << " test samples\n";
    return rows;
}

// --- Stage: report ------------------------------------------------------------------------

inline std::string report_to_csv(const std::vector<EvalRow>& rows) {
    std::string out = "budget,method,metric,value\n";
    char buf[160];
    for (const EvalRow& r : rows) {
        const std::pair<const char*, double> metrics[] = {
            {"flops_fraction", r.flops_fraction},
            {"flops_reduction", r.flops_reduction},
            {"accuracy", r.accuracy},
            {"recall", r.recall},
        };
        for (const auto& [name, value] : metrics) {
            std::snprintf(buf, sizeof(buf), "%.17g,%s,%s,%.17g\n", r.budget, r.method.c_str(),
                          name, value);
            out += buf;
        }
    }
    return out;
}

inline void cmd_report(const RunConfig& cfg) {
    cfg.validate();
    const nlohmann::json eval_json = detail::read_json_artifact(eval_path(cfg), "eval output");
    detail::require_artifact_hash(eval_json, config_hash(cfg), "eval output");
    std::vector<EvalRow> rows;
    try {
        for (const nlohmann::json& r : eval_json.at("rows")) rows.push_back(eval_row_from_json(r));
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("eval output: malformed JSON: ") + e.what());
    }
    detail::write_text_file(report_path(cfg), report_to_csv(rows));
    std::cout << "report: " << rows.size() << " method rows -> " << report_path(cfg) << "\n";
}

}  // namespace vtp
