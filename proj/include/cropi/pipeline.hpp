#pragma once

// Staged pipeline: gen -> rollout -> score -> select -> train -> report.
// Each stage writes into its own directory under the output root together
// with a manifest recording the config digest and a hash of every file it
// wrote. Downstream stages check both before reading anything.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cropi/config.hpp"
#include "cropi/curriculum.hpp"

namespace cropi {

enum class Stage { kGen, kRollout, kScore, kSelect, kTrain, kFull, kReport };

inline Stage parse_stage(std::string_view s) {
    if (s == "gen") return Stage::kGen;
    if (s == "rollout") return Stage::kRollout;
    if (s == "score") return Stage::kScore;
    if (s == "select") return Stage::kSelect;
    if (s == "train") return Stage::kTrain;
    if (s == "full") return Stage::kFull;
    if (s == "report") return Stage::kReport;
    throw ConfigError("unknown stage '" + std::string(s) + "' (gen, rollout, score, select, train, full, report)");
}

// ---------------------------------------------------------------------------
// In-memory lab construction. The staged pipeline and the acceptance suite
// both go through these, so a config means the same thing everywhere.

struct GeneratedData {
    Dataset train;
    Dataset test;
    Dataset warm;  // supervised warm-start pool, after family_limits
    ValidationSplit split;
};

inline GeneratedData generate_data(const PipelineConfig& cfg) {
    GeneratedData g;
    g.train = generate_dataset(cfg.tasks.families, cfg.tasks.train_per_family, cfg.named_seed("data"));
    g.test = generate_dataset(cfg.tasks.families, cfg.tasks.test_per_family, cfg.named_seed("test"));
    auto pool = generate_dataset(cfg.tasks.families, cfg.warm_start.per_family, cfg.named_seed("warm_pool"));
    auto limits = cfg.warm_start.family_limits;
    g.warm = pool;
    g.warm.instances.clear();
    for (const auto& inst : pool.instances) {
        auto it = limits.find(inst.family);
        if (it != limits.end()) {
            if (it->second <= 0) continue;
            --it->second;
        }
        g.warm.instances.push_back(inst);
        g.warm.instances.back().id = static_cast<PromptId>(g.warm.instances.size() - 1);
    }
    g.split = split_validation(g.train, cfg.tasks.val_fraction, cfg.tasks.val_cap, cfg.resolved_val_families(),
                               cfg.named_seed("split"));
    return g;
}

/// theta_0: random init followed by the supervised warm start.
inline PolicyParams<double> build_base(const PipelineConfig& cfg, const GeneratedData& g) {
    auto p = init_policy(cfg.arch(), cfg.named_seed("init"), cfg.policy.init_scale);
    p = warm_start(p, g.warm.instances, cfg.warm_start.steps, cfg.warm_start.batch, cfg.warm_start.learning_rate,
                   cfg.warm_start.answer_weight, cfg.named_seed("warm_start"));
    p.label = "base";
    return p;
}

/// K behavior rollouts for every training and validation prompt.
inline OfflineStore build_store(const PipelineConfig& cfg, const GeneratedData& g, const PolicyParams<double>& base) {
    std::vector<PromptId> ids = g.split.train_ids;
    const auto v = g.split.all_val_ids();
    ids.insert(ids.end(), v.begin(), v.end());
    return collect_offline(base, g.train, ids, cfg.rollout.group_size, cfg.rollout.max_len, cfg.named_seed("rollout"));
}

/// One held-out test set per family, in family order.
inline std::vector<std::pair<std::string, std::vector<PromptId>>> family_test_sets(const PipelineConfig& cfg,
                                                                                  const Dataset& test) {
    std::vector<std::pair<std::string, std::vector<PromptId>>> out;
    for (const auto& f : cfg.tasks.families) out.emplace_back(f.name, test.ids_of_family(f.name));
    return out;
}

struct Lab {
    PipelineConfig cfg;
    GeneratedData data;
    PolicyParams<double> base;
    OfflineStore store;
    std::vector<std::pair<std::string, std::vector<PromptId>>> test_sets;

    LabData view() const { return LabData{&data.train, &data.split, &store, &base, &data.test, test_sets}; }
};

inline Lab build_lab(const PipelineConfig& cfg) {
    Lab lab;
    lab.cfg = cfg;
    lab.data = generate_data(cfg);
    lab.base = build_base(cfg, lab.data);
    lab.store = build_store(cfg, lab.data, lab.base);
    lab.test_sets = family_test_sets(cfg, lab.data.test);
    return lab;
}

// ---------------------------------------------------------------------------
// Artifact bookkeeping

inline std::string file_digest(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ArtifactError("missing artifact " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return hex64(fnv1a64(ss.str()));
}

inline void write_split(const ValidationSplit& s, const std::string& path, const std::string& digest) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write split " + path);
    nlohmann::json j = {{"format", "cropi.split"},
                        {"config_digest", digest},
                        {"train_ids", s.train_ids},
                        {"val_families", s.val_families},
                        {"val_sets", s.val_sets}};
    out << j.dump() << '\n';
}

class Pipeline {
  public:
    Pipeline(PipelineConfig cfg, std::filesystem::path out, std::ostream* log = &std::cerr)
        : cfg_(std::move(cfg)), out_(std::move(out)), log_(log), digest_(cfg_.digest_hex()) {}

    const PipelineConfig& config() const { return cfg_; }
    const std::string& digest() const { return digest_; }
    std::filesystem::path path(const std::string& rel) const { return out_ / rel; }

    void run(Stage stage, std::optional<double> threshold = std::nullopt) {
        switch (stage) {
            case Stage::kGen: gen(); break;
            case Stage::kRollout: rollout(); break;
            case Stage::kScore: score(); break;
            case Stage::kSelect: select(); break;
            case Stage::kTrain: train(); break;
            case Stage::kReport: report(threshold); break;
            case Stage::kFull:
                gen();
                rollout();
                score();
                select();
                train();
                report(threshold);
                break;
        }
    }

    /// Datasets, validation split and the warm-start pool.
    void gen() {
        log("gen: generating datasets");
        const auto g = generate_data(cfg_);
        const std::filesystem::path dir = stage_dir("gen");
        save_config(cfg_, (dir / "config.yaml").string());
        save_dataset(g.train, (dir / "train.jsonl").string(), stamp());
        save_dataset(g.test, (dir / "test.jsonl").string(), stamp());
        save_dataset(g.warm, (dir / "warm.jsonl").string(), stamp());
        write_split(g.split, (dir / "split.json").string(), digest_);
        write_manifest("gen", {"config.yaml", "train.jsonl", "test.jsonl", "warm.jsonl", "split.json"});
        log("gen: " + std::to_string(g.train.instances.size()) + " training prompts, " +
            std::to_string(g.split.train_ids.size()) + " after carving validation");
    }

    /// Base policy and the offline trajectory store.
    void rollout() {
        const auto g = load_generated();
        log("rollout: warm-starting the base policy");
        const auto base = build_base(cfg_, g);
        log("rollout: sampling K=" + std::to_string(cfg_.rollout.group_size) + " trajectories per prompt");
        const auto store = build_store(cfg_, g, base);
        const std::filesystem::path dir = stage_dir("rollout");
        save_checkpoint(base, (dir / "base.ckpt").string(), stamp());
        save_store(store, (dir / "store.jsonl").string(), stamp());
        write_manifest("rollout", {"base.ckpt", "store.jsonl"});
    }

    /// Off-policy features at the base policy (phase 0) and their rank table.
    void score() {
        const auto lab = load_lab();
        const auto cc = cfg_.curriculum();
        log("score: computing off-policy gradient features at the base policy");
        const auto view = lab.view();
        const auto pf = phase_features(lab.base, view, cc);
        const std::filesystem::path dir = stage_dir("score");
        const auto proj = phase_projector(lab.base, cc);
        std::vector<std::string> files{"features_train.jsonl"};
        save_feature_cache(pf.train, feature_cache_header(proj, pf.checkpoint, pf.train.size(), stamp()),
                           (dir / files.back()).string());
        for (std::size_t j = 0; j < pf.val.size(); ++j) {
            files.push_back("features_val_" + std::to_string(j + 1) + ".jsonl");
            save_feature_cache(pf.val[j], feature_cache_header(proj, pf.checkpoint, pf.val[j].size(), stamp()),
                               (dir / files.back()).string());
        }
        const auto ps = select_from_features(pf, view, cc, 0, 0);
        export_rank_table(ps.table, ps.selection.ids, (dir / "rank_table.csv").string());
        files.push_back("rank_table.csv");
        write_manifest("score", files, {{"ratio_cap_hits", pf.ratio_cap_hits}, {"val_skipped", ps.val_skipped}});
        if (pf.ratio_cap_hits > 0)
            log("score: warning: " + std::to_string(pf.ratio_cap_hits) + " importance ratios above the cap");
    }

    /// Phase-0 subset of the curriculum and the one-shot baseline subsets.
    void select() {
        const auto lab = load_lab();
        const auto view = lab.view();
        const auto cc = cfg_.curriculum();
        const auto pf = load_features(lab);
        const std::filesystem::path dir = stage_dir("select");
        std::vector<std::string> files{"cropi_phase0.csv"};
        write_selection_csv(select_from_features(pf, view, cc, 0, 0), (dir / files.back()).string());
        for (const auto& b : cfg_.baselines) {
            const auto s = parse_run_strategy(b);
            if (s == RunStrategy::kFullData) continue;
            files.push_back(b + ".csv");
            write_selection_csv(baseline_selection(cc, view, s, &pf), (dir / files.back()).string());
        }
        write_manifest("select", files);
        log("select: quota " + std::to_string(floor_fraction(cfg_.alpha, lab.data.split.train_ids.size())) +
            " of " + std::to_string(lab.data.split.train_ids.size()));
    }

    /// Curriculum and baseline training runs.
    void train() {
        const auto lab = load_lab();
        const auto view = lab.view();
        const auto cc = cfg_.curriculum();
        std::vector<std::string> methods{"cropi"};
        for (const auto& b : cfg_.baselines) methods.push_back(b);
        std::vector<std::string> files;
        for (const auto& m : methods) {
            log("train: " + m + " (" + std::to_string(cc.total_steps()) + " steps)");
            const auto r = run_strategy(cc, view, parse_run_strategy(m));
            const std::string rel = m + "/";
            const auto dir = stage_dir("runs") / m;
            std::filesystem::create_directories(dir);
            write_metrics_csv(r, (dir / "metrics.csv").string());
            write_evals_csv(r, (dir / "evals.csv").string());
            files.push_back(rel + "metrics.csv");
            files.push_back(rel + "evals.csv");
            for (const auto& ps : r.selections) {
                const auto name = "selection_phase" + std::to_string(ps.phase) + ".csv";
                write_selection_csv(ps, (dir / name).string());
                files.push_back(rel + name);
            }
            save_checkpoint(r.final_params, (dir / "final.ckpt").string(), stamp());
            files.push_back(rel + "final.ckpt");
            nlohmann::json acc = nlohmann::json::object();
            for (std::size_t i = 0; i < r.test_labels.size(); ++i) acc[r.test_labels[i]] = r.evals.back().accuracy[i];
            std::ofstream(dir / "final_accuracy.json", std::ios::binary)
                << nlohmann::json{{"config_digest", digest_}, {"step", r.evals.back().step}, {"accuracy", acc}}.dump(2)
                << '\n';
            files.push_back(rel + "final_accuracy.json");
            // Wall-clock numbers vary run to run; kept apart from the deterministic records.
            std::ofstream(dir / "timing.json", std::ios::binary)
                << nlohmann::json{{"selection_seconds", r.selection_seconds},
                                  {"training_seconds", r.training_seconds},
                                  {"eval_seconds", r.eval_seconds}}
                       .dump(2)
                << '\n';
            int hits = 0;
            for (const auto& ps : r.selections) hits += ps.ratio_cap_hits;
            if (hits > 0) log("train: warning: " + m + " saw " + std::to_string(hits) + " importance ratios above the cap");
        }
        write_manifest("runs", files);
    }

    /// Step-level speedup of every method against the reference run.
    nlohmann::json report(std::optional<double> threshold = std::nullopt) {
        require_manifest("runs", "train");
        const auto targeted = cfg_.resolved_targeted();
        const int total = cfg_.phases * cfg_.steps_per_phase;
        auto load = [&](const std::string& m) {
            return read_evals_csv(path("runs/" + m + "/evals.csv").string(), m, total);
        };
        const auto ref = load(cfg_.report.reference);
        const double thr = threshold ? *threshold : accuracy_at_budget_fraction(ref, targeted, cfg_.report.budget_fraction);
        nlohmann::json summary = {{"config_digest", digest_},
                                  {"reference", cfg_.report.reference},
                                  {"targeted", targeted},
                                  {"threshold", thr},
                                  {"threshold_source", threshold ? "command line"
                                                                 : "reference accuracy at budget fraction " +
                                                                       format_real(cfg_.report.budget_fraction)},
                                  {"total_steps", total}};
        std::vector<std::string> methods{"cropi"};
        for (const auto& b : cfg_.baselines) methods.push_back(b);
        for (const auto& m : methods) {
            const auto r = load(m);
            const auto sp = speedup_report(r, ref, thr, targeted);
            nlohmann::json e = {{"speedup", std::isinf(sp.ratio) ? nlohmann::json("inf") : nlohmann::json(sp.ratio)},
                                {"target_step", sp.target_step ? nlohmann::json(*sp.target_step) : nlohmann::json()},
                                {"reference_step",
                                 sp.reference_step ? nlohmann::json(*sp.reference_step) : nlohmann::json()}};
            nlohmann::json fin = nlohmann::json::object();
            for (std::size_t i = 0; i < r.test_labels.size(); ++i) fin[r.test_labels[i]] = r.evals.back().accuracy[i];
            e["final_accuracy"] = fin;
            summary["methods"][m] = e;
        }
        const auto dir = stage_dir("report");
        std::ofstream(dir / "summary.json", std::ios::binary) << summary.dump(2) << '\n';
        write_manifest("report", {"summary.json"});
        return summary;
    }

    // -- loaders used by the stages (and by tests) ---------------------------

    GeneratedData load_generated() const {
        require_manifest("gen", "gen");
        GeneratedData g;
        nlohmann::json h;
        g.train = load_dataset(path("gen/train.jsonl").string(), &h);
        check_stamp(h, "gen/train.jsonl");
        g.test = load_dataset(path("gen/test.jsonl").string(), &h);
        check_stamp(h, "gen/test.jsonl");
        g.warm = load_dataset(path("gen/warm.jsonl").string(), &h);
        check_stamp(h, "gen/warm.jsonl");
        std::ifstream in(path("gen/split.json"), std::ios::binary);
        if (!in) throw ArtifactError("missing artifact " + path("gen/split.json").string());
        try {
            auto j = nlohmann::json::parse(in);
            check_stamp(j, "gen/split.json");
            g.split.train_ids = j.at("train_ids").get<std::vector<PromptId>>();
            g.split.val_families = j.at("val_families").get<std::vector<std::string>>();
            g.split.val_sets = j.at("val_sets").get<std::vector<std::vector<PromptId>>>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed split file: " + std::string(e.what()));
        }
        return g;
    }

    Lab load_lab() const {
        Lab lab;
        lab.cfg = cfg_;
        lab.data = load_generated();
        require_manifest("rollout", "rollout");
        nlohmann::json h;
        lab.base = load_checkpoint<double>(path("rollout/base.ckpt").string(), &h);
        check_stamp(h, "rollout/base.ckpt");
        lab.store = load_store(path("rollout/store.jsonl").string(), &h);
        check_stamp(h, "rollout/store.jsonl");
        lab.test_sets = family_test_sets(cfg_, lab.data.test);
        return lab;
    }

    PhaseFeatures load_features(const Lab& lab) const {
        const auto manifest = require_manifest("score", "score");
        const auto cc = cfg_.curriculum();
        const auto proj = phase_projector(lab.base, cc);
        PhaseFeatures pf;
        pf.checkpoint = lab.base.label;
        pf.ratio_cap_hits = manifest.value("ratio_cap_hits", 0);
        std::size_t eligible = 0;
        for (auto id : lab.data.split.train_ids) eligible += lab.store.zero_signal(id) ? 0 : 1;
        auto read = [&](const std::string& rel, std::size_t count) {
            auto f = load_feature_cache(path(rel).string(), feature_cache_header(proj, pf.checkpoint, count, stamp()));
            if (!f) throw ArtifactError("feature cache " + path(rel).string() + " is missing or stale; rerun 'score'");
            return *f;
        };
        pf.train = read("score/features_train.jsonl", eligible);
        for (std::size_t j = 0; j < lab.data.split.val_sets.size(); ++j)
            pf.val.push_back(
                read("score/features_val_" + std::to_string(j + 1) + ".jsonl", lab.data.split.val_sets[j].size()));
        return pf;
    }

  private:
    PipelineConfig cfg_;
    std::filesystem::path out_;
    std::ostream* log_;
    std::string digest_;

    void log(const std::string& msg) const {
        if (log_) *log_ << msg << '\n';
    }

    nlohmann::json stamp() const { return {{"config_digest", digest_}}; }

    void check_stamp(const nlohmann::json& header, const std::string& rel) const {
        const auto d = header.value("config_digest", std::string());
        if (d != digest_)
            throw ArtifactError("config digest mismatch in " + path(rel).string() + ": artifact has '" + d +
                                "', config has '" + digest_ + "'");
    }

    std::filesystem::path stage_dir(const std::string& name) const {
        const auto d = out_ / name;
        std::filesystem::create_directories(d);
        return d;
    }

    void write_manifest(const std::string& dir, const std::vector<std::string>& files,
                        const nlohmann::json& extra = nlohmann::json::object()) const {
        nlohmann::json m = {{"format", "cropi.manifest"}, {"config_digest", digest_}, {"files", nlohmann::json::object()}};
        for (const auto& f : files) m["files"][f] = file_digest(out_ / dir / f);
        m.update(extra);
        std::ofstream(out_ / dir / "manifest.json", std::ios::binary) << m.dump(2) << '\n';
    }

    /// Checks that `dir` was produced by `stage` under this config and that no
    /// file listed in its manifest changed since.
    nlohmann::json require_manifest(const std::string& dir, const std::string& stage) const {
        const auto mp = out_ / dir / "manifest.json";
        std::ifstream in(mp, std::ios::binary);
        if (!in) throw ArtifactError("missing artifact " + mp.string() + " (run the '" + stage + "' stage first)");
        nlohmann::json m;
        try {
            m = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ArtifactError("unreadable manifest " + mp.string() + ": " + e.what());
        }
        check_stamp(m, dir + "/manifest.json");
        for (const auto& [f, h] : m.at("files").items()) {
            const auto p = out_ / dir / f;
            if (!std::filesystem::exists(p)) throw ArtifactError("missing artifact " + p.string());
            if (file_digest(p) != h.get<std::string>())
                throw ArtifactError("artifact " + p.string() + " was modified after the '" + stage + "' stage wrote it");
        }
        return m;
    }
};

}  // namespace cropi
