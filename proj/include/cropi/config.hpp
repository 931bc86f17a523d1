#pragma once

// Pipeline configuration: strict YAML schema, defaults, named seeds and the
// config digest stamped on every artifact.

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cropi/curriculum.hpp"
#include "json.hpp"

namespace cropi {

struct TaskSection {
    std::vector<TaskFamily> families;
    int train_per_family = 500;
    int test_per_family = 200;
    std::vector<std::string> val_families;  // empty: the first two families
    double val_fraction = 0.2;
    int val_cap = 100;
};

struct PolicySection {
    int context_window = 8;
    int embed_dim = 16;
    int hidden_dim = 32;
    double init_scale = 0.1;
    int vocab_digits = 0;  // 0: as many digit tokens as the families need
};

struct WarmStartSection {
    int per_family = 200;
    std::map<std::string, int> family_limits;  // cap on warm-start instances per family
    int steps = 200;
    int batch = 16;
    double learning_rate = 0.5;
    double answer_weight = 0.2;
};

struct RolloutSection {
    int group_size = 8;  // K
    int max_len = 6;
};

struct ReportSection {
    std::string reference = "full_data";
    std::vector<std::string> targeted;  // empty: the validation families
    double budget_fraction = 0.6;
};

/// Every random draw in the pipeline is keyed by exactly one of these.
inline const std::vector<std::string>& seed_names() {
    static const std::vector<std::string> names{"data",  "test",    "warm_pool", "split",   "init",
                                                "warm_start", "rollout", "projector", "training"};
    return names;
}

struct PipelineConfig {
    std::uint64_t seed = 1;
    TaskSection tasks;
    PolicySection policy;
    WarmStartSection warm_start;
    RolloutSection rollout;
    GrpoHyper grpo;
    std::size_t projector_k = 4096;
    double sparse_ratio = 0.01;
    int phases = 5;
    int steps_per_phase = 100;
    double alpha = 0.1;
    int eval_every = 0;
    double ratio_cap = kDefaultRatioCap;
    std::vector<std::string> baselines{"full_data", "learnability", "pass_rate", "influence_once"};
    ReportSection report;
    std::map<std::string, std::uint64_t> seed_overrides;

    /// derive_seed(seed, i + 1) for the i-th named seed unless overridden.
    std::uint64_t named_seed(const std::string& name) const {
        const auto& names = seed_names();
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw ConfigError("unknown seed name '" + name + "'");
        if (auto o = seed_overrides.find(name); o != seed_overrides.end()) return o->second;
        return derive_seed(seed, static_cast<std::uint64_t>(it - names.begin()) + 1);
    }

    std::vector<std::string> resolved_val_families() const {
        if (!tasks.val_families.empty()) return tasks.val_families;
        std::vector<std::string> out;
        for (std::size_t i = 0; i < tasks.families.size() && i < 2; ++i) out.push_back(tasks.families[i].name);
        return out;
    }

    std::vector<std::string> resolved_targeted() const {
        return report.targeted.empty() ? resolved_val_families() : report.targeted;
    }

    int digits_needed() const {
        int m = 0;
        for (const auto& f : tasks.families) m = std::max(m, f.digits_needed());
        return std::max(m, policy.vocab_digits);
    }

    PolicyArch arch() const {
        return PolicyArch{tok::vocab_size_for(digits_needed()), policy.context_window, policy.embed_dim,
                          policy.hidden_dim};
    }

    CurriculumConfig curriculum() const {
        CurriculumConfig c;
        c.phases = phases;
        c.steps_per_phase = steps_per_phase;
        c.alpha = alpha;
        c.grpo = grpo;
        c.projector = {projector_k, sparse_ratio, named_seed("projector")};
        c.training_seed = named_seed("training");
        c.eval_every = eval_every;
        c.ratio_cap = ratio_cap;
        c.targeted_sets = resolved_targeted();
        return c;
    }

    void validate() const {
        if (tasks.families.empty()) throw ConfigError("tasks.families: at least one family is required");
        std::set<std::string> names;
        for (const auto& f : tasks.families) {
            f.validate();
            if (!names.insert(f.name).second) throw ConfigError("tasks.families: duplicate family '" + f.name + "'");
        }
        if (tasks.train_per_family < 1) throw ConfigError("tasks.train_per_family must be >= 1");
        if (tasks.test_per_family < 1) throw ConfigError("tasks.test_per_family must be >= 1");
        for (const auto& v : resolved_val_families())
            if (!names.contains(v)) throw ConfigError("tasks.validation.families: unknown family '" + v + "'");
        if (!(tasks.val_fraction > 0.0 && tasks.val_fraction <= 1.0))
            throw ConfigError("tasks.validation.fraction must lie in (0, 1]");
        if (tasks.val_cap < 1) throw ConfigError("tasks.validation.cap must be >= 1");
        if (!(policy.init_scale > 0.0)) throw ConfigError("policy.init_scale must be > 0");
        arch().validate();
        for (const auto& [fam, n] : warm_start.family_limits) {
            if (!names.contains(fam)) throw ConfigError("warm_start.family_limits: unknown family '" + fam + "'");
            if (n < 0) throw ConfigError("warm_start.family_limits." + fam + " must be >= 0");
        }
        if (warm_start.per_family < 0 || warm_start.steps < 0 || warm_start.batch < 1)
            throw ConfigError("warm_start: per_family and steps must be >= 0, batch >= 1");
        if (rollout.group_size < 2) throw ConfigError("rollout.group_size must be >= 2");
        if (rollout.max_len < 1) throw ConfigError("rollout.max_len must be >= 1");
        if (projector_k < 1) throw ConfigError("projector.k must be >= 1");
        if (!(sparse_ratio > 0.0 && sparse_ratio <= 1.0)) throw ConfigError("projector.sparse_ratio must lie in (0, 1]");
        if (!(ratio_cap > 1.0)) throw ConfigError("curriculum.ratio_cap must be > 1");
        curriculum().validate();
        for (const auto& b : baselines)
            if (parse_run_strategy(b) == RunStrategy::kCropi) throw ConfigError("baselines: 'cropi' always runs; do not list it");
        parse_run_strategy(report.reference);
        for (const auto& t : resolved_targeted())
            if (!names.contains(t)) throw ConfigError("report.targeted: unknown family '" + t + "'");
        if (!(report.budget_fraction >= 0.0 && report.budget_fraction <= 1.0))
            throw ConfigError("report.budget_fraction must lie in [0, 1]");
        for (const auto& [name, v] : seed_overrides) named_seed(name);
    }

    /// Canonical form: every field resolved, keys sorted.
    nlohmann::json to_json() const {
        nlohmann::json fams = nlohmann::json::array();
        for (const auto& f : tasks.families) fams.push_back(cropi::to_json(f));
        nlohmann::json seeds = nlohmann::json::object();
        for (const auto& n : seed_names()) seeds[n] = named_seed(n);
        nlohmann::json limits = nlohmann::json::object();
        for (const auto& [k, v] : warm_start.family_limits) limits[k] = v;
        return {
            {"seed", seed},
            {"tasks",
             {{"families", fams},
              {"train_per_family", tasks.train_per_family},
              {"test_per_family", tasks.test_per_family},
              {"validation",
               {{"families", resolved_val_families()}, {"fraction", tasks.val_fraction}, {"cap", tasks.val_cap}}}}},
            {"policy",
             {{"context_window", policy.context_window},
              {"embed_dim", policy.embed_dim},
              {"hidden_dim", policy.hidden_dim},
              {"init_scale", policy.init_scale},
              {"vocab_digits", digits_needed()}}},
            {"warm_start",
             {{"per_family", warm_start.per_family},
              {"family_limits", limits},
              {"steps", warm_start.steps},
              {"batch", warm_start.batch},
              {"learning_rate", warm_start.learning_rate},
              {"answer_weight", warm_start.answer_weight}}},
            {"rollout", {{"group_size", rollout.group_size}, {"max_len", rollout.max_len}}},
            {"grpo",
             {{"learning_rate", grpo.learning_rate},
              {"clip_range", grpo.clip_range},
              {"kl_coef", grpo.kl_coef},
              {"entropy_coef", grpo.entropy_coef},
              {"group_size", grpo.group_size},
              {"batch_prompts", grpo.batch_prompts},
              {"max_len", grpo.max_len},
              {"optimizer", grpo.optimizer == OptimizerKind::kAdam ? "adam" : "sga"},
              {"adam_beta1", grpo.adam_beta1},
              {"adam_beta2", grpo.adam_beta2},
              {"adam_eps", grpo.adam_eps}}},
            {"projector", {{"k", projector_k}, {"sparse_ratio", sparse_ratio}}},
            {"curriculum",
             {{"phases", phases},
              {"steps_per_phase", steps_per_phase},
              {"alpha", alpha},
              {"eval_every", eval_every},
              {"ratio_cap", ratio_cap}}},
            {"baselines", baselines},
            {"report",
             {{"reference", report.reference},
              {"targeted", resolved_targeted()},
              {"budget_fraction", report.budget_fraction}}},
            {"seeds", seeds},
        };
    }

    std::uint64_t digest() const { return fnv1a64(to_json().dump()); }
    std::string digest_hex() const { return hex64(digest()); }

    bool operator==(const PipelineConfig& o) const { return to_json() == o.to_json(); }
};

namespace detail {

/// Reads a YAML mapping and remembers which keys were consumed, so leftovers
/// can be reported as unknown with their full dotted path.
class StrictMap {
  public:
    StrictMap(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
        if (node_ && !node_.IsNull() && !node_.IsMap())
            throw ConfigError((path_.empty() ? std::string("config") : path_) + ": expected a mapping");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) {
        seen_.insert(key);
        return node_ && node_.IsMap() && node_[key] && !node_[key].IsNull();
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (!has(key)) return;
        try {
            out = node_[key].as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError(field(key) + ": cannot read value '" + YAML::Dump(node_[key]) + "'");
        }
    }

    YAML::Node child(const std::string& key) {
        seen_.insert(key);
        return node_ && node_.IsMap() ? node_[key] : YAML::Node();
    }

    void finish() const {
        if (!node_ || !node_.IsMap()) return;
        for (const auto& kv : node_) {
            const auto key = kv.first.as<std::string>();
            if (!seen_.contains(key)) throw ConfigError("unknown config key '" + field(key) + "'");
        }
    }

  private:
    YAML::Node node_;
    std::string path_;
    std::set<std::string> seen_;
};

inline TaskFamily family_from_yaml(const YAML::Node& n, const std::string& path) {
    StrictMap m(n, path);
    TaskFamily f;
    std::string rule;
    if (!m.has("name")) throw ConfigError(m.field("name") + " is required");
    if (!m.has("rule")) throw ConfigError(m.field("rule") + " is required");
    m.get("name", f.name);
    m.get("rule", rule);
    try {
        f.rule = parse_task_rule(rule);
    } catch (const Error& e) {
        throw ConfigError(m.field("rule") + ": " + e.what());
    }
    f.difficulty = 1;
    f.answer_space_size = 10;
    m.get("difficulty", f.difficulty);
    m.get("answer_space", f.answer_space_size);
    m.get("digit_offset", f.digit_offset);
    m.finish();
    return f;
}

}  // namespace detail

inline PipelineConfig config_from_yaml(const YAML::Node& root) {
    using detail::StrictMap;
    PipelineConfig c;
    StrictMap top(root, "");
    top.get("seed", c.seed);
    {
        StrictMap t(top.child("tasks"), "tasks");
        auto fams = t.child("families");
        const bool listed = fams && fams.IsDefined() && !fams.IsNull();
        if (listed && !fams.IsSequence()) throw ConfigError("tasks.families: expected a list");
        if (listed)
            for (std::size_t i = 0; i < fams.size(); ++i)
                c.tasks.families.push_back(detail::family_from_yaml(fams[i], "tasks.families[" + std::to_string(i) + "]"));
        t.get("train_per_family", c.tasks.train_per_family);
        t.get("test_per_family", c.tasks.test_per_family);
        StrictMap v(t.child("validation"), "tasks.validation");
        v.get("families", c.tasks.val_families);
        v.get("fraction", c.tasks.val_fraction);
        v.get("cap", c.tasks.val_cap);
        v.finish();
        t.finish();
    }
    {
        StrictMap p(top.child("policy"), "policy");
        p.get("context_window", c.policy.context_window);
        p.get("embed_dim", c.policy.embed_dim);
        p.get("hidden_dim", c.policy.hidden_dim);
        p.get("init_scale", c.policy.init_scale);
        p.get("vocab_digits", c.policy.vocab_digits);
        p.finish();
    }
    {
        StrictMap w(top.child("warm_start"), "warm_start");
        w.get("per_family", c.warm_start.per_family);
        w.get("family_limits", c.warm_start.family_limits);
        w.get("steps", c.warm_start.steps);
        w.get("batch", c.warm_start.batch);
        w.get("learning_rate", c.warm_start.learning_rate);
        w.get("answer_weight", c.warm_start.answer_weight);
        w.finish();
    }
    {
        StrictMap r(top.child("rollout"), "rollout");
        r.get("group_size", c.rollout.group_size);
        r.get("max_len", c.rollout.max_len);
        r.finish();
    }
    {
        StrictMap g(top.child("grpo"), "grpo");
        g.get("learning_rate", c.grpo.learning_rate);
        g.get("clip_range", c.grpo.clip_range);
        g.get("kl_coef", c.grpo.kl_coef);
        g.get("entropy_coef", c.grpo.entropy_coef);
        g.get("group_size", c.grpo.group_size);
        g.get("batch_prompts", c.grpo.batch_prompts);
        g.get("max_len", c.grpo.max_len);
        std::string opt = "sga";
        g.get("optimizer", opt);
        if (opt == "adam")
            c.grpo.optimizer = OptimizerKind::kAdam;
        else if (opt == "sga")
            c.grpo.optimizer = OptimizerKind::kSga;
        else
            throw ConfigError("grpo.optimizer: expected 'sga' or 'adam', got '" + opt + "'");
        g.get("adam_beta1", c.grpo.adam_beta1);
        g.get("adam_beta2", c.grpo.adam_beta2);
        g.get("adam_eps", c.grpo.adam_eps);
        g.finish();
    }
    {
        StrictMap p(top.child("projector"), "projector");
        p.get("k", c.projector_k);
        p.get("sparse_ratio", c.sparse_ratio);
        p.finish();
    }
    {
        StrictMap m(top.child("curriculum"), "curriculum");
        m.get("phases", c.phases);
        m.get("steps_per_phase", c.steps_per_phase);
        m.get("alpha", c.alpha);
        m.get("eval_every", c.eval_every);
        m.get("ratio_cap", c.ratio_cap);
        m.finish();
    }
    top.get("baselines", c.baselines);
    {
        StrictMap r(top.child("report"), "report");
        r.get("reference", c.report.reference);
        r.get("targeted", c.report.targeted);
        r.get("budget_fraction", c.report.budget_fraction);
        r.finish();
    }
    top.get("seeds", c.seed_overrides);
    top.finish();
    try {
        c.validate();
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    return c;
}

inline PipelineConfig load_config(const std::string& path) {
    YAML::Node root;
    try {
        root = YAML::LoadFile(path);
    } catch (const YAML::BadFile&) {
        throw ConfigError("cannot open config file " + path);
    } catch (const YAML::Exception& e) {
        throw ConfigError("cannot parse config " + path + ": " + e.what());
    }
    return config_from_yaml(root);
}

inline PipelineConfig parse_config(const std::string& text) {
    try {
        return config_from_yaml(YAML::Load(text));
    } catch (const YAML::ParserException& e) {
        throw ConfigError(std::string("cannot parse config: ") + e.what());
    }
}

namespace detail {

inline void emit_json(YAML::Emitter& e, const nlohmann::json& j) {
    if (j.is_object()) {
        e << YAML::BeginMap;
        for (const auto& [k, v] : j.items()) {
            e << YAML::Key << k << YAML::Value;
            emit_json(e, v);
        }
        e << YAML::EndMap;
    } else if (j.is_array()) {
        const bool flat = std::none_of(j.begin(), j.end(), [](const auto& x) { return x.is_structured(); });
        if (flat) e << YAML::Flow;
        e << YAML::BeginSeq;
        for (const auto& v : j) emit_json(e, v);
        e << YAML::EndSeq;
    } else if (j.is_number_float()) {
        e << format_real(j.get<double>());
    } else if (j.is_string()) {
        e << YAML::DoubleQuoted << j.get<std::string>();
    } else {
        e << j.dump();
    }
}

}  // namespace detail

/// Writes the fully resolved config; loading it back gives an equal config.
inline std::string config_to_yaml(const PipelineConfig& c) {
    auto j = c.to_json();
    // Families use the YAML key names.
    for (auto& f : j["tasks"]["families"]) {
        f["answer_space"] = f["answer_space_size"];
        f.erase("answer_space_size");
    }
    YAML::Emitter e;
    detail::emit_json(e, j);
    return std::string(e.c_str()) + "\n";
}

inline void save_config(const PipelineConfig& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write config " + path);
    out << "# cropi pipeline config, digest " << c.digest_hex() << "\n" << config_to_yaml(c);
}

/// Applies NAME=INT; the digest changes with it.
inline void apply_seed_override(PipelineConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("seed override '" + assignment + "' is not NAME=INT");
    const auto name = assignment.substr(0, eq);
    const auto value = assignment.substr(eq + 1);
    std::uint64_t v = 0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
        throw ConfigError("seed override '" + assignment + "': value is not a non-negative integer");
    if (name == "seed") {
        c.seed = v;
        return;
    }
    c.named_seed(name);  // rejects unknown names
    c.seed_overrides[name] = v;
}

}  // namespace cropi
