#pragma once

// Multi-phase curriculum: at the start of each phase score every eligible
// training prompt with off-policy influence at the current checkpoint, fuse
// ranks over the validation sets, keep the top alpha fraction and run E GRPO
// steps on it. Also the single-selection and full-data baselines.

#include <chrono>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cropi/common.hpp"
#include "cropi/grpo.hpp"
#include "cropi/influence.hpp"
#include "cropi/offgrad.hpp"
#include "cropi/policy.hpp"
#include "cropi/rollout.hpp"
#include "cropi/sketch.hpp"
#include "cropi/taskgen.hpp"

namespace cropi {

struct ProjectorSpec {
    std::size_t k = 4096;
    double sparse_ratio = 0.01;
    std::uint64_t seed = 0;
};

struct CurriculumConfig {
    int phases = 5;           // M
    int steps_per_phase = 100;  // E
    double alpha = 0.1;
    GrpoHyper grpo;
    ProjectorSpec projector;
    std::uint64_t training_seed = 0;
    int eval_every = 0;  // 0: max(1, E / 10)
    double ratio_cap = kDefaultRatioCap;
    std::vector<std::string> targeted_sets;  // test-set labels averaged for speedup

    int total_steps() const { return phases * steps_per_phase; }
    int eval_interval() const { return eval_every > 0 ? eval_every : std::max(1, steps_per_phase / 10); }

    void validate() const {
        if (phases < 1) throw ConfigError("curriculum: phases (M) must be >= 1");
        if (steps_per_phase < 1) throw ConfigError("curriculum: steps_per_phase (E) must be >= 1");
        if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("curriculum: alpha must lie in (0, 1]");
        grpo.validate();
    }
};

/// Everything a run reads. All members are borrowed and never mutated.
struct LabData {
    const Dataset* train = nullptr;  // training pool; validation sets are carved from it
    const ValidationSplit* split = nullptr;
    const OfflineStore* store = nullptr;
    const PolicyParams<double>* base = nullptr;  // theta_0: behavior and KL reference policy
    const Dataset* test = nullptr;
    std::vector<std::pair<std::string, std::vector<PromptId>>> test_sets;  // ids into *test

    void check() const {
        if (!train || !split || !base || !test) throw ConfigError("lab data incomplete");
        if (!store) throw ArtifactError("no offline trajectory store");
        for (auto id : split->train_ids)
            if (!store->contains(id)) throw ArtifactError("trajectory store lacks training prompt " + std::to_string(id));
    }
};

struct PhaseSelection {
    int phase = 0;
    int at_step = 0;
    std::string checkpoint;
    RankTable table;
    Selection selection;
    int val_skipped = 0;
    int ratio_cap_hits = 0;
};

struct EvalRecord {
    int step = 0;
    std::vector<double> accuracy;  // parallel to LabData::test_sets
};

struct StepRecord {
    int phase = 0;
    TrainMetrics metrics;
};

struct RunReport {
    std::string method;
    std::vector<std::string> test_labels;
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;
    std::vector<PhaseSelection> selections;
    PolicyParams<double> final_params;
    double selection_seconds = 0.0;
    double training_seconds = 0.0;
    double eval_seconds = 0.0;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline std::vector<PromptId> eligible_train_ids(const LabData& lab) {
    std::vector<PromptId> out;
    for (auto id : lab.split->train_ids)
        if (!lab.store->zero_signal(id)) out.push_back(id);
    return out;
}

}  // namespace detail

/// Off-policy features for `ids` at `params`, projected in fixed-size chunks.
inline std::vector<GradientFeature> offpolicy_features(const PolicyParams<double>& params, const LabData& lab,
                                                       const Projector& proj, const std::vector<PromptId>& ids,
                                                       double ratio_cap, int* ratio_cap_hits = nullptr) {
    constexpr std::size_t kChunk = 256;
    std::vector<GradientFeature> feats(ids.size());
    int hits = 0;
    for (std::size_t c0 = 0; c0 < ids.size(); c0 += kChunk) {
        const std::size_t n = std::min(kChunk, ids.size() - c0);
        std::vector<OffPolicyGradient<double>> grads(n);
        parallel_for(n, [&](std::size_t i) {
            grads[i] = off_policy_gradient(params, *lab.train, *lab.store, ids[c0 + i], ratio_cap);
        });
        std::vector<std::span<const double>> views;
        std::vector<std::size_t> live;
        for (std::size_t i = 0; i < n; ++i) {
            hits += grads[i].ratio_cap_hits;
            if (!grads[i].zero_signal) {
                views.emplace_back(grads[i].grad);
                live.push_back(i);
            } else {
                feats[c0 + i] = make_feature(ids[c0 + i], params.label, std::vector<double>(proj.k, 0.0));
            }
        }
        auto projected = project_batch<double>(proj, views);
        for (std::size_t j = 0; j < live.size(); ++j)
            feats[c0 + live[j]] = make_feature(ids[c0 + live[j]], params.label, std::move(projected[j]));
    }
    if (ratio_cap_hits) *ratio_cap_hits += hits;
    return feats;
}

/// Unit features at one frozen checkpoint: every eligible training prompt
/// plus the members of each validation set.
struct PhaseFeatures {
    std::string checkpoint;
    std::vector<GradientFeature> train;
    std::vector<std::vector<GradientFeature>> val;
    int ratio_cap_hits = 0;
};

inline Projector phase_projector(const PolicyParams<double>& params, const CurriculumConfig& cfg) {
    return make_projector(params.theta.size(), cfg.projector.k, cfg.projector.sparse_ratio, cfg.projector.seed);
}

inline PhaseFeatures phase_features(const PolicyParams<double>& params, const LabData& lab,
                                    const CurriculumConfig& cfg) {
    PhaseFeatures pf;
    pf.checkpoint = params.label;
    const auto eligible = detail::eligible_train_ids(lab);
    if (eligible.empty()) throw DataError("every training prompt is zero-signal; nothing to select");
    const auto proj = phase_projector(params, cfg);
    pf.train = offpolicy_features(params, lab, proj, eligible, cfg.ratio_cap, &pf.ratio_cap_hits);
    for (const auto& set : lab.split->val_sets)
        pf.val.push_back(offpolicy_features(params, lab, proj, set, cfg.ratio_cap, &pf.ratio_cap_hits));
    return pf;
}

/// POPI scores against each validation feature, RRF, then the top
/// floor(alpha * |train|).
inline PhaseSelection select_from_features(const PhaseFeatures& pf, const LabData& lab, const CurriculumConfig& cfg,
                                           int phase, int at_step) {
    PhaseSelection ps;
    ps.phase = phase;
    ps.at_step = at_step;
    ps.checkpoint = pf.checkpoint;
    ps.ratio_cap_hits = pf.ratio_cap_hits;
    std::vector<GradientFeature> val_feats;
    for (const auto& members : pf.val) {
        auto vf = validation_feature(members);
        ps.val_skipped += vf.skipped;
        val_feats.push_back(std::move(vf.feature));
    }
    std::vector<PromptId> eligible;
    for (const auto& f : pf.train) eligible.push_back(f.id);
    std::vector<std::map<PromptId, double>> scores(val_feats.size());
    for (std::size_t j = 0; j < val_feats.size(); ++j)
        for (const auto& f : pf.train) scores[j][f.id] = popi_score(f, val_feats[j]);
    ps.table = rank_and_fuse(scores, eligible, pf.checkpoint);
    ps.selection = select_top(ps.table, cfg.alpha, lab.split->train_ids.size());
    return ps;
}

/// Scores every eligible training prompt against each validation set at the
/// frozen checkpoint `params` and selects floor(alpha * |train|).
inline PhaseSelection select_phase(const PolicyParams<double>& params, const LabData& lab,
                                   const CurriculumConfig& cfg, int phase, int at_step) {
    return select_from_features(phase_features(params, lab, cfg), lab, cfg, phase, at_step);
}

namespace detail {

inline EvalRecord evaluate_all(const PolicyParams<double>& params, const LabData& lab, int step, int max_len) {
    EvalRecord r;
    r.step = step;
    for (const auto& [label, ids] : lab.test_sets)
        r.accuracy.push_back(evaluate_accuracy(params, *lab.test, ids, max_len, DecodeMode::kGreedy));
    return r;
}

/// Runs `steps` GRPO updates on uniformly sampled (with replacement) prompts
/// from `subset`. Global step numbers continue from report.steps.size().
inline void train_subset(PolicyParams<double>& params, const std::vector<PromptId>& subset, int steps, int phase,
                         const LabData& lab, const CurriculumConfig& cfg, AdamState& adam, RunReport& report) {
    if (subset.empty()) throw DataError("training subset is empty");
    const auto& hyper = cfg.grpo;
    const int every = cfg.eval_interval();
    for (int s = 0; s < steps; ++s) {
        const int step = static_cast<int>(report.steps.size()) + 1;
        auto t0 = Clock::now();
        Rng rng(derive_seed(cfg.training_seed, step, 0x62617463));
        std::vector<const TaskInstance*> batch;
        for (int b = 0; b < hyper.batch_prompts; ++b) batch.push_back(&lab.train->at(subset[rng.below(subset.size())]));
        const auto groups = sample_groups(params, batch, hyper.group_size, hyper.max_len,
                                          derive_seed(cfg.training_seed, step, 0x726f6c6c));
        auto [next, metrics] = grpo_step(params, params, *lab.base, groups, hyper, &adam, step);
        params = std::move(next);
        params.label = report.method + "-step" + std::to_string(step);
        report.steps.push_back({phase, metrics});
        report.training_seconds += seconds_since(t0);

        if (step % every == 0 || step == cfg.total_steps()) {
            auto te = Clock::now();
            report.evals.push_back(evaluate_all(params, lab, step, hyper.max_len));
            report.eval_seconds += seconds_since(te);
        }
    }
}

inline RunReport start_report(const std::string& method, const LabData& lab, const CurriculumConfig& cfg) {
    cfg.validate();
    lab.check();
    RunReport r;
    r.method = method;
    for (const auto& [label, ids] : lab.test_sets) r.test_labels.push_back(label);
    auto te = Clock::now();
    r.evals.push_back(evaluate_all(*lab.base, lab, 0, cfg.grpo.max_len));
    r.eval_seconds += seconds_since(te);
    return r;
}

}  // namespace detail

/// The full curriculum: M selection events, each followed by E training steps.
inline RunReport run_cropi(const CurriculumConfig& cfg, const LabData& lab) {
    RunReport report = detail::start_report("cropi", lab, cfg);
    PolicyParams<double> params = *lab.base;
    AdamState adam;
    for (int m = 0; m < cfg.phases; ++m) {
        auto t0 = detail::Clock::now();
        // Checkpoint is frozen for the whole selection pass.
        const PolicyParams<double> frozen = params;
        auto ps = select_phase(frozen, lab, cfg, m, m * cfg.steps_per_phase);
        report.selection_seconds += detail::seconds_since(t0);
        const auto subset = ps.selection.ids;
        report.selections.push_back(std::move(ps));
        detail::train_subset(params, subset, cfg.steps_per_phase, m, lab, cfg, adam, report);
    }
    report.final_params = std::move(params);
    return report;
}

enum class RunStrategy { kCropi, kFullData, kLearnability, kPassRate, kInfluenceOnce };

inline RunStrategy parse_run_strategy(std::string_view s) {
    if (s == "cropi") return RunStrategy::kCropi;
    if (s == "full_data") return RunStrategy::kFullData;
    if (s == "learnability") return RunStrategy::kLearnability;
    if (s == "pass_rate") return RunStrategy::kPassRate;
    if (s == "influence_once") return RunStrategy::kInfluenceOnce;
    throw ConfigError("unknown strategy '" + std::string(s) +
                      "' (expected cropi|full_data|learnability|pass_rate|influence_once)");
}

inline std::string to_string(RunStrategy s) {
    switch (s) {
        case RunStrategy::kCropi: return "cropi";
        case RunStrategy::kFullData: return "full_data";
        case RunStrategy::kLearnability: return "learnability";
        case RunStrategy::kPassRate: return "pass_rate";
        case RunStrategy::kInfluenceOnce: return "influence_once";
    }
    return "?";
}

/// The one-shot subset of a selecting baseline, chosen at the base policy.
/// `at_base` may supply precomputed features for influence_once.
inline PhaseSelection baseline_selection(const CurriculumConfig& cfg, const LabData& lab, RunStrategy strategy,
                                         const PhaseFeatures* at_base = nullptr) {
    PhaseSelection ps;
    ps.checkpoint = lab.base->label;
    const std::size_t quota = floor_fraction(cfg.alpha, lab.split->train_ids.size());
    if (strategy == RunStrategy::kInfluenceOnce) {
        ps = at_base ? select_from_features(*at_base, lab, cfg, 0, 0) : select_phase(*lab.base, lab, cfg, 0, 0);
        const auto u = baseline_utility(BaselineStrategy::kInfluenceOnce, *lab.store, lab.split->train_ids, &ps.table);
        ps.selection = select_by_utility(u, quota);
    } else if (strategy == RunStrategy::kLearnability || strategy == RunStrategy::kPassRate) {
        const auto bs = strategy == RunStrategy::kLearnability ? BaselineStrategy::kLearnability
                                                               : BaselineStrategy::kPassRate;
        const auto u = baseline_utility(bs, *lab.store, lab.split->train_ids);
        ps.selection = select_by_utility(u, quota);
        ps.table.checkpoint = lab.base->label;
        ps.table.fused = u;
    } else {
        throw ConfigError("baseline_selection: '" + to_string(strategy) + "' does not select");
    }
    return ps;
}

/// Baselines: full_data trains M*E steps on every training prompt; the others
/// select once at the base policy and train M*E steps on that fixed subset.
inline RunReport run_baseline(const CurriculumConfig& cfg, const LabData& lab, RunStrategy strategy) {
    if (strategy == RunStrategy::kCropi) throw ConfigError("run_baseline: cropi is not a baseline");
    RunReport report = detail::start_report(to_string(strategy), lab, cfg);
    PolicyParams<double> params = *lab.base;
    AdamState adam;
    std::vector<PromptId> subset;
    if (strategy == RunStrategy::kFullData) {
        subset = lab.split->train_ids;
    } else {
        auto t0 = detail::Clock::now();
        auto ps = baseline_selection(cfg, lab, strategy);
        report.selection_seconds += detail::seconds_since(t0);
        subset = ps.selection.ids;
        report.selections.push_back(std::move(ps));
    }
    detail::train_subset(params, subset, cfg.total_steps(), 0, lab, cfg, adam, report);
    report.final_params = std::move(params);
    return report;
}

inline RunReport run_strategy(const CurriculumConfig& cfg, const LabData& lab, RunStrategy s) {
    return s == RunStrategy::kCropi ? run_cropi(cfg, lab) : run_baseline(cfg, lab, s);
}

// ---------------------------------------------------------------------------
// Step-level speedup

/// Mean accuracy over the targeted test sets (all sets when none are named).
inline std::vector<std::pair<int, double>> targeted_curve(const RunReport& r, const std::vector<std::string>& targeted) {
    std::vector<std::size_t> cols;
    for (std::size_t i = 0; i < r.test_labels.size(); ++i)
        if (targeted.empty() || std::find(targeted.begin(), targeted.end(), r.test_labels[i]) != targeted.end())
            cols.push_back(i);
    if (cols.empty()) throw ConfigError("none of the targeted test sets appear in run '" + r.method + "'");
    std::vector<std::pair<int, double>> curve;
    for (const auto& e : r.evals) {
        double s = 0.0;
        for (auto c : cols) s += e.accuracy[c];
        curve.emplace_back(e.step, s / static_cast<double>(cols.size()));
    }
    return curve;
}

inline std::optional<int> first_step_reaching(const std::vector<std::pair<int, double>>& curve, double threshold) {
    for (const auto& [step, acc] : curve)
        if (acc >= threshold) return step;
    return std::nullopt;
}

/// Targeted accuracy of `r` at the last evaluation at or before frac * budget.
inline double accuracy_at_budget_fraction(const RunReport& r, const std::vector<std::string>& targeted, double frac) {
    const auto curve = targeted_curve(r, targeted);
    const int budget = r.steps.empty() ? 0 : static_cast<int>(r.steps.size());
    const double limit = frac * budget + 1e-9;
    double acc = curve.front().second;
    for (const auto& [step, a] : curve)
        if (step <= limit) acc = a;
    return acc;
}

struct SpeedupResult {
    double ratio = 1.0;  // +inf when only the target reaches the threshold
    std::optional<int> target_step;
    std::optional<int> reference_step;
    bool target_reached() const { return target_step.has_value(); }
};

/// (first reference step reaching threshold) / (first target step reaching it).
/// A target that never reaches the threshold reports ratio <= 1 with
/// target_reached() == false.
inline SpeedupResult speedup_report(const RunReport& target, const RunReport& reference, double threshold,
                                    const std::vector<std::string>& targeted) {
    if (target.test_labels != reference.test_labels)
        throw ConfigError("speedup_report: runs evaluate different test sets");
    SpeedupResult s;
    s.target_step = first_step_reaching(targeted_curve(target, targeted), threshold);
    s.reference_step = first_step_reaching(targeted_curve(reference, targeted), threshold);
    const double budget = std::max<double>(1.0, static_cast<double>(target.steps.size()));
    if (!s.target_step) {
        s.ratio = s.reference_step ? std::min(1.0, *s.reference_step / budget) : 1.0;
        return s;
    }
    if (!s.reference_step) {
        s.ratio = std::numeric_limits<double>::infinity();
        return s;
    }
    if (*s.target_step == 0) {
        s.ratio = *s.reference_step == 0 ? 1.0 : std::numeric_limits<double>::infinity();
        return s;
    }
    s.ratio = static_cast<double>(*s.reference_step) / static_cast<double>(*s.target_step);
    return s;
}

// ---------------------------------------------------------------------------
// Report files

/// Columns: step, phase, mean_return, kl_estimate, entropy, grad_norm, then
/// acc_<label> per test set (empty between evaluations).
inline void write_metrics_csv(const RunReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write metrics " + path);
    out << "step,phase,mean_return,kl_estimate,entropy,grad_norm";
    for (const auto& l : r.test_labels) out << ",acc_" << l;
    out << '\n';
    std::map<int, const EvalRecord*> by_step;
    for (const auto& e : r.evals) by_step[e.step] = &e;
    for (const auto& s : r.steps) {
        const auto& m = s.metrics;
        out << m.step << ',' << s.phase << ',' << format_real(m.mean_return) << ',' << format_real(m.kl_estimate)
            << ',' << format_real(m.entropy) << ',' << format_real(m.grad_norm);
        auto it = by_step.find(m.step);
        for (std::size_t i = 0; i < r.test_labels.size(); ++i) {
            out << ',';
            if (it != by_step.end()) out << format_real(it->second->accuracy[i]);
        }
        out << '\n';
    }
}

/// Columns: step, acc_<label>...; includes the step-0 evaluation of the base policy.
inline void write_evals_csv(const RunReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write evaluations " + path);
    out << "step";
    for (const auto& l : r.test_labels) out << ",acc_" << l;
    out << '\n';
    for (const auto& e : r.evals) {
        out << e.step;
        for (double a : e.accuracy) out << ',' << format_real(a);
        out << '\n';
    }
}

/// Columns: phase, at_step, order, id, utility.
inline void write_selection_csv(const PhaseSelection& ps, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write selection " + path);
    out << "phase,at_step,order,id,utility\n";
    for (std::size_t i = 0; i < ps.selection.ids.size(); ++i) {
        const auto id = ps.selection.ids[i];
        auto it = ps.table.fused.find(id);
        out << ps.phase << ',' << ps.at_step << ',' << i << ',' << id << ','
            << (it != ps.table.fused.end() ? format_real(it->second) : std::string()) << '\n';
    }
}

/// Reads an evals CSV back into a report skeleton usable by speedup_report.
inline RunReport read_evals_csv(const std::string& path, const std::string& method, int total_steps) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("missing evaluations file " + path);
    RunReport r;
    r.method = method;
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty evaluations file " + path);
    std::vector<std::string> cols;
    for (std::size_t pos = 0;;) {
        auto next = line.find(',', pos);
        cols.push_back(line.substr(pos, next - pos));
        if (next == std::string::npos) break;
        pos = next + 1;
    }
    for (std::size_t i = 1; i < cols.size(); ++i) r.test_labels.push_back(cols[i].substr(4));
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EvalRecord e;
        std::size_t pos = 0, idx = 0;
        for (;;) {
            auto next = line.find(',', pos);
            auto cell = line.substr(pos, next - pos);
            if (idx == 0) e.step = std::stoi(cell);
            else e.accuracy.push_back(parse_real(cell));
            ++idx;
            if (next == std::string::npos) break;
            pos = next + 1;
        }
        r.evals.push_back(std::move(e));
    }
    r.steps.resize(static_cast<std::size_t>(total_steps));
    return r;
}

}  // namespace cropi
