// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance 4 9        run the listed criteria only
//
// Exit status is non-zero when any criterion that ran failed.

#include <Eigen/Dense>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "cropi/pipeline.hpp"
#include "test_util.hpp"

using namespace cropi;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string config_path(const std::string& name) { return std::string(CROPI_CONFIG_DIR) + "/" + name; }

// A small lab with a warm-started base policy and naturally mixed returns.
struct SmallLab {
    Dataset ds;
    PolicyParams<double> base;
    OfflineStore store;

    explicit SmallLab(std::uint64_t seed) {
        ds = generate_dataset(testutil::mixed_families(5), 30, derive_seed(seed, 1));
        base = warm_start(init_policy(PolicyArch{tok::vocab_size_for(5), 6, 8, 12}, derive_seed(seed, 2), 0.3),
                          ds.instances, 80, 8, 0.5, 0.3, derive_seed(seed, 3));
        base.label = "base";
        std::vector<PromptId> ids;
        for (const auto& inst : ds.instances) ids.push_back(inst.id);
        store = collect_offline(base, ds, ids, 8, 6, derive_seed(seed, 4));
    }
};

// Oracle for the on-policy group-normalized gradient: advantages from the
// textbook formula, one kernel call per trajectory with uniform weights.
std::vector<double> oracle_group_gradient(const PolicyParams<double>& p, const TaskInstance& inst,
                                          const std::vector<Trajectory>& group) {
    const double K = static_cast<double>(group.size());
    double mean = 0.0;
    for (const auto& t : group) mean += t.ret;
    mean /= K;
    double var = 0.0;
    for (const auto& t : group) var += (t.ret - mean) * (t.ret - mean);
    const double sd = std::sqrt(var / K);
    std::vector<double> g(p.theta.size(), 0.0);
    if (sd == 0.0) return g;
    for (const auto& t : group) {
        if (t.tokens.empty()) continue;
        const double a = (t.ret - mean) / sd;
        const std::vector<double> w(t.tokens.size(), a / (K * static_cast<double>(t.tokens.size())));
        const auto gt = weighted_logprob_gradient(p, inst, t, std::span<const double>(w));
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gt[i];
    }
    return g;
}

// ---------------------------------------------------------------------------

Outcome c1_off_policy_identity() {
    const auto t0 = std::chrono::steady_clock::now();
    SmallLab lab(11);
    std::vector<PromptId> signal;
    for (const auto& [id, g] : lab.store.entries)
        if (!lab.store.zero_signal(id)) signal.push_back(id);
    if (signal.size() < 20) return {false, fmt("only %zu prompts with mixed returns", signal.size())};
    Rng rng(12);
    rng.shuffle(signal);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const auto id = signal[static_cast<std::size_t>(i)];
        const auto off = off_policy_gradient(lab.base, lab.ds, lab.store, id);
        const auto on = oracle_group_gradient(lab.base, lab.ds.at(id), lab.store.group(id));
        worst = std::max(worst, testutil::max_relative_error(off.grad, on, 1e-8));
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-6 && secs < 10.0,
            fmt("max relative error %.2e over 20 prompts (limit 1e-6), %.1fs (limit 10s)", worst, secs)};
}

Outcome c2_gradient_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    const PolicyArch arch{tok::vocab_size_for(8), 6, 8, 12};
    const auto d = arch.param_count();
    if (d > 2000) return {false, fmt("d = %zu exceeds 2000", d)};
    const auto ds = generate_dataset(testutil::mixed_families(8), 10, 31);
    double worst = 0.0;
    for (int c = 0; c < 20; ++c) {
        const auto tc = testutil::random_gradient_case(arch, ds, 5000 + static_cast<std::uint64_t>(c));
        const auto analytic = weighted_logprob_gradient(tc.params, std::span<const Token>(tc.prompt),
                                                        std::span<const Token>(tc.response),
                                                        std::span<const double>(tc.weights));
        const auto numeric = testutil::finite_difference_gradient(tc, 1e-5);
        worst = std::max(worst, testutil::max_relative_error(analytic, numeric));
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 60.0,
            fmt("d = %zu, max relative error %.2e over 20 cases (limit 1e-4), %.1fs", d, worst, secs)};
}

Outcome c3_advantage_algebra() {
    const std::vector<int> ex{1, 1, 0, 0};
    const auto a = group_advantage(std::span<const int>(ex));
    bool ok = a == std::vector<double>{1.0, 1.0, -1.0, -1.0};
    const std::vector<int> same{1, 1, 1, 1};
    const auto z = group_advantage(std::span<const int>(same));
    ok = ok && std::all_of(z.begin(), z.end(), [](double v) { return v == 0.0; });
    // Zero-signal path: an all-equal stored group yields a flagged zero gradient.
    SmallLab lab(21);
    auto store = lab.store;
    const auto id = store.entries.begin()->first;
    for (auto& t : store.entries[id]) t.ret = 1;
    const auto off = off_policy_gradient(lab.base, lab.ds, store, id);
    ok = ok && off.zero_signal && std::all_of(off.grad.begin(), off.grad.end(), [](double v) { return v == 0.0; });
    Rng rng(22);
    double worst_mean = 0.0, worst_sd = 0.0;
    int tested = 0;
    while (tested < 1000) {
        const std::size_t K = 2 + rng.below(31);
        std::vector<double> r(K);
        for (auto& x : r) x = rng.below(3) == 0 ? rng.normal() * 5.0 : static_cast<double>(rng.below(2));
        const auto adv = group_advantage(std::span<const double>(r));
        double m = 0.0;
        for (double v : adv) m += v;
        m /= static_cast<double>(K);
        double var = 0.0;
        for (double v : adv) var += (v - m) * (v - m);
        const double sd = std::sqrt(var / static_cast<double>(K));
        if (std::all_of(r.begin(), r.end(), [&](double v) { return v == r.front(); })) continue;
        worst_mean = std::max(worst_mean, std::abs(m));
        worst_sd = std::max(worst_sd, std::abs(sd - 1.0));
        ++tested;
    }
    ok = ok && worst_mean < 1e-10 && worst_sd < 1e-10;
    return {ok, fmt("{1,1,0,0} -> {1,1,-1,-1}, equal returns -> zero signal; 1000 groups: |mean| <= %.1e, "
                    "|std - 1| <= %.1e",
                    worst_mean, worst_sd)};
}

Outcome c4_jl_preservation() {
    const auto t0 = std::chrono::steady_clock::now();
    constexpr std::size_t d = 50000, k = 4096, pairs = 100;
    Rng rng(41);
    std::vector<std::vector<double>> vecs;
    std::vector<double> raw;
    for (std::size_t p = 0; p < pairs; ++p) {
        // Pairs spread over the whole cosine range.
        const double c = -1.0 + 2.0 * rng.uniform();
        std::vector<double> a(d), n(d), b(d);
        for (auto& x : a) x = rng.normal();
        for (auto& x : n) x = rng.normal();
        const double s = std::sqrt(1.0 - c * c);
        for (std::size_t i = 0; i < d; ++i) b[i] = c * a[i] + s * n[i];
        raw.push_back(cossim_normalized(a, b));
        vecs.push_back(std::move(a));
        vecs.push_back(std::move(b));
    }
    const auto proj = make_projector(d, k, 1.0, 42);
    std::vector<std::span<const double>> views(vecs.begin(), vecs.end());
    const auto out = project_batch<double>(proj, views);
    int good = 0;
    double worst = 0.0;
    for (std::size_t p = 0; p < pairs; ++p) {
        const double err = std::abs(cossim_normalized(out[2 * p], out[2 * p + 1]) - raw[p]);
        worst = std::max(worst, err);
        good += err <= 0.1 ? 1 : 0;
    }
    const double secs = seconds_since(t0);
    return {good >= 95 && secs < 60.0,
            fmt("%d/100 pairs within 0.1 (need 95), worst error %.3f, %.1fs (limit 60s)", good, worst, secs)};
}

Outcome c5_sparse_equivalence() {
    Rng rng(51);
    double worst = 0.0;
    bool masked_ok = true;
    for (int c = 0; c < 20; ++c) {
        const std::size_t d = 100 + rng.below(1901);
        const std::size_t k = 1 + rng.below(64);
        const double ratio = c % 2 ? 1.0 : 0.05 + 0.5 * rng.uniform();
        const auto p = make_projector(d, k, ratio, 500 + static_cast<std::uint64_t>(c));
        std::vector<double> g(d);
        for (auto& x : g) x = rng.normal();
        // Dense oracle: the full k x d matrix with dropped columns zeroed.
        Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
        for (auto col : p.indices)
            for (std::size_t r = 0; r < k; ++r)
                dense(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)) = gaussian_entry(p.seed, r, col);
        const Eigen::VectorXd expect = dense * Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(d));
        const auto fast = project(p, std::span<const double>(g));
        for (std::size_t i = 0; i < k; ++i) worst = std::max(worst, std::abs(fast[i] - expect(static_cast<Eigen::Index>(i))));
        // P_sparse g = P[:, S] g[S]: zeroing everything outside S changes nothing.
        std::vector<double> masked(d, 0.0);
        for (auto i : p.indices) masked[i] = g[i];
        masked_ok = masked_ok && project(p, std::span<const double>(masked)) == fast;
    }
    return {worst <= 1e-10 && masked_ok,
            fmt("max |streaming - dense| %.2e over 20 gradients (limit 1e-10); masked input identical: %s", worst,
                masked_ok ? "yes" : "no")};
}

Outcome c6_precision() {
    Rng rng(61);
    constexpr Eigen::Index N = 50;
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(N, N);
    const double self = precision_at_frac(a, a, 0.1);
    const double frac = 0.1;
    double sum = 0.0;
    for (int t = 0; t < 1000; ++t) {
        Eigen::MatrixXd r(N, N), s(N, N);
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index j = 0; j < N; ++j) {
                r(i, j) = rng.uniform();
                s(i, j) = rng.uniform();
            }
        sum += precision_at_frac(r, s, frac);
    }
    const double mean = sum / 1000.0;
    return {self == 1.0 && std::abs(mean - frac) <= 0.05,
            fmt("identical -> %.17g; random rows at N=50: mean %.4f (target %.2f +- 0.05)", self, mean, frac)};
}

struct FidelityStats {
    std::vector<double> cos;  // in prompt order
    int skipped_fresh = 0;
    long good = 0;
    double median = 0.0;

    std::string describe() const {
        if (cos.empty()) return "no eligible prompts";
        auto sorted = cos;
        std::sort(sorted.begin(), sorted.end());
        const auto q = [&](double f) { return sorted[static_cast<std::size_t>(f * static_cast<double>(sorted.size() - 1))]; };
        int hist[10] = {};
        for (double c : cos) hist[std::clamp(static_cast<int>((c + 1.0) * 5.0), 0, 9)]++;
        std::string h;
        for (int b = 0; b < 10; ++b) h += fmt(" [%.1f,%.1f):%d", -1.0 + 0.2 * b, -0.8 + 0.2 * b, hist[b]);
        return fmt("%ld/%zu with cosine >= 0.6; min %.3f q25 %.3f median %.3f q75 %.3f max %.3f; %d skipped "
                   "(fresh group had no signal); histogram:",
                   good, cos.size(), sorted.front(), q(0.25), q(0.5), q(0.75), sorted.back(), skipped_fresh) +
               h;
    }
};

// First 50 training prompts (ascending id) that are eligible in the theta_0
// store and whose fresh 8-rollout group at `p` also has mixed returns.
FidelityStats measure_fidelity(const Lab& lab, const PolicyParams<double>& p) {
    FidelityStats st;
    for (auto id : lab.data.split.train_ids) {
        if (lab.store.zero_signal(id)) continue;
        auto [grp, on] = fresh_on_policy_gradient(p, lab.data.train.at(id), 8, lab.cfg.rollout.max_len,
                                                  derive_seed(lab.cfg.named_seed("rollout"), id, 0x0f5e));
        if (std::all_of(grp.begin(), grp.end(), [&](const Trajectory& t) { return t.ret == grp.front().ret; })) {
            ++st.skipped_fresh;
            continue;
        }
        const auto off = off_policy_gradient(p, lab.data.train, lab.store, id);
        st.cos.push_back(cossim_normalized(std::span<const double>(off.grad), std::span<const double>(on)));
        if (st.cos.size() == 50) break;
    }
    st.good = std::count_if(st.cos.begin(), st.cos.end(), [](double c) { return c >= 0.6; });
    if (!st.cos.empty()) {
        auto sorted = st.cos;
        std::sort(sorted.begin(), sorted.end());
        st.median = sorted[sorted.size() / 2];
    }
    return st;
}

// KL plateau rule: 50-step windows; after at least 150 steps, stop once the
// last three window means are all below 0.1 and within 20% of their maximum.
// The policy at the end of the last window whose mean stayed below 0.1 is
// kept as well, so the distribution is reported even without a plateau.
Outcome c7_fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = load_config(config_path("two_family.yaml"));
    cfg.grpo.learning_rate = 0.001;
    cfg.grpo.kl_coef = 0.001;
    const auto lab = build_lab(cfg);
    const auto& ids = lab.data.split.train_ids;
    auto p = lab.base;
    auto below = lab.base;
    int below_step = 0;
    AdamState adam;
    constexpr int kWindow = 50, kMinSteps = 150, kMaxSteps = 3000;
    std::vector<double> window_means;
    double acc = 0.0;
    int step = 0;
    bool plateau = false;
    while (step < kMaxSteps && !plateau) {
        ++step;
        Rng rng(derive_seed(cfg.named_seed("training"), step, 0x7f1d));
        std::vector<const TaskInstance*> batch;
        for (int b = 0; b < cfg.grpo.batch_prompts; ++b) batch.push_back(&lab.data.train.at(ids[rng.below(ids.size())]));
        const auto groups = sample_groups(p, batch, cfg.grpo.group_size, cfg.grpo.max_len,
                                          derive_seed(cfg.named_seed("training"), step, 0x7f1e));
        auto [next, m] = grpo_step(p, p, lab.base, groups, cfg.grpo, &adam, step);
        p = std::move(next);
        acc += m.kl_estimate;
        if (step % kWindow == 0) {
            window_means.push_back(acc / kWindow);
            acc = 0.0;
            if (window_means.back() < 0.1 && below_step == step - kWindow) {
                below = p;
                below_step = step;
            }
            if (step >= kMinSteps) {
                const auto n = window_means.size();
                const double lo = std::min({window_means[n - 1], window_means[n - 2], window_means[n - 3]});
                const double hi = std::max({window_means[n - 1], window_means[n - 2], window_means[n - 3]});
                plateau = hi < 0.1 && hi - lo <= 0.2 * hi;
            }
        }
    }
    std::string kl_trace;
    for (std::size_t i = 0; i < window_means.size(); i += window_means.size() > 20 ? 5 : 1)
        kl_trace += fmt(" %d:%.4f", static_cast<int>((i + 1) * kWindow), window_means[i]);
    std::cout << "    C7 KL window means (step:mean):" << kl_trace << '\n';
    const auto final_stats = measure_fidelity(lab, p);
    std::cout << "    C7 at step " << step << ": " << final_stats.describe() << '\n';
    if (!plateau) {
        const auto early = measure_fidelity(lab, below);
        std::cout << "    C7 at step " << below_step << " (last window with KL < 0.1): " << early.describe() << '\n';
    }
    const double secs = seconds_since(t0);
    const bool enough = final_stats.cos.size() == 50 && final_stats.good >= 30;
    return {plateau && enough && secs < 600.0,
            fmt("%s after %d steps (final window KL %.3f); %ld/%zu prompts with cosine >= 0.6 (need 30/50), median "
                "%.3f; %.0fs",
                plateau ? "KL plateau below 0.1" : "no KL plateau below 0.1", step, window_means.back(),
                final_stats.good, final_stats.cos.size(), final_stats.median, secs)};
}

Outcome c8_rrf_oracle() {
    Rng rng(81);
    int agree = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t N = 1 + rng.below(trial % 10 == 0 ? 10000 : 600);
        const std::size_t V = 1 + rng.below(4);
        std::vector<PromptId> ids;
        for (std::size_t i = 0; i < N; ++i) ids.push_back(static_cast<PromptId>(i * 7 + 3));
        const bool coarse = trial % 2 == 0;  // coarse scores force many ties
        std::vector<std::map<PromptId, double>> scores(V);
        for (auto& m : scores)
            for (auto id : ids) m[id] = coarse ? static_cast<double>(rng.below(4)) : rng.normal();
        const double alpha = 0.02 + 0.6 * rng.uniform();
        const std::size_t n_train = N + rng.below(N + 1);
        const auto got = select_top(rank_and_fuse(scores, ids), alpha, n_train);
        // Brute force: stable sorts give the ascending-id tie rule directly.
        std::map<PromptId, double> fused;
        for (const auto& m : scores) {
            auto order = ids;
            std::stable_sort(order.begin(), order.end(), [&](PromptId a, PromptId b) { return m.at(a) > m.at(b); });
            for (std::size_t r = 0; r < order.size(); ++r) fused[order[r]] += 1.0 / static_cast<double>(r + 1);
        }
        auto order = ids;
        std::stable_sort(order.begin(), order.end(), [&](PromptId a, PromptId b) { return fused[a] > fused[b]; });
        order.resize(std::min(floor_fraction(alpha, n_train), order.size()));
        agree += got.ids == order ? 1 : 0;
    }
    return {agree == 100, fmt("%d/100 random score tables match the brute-force oracle", agree)};
}

Outcome c9_curriculum() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto base_cfg = load_config(config_path("two_family.yaml"));
    std::vector<double> ratios;
    bool subsets_equal = true;
    std::string per_seed;
    for (std::uint64_t seed : {1, 2, 3}) {
        auto cfg = base_cfg;
        cfg.seed = seed;
        const auto lab = build_lab(cfg);
        const auto view = lab.view();
        const auto cc = cfg.curriculum();
        const auto cr = run_cropi(cc, view);
        const auto fd = run_baseline(cc, view, RunStrategy::kFullData);
        const auto once = baseline_selection(cc, view, RunStrategy::kInfluenceOnce);
        subsets_equal = subsets_equal && once.selection.ids == cr.selections.front().selection.ids;
        const double thr = accuracy_at_budget_fraction(fd, cc.targeted_sets, cfg.report.budget_fraction);
        const auto sp = speedup_report(cr, fd, thr, cc.targeted_sets);
        ratios.push_back(sp.ratio);
        per_seed += fmt(" seed %d: threshold %.3f, cropi step %d, full-data step %d, speedup %.3f;", static_cast<int>(seed),
                        thr, sp.target_step.value_or(-1), sp.reference_step.value_or(-1), sp.ratio);
    }
    std::cout << "    C9" << per_seed << '\n';
    auto sorted = ratios;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[1];
    const double secs = seconds_since(t0);
    return {median >= 1.5 && subsets_equal && secs < 1800.0,
            fmt("median speedup %.3f (need 1.5); phase-0 subset equals influence_once: %s; %.0fs (limit 1800s)", median,
                subsets_equal ? "yes" : "no", secs)};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome c10_determinism() {
    const auto cfg = load_config(config_path("determinism.yaml"));
    const auto root = std::filesystem::temp_directory_path() / ("cropi_acceptance_" + cfg.digest_hex());
    std::filesystem::remove_all(root);
    for (const char* run : {"a", "b"}) Pipeline(cfg, root / run, nullptr).run(Stage::kFull);
    int compared = 0, differing = 0;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(root / "a")) {
        const auto name = entry.path().filename().string();
        const bool selection = name.rfind("selection_phase", 0) == 0 || entry.path().parent_path().filename() == "select";
        const bool record = name == "final_accuracy.json";
        if (!entry.is_regular_file() || !(selection || record) || name == "manifest.json") continue;
        const auto rel = std::filesystem::relative(entry.path(), root / "a");
        ++compared;
        if (slurp(entry.path()) != slurp(root / "b" / rel)) ++differing;
    }
    std::filesystem::remove_all(root);
    return {compared > 0 && differing == 0,
            fmt("%d selection CSVs and final-accuracy records compared across two full runs, %d differ", compared,
                differing)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"off-policy identity at theta_0", c1_off_policy_identity},
        {"gradient vs central finite differences", c2_gradient_oracle},
        {"advantage algebra", c3_advantage_algebra},
        {"JL preservation at d=50000, k=4096", c4_jl_preservation},
        {"sparse projection vs dense oracle", c5_sparse_equivalence},
        {"precision_at_frac", c6_precision},
        {"off-policy fidelity under training", c7_fidelity},
        {"RRF and selection vs brute force", c8_rrf_oracle},
        {"end-to-end curriculum speedup", c9_curriculum},
        {"pipeline determinism", c10_determinism}};
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i + 1);
        if (!wanted.empty() && !wanted.contains(n)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS" : "FAIL") << " C" << n << " " << criteria[i].first << ": " << o.detail << std::endl;
        failures += o.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
