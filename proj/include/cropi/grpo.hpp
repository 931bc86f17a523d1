#pragma once

// GRPO: group-normalized advantages, clipped importance-ratio surrogate,
// k3 KL penalty against a reference policy and an entropy bonus.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cropi/common.hpp"
#include "cropi/policy.hpp"
#include "cropi/taskgen.hpp"

namespace cropi {

enum class OptimizerKind { kSga, kAdam };

struct GrpoHyper {
    double learning_rate = 0.05;
    double clip_range = 0.2;
    double kl_coef = 0.001;
    double entropy_coef = 0.001;
    int group_size = 8;
    int batch_prompts = 8;
    int max_len = 8;
    OptimizerKind optimizer = OptimizerKind::kSga;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw ConfigError("grpo: learning_rate must be >= 0");
        if (!(clip_range >= 0.0)) throw ConfigError("grpo: clip_range must be >= 0");
        if (!(kl_coef >= 0.0)) throw ConfigError("grpo: kl_coef must be >= 0");
        if (!(entropy_coef >= 0.0)) throw ConfigError("grpo: entropy_coef must be >= 0");
        if (group_size < 2) throw ConfigError("grpo: group_size must be >= 2");
        if (batch_prompts < 1) throw ConfigError("grpo: batch_prompts must be >= 1");
        if (max_len < 1) throw ConfigError("grpo: max_len must be >= 1");
    }
};

struct TrainMetrics {
    int step = 0;
    double mean_return = 0.0;
    double kl_estimate = 0.0;
    double entropy = 0.0;
    double grad_norm = 0.0;
};

/// (R_k - mean) / std with the population std. All-equal returns give zeros.
inline std::vector<double> group_advantage(std::span<const double> returns) {
    if (returns.size() < 2) throw DataError("group_advantage: need at least 2 returns");
    std::vector<double> adv(returns.size(), 0.0);
    if (std::all_of(returns.begin(), returns.end(), [&](double r) { return r == returns.front(); })) return adv;
    const double n = static_cast<double>(returns.size());
    double mean = 0.0;
    for (double r : returns) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : returns) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / n);
    if (sd == 0.0) return adv;
    for (std::size_t k = 0; k < returns.size(); ++k) adv[k] = (returns[k] - mean) / sd;
    return adv;
}

inline std::vector<double> group_advantage(std::span<const int> returns) {
    std::vector<double> r(returns.begin(), returns.end());
    return group_advantage(std::span<const double>(r));
}

/// Per-token k3 estimator of KL(pi_theta || pi_ref): ratio - 1 - log ratio with
/// ratio = pi_ref / pi_theta. Nonnegative for every input.
inline double k3_kl(double logp_theta, double logp_ref) {
    const double log_ratio = logp_ref - logp_theta;
    return std::expm1(log_ratio) - log_ratio;
}

/// K trajectories of one prompt, all sampled from the same old policy.
struct TrajectoryGroup {
    const TaskInstance* instance = nullptr;
    std::vector<Trajectory> trajectories;
};

template <TokenPolicy M>
std::vector<TrajectoryGroup> sample_groups(const M& model, const std::vector<const TaskInstance*>& prompts, int K,
                                           int max_len, std::uint64_t seed) {
    std::vector<TrajectoryGroup> groups(prompts.size());
    parallel_for(prompts.size(), [&](std::size_t i) {
        groups[i].instance = prompts[i];
        for (int k = 0; k < K; ++k)
            groups[i].trajectories.push_back(sample_trajectory(model, *prompts[i], max_len, derive_seed(seed, i, k)));
    });
    return groups;
}

struct AdamState {
    std::vector<double> m, v;
    long t = 0;
};

namespace detail {

struct TokenStats {
    double kl = 0.0;
    double entropy = 0.0;
};

/// Accumulates the GRPO objective gradient contribution of one trajectory.
template <typename Real>
TokenStats accumulate_grpo_trajectory(const PolicyParams<Real>& params, const PolicyParams<Real>& old_params,
                                      const PolicyParams<Real>& ref_params, const TaskInstance& inst,
                                      const Trajectory& tr, double advantage, double scale, const GrpoHyper& hyper,
                                      std::span<Real> grad) {
    TokenStats stats;
    const std::size_t T = tr.tokens.size();
    if (T == 0) return stats;
    const double per_token = scale / static_cast<double>(T);
    std::vector<Token> history = inst.prompt_tokens;
    std::vector<Real> dlogits(static_cast<std::size_t>(params.arch.vocab_size));
    for (std::size_t t = 0; t < T; ++t) {
        const Token x = tr.tokens[t];
        const auto f = params.forward(history);
        std::vector<Real> lp = f.logits;
        log_softmax_inplace(std::span<Real>(lp));
        const double lp_x = lp[static_cast<std::size_t>(x)];
        const double lp_old = old_params.log_probs(history)[static_cast<std::size_t>(x)];
        const double lp_ref = ref_params.log_probs(history)[static_cast<std::size_t>(x)];

        const double ratio = std::exp(lp_x - lp_old);
        const bool clipped = (advantage >= 0.0 && ratio > 1.0 + hyper.clip_range) ||
                             (advantage < 0.0 && ratio < 1.0 - hyper.clip_range);
        const double surrogate_w = clipped ? 0.0 : advantage * ratio;
        // d k3 / d logp_theta = 1 - pi_ref / pi_theta; the penalty is subtracted.
        const double kl_w = -hyper.kl_coef * (1.0 - std::exp(lp_ref - lp_x));
        const double w = (surrogate_w + kl_w) * per_token;

        double H = 0.0;
        for (Real l : lp) H -= std::exp(static_cast<double>(l)) * l;
        stats.kl += k3_kl(lp_x, lp_ref) / static_cast<double>(T);
        stats.entropy += H / static_cast<double>(T);

        const double ent_scale = hyper.entropy_coef * per_token;
        for (std::size_t v = 0; v < dlogits.size(); ++v) {
            const double p = std::exp(static_cast<double>(lp[v]));
            // logprob term: w (onehot - p); entropy term: -p (log p + H)
            dlogits[v] = static_cast<Real>(-w * p - ent_scale * p * (static_cast<double>(lp[v]) + H));
        }
        dlogits[static_cast<std::size_t>(x)] += static_cast<Real>(w);
        params.backward(f, dlogits, grad);
        history.push_back(x);
    }
    return stats;
}

}  // namespace detail

/// One GRPO update. Returns the new parameters; the inputs are not modified.
template <typename Real>
std::pair<PolicyParams<Real>, TrainMetrics> grpo_step(const PolicyParams<Real>& params,
                                                      const PolicyParams<Real>& old_params,
                                                      const PolicyParams<Real>& ref_params,
                                                      const std::vector<TrajectoryGroup>& groups,
                                                      const GrpoHyper& hyper, AdamState* adam = nullptr,
                                                      int step = 0) {
    hyper.validate();
    if (groups.empty()) throw DataError("grpo_step: empty batch");
    std::size_t n_traj = 0;
    for (const auto& g : groups) {
        if (!g.instance) throw DataError("grpo_step: group without prompt");
        if (static_cast<int>(g.trajectories.size()) != hyper.group_size)
            throw DataError("grpo_step: group size " + std::to_string(g.trajectories.size()) + " != K " +
                            std::to_string(hyper.group_size));
        n_traj += g.trajectories.size();
    }
    const double scale = 1.0 / static_cast<double>(n_traj);

    std::vector<std::vector<Real>> partial(groups.size());
    std::vector<detail::TokenStats> stats(groups.size());
    std::vector<double> ret_sum(groups.size(), 0.0);
    parallel_for(groups.size(), [&](std::size_t i) {
        const auto& g = groups[i];
        std::vector<int> rets;
        for (const auto& tr : g.trajectories) rets.push_back(tr.ret);
        const auto adv = group_advantage(std::span<const int>(rets));
        partial[i].assign(params.theta.size(), Real(0));
        for (std::size_t k = 0; k < g.trajectories.size(); ++k) {
            auto s = detail::accumulate_grpo_trajectory(params, old_params, ref_params, *g.instance,
                                                        g.trajectories[k], adv[k], scale, hyper,
                                                        std::span<Real>(partial[i]));
            stats[i].kl += s.kl;
            stats[i].entropy += s.entropy;
            ret_sum[i] += rets[k];
        }
    });

    std::vector<Real> grad(params.theta.size(), Real(0));
    TrainMetrics m;
    m.step = step;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += partial[i][j];
        m.kl_estimate += stats[i].kl;
        m.entropy += stats[i].entropy;
        m.mean_return += ret_sum[i];
    }
    m.kl_estimate *= scale;
    m.entropy *= scale;
    m.mean_return *= scale;
    m.grad_norm = norm2(std::span<const Real>(grad));
    if (!std::isfinite(m.grad_norm)) throw NumericError("grpo_step: non-finite gradient at step " + std::to_string(step));

    PolicyParams<Real> next = params;
    const double lr = hyper.learning_rate;
    if (hyper.optimizer == OptimizerKind::kAdam && adam) {
        if (adam->m.empty()) {
            adam->m.assign(grad.size(), 0.0);
            adam->v.assign(grad.size(), 0.0);
        }
        ++adam->t;
        const double b1 = hyper.adam_beta1, b2 = hyper.adam_beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam->t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam->t));
        for (std::size_t j = 0; j < grad.size(); ++j) {
            const double g = grad[j];
            adam->m[j] = b1 * adam->m[j] + (1.0 - b1) * g;
            adam->v[j] = b2 * adam->v[j] + (1.0 - b2) * g * g;
            next.theta[j] += static_cast<Real>(lr * (adam->m[j] / c1) / (std::sqrt(adam->v[j] / c2) + hyper.adam_eps));
        }
    } else {
        // Gradient ascent on the objective.
        for (std::size_t j = 0; j < grad.size(); ++j) next.theta[j] += static_cast<Real>(lr) * grad[j];
    }
    return {std::move(next), m};
}

enum class DecodeMode { kGreedy, kSampled };

/// Fraction of instances whose decoded response verifies.
template <TokenPolicy M>
double evaluate_accuracy(const M& model, const Dataset& dataset, const std::vector<PromptId>& test_ids, int max_len,
                         DecodeMode mode = DecodeMode::kGreedy, std::uint64_t seed = 0) {
    if (test_ids.empty()) throw DataError("evaluate_accuracy: empty test set");
    std::vector<int> correct(test_ids.size(), 0);
    parallel_for(test_ids.size(), [&](std::size_t i) {
        const auto& inst = dataset.at(test_ids[i]);
        if (mode == DecodeMode::kGreedy) {
            correct[i] = verify(inst, greedy_decode(model, inst, max_len));
        } else {
            correct[i] = sample_trajectory(model, inst, max_len, derive_seed(seed, i)).ret;
        }
    });
    double s = 0.0;
    for (int c : correct) s += c;
    return s / static_cast<double>(test_ids.size());
}

}  // namespace cropi
