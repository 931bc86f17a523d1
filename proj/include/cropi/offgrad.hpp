#pragma once

// Off-policy gradient of a prompt's group-normalized objective at any
// checkpoint, estimated from the fixed behavior-policy trajectory store with
// per-token importance ratios (no clipping).

#include <cmath>
#include <string>
#include <vector>

#include "cropi/common.hpp"
#include "cropi/grpo.hpp"
#include "cropi/policy.hpp"
#include "cropi/rollout.hpp"
#include "cropi/taskgen.hpp"

namespace cropi {

template <typename Real = double>
struct OffPolicyGradient {
    PromptId prompt_id = 0;
    std::string checkpoint;
    std::vector<Real> grad;
    bool zero_signal = false;
    int ratio_cap_hits = 0;  // tokens whose ratio exceeded the warning cap
    double max_log_ratio = 0.0;
};

inline constexpr double kDefaultRatioCap = 1e4;

/// grad = (1/K) sum_k (1/|tau_k|) sum_t rho_kt A_k grad log pi(x_kt | s_kt),
/// rho_kt = exp(log pi(x_kt|s_kt) - behavior_logprob_kt), A from the stored
/// returns.
template <typename Real>
OffPolicyGradient<Real> off_policy_gradient(const PolicyParams<Real>& params, const Dataset& dataset,
                                            const OfflineStore& store, PromptId prompt_id,
                                            double ratio_cap = kDefaultRatioCap) {
    const auto& group = store.group(prompt_id);
    const auto& inst = dataset.at(prompt_id);
    OffPolicyGradient<Real> out;
    out.prompt_id = prompt_id;
    out.checkpoint = params.label;
    out.grad.assign(params.theta.size(), Real(0));
    out.max_log_ratio = -std::numeric_limits<double>::infinity();

    std::vector<int> rets;
    for (const auto& t : group) rets.push_back(t.ret);
    const auto adv = group_advantage(std::span<const int>(rets));
    out.zero_signal = std::all_of(adv.begin(), adv.end(), [](double a) { return a == 0.0; });
    if (out.zero_signal) return out;

    const double K = static_cast<double>(group.size());
    for (std::size_t k = 0; k < group.size(); ++k) {
        const auto& tr = group[k];
        if (tr.tokens.empty() || adv[k] == 0.0) continue;
        const auto lp = token_logprobs(params, std::span<const Token>(inst.prompt_tokens),
                                       std::span<const Token>(tr.tokens));
        std::vector<double> w(tr.tokens.size());
        const double base = adv[k] / (K * static_cast<double>(tr.tokens.size()));
        for (std::size_t t = 0; t < w.size(); ++t) {
            const double log_ratio = lp[t] - tr.behavior_logprobs[t];
            out.max_log_ratio = std::max(out.max_log_ratio, log_ratio);
            const double rho = std::exp(log_ratio);
            if (rho > ratio_cap) ++out.ratio_cap_hits;
            w[t] = rho * base;
        }
        accumulate_weighted_logprob_gradient(params, std::span<const Token>(inst.prompt_tokens),
                                             std::span<const Token>(tr.tokens), std::span<const double>(w),
                                             std::span<Real>(out.grad));
    }
    if (!all_finite(std::span<const Real>(out.grad))) {
        throw NumericError("off_policy_gradient: non-finite gradient for prompt " + std::to_string(prompt_id) +
                           " at checkpoint '" + params.label + "' (max log ratio " + format_real(out.max_log_ratio) +
                           ", " + std::to_string(out.ratio_cap_hits) + " ratios above cap " +
                           format_real(ratio_cap) + ")");
    }
    return out;
}

/// On-policy group-normalized REINFORCE gradient from trajectories sampled by
/// `params` itself: (1/K) sum_k (1/|tau_k|) sum_t A_k grad log pi(x_kt|s_kt).
template <typename Real>
std::vector<Real> on_policy_gradient(const PolicyParams<Real>& params, const TaskInstance& instance,
                                     const std::vector<Trajectory>& group) {
    std::vector<int> rets;
    for (const auto& t : group) rets.push_back(t.ret);
    const auto adv = group_advantage(std::span<const int>(rets));
    std::vector<Real> grad(params.theta.size(), Real(0));
    const double K = static_cast<double>(group.size());
    for (std::size_t k = 0; k < group.size(); ++k) {
        const auto& tr = group[k];
        if (tr.tokens.empty() || adv[k] == 0.0) continue;
        const std::vector<double> w(tr.tokens.size(), adv[k] / (K * static_cast<double>(tr.tokens.size())));
        accumulate_weighted_logprob_gradient(params, std::span<const Token>(instance.prompt_tokens),
                                             std::span<const Token>(tr.tokens), std::span<const double>(w),
                                             std::span<Real>(grad));
    }
    return grad;
}

/// Samples a fresh group of K rollouts from params and returns it with its
/// on-policy gradient.
template <typename Real>
std::pair<std::vector<Trajectory>, std::vector<Real>> fresh_on_policy_gradient(const PolicyParams<Real>& params,
                                                                               const TaskInstance& instance, int K,
                                                                               int max_len, std::uint64_t seed) {
    std::vector<Trajectory> group;
    for (int k = 0; k < K; ++k) group.push_back(sample_trajectory(params, instance, max_len, derive_seed(seed, k)));
    auto g = on_policy_gradient(params, instance, group);
    return {std::move(group), std::move(g)};
}

}  // namespace cropi
