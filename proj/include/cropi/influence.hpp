#pragma once

// POPI scoring against validation-set features, reciprocal-rank fusion across
// validation sets, top-alpha selection and the baseline utilities.

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cropi/common.hpp"
#include "cropi/rollout.hpp"
#include "cropi/sketch.hpp"

namespace cropi {

struct ValidationFeature {
    GradientFeature feature;
    int skipped = 0;  // zero-flag members left out of the sum
};

/// Unit-normalized sum of the (already unit) member features.
inline ValidationFeature validation_feature(const std::vector<GradientFeature>& members) {
    if (members.empty()) throw DataError("validation_feature: no members");
    ValidationFeature out;
    std::vector<double> sum;
    std::string checkpoint;
    for (const auto& m : members) {
        if (m.zero_flag) {
            ++out.skipped;
            continue;
        }
        if (sum.empty()) {
            sum.assign(m.vec.size(), 0.0);
            checkpoint = m.checkpoint;
        }
        if (m.vec.size() != sum.size()) throw DataError("validation_feature: member dimension mismatch");
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += m.vec[i];
    }
    if (sum.empty()) throw DataError("validation_feature: every member is zero-signal");
    out.feature = make_feature(-1, checkpoint, std::move(sum));
    if (out.feature.zero_flag) throw NumericError("validation_feature: member features cancel exactly");
    return out;
}

inline double popi_score(const GradientFeature& train, const GradientFeature& val) {
    if (train.zero_flag || val.zero_flag) throw DataError("popi_score: zero-signal feature cannot be scored");
    return cossim_normalized(train.vec, val.vec);
}

struct RankTable {
    std::string checkpoint;
    std::vector<PromptId> eligible_ids;                  // ascending
    std::vector<std::map<PromptId, double>> per_set_scores;
    std::vector<std::map<PromptId, int>> per_set_ranks;  // 1 = best
    std::map<PromptId, double> fused;

    std::size_t sets() const { return per_set_scores.size(); }
};

/// Ranks eligible ids by descending score within each set (ties: ascending
/// id) and fuses with sum_j 1 / rank_j.
inline RankTable rank_and_fuse(const std::vector<std::map<PromptId, double>>& per_set_scores,
                               std::vector<PromptId> eligible_ids, std::string checkpoint = {}) {
    std::sort(eligible_ids.begin(), eligible_ids.end());
    eligible_ids.erase(std::unique(eligible_ids.begin(), eligible_ids.end()), eligible_ids.end());
    RankTable t;
    t.checkpoint = std::move(checkpoint);
    t.eligible_ids = eligible_ids;
    for (auto id : eligible_ids) t.fused[id] = 0.0;
    for (std::size_t j = 0; j < per_set_scores.size(); ++j) {
        const auto& scores = per_set_scores[j];
        std::vector<std::pair<double, PromptId>> order;
        order.reserve(eligible_ids.size());
        std::map<PromptId, double> kept;
        for (auto id : eligible_ids) {
            auto it = scores.find(id);
            if (it == scores.end())
                throw DataError("rank_and_fuse: id " + std::to_string(id) + " has no score in set " + std::to_string(j));
            order.emplace_back(it->second, id);
            kept[id] = it->second;
        }
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            return a.first > b.first || (a.first == b.first && a.second < b.second);
        });
        std::map<PromptId, int> ranks;
        for (std::size_t r = 0; r < order.size(); ++r) ranks[order[r].second] = static_cast<int>(r + 1);
        // Summed in set order so the fused value is reproducible bit for bit.
        for (auto id : eligible_ids) t.fused[id] += 1.0 / ranks[id];
        t.per_set_scores.push_back(std::move(kept));
        t.per_set_ranks.push_back(std::move(ranks));
    }
    return t;
}

struct Selection {
    std::vector<PromptId> ids;  // best first
    std::size_t quota = 0;
    std::size_t shortfall = 0;  // quota minus available candidates, when positive
};

/// Picks the `quota` ids with the largest utility, ties by ascending id.
inline Selection select_by_utility(const std::map<PromptId, double>& utility, std::size_t quota) {
    if (quota == 0) throw ConfigError("selection size is zero");
    std::vector<std::pair<double, PromptId>> order;
    order.reserve(utility.size());
    for (const auto& [id, u] : utility) order.emplace_back(u, id);
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    Selection s;
    s.quota = quota;
    const std::size_t take = std::min(quota, order.size());
    s.shortfall = quota - take;
    for (std::size_t i = 0; i < take; ++i) s.ids.push_back(order[i].second);
    return s;
}

/// Top floor(alpha * n_train) ids by fused utility. n_train is the full
/// training-set size, not the eligible count.
inline Selection select_top(const RankTable& table, double alpha, std::size_t n_train) {
    if (table.eligible_ids.empty()) throw DataError("select_top: rank table is empty");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("select_top: alpha must lie in (0, 1]");
    return select_by_utility(table.fused, floor_fraction(alpha, n_train));
}

enum class BaselineStrategy { kLearnability, kPassRate, kInfluenceOnce };

inline BaselineStrategy parse_baseline_strategy(std::string_view s) {
    if (s == "learnability") return BaselineStrategy::kLearnability;
    if (s == "pass_rate") return BaselineStrategy::kPassRate;
    if (s == "influence_once") return BaselineStrategy::kInfluenceOnce;
    throw ConfigError("unknown baseline strategy '" + std::string(s) + "'");
}

/// Global utilities computed once at the base policy. learnability: p(1-p);
/// pass_rate: 1 if 0 < p < 1 else 0; influence_once: the fused POPI utility of
/// `influence_at_base` (ids outside its eligible set are not selectable).
inline std::map<PromptId, double> baseline_utility(BaselineStrategy strategy, const OfflineStore& store,
                                                   const std::vector<PromptId>& train_ids,
                                                   const RankTable* influence_at_base = nullptr) {
    std::map<PromptId, double> u;
    switch (strategy) {
        case BaselineStrategy::kLearnability:
            for (auto id : train_ids) {
                const double p = pass_rate(store, id);
                u[id] = p * (1.0 - p);
            }
            break;
        case BaselineStrategy::kPassRate:
            for (auto id : train_ids) {
                const double p = pass_rate(store, id);
                u[id] = (p > 0.0 && p < 1.0) ? 1.0 : 0.0;
            }
            break;
        case BaselineStrategy::kInfluenceOnce:
            if (!influence_at_base) throw ConfigError("influence_once baseline needs a rank table at the base policy");
            u = influence_at_base->fused;
            break;
    }
    return u;
}

/// CSV: id, score_set_1..V, rank_set_1..V, fused, selected.
inline void export_rank_table(const RankTable& t, const std::vector<PromptId>& selected, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write rank table " + path);
    const std::set<PromptId> sel(selected.begin(), selected.end());
    out << "id";
    for (std::size_t j = 0; j < t.sets(); ++j) out << ",score_set_" << j + 1;
    for (std::size_t j = 0; j < t.sets(); ++j) out << ",rank_set_" << j + 1;
    out << ",fused,selected\n";
    for (auto id : t.eligible_ids) {
        out << id;
        for (std::size_t j = 0; j < t.sets(); ++j) out << ',' << format_real(t.per_set_scores[j].at(id));
        for (std::size_t j = 0; j < t.sets(); ++j) out << ',' << t.per_set_ranks[j].at(id);
        out << ',' << format_real(t.fused.at(id)) << ',' << (sel.contains(id) ? 1 : 0) << '\n';
    }
}

}  // namespace cropi
