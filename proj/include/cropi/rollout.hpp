#pragma once

// Offline trajectory store sampled once from the behavior (base) policy.

#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cropi/common.hpp"
#include "cropi/policy.hpp"
#include "cropi/taskgen.hpp"
#include "json.hpp"

namespace cropi {

struct OfflineStore {
    std::string behavior_checkpoint;
    int K = 0;
    int max_len = 0;
    std::uint64_t seed = 0;
    std::map<PromptId, std::vector<Trajectory>> entries;

    const std::vector<Trajectory>& group(PromptId id) const {
        auto it = entries.find(id);
        if (it == entries.end()) throw DataError("prompt " + std::to_string(id) + " not in trajectory store");
        return it->second;
    }

    bool contains(PromptId id) const { return entries.contains(id); }

    std::vector<int> returns(PromptId id) const {
        std::vector<int> r;
        for (const auto& t : group(id)) r.push_back(t.ret);
        return r;
    }

    /// True when the stored group carries no learning signal (all returns equal).
    bool zero_signal(PromptId id) const {
        const auto r = returns(id);
        return std::all_of(r.begin(), r.end(), [&](int x) { return x == r.front(); });
    }

    bool operator==(const OfflineStore&) const = default;
};

/// Samples K trajectories per prompt from params0. Trajectory (prompt, k) uses
/// the RNG stream derive_seed(seed, prompt_id, k).
template <typename Real>
OfflineStore collect_offline(const PolicyParams<Real>& params0, const Dataset& dataset,
                             const std::vector<PromptId>& prompt_ids, int K, int max_len, std::uint64_t seed) {
    if (K < 2) throw ConfigError("collect_offline: K must be >= 2 for group normalization");
    if (max_len < 1) throw ConfigError("collect_offline: max_len must be >= 1");
    params0.check();
    OfflineStore store;
    store.behavior_checkpoint = params0.label;
    store.K = K;
    store.max_len = max_len;
    store.seed = seed;

    std::vector<std::vector<Trajectory>> groups(prompt_ids.size());
    parallel_for(prompt_ids.size(), [&](std::size_t i) {
        const auto& inst = dataset.at(prompt_ids[i]);
        auto& g = groups[i];
        g.reserve(static_cast<std::size_t>(K));
        for (int k = 0; k < K; ++k)
            g.push_back(sample_trajectory(params0, inst, max_len, derive_seed(seed, inst.id, k)));
    });
    for (std::size_t i = 0; i < prompt_ids.size(); ++i) store.entries.emplace(prompt_ids[i], std::move(groups[i]));
    return store;
}

/// Mean of the stored returns for one prompt.
inline double pass_rate(const OfflineStore& store, PromptId id) {
    const auto r = store.returns(id);
    double s = 0.0;
    for (int x : r) s += x;
    return s / static_cast<double>(r.size());
}

// ---------------------------------------------------------------------------
// Store file: header line, then one record per trajectory
// {prompt_id, k, tokens, behavior_logprobs, return}.

inline void save_store(const OfflineStore& store, const std::string& path, const nlohmann::json& extra_header = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write trajectory store " + path);
    nlohmann::json header = {{"format", "cropi.store"},
                             {"version", 1},
                             {"behavior_checkpoint", store.behavior_checkpoint},
                             {"K", store.K},
                             {"max_len", store.max_len},
                             {"seed", store.seed},
                             {"prompts", store.entries.size()}};
    if (extra_header.is_object()) header.update(extra_header);
    out << header.dump() << '\n';
    for (const auto& [id, group] : store.entries) {
        for (std::size_t k = 0; k < group.size(); ++k) {
            const auto& t = group[k];
            nlohmann::json rec = {{"prompt_id", id},
                                  {"k", k},
                                  {"tokens", t.tokens},
                                  {"behavior_logprobs", t.behavior_logprobs},
                                  {"return", t.ret}};
            out << rec.dump() << '\n';
        }
    }
}

/// Streams a store file record by record. Returns the parsed header.
inline nlohmann::json stream_store(const std::string& path,
                                   const std::function<void(int k, Trajectory&&)>& on_record) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("missing trajectory store " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("trajectory store " + path + " has no header");
    try {
        auto header = nlohmann::json::parse(line);
        if (header.value("format", "") != "cropi.store") throw DataError(path + " is not a trajectory store");
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto rec = nlohmann::json::parse(line);
            Trajectory t;
            t.prompt_id = rec.at("prompt_id").get<PromptId>();
            t.tokens = rec.at("tokens").get<std::vector<Token>>();
            t.behavior_logprobs = rec.at("behavior_logprobs").get<std::vector<double>>();
            t.ret = rec.at("return").get<int>();
            if (t.tokens.size() != t.behavior_logprobs.size())
                throw DataError("store record for prompt " + std::to_string(t.prompt_id) + ": logprob count mismatch");
            if (t.ret != 0 && t.ret != 1) throw DataError("store record with non-binary return");
            on_record(rec.at("k").get<int>(), std::move(t));
        }
        return header;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed trajectory store " + path + ": " + e.what());
    }
}

inline OfflineStore load_store(const std::string& path, nlohmann::json* header_out = nullptr) {
    OfflineStore store;
    auto header = stream_store(path, [&](int k, Trajectory&& t) {
        auto& g = store.entries[t.prompt_id];
        if (k != static_cast<int>(g.size())) throw DataError("store records out of order");
        g.push_back(std::move(t));
    });
    store.behavior_checkpoint = header.at("behavior_checkpoint").get<std::string>();
    store.K = header.at("K").get<int>();
    store.max_len = header.at("max_len").get<int>();
    store.seed = header.at("seed").get<std::uint64_t>();
    for (const auto& [id, g] : store.entries)
        if (static_cast<int>(g.size()) != store.K)
            throw DataError("store prompt " + std::to_string(id) + " has " + std::to_string(g.size()) +
                            " trajectories, expected K=" + std::to_string(store.K));
    if (header_out) *header_out = std::move(header);
    return store;
}

}  // namespace cropi
