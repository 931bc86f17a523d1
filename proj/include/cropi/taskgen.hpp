#pragma once

// Synthetic verifiable tasks: a fixed token layout, four rule families, a 0/1
// verifier and validation carving.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "cropi/common.hpp"
#include "json.hpp"

namespace cropi {

/// Fixed token layout shared by every family. Digits occupy the tail of the
/// vocabulary: digit v is token kDigit0 + v.
namespace tok {
inline constexpr Token kPad = 0;
inline constexpr Token kEos = 1;
inline constexpr Token kSep = 2;
inline constexpr Token kAns = 3;  // opens the answer region
inline constexpr Token kEnd = 4;  // closes the answer region
inline constexpr Token kCopy = 5;
inline constexpr Token kReverse = 6;
inline constexpr Token kAdd = 7;
inline constexpr Token kSort = 8;
inline constexpr Token kDigit0 = 9;

constexpr Token digit(int v) noexcept { return kDigit0 + v; }
constexpr bool is_digit(Token t) noexcept { return t >= kDigit0; }

/// Smallest vocabulary that can express digits 0..max_digits-1.
constexpr int vocab_size_for(int max_digits) noexcept { return kDigit0 + max_digits; }
}  // namespace tok

enum class TaskRule { kCopy, kReverse, kModAdd, kSort };

inline std::string to_string(TaskRule r) {
    switch (r) {
        case TaskRule::kCopy: return "copy";
        case TaskRule::kReverse: return "reverse";
        case TaskRule::kModAdd: return "modadd";
        case TaskRule::kSort: return "sort";
    }
    return "?";
}

inline TaskRule parse_task_rule(std::string_view s) {
    if (s == "copy") return TaskRule::kCopy;
    if (s == "reverse") return TaskRule::kReverse;
    if (s == "modadd") return TaskRule::kModAdd;
    if (s == "sort") return TaskRule::kSort;
    throw ConfigError("unknown task rule '" + std::string(s) + "' (expected copy|reverse|modadd|sort)");
}

/// One task family. `difficulty` is the operand count / sequence length.
/// Operand values lie in [0, answer_space_size) and are written with digit
/// tokens shifted by `digit_offset`, so families can occupy disjoint token
/// ranges.
struct TaskFamily {
    std::string name;
    TaskRule rule = TaskRule::kCopy;
    int difficulty = 1;
    int answer_space_size = 10;
    int digit_offset = 0;

    /// Inclusive token-id range the family's operands and answers live in.
    std::pair<Token, Token> vocab_subset() const {
        return {tok::digit(digit_offset), tok::digit(digit_offset + answer_space_size - 1)};
    }

    /// Number of digit tokens the vocabulary needs for this family.
    int digits_needed() const { return digit_offset + answer_space_size; }

    Token value_token(int v) const { return tok::digit(digit_offset + v); }

    Token marker() const {
        switch (rule) {
            case TaskRule::kCopy: return tok::kCopy;
            case TaskRule::kReverse: return tok::kReverse;
            case TaskRule::kModAdd: return tok::kAdd;
            case TaskRule::kSort: return tok::kSort;
        }
        return tok::kCopy;
    }

    void validate() const {
        if (name.empty()) throw ConfigError("task family: empty name");
        if (difficulty < 1) throw ConfigError("task family '" + name + "': difficulty must be >= 1");
        if (answer_space_size < 2)
            throw ConfigError("task family '" + name + "': answer_space_size must be >= 2");
        if (digit_offset < 0) throw ConfigError("task family '" + name + "': digit_offset must be >= 0");
    }

    bool operator==(const TaskFamily&) const = default;
};

struct TaskInstance {
    PromptId id = 0;
    std::string family;
    std::vector<Token> prompt_tokens;
    std::vector<Token> answer_tokens;

    bool operator==(const TaskInstance&) const = default;
};

struct Dataset {
    std::uint64_t seed = 0;
    int count_per_family = 0;
    std::vector<TaskFamily> families;
    std::vector<TaskInstance> instances;  // instances[i].id == i

    const TaskInstance& at(PromptId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= instances.size())
            throw DataError("unknown prompt id " + std::to_string(id));
        return instances[static_cast<std::size_t>(id)];
    }

    /// Digit tokens needed across families; sizes the policy vocabulary.
    int digits_needed() const {
        int m = 2;
        for (const auto& f : families) m = std::max(m, f.digits_needed());
        return m;
    }

    std::vector<PromptId> ids_of_family(std::string_view family) const {
        std::vector<PromptId> out;
        for (const auto& inst : instances)
            if (inst.family == family) out.push_back(inst.id);
        return out;
    }

    bool operator==(const Dataset&) const = default;
};

/// Applies a family's rule to its operands.
inline std::vector<Token> solve(const TaskFamily& family, std::span<const int> operands) {
    std::vector<Token> out;
    switch (family.rule) {
        case TaskRule::kCopy:
            for (int v : operands) out.push_back(family.value_token(v));
            break;
        case TaskRule::kReverse:
            for (auto it = operands.rbegin(); it != operands.rend(); ++it) out.push_back(family.value_token(*it));
            break;
        case TaskRule::kModAdd: {
            int sum = 0;
            for (int v : operands) sum = (sum + v) % family.answer_space_size;
            out.push_back(family.value_token(sum));
            break;
        }
        case TaskRule::kSort: {
            std::vector<int> sorted(operands.begin(), operands.end());
            std::sort(sorted.begin(), sorted.end());
            for (int v : sorted) out.push_back(family.value_token(v));
            break;
        }
    }
    return out;
}

/// Builds one instance; operands come from an RNG stream keyed by
/// (seed, family index, index within family).
inline TaskInstance make_instance(const TaskFamily& family, std::size_t family_index, std::size_t index,
                                  PromptId id, std::uint64_t seed) {
    Rng rng(derive_seed(seed, family_index, index));
    std::vector<int> operands(static_cast<std::size_t>(family.difficulty));
    for (auto& v : operands) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(family.answer_space_size)));

    TaskInstance inst;
    inst.id = id;
    inst.family = family.name;
    inst.prompt_tokens.push_back(family.marker());
    for (int v : operands) inst.prompt_tokens.push_back(family.value_token(v));
    inst.prompt_tokens.push_back(tok::kSep);
    inst.answer_tokens = solve(family, operands);
    return inst;
}

/// Generates count_per_family instances per family. Ids follow generation
/// order: family 0's instances first, then family 1's, and so on.
inline Dataset generate_dataset(const std::vector<TaskFamily>& families, int count_per_family,
                                std::uint64_t seed) {
    if (families.empty()) throw ConfigError("generate_dataset: family list is empty");
    if (count_per_family < 1) throw ConfigError("generate_dataset: count_per_family must be >= 1");
    std::set<std::string> names;
    for (const auto& f : families) {
        f.validate();
        if (!names.insert(f.name).second) throw ConfigError("generate_dataset: duplicate family name '" + f.name + "'");
    }

    Dataset ds;
    ds.seed = seed;
    ds.count_per_family = count_per_family;
    ds.families = families;
    ds.instances.reserve(families.size() * static_cast<std::size_t>(count_per_family));
    for (std::size_t f = 0; f < families.size(); ++f) {
        for (std::size_t i = 0; i < static_cast<std::size_t>(count_per_family); ++i) {
            ds.instances.push_back(
                make_instance(families[f], f, i, static_cast<PromptId>(ds.instances.size()), seed));
        }
    }
    return ds;
}

/// Extracts the first well-formed answer region: kAns, zero or more digits,
/// kEnd. Returns nullopt when the response has none.
inline std::optional<std::vector<Token>> extract_answer(std::span<const Token> response) {
    for (std::size_t i = 0; i < response.size(); ++i) {
        if (response[i] != tok::kAns) continue;
        std::vector<Token> region;
        for (std::size_t j = i + 1; j < response.size(); ++j) {
            const Token t = response[j];
            if (t == tok::kEnd) return region;
            if (!tok::is_digit(t)) break;
            region.push_back(t);
        }
    }
    return std::nullopt;
}

/// Deterministic 0/1 reward. Total: malformed responses score 0.
inline int verify(const TaskInstance& instance, std::span<const Token> response) {
    auto answer = extract_answer(response);
    return answer && *answer == instance.answer_tokens ? 1 : 0;
}

/// The response a perfect policy would emit.
inline std::vector<Token> gold_response(const TaskInstance& instance) {
    std::vector<Token> r;
    r.push_back(tok::kAns);
    r.insert(r.end(), instance.answer_tokens.begin(), instance.answer_tokens.end());
    r.push_back(tok::kEnd);
    r.push_back(tok::kEos);
    return r;
}

struct ValidationSplit {
    std::vector<PromptId> train_ids;                 // ascending
    std::vector<std::string> val_families;           // one label per val set
    std::vector<std::vector<PromptId>> val_sets;     // ascending within each set

    std::vector<PromptId> all_val_ids() const {
        std::vector<PromptId> out;
        for (const auto& s : val_sets) out.insert(out.end(), s.begin(), s.end());
        std::sort(out.begin(), out.end());
        return out;
    }

    bool operator==(const ValidationSplit&) const = default;
};

/// Carves one validation set per designated family: a seeded shuffle of the
/// family's ids, then the prefix of size min(floor(fraction * n_family), cap).
/// Everything not carved out stays in train_ids.
inline ValidationSplit split_validation(const Dataset& dataset, double fraction, int cap,
                                        const std::vector<std::string>& designated_families,
                                        std::uint64_t seed) {
    if (dataset.instances.empty()) throw DataError("split_validation: dataset is empty");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("split_validation: fraction must lie in (0, 1]");
    if (cap < 1) throw ConfigError("split_validation: cap must be >= 1");

    ValidationSplit split;
    std::unordered_set<PromptId> carved;
    for (std::size_t j = 0; j < designated_families.size(); ++j) {
        const auto& fam = designated_families[j];
        auto ids = dataset.ids_of_family(fam);
        if (ids.empty()) throw DataError("split_validation: designated family '" + fam + "' absent from dataset");
        const std::size_t size = std::min<std::size_t>(floor_fraction(fraction, ids.size()),
                                                       static_cast<std::size_t>(cap));
        if (size == 0)
            throw ConfigError("split_validation: family '" + fam + "' too small for fraction " +
                              format_real(fraction));
        Rng rng(derive_seed(seed, j));
        rng.shuffle(ids);
        ids.resize(size);
        std::sort(ids.begin(), ids.end());
        for (auto id : ids)
            if (!carved.insert(id).second)
                throw ConfigError("split_validation: family '" + fam + "' designated twice");
        split.val_families.push_back(fam);
        split.val_sets.push_back(std::move(ids));
    }
    for (const auto& inst : dataset.instances)
        if (!carved.contains(inst.id)) split.train_ids.push_back(inst.id);
    return split;
}

// ---------------------------------------------------------------------------
// Serialization: one JSON header line, then one JSON record per instance.

inline nlohmann::json to_json(const TaskFamily& f) {
    return {{"name", f.name},
            {"rule", to_string(f.rule)},
            {"difficulty", f.difficulty},
            {"answer_space_size", f.answer_space_size},
            {"digit_offset", f.digit_offset}};
}

inline TaskFamily family_from_json(const nlohmann::json& j) {
    TaskFamily f;
    f.name = j.at("name").get<std::string>();
    f.rule = parse_task_rule(j.at("rule").get<std::string>());
    f.difficulty = j.at("difficulty").get<int>();
    f.answer_space_size = j.at("answer_space_size").get<int>();
    f.digit_offset = j.value("digit_offset", 0);
    f.validate();
    return f;
}

inline void save_dataset(const Dataset& ds, const std::string& path, const nlohmann::json& extra_header = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write dataset file " + path);
    nlohmann::json header = {{"format", "cropi.dataset"},
                             {"version", 1},
                             {"seed", ds.seed},
                             {"count_per_family", ds.count_per_family},
                             {"count", ds.instances.size()}};
    header["families"] = nlohmann::json::array();
    for (const auto& f : ds.families) header["families"].push_back(to_json(f));
    if (extra_header.is_object()) header.update(extra_header);
    out << header.dump() << '\n';
    for (const auto& inst : ds.instances) {
        nlohmann::json rec = {{"id", inst.id},
                              {"family", inst.family},
                              {"prompt_tokens", inst.prompt_tokens},
                              {"answer_tokens", inst.answer_tokens}};
        out << rec.dump() << '\n';
    }
}

/// Reads a dataset file; the parsed header is returned through `header_out`.
inline Dataset load_dataset(const std::string& path, nlohmann::json* header_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("missing dataset file " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("dataset file " + path + " has no header");
    Dataset ds;
    try {
        auto header = nlohmann::json::parse(line);
        if (header.value("format", "") != "cropi.dataset") throw DataError(path + " is not a dataset file");
        ds.seed = header.at("seed").get<std::uint64_t>();
        ds.count_per_family = header.at("count_per_family").get<int>();
        for (const auto& f : header.at("families")) ds.families.push_back(family_from_json(f));
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto rec = nlohmann::json::parse(line);
            TaskInstance inst;
            inst.id = rec.at("id").get<PromptId>();
            inst.family = rec.at("family").get<std::string>();
            inst.prompt_tokens = rec.at("prompt_tokens").get<std::vector<Token>>();
            inst.answer_tokens = rec.at("answer_tokens").get<std::vector<Token>>();
            if (inst.id != static_cast<PromptId>(ds.instances.size()))
                throw DataError("dataset ids must be dense and ordered");
            if (inst.prompt_tokens.empty()) throw DataError("empty prompt for id " + std::to_string(inst.id));
            ds.instances.push_back(std::move(inst));
        }
        if (header_out) *header_out = std::move(header);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed dataset file " + path + ": " + e.what());
    }
    return ds;
}

}  // namespace cropi
