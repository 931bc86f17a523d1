#pragma once

// Small autoregressive softmax policy.
//
//   pooled = mean_p E[p][ctx_p]          (position-specific token embeddings)
//   hidden = tanh(W1 pooled + b1)
//   logits = W2 hidden + b2
//
// The context is the last `context_window` tokens of prompt+response, left
// padded with tok::kPad. Gradients are exact reverse-mode and exposed as flat
// vectors laid out like theta.

#include <concepts>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "cropi/common.hpp"
#include "cropi/taskgen.hpp"
#include "json.hpp"

namespace cropi {

struct PolicyArch {
    int vocab_size = tok::vocab_size_for(10);
    int context_window = 8;
    int embed_dim = 16;
    int hidden_dim = 32;

    void validate() const {
        if (vocab_size < 1 || context_window < 1 || embed_dim < 1 || hidden_dim < 1)
            throw ConfigError("policy arch: every dimension must be >= 1");
    }

    std::size_t embedding_count() const {
        return static_cast<std::size_t>(context_window) * vocab_size * embed_dim;
    }

    /// Closed-form parameter count d.
    std::size_t param_count() const {
        const std::size_t V = vocab_size, W = context_window, De = embed_dim, H = hidden_dim;
        return W * V * De + H * De + H + V * H + V;
    }

    bool operator==(const PolicyArch&) const = default;
};

/// Offsets of each parameter block inside theta.
struct ParamLayout {
    std::size_t embed = 0, w1 = 0, b1 = 0, w2 = 0, b2 = 0, total = 0;

    explicit ParamLayout(const PolicyArch& a) {
        const std::size_t V = a.vocab_size, De = a.embed_dim, H = a.hidden_dim;
        embed = 0;
        w1 = a.embedding_count();
        b1 = w1 + H * De;
        w2 = b1 + H;
        b2 = w2 + V * H;
        total = b2 + V;
    }
};

/// Anything that yields next-token log-probabilities for a token history.
template <typename M>
concept TokenPolicy = requires(const M& m, std::span<const Token> history) {
    { m.vocab_size() } -> std::convertible_to<int>;
    { m.log_probs(history) } -> std::convertible_to<std::vector<double>>;
};

template <typename T>
void log_softmax_inplace(std::span<T> v) {
    T mx = v[0];
    for (T x : v) mx = std::max(mx, x);
    T s = 0;
    for (T x : v) s += std::exp(x - mx);
    const T lse = mx + std::log(s);
    for (T& x : v) x -= lse;
}

template <typename Real = double>
struct PolicyParams {
    PolicyArch arch;
    std::vector<Real> theta;
    std::string label;

    struct Forward {
        std::vector<Token> window;
        std::vector<Real> pooled;  // embed_dim
        std::vector<Real> hidden;  // hidden_dim, post-tanh
        std::vector<Real> logits;  // vocab_size
    };

    int vocab_size() const { return arch.vocab_size; }
    std::size_t dim() const { return theta.size(); }

    void check() const {
        arch.validate();
        if (theta.size() != arch.param_count())
            throw DataError("policy params: theta length " + std::to_string(theta.size()) + " != d " +
                            std::to_string(arch.param_count()));
    }

    /// Last context_window tokens of the history, left padded.
    std::vector<Token> window_of(std::span<const Token> history) const {
        const std::size_t W = arch.context_window;
        std::vector<Token> w(W, tok::kPad);
        const std::size_t n = std::min(W, history.size());
        for (std::size_t i = 0; i < n; ++i) {
            const Token t = history[history.size() - n + i];
            if (t < 0 || t >= arch.vocab_size)
                throw DataError("token " + std::to_string(t) + " outside vocabulary of size " +
                                std::to_string(arch.vocab_size));
            w[W - n + i] = t;
        }
        return w;
    }

    Forward forward(std::span<const Token> history) const {
        const ParamLayout L(arch);
        const std::size_t V = arch.vocab_size, W = arch.context_window, De = arch.embed_dim,
                          H = arch.hidden_dim;
        Forward f;
        f.window = window_of(history);
        f.pooled.assign(De, Real(0));
        for (std::size_t p = 0; p < W; ++p) {
            const Real* e = &theta[L.embed + (p * V + static_cast<std::size_t>(f.window[p])) * De];
            for (std::size_t k = 0; k < De; ++k) f.pooled[k] += e[k];
        }
        const Real inv_w = Real(1) / static_cast<Real>(W);
        for (auto& x : f.pooled) x *= inv_w;

        f.hidden.resize(H);
        for (std::size_t h = 0; h < H; ++h) {
            const Real* row = &theta[L.w1 + h * De];
            Real a = theta[L.b1 + h];
            for (std::size_t k = 0; k < De; ++k) a += row[k] * f.pooled[k];
            f.hidden[h] = std::tanh(a);
        }
        f.logits.resize(V);
        for (std::size_t v = 0; v < V; ++v) {
            const Real* row = &theta[L.w2 + v * H];
            Real z = theta[L.b2 + v];
            for (std::size_t h = 0; h < H; ++h) z += row[h] * f.hidden[h];
            f.logits[v] = z;
        }
        return f;
    }

    std::vector<Real> logits(std::span<const Token> history) const { return forward(history).logits; }

    std::vector<double> log_probs(std::span<const Token> history) const {
        auto z = logits(history);
        log_softmax_inplace(std::span<Real>(z));
        return {z.begin(), z.end()};
    }

    /// Adds d(sum_v dlogits[v] * logits[v]) / d(theta) into grad, for the
    /// forward pass `f`.
    void backward(const Forward& f, std::span<const Real> dlogits, std::span<Real> grad) const {
        const ParamLayout L(arch);
        const std::size_t V = arch.vocab_size, W = arch.context_window, De = arch.embed_dim,
                          H = arch.hidden_dim;
        std::vector<Real> dhidden(H, Real(0));
        for (std::size_t v = 0; v < V; ++v) {
            const Real g = dlogits[v];
            if (g == Real(0)) continue;
            grad[L.b2 + v] += g;
            Real* grow = &grad[L.w2 + v * H];
            const Real* row = &theta[L.w2 + v * H];
            for (std::size_t h = 0; h < H; ++h) {
                grow[h] += g * f.hidden[h];
                dhidden[h] += g * row[h];
            }
        }
        std::vector<Real> dpooled(De, Real(0));
        for (std::size_t h = 0; h < H; ++h) {
            const Real da = dhidden[h] * (Real(1) - f.hidden[h] * f.hidden[h]);
            if (da == Real(0)) continue;
            grad[L.b1 + h] += da;
            Real* grow = &grad[L.w1 + h * De];
            const Real* row = &theta[L.w1 + h * De];
            for (std::size_t k = 0; k < De; ++k) {
                grow[k] += da * f.pooled[k];
                dpooled[k] += da * row[k];
            }
        }
        const Real inv_w = Real(1) / static_cast<Real>(W);
        for (std::size_t p = 0; p < W; ++p) {
            Real* ge = &grad[L.embed + (p * V + static_cast<std::size_t>(f.window[p])) * De];
            for (std::size_t k = 0; k < De; ++k) ge[k] += dpooled[k] * inv_w;
        }
    }

    bool operator==(const PolicyParams&) const = default;
};

/// Deterministic small-magnitude init: weights ~ N(0, scale^2), biases zero.
template <typename Real = double>
PolicyParams<Real> init_policy(const PolicyArch& arch, std::uint64_t seed, double scale = 0.1) {
    arch.validate();
    const ParamLayout L(arch);
    PolicyParams<Real> p;
    p.arch = arch;
    p.label = "init-" + std::to_string(seed);
    p.theta.assign(L.total, Real(0));
    Rng rng(derive_seed(seed, 0x706f6c));
    for (std::size_t i = 0; i < L.b1; ++i) p.theta[i] = static_cast<Real>(scale * rng.normal());
    for (std::size_t i = L.w2; i < L.b2; ++i) p.theta[i] = static_cast<Real>(scale * rng.normal());
    return p;
}

template <typename Real>
std::vector<Real> next_token_logits(const PolicyParams<Real>& params, std::span<const Token> context) {
    return params.logits(context);
}

// ---------------------------------------------------------------------------
// Trajectories

struct Trajectory {
    PromptId prompt_id = 0;
    std::vector<Token> tokens;
    std::vector<double> behavior_logprobs;
    int ret = 0;

    bool operator==(const Trajectory&) const = default;
};

/// Samples index i with probability exp(logp[i]).
inline Token sample_token(std::span<const double> logp, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < logp.size(); ++i) {
        acc += std::exp(logp[i]);
        if (u < acc) return static_cast<Token>(i);
    }
    // Rounding left u beyond the accumulated mass: take the last positive-mass token.
    for (std::size_t i = logp.size(); i-- > 0;)
        if (std::isfinite(logp[i])) return static_cast<Token>(i);
    return static_cast<Token>(logp.size() - 1);
}

/// Lowest-id argmax.
inline Token greedy_token(std::span<const double> logp) {
    return static_cast<Token>(std::max_element(logp.begin(), logp.end()) - logp.begin());
}

/// Samples a response at temperature 1 until kEos or max_len tokens.
template <TokenPolicy M>
Trajectory sample_trajectory(const M& model, const TaskInstance& instance, int max_len, std::uint64_t rng_seed) {
    if (max_len < 1) throw ConfigError("sample_trajectory: max_len must be >= 1");
    Rng rng(rng_seed);
    Trajectory tr;
    tr.prompt_id = instance.id;
    std::vector<Token> history = instance.prompt_tokens;
    for (int t = 0; t < max_len; ++t) {
        const auto logp = model.log_probs(history);
        const Token x = sample_token(logp, rng);
        tr.tokens.push_back(x);
        tr.behavior_logprobs.push_back(logp[static_cast<std::size_t>(x)]);
        history.push_back(x);
        if (x == tok::kEos) break;
    }
    tr.ret = verify(instance, tr.tokens);
    return tr;
}

template <TokenPolicy M>
std::vector<Token> greedy_decode(const M& model, const TaskInstance& instance, int max_len) {
    std::vector<Token> history = instance.prompt_tokens;
    std::vector<Token> out;
    for (int t = 0; t < max_len; ++t) {
        const Token x = greedy_token(model.log_probs(history));
        out.push_back(x);
        history.push_back(x);
        if (x == tok::kEos) break;
    }
    return out;
}

/// Log-probabilities of each response token under the model.
template <typename Real>
std::vector<double> token_logprobs(const PolicyParams<Real>& params, std::span<const Token> prompt,
                                   std::span<const Token> response) {
    std::vector<Token> history(prompt.begin(), prompt.end());
    std::vector<double> out;
    out.reserve(response.size());
    for (Token x : response) {
        auto lp = params.log_probs(history);
        if (x < 0 || x >= params.arch.vocab_size) throw DataError("response token outside vocabulary");
        out.push_back(lp[static_cast<std::size_t>(x)]);
        history.push_back(x);
    }
    return out;
}

/// Exact gradient of sum_t weights[t] * log pi(response[t] | prompt, response[<t])
/// accumulated into grad.
template <typename Real>
void accumulate_weighted_logprob_gradient(const PolicyParams<Real>& params, std::span<const Token> prompt,
                                          std::span<const Token> response, std::span<const double> weights,
                                          std::span<Real> grad) {
    if (weights.size() != response.size())
        throw DataError("weighted_logprob_gradient: " + std::to_string(weights.size()) + " weights for " +
                        std::to_string(response.size()) + " tokens");
    if (grad.size() != params.theta.size()) throw DataError("weighted_logprob_gradient: gradient length mismatch");
    std::vector<Token> history(prompt.begin(), prompt.end());
    std::vector<Real> dlogits(static_cast<std::size_t>(params.arch.vocab_size));
    for (std::size_t t = 0; t < response.size(); ++t) {
        const Token x = response[t];
        if (weights[t] != 0.0) {
            auto f = params.forward(history);
            auto lp = f.logits;
            log_softmax_inplace(std::span<Real>(lp));
            const Real w = static_cast<Real>(weights[t]);
            for (std::size_t v = 0; v < dlogits.size(); ++v) dlogits[v] = -w * std::exp(lp[v]);
            dlogits[static_cast<std::size_t>(x)] += w;
            params.backward(f, dlogits, grad);
        }
        history.push_back(x);
    }
}

template <typename Real>
std::vector<Real> weighted_logprob_gradient(const PolicyParams<Real>& params, std::span<const Token> prompt,
                                            std::span<const Token> response, std::span<const double> weights) {
    std::vector<Real> grad(params.theta.size(), Real(0));
    accumulate_weighted_logprob_gradient(params, prompt, response, weights, std::span<Real>(grad));
    return grad;
}

template <typename Real>
std::vector<Real> weighted_logprob_gradient(const PolicyParams<Real>& params, const TaskInstance& instance,
                                            const Trajectory& trajectory, std::span<const double> weights) {
    return weighted_logprob_gradient(params, std::span<const Token>(instance.prompt_tokens),
                                     std::span<const Token>(trajectory.tokens), weights);
}

/// Supervised warm start on gold responses: gives the base policy the answer
/// format (and, with answer_weight > 0, partial task knowledge) so offline
/// groups are not uniformly zero-reward.
template <typename Real>
PolicyParams<Real> warm_start(PolicyParams<Real> params, const std::vector<TaskInstance>& pool, int steps,
                              int batch, double learning_rate, double answer_weight, std::uint64_t seed) {
    if (pool.empty() || steps <= 0) return params;
    for (int s = 0; s < steps; ++s) {
        Rng rng(derive_seed(seed, s));
        std::vector<Real> grad(params.theta.size(), Real(0));
        for (int b = 0; b < batch; ++b) {
            const auto& inst = pool[rng.below(pool.size())];
            const auto gold = gold_response(inst);
            std::vector<double> w(gold.size(), 1.0 / batch);
            for (std::size_t t = 1; t + 2 < gold.size(); ++t) w[t] *= answer_weight;
            accumulate_weighted_logprob_gradient(params, std::span<const Token>(inst.prompt_tokens),
                                                 std::span<const Token>(gold), std::span<const double>(w),
                                                 std::span<Real>(grad));
        }
        for (std::size_t i = 0; i < grad.size(); ++i)
            params.theta[i] += static_cast<Real>(learning_rate) * grad[i];
    }
    return params;
}

// ---------------------------------------------------------------------------
// Checkpoint file: JSON header line, then one shortest-round-trip number per
// line. Round trips are bit-exact.

inline nlohmann::json to_json(const PolicyArch& a) {
    return {{"vocab_size", a.vocab_size},
            {"context_window", a.context_window},
            {"embed_dim", a.embed_dim},
            {"hidden_dim", a.hidden_dim}};
}

inline PolicyArch arch_from_json(const nlohmann::json& j) {
    PolicyArch a;
    a.vocab_size = j.at("vocab_size").get<int>();
    a.context_window = j.at("context_window").get<int>();
    a.embed_dim = j.at("embed_dim").get<int>();
    a.hidden_dim = j.at("hidden_dim").get<int>();
    a.validate();
    return a;
}

template <typename Real>
void save_checkpoint(const PolicyParams<Real>& p, const std::string& path, const nlohmann::json& extra_header = {}) {
    p.check();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write checkpoint " + path);
    nlohmann::json header = {{"format", "cropi.checkpoint"},
                             {"version", 1},
                             {"arch", to_json(p.arch)},
                             {"d", p.theta.size()},
                             {"label", p.label},
                             {"scalar", sizeof(Real) == 8 ? "f64" : "f32"}};
    if (extra_header.is_object()) header.update(extra_header);
    out << header.dump() << '\n';
    char buf[64];
    for (Real v : p.theta) {
        auto res = std::to_chars(buf, buf + sizeof(buf), v);
        out.write(buf, res.ptr - buf);
        out.put('\n');
    }
}

template <typename Real = double>
PolicyParams<Real> load_checkpoint(const std::string& path, nlohmann::json* header_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("missing checkpoint " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("checkpoint " + path + " has no header");
    PolicyParams<Real> p;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint header in " + path + ": " + e.what());
    }
    if (header.value("format", "") != "cropi.checkpoint") throw DataError(path + " is not a checkpoint");
    p.arch = arch_from_json(header.at("arch"));
    p.label = header.value("label", "");
    const auto d = header.at("d").get<std::size_t>();
    if (d != p.arch.param_count()) throw DataError("checkpoint " + path + ": d disagrees with arch");
    p.theta.reserve(d);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Real v{};
        auto res = std::from_chars(line.data(), line.data() + line.size(), v);
        if (res.ec != std::errc{}) throw DataError("checkpoint " + path + ": bad number '" + line + "'");
        p.theta.push_back(v);
    }
    if (p.theta.size() != d) throw DataError("checkpoint " + path + ": truncated theta");
    if (header_out) *header_out = std::move(header);
    return p;
}

}  // namespace cropi
