#pragma once

// Sparse random projection of gradients: keep a random coordinate subset S,
// then apply a k x |S| Gaussian matrix whose entries are regenerated on the fly
// from (seed, row, column). The k x d matrix is never materialized.

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cropi/common.hpp"
#include "json.hpp"

namespace cropi {

/// Standard normal entry (row, col) of the implicit projection matrix. Rows
/// 2i and 2i+1 share one Box-Muller draw keyed by (seed, i, col).
inline double gaussian_entry(std::uint64_t seed, std::size_t row, std::size_t col) {
    const std::uint64_t key = derive_seed(seed, row >> 1, col);
    double u1 = bits_to_unit(splitmix64(key));
    const double u2 = bits_to_unit(splitmix64(key ^ 0x5851f42d4c957f2dULL));
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    return (row & 1) ? r * std::sin(a) : r * std::cos(a);
}

struct Projector {
    std::size_t d = 0;
    std::size_t k = 0;
    double sparse_ratio = 1.0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> indices;  // S, sorted ascending

    std::size_t retained() const { return indices.size(); }

    double entry(std::size_t row, std::size_t col) const { return gaussian_entry(seed, row, col); }

    /// Fills out[0..k) with column `col` of the Gaussian matrix.
    void column(std::size_t col, std::span<double> out) const {
        for (std::size_t r = 0; r + 1 < k; r += 2) {
            const std::uint64_t key = derive_seed(seed, r >> 1, col);
            double u1 = bits_to_unit(splitmix64(key));
            const double u2 = bits_to_unit(splitmix64(key ^ 0x5851f42d4c957f2dULL));
            if (u1 < 1e-300) u1 = 1e-300;
            const double rad = std::sqrt(-2.0 * std::log(u1));
            const double a = 2.0 * std::numbers::pi * u2;
            out[r] = rad * std::cos(a);
            out[r + 1] = rad * std::sin(a);
        }
        if (k & 1) out[k - 1] = gaussian_entry(seed, k - 1, col);
    }

    nlohmann::json identity() const {
        return {{"d", d}, {"k", k}, {"sparse_ratio", sparse_ratio}, {"seed", seed}};
    }
};

/// S is drawn uniformly without replacement with |S| = floor(sparse_ratio * d).
inline Projector make_projector(std::size_t d, std::size_t k, double sparse_ratio, std::uint64_t seed) {
    if (k < 1) throw ConfigError("make_projector: k must be >= 1");
    if (!(sparse_ratio > 0.0 && sparse_ratio <= 1.0)) throw ConfigError("make_projector: sparse_ratio must lie in (0, 1]");
    const std::size_t rs = floor_fraction(sparse_ratio, d);
    if (rs == 0) throw ConfigError("make_projector: sparse_ratio * d rounds to zero retained coordinates");
    Projector p;
    p.d = d;
    p.k = k;
    p.sparse_ratio = sparse_ratio;
    p.seed = seed;
    std::vector<std::size_t> all(d);
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (rs < d) {
        Rng rng(derive_seed(seed, 0x5e1ec7));
        for (std::size_t i = 0; i < rs; ++i) std::swap(all[i], all[i + rng.below(d - i)]);
        all.resize(rs);
        std::sort(all.begin(), all.end());
    }
    p.indices = std::move(all);
    return p;
}

/// Projects a batch of gradients. Columns of the Gaussian matrix are generated
/// once per batch in blocks of `block` columns; only the retained coordinates
/// are touched.
template <typename Real>
std::vector<std::vector<double>> project_batch(const Projector& proj, const std::vector<std::span<const Real>>& grads,
                                               std::size_t block = 64) {
    const std::size_t B = grads.size();
    for (const auto& g : grads)
        if (g.size() != proj.d)
            throw DataError("project: gradient length " + std::to_string(g.size()) + " != d " + std::to_string(proj.d));
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(proj.k), static_cast<Eigen::Index>(B));
    if (B == 0) return {};
    const std::size_t rs = proj.indices.size();
    Eigen::MatrixXd pblock(static_cast<Eigen::Index>(proj.k), static_cast<Eigen::Index>(block));
    Eigen::MatrixXd gblock(static_cast<Eigen::Index>(block), static_cast<Eigen::Index>(B));
    for (std::size_t c0 = 0; c0 < rs; c0 += block) {
        const std::size_t bs = std::min(block, rs - c0);
        parallel_for(bs, [&](std::size_t j) {
            proj.column(proj.indices[c0 + j], std::span<double>(pblock.col(static_cast<Eigen::Index>(j)).data(), proj.k));
        });
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < bs; ++j)
                gblock(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(b)) =
                    static_cast<double>(grads[b][proj.indices[c0 + j]]);
        const auto n = static_cast<Eigen::Index>(bs);
        out.noalias() += pblock.leftCols(n) * gblock.topRows(n);
    }
    std::vector<std::vector<double>> result(B);
    for (std::size_t b = 0; b < B; ++b) {
        const auto col = out.col(static_cast<Eigen::Index>(b));
        result[b].assign(col.data(), col.data() + proj.k);
    }
    return result;
}

template <typename Real>
std::vector<double> project(const Projector& proj, std::span<const Real> grad) {
    return project_batch<Real>(proj, {grad}).front();
}

/// Unit-norm sketch of one prompt's (or one set's) gradient.
struct GradientFeature {
    PromptId id = -1;
    std::string checkpoint;
    std::vector<double> vec;
    bool zero_flag = false;

    bool operator==(const GradientFeature&) const = default;
};

inline GradientFeature make_feature(PromptId id, std::string checkpoint, std::vector<double> projected) {
    GradientFeature f;
    f.id = id;
    f.checkpoint = std::move(checkpoint);
    const double n = norm2(std::span<const double>(projected));
    if (!(n > 0.0)) {
        f.zero_flag = true;
        f.vec.assign(projected.size(), 0.0);
        return f;
    }
    for (auto& x : projected) x /= n;
    f.vec = std::move(projected);
    return f;
}

template <typename T>
double cossim_normalized(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw DataError("cossim: length mismatch");
    const double na = norm2(a), nb = norm2(b);
    if (!(na > 0.0) || !(nb > 0.0)) throw DataError("cossim: zero vector has no direction");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline double cossim_normalized(const std::vector<double>& a, const std::vector<double>& b) {
    return cossim_normalized(std::span<const double>(a), std::span<const double>(b));
}

/// Indices of the m largest entries of row i, excluding i itself. Ties go to
/// the lower index.
inline std::vector<Eigen::Index> top_neighbors(const Eigen::MatrixXd& sims, Eigen::Index i, std::size_t m) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < sims.cols(); ++j)
        if (j != i) idx.push_back(j);
    auto better = [&](Eigen::Index a, Eigen::Index b) {
        const double va = sims(i, a), vb = sims(i, b);
        return va > vb || (va == vb && a < b);
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(), better);
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Mean over rows of |top_m(reference row) ∩ top_m(test row)| / m, with
/// m = ceil(frac * (N - 1)) and the diagonal excluded.
inline double precision_at_frac(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& test, double frac) {
    if (reference.rows() != reference.cols() || test.rows() != test.cols() || reference.rows() != test.rows())
        throw DataError("precision_at_frac: matrices must be square and of equal shape");
    const Eigen::Index N = reference.rows();
    if (N < 2) throw DataError("precision_at_frac: need at least 2 items");
    if (!(frac > 0.0 && frac <= 1.0)) throw ConfigError("precision_at_frac: frac must lie in (0, 1]");
    const auto m = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(N - 1) - 1e-9));
    if (m < 1) throw ConfigError("precision_at_frac: frac * (N - 1) selects no neighbors");
    double total = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
        const auto a = top_neighbors(reference, i, m);
        const auto b = top_neighbors(test, i, m);
        std::vector<Eigen::Index> both;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
        total += static_cast<double>(both.size()) / static_cast<double>(m);
    }
    return total / static_cast<double>(N);
}

/// Pairwise cosine matrix of row vectors.
inline Eigen::MatrixXd cosine_matrix(const std::vector<std::vector<double>>& vecs) {
    const auto n = static_cast<Eigen::Index>(vecs.size());
    Eigen::MatrixXd s(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i; j < n; ++j)
            s(i, j) = s(j, i) = cossim_normalized(vecs[static_cast<std::size_t>(i)], vecs[static_cast<std::size_t>(j)]);
    return s;
}

// ---------------------------------------------------------------------------
// Feature cache: header {d, k, sparse_ratio, seed, checkpoint, count, ...}
// then one row {id, zero_flag, vec} per feature.

inline nlohmann::json feature_cache_header(const Projector& proj, const std::string& checkpoint, std::size_t count,
                                           const nlohmann::json& extra = {}) {
    nlohmann::json h = proj.identity();
    h["format"] = "cropi.features";
    h["version"] = 1;
    h["checkpoint"] = checkpoint;
    h["count"] = count;
    if (extra.is_object()) h.update(extra);
    return h;
}

inline void save_feature_cache(const std::vector<GradientFeature>& feats, const nlohmann::json& header,
                               const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write feature cache " + path);
    out << header.dump() << '\n';
    for (const auto& f : feats) {
        nlohmann::json row = {{"id", f.id}, {"zero_flag", f.zero_flag}, {"vec", f.vec}};
        out << row.dump() << '\n';
    }
}

/// Loads a cache whose header equals `expected`; a missing file or any header
/// difference yields nullopt (the cache is stale).
inline std::optional<std::vector<GradientFeature>> load_feature_cache(const std::string& path,
                                                                      const nlohmann::json& expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::string line;
    if (!std::getline(in, line)) return std::nullopt;
    try {
        auto header = nlohmann::json::parse(line);
        if (header != expected) return std::nullopt;
        std::vector<GradientFeature> feats;
        const auto checkpoint = header.value("checkpoint", "");
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto row = nlohmann::json::parse(line);
            GradientFeature f;
            f.id = row.at("id").get<PromptId>();
            f.zero_flag = row.at("zero_flag").get<bool>();
            f.vec = row.at("vec").get<std::vector<double>>();
            f.checkpoint = checkpoint;
            feats.push_back(std::move(f));
        }
        if (feats.size() != header.at("count").get<std::size_t>()) return std::nullopt;
        return feats;
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
}

}  // namespace cropi
