#include "solens/sparse_decomp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "solens/errors.hpp"
#include "solens/parallel.hpp"

namespace solens {

using Eigen::MatrixXd;
using Eigen::VectorXd;

TextPool TextPool::make(std::vector<std::string> phrases, Eigen::MatrixXf embeddings) {
    if (phrases.empty()) throw ValidationError("text pool is empty");
    if (static_cast<Eigen::Index>(phrases.size()) != embeddings.rows())
        throw ValidationError("text pool: " + std::to_string(phrases.size()) + " phrases but " +
                              std::to_string(embeddings.rows()) + " embedding rows");
    TextPool pool;
    pool.atoms = embeddings.cast<double>();
    for (Eigen::Index j = 0; j < pool.atoms.rows(); ++j) {
        const double n = pool.atoms.row(j).norm();
        if (!(n > 0.0) || !std::isfinite(n))
            throw ValidationError("text pool: embedding for '" + phrases[static_cast<std::size_t>(j)] + "' has zero or non-finite norm");
        pool.atoms.row(j) /= n;
    }
    pool.phrases = std::move(phrases);
    pool.embeddings = std::move(embeddings);
    return pool;
}

TextPool pool_from_container(const Container& c) {
    const auto emb = c.find_role("pool.embeddings");
    const auto phrases = c.find_role("pool.phrases");
    if (!emb || !phrases) throw ValidationError("pool container needs pool.embeddings and pool.phrases");
    return TextPool::make(c.strings_at(*phrases), to_matrix(c.at(*emb)));
}

Container pool_to_container(const TextPool& pool) {
    Container c;
    c.put("embeddings", "pool.embeddings", tensor_from(pool.embeddings));
    c.put_strings("phrases", "pool.phrases", pool.phrases);
    return c;
}

SparseCode omp(const VectorXd& r, const TextPool& pool, int m) {
    const int M = pool.size(), d = pool.dim();
    if (m < 1 || m > std::min(M, d))
        throw ValidationError("omp: m = " + std::to_string(m) + " outside [1, " + std::to_string(std::min(M, d)) + "]");
    if (r.size() != d) throw ValidationError("omp: direction dimension differs from the pool");

    SparseCode code;
    std::vector<char> used(static_cast<std::size_t>(M), 0);
    VectorXd residual = r;
    VectorXd gamma;
    const double r_norm = r.norm();
    for (int step = 0; step < m; ++step) {
        const VectorXd corr = pool.atoms * residual;
        int best = -1;
        double best_abs = 0.0;
        for (int j = 0; j < M; ++j) {
            if (used[static_cast<std::size_t>(j)]) continue;
            const double a = std::abs(corr(j));
            if (best < 0 || a > best_abs) {
                best = j;
                best_abs = a;
            }
        }
        // Nothing left to explain.
        if (best < 0 || best_abs <= 1e-14 * std::max(r_norm, 1.0)) break;
        used[static_cast<std::size_t>(best)] = 1;
        code.indices.push_back(best);

        const auto s = static_cast<Eigen::Index>(code.indices.size());
        MatrixXd selected(s, d);
        for (Eigen::Index k = 0; k < s; ++k) selected.row(k) = pool.atoms.row(code.indices[static_cast<std::size_t>(k)]);
        MatrixXd gram = selected * selected.transpose();
        const VectorXd rhs = selected * r;
        Eigen::LLT<MatrixXd> llt(gram);
        if (llt.info() != Eigen::Success || llt.rcond() < 1e-12) {
            gram.diagonal().array() += 1e-10;
            code.rank_deficient = true;
            gamma = gram.ldlt().solve(rhs);
        } else {
            gamma = llt.solve(rhs);
        }
        residual = r - selected.transpose() * gamma;
    }
    code.gamma.assign(gamma.data(), gamma.data() + gamma.size());
    code.r_hat = r - residual;
    code.residual_norm = residual.norm();
    return code;
}

std::vector<SparseCode> decompose_layer(std::span<const NeuronDirection> directions, const TextPool& pool, int m,
                                        int jobs) {
    std::vector<SparseCode> out(directions.size());
    parallel_for(out.size(), jobs, [&](std::size_t i) {
        out[i] = omp(directions[i].r.cast<double>(), pool, m);
        out[i].layer = directions[i].layer;
        out[i].neuron = directions[i].neuron;
    });
    return out;
}

std::vector<PhraseWeight> top_phrases(const SparseCode& code, const TextPool& pool, int k, bool* truncated) {
    if (truncated) *truncated = k > static_cast<int>(code.indices.size());
    std::vector<std::size_t> order(code.indices.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ga = std::abs(code.gamma[a]), gb = std::abs(code.gamma[b]);
        return ga != gb ? ga > gb : code.indices[a] < code.indices[b];
    });
    order.resize(std::min(order.size(), static_cast<std::size_t>(std::max(k, 0))));
    std::vector<PhraseWeight> out;
    for (auto i : order) {
        const int idx = code.indices[i];
        out.push_back({idx, pool.phrases.at(static_cast<std::size_t>(idx)), code.gamma[i]});
    }
    return out;
}

}  // namespace solens
