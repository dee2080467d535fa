#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "solens/container.hpp"
#include "solens/rank1.hpp"

namespace solens {

/// Phrases and their joint-space text embeddings. Atoms are the unit-norm
/// rows used for selection and fitting.
struct TextPool {
    std::vector<std::string> phrases;
    Eigen::MatrixXf embeddings;  // M x d_out
    Eigen::MatrixXd atoms;       // M x d_out, unit rows

    static TextPool make(std::vector<std::string> phrases, Eigen::MatrixXf embeddings);
    int size() const { return static_cast<int>(phrases.size()); }
    int dim() const { return static_cast<int>(atoms.cols()); }
};

TextPool pool_from_container(const Container& container);
Container pool_to_container(const TextPool& pool);

struct SparseCode {
    int layer = -1;
    int neuron = -1;
    std::vector<int> indices;   // selection order
    std::vector<double> gamma;  // in unit-atom units, aligned with indices
    Eigen::VectorXd r_hat;
    double residual_norm = 0.0;
    bool rank_deficient = false;
};

/// Orthogonal matching pursuit with least-squares refit after every pick.
/// Requires 1 <= m <= min(M, d_out).
SparseCode omp(const Eigen::VectorXd& r, const TextPool& pool, int m);

std::vector<SparseCode> decompose_layer(std::span<const NeuronDirection> directions, const TextPool& pool, int m,
                                        int jobs = 0);

struct PhraseWeight {
    int index;
    std::string phrase;
    double gamma;
};

/// The k phrases with the largest |gamma|, sign preserved. When k exceeds
/// the code size all phrases are returned and *truncated is set.
std::vector<PhraseWeight> top_phrases(const SparseCode& code, const TextPool& pool, int k,
                                      bool* truncated = nullptr);

}  // namespace solens
