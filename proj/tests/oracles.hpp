#pragma once

// Independent reference implementations used only by the tests. They share
// no code with the library beyond the data structures.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "solens/model.hpp"
#include "solens/tensor.hpp"
#include "solens/vit_engine.hpp"

namespace oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct RefTrace {
    std::vector<MatrixXd> post_gelu;  // per layer, tokens x N
    std::vector<MatrixXd> attn;       // per layer, H x tokens (class row)
    std::vector<MatrixXd> ln1_out;    // per layer, tokens x d_model
    std::vector<VectorXd> ln1_mu, ln1_sigma;
    double post_mu = 0.0, post_sigma = 0.0;
    VectorXd representation;
};

// Straight-line float64 forward. `edit` may overwrite the MLP hidden
// activations of a layer before they are written back.
struct HiddenEdit {
    int layer = -1;
    int neuron = -1;
    VectorXd values;
};
RefTrace forward(const solens::WeightBundle& w, std::span<const float> image, std::span<const HiddenEdit> edits = {});

// Literal sum over (l', h, i) of the layer-norm corrected second-order
// effect, using the recorded statistics of `trace`.
VectorXd second_order_loop(const solens::WeightBundle& w, const solens::ImageTrace& trace, int layer, int neuron,
                           bool bias_shares);

// Smallest residual norm over every subset of `m` unit atoms.
double best_subset_residual(const MatrixXd& atoms, const VectorXd& r, int m);

// Leading eigenvector of the covariance of rows around `center`.
VectorXd leading_eigenvector(const MatrixXd& rows, const VectorXd& center);

solens::Tensor random_images(std::uint64_t seed, int n, int size);
MatrixXd random_gaussian(std::uint64_t seed, int rows, int cols);

}  // namespace oracle
