#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "solens/container.hpp"
#include "solens/effects.hpp"

namespace solens {

/// Rank-1 model of a neuron's second-order effects: phi ~ x * r + b.
struct NeuronDirection {
    int layer = 0;
    int neuron = 0;
    Eigen::VectorXf r;  // unit
    Eigen::VectorXf b;  // mean of phi over the reference set
    double variance_explained = 0.0;
    int support_size = 0;
    bool degenerate = false;
};

struct Rank1Options {
    int support_size = 128;
    // Center the principal component on the support mean instead of b.
    bool center_on_support = false;
    int max_iterations = 20000;
    double tolerance = 1e-9;
    int jobs = 0;
};

/// Leading principal direction of `support` (rows are effect vectors) after
/// subtracting `center`, by power iteration. The sign is chosen so that the
/// member with the largest |projection| projects positively.
NeuronDirection fit_direction_from(const Eigen::MatrixXd& support, const Eigen::VectorXd& center,
                                   const Eigen::VectorXd& b, const Rank1Options& options = {});

/// Fits on the top-support_size effects by norm; b is the field mean.
NeuronDirection fit_direction(const SecondOrderField& field, int neuron, const Rank1Options& options = {});

std::vector<NeuronDirection> fit_layer(const SecondOrderField& field, const Rank1Options& options = {});

/// Fraction of the support variance (around the support mean) captured by r.
double variance_explained(const Eigen::MatrixXd& support, const Eigen::VectorXd& r);

/// Signed projection of the centered effect, <phi - b, r>.
float coefficient(const NeuronDirection& direction, const Eigen::VectorXf& phi);
Eigen::VectorXf reconstruct(const NeuronDirection& direction, float x);

Container directions_to_container(std::span<const NeuronDirection> directions);
std::vector<NeuronDirection> directions_from_container(const Container& container);

}  // namespace solens
