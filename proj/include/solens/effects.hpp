#pragma once

// First-order, second-order and indirect effects of MLP neurons on the
// image representation.
//
// LayerNorm is written as LN(x) = A * x - B with A = gamma / sigma and
// B = mu * gamma / sigma - beta, using the per-token statistics recorded in
// the reference trace. With A and B frozen every path from a residual
// contribution to the output is affine, so the decomposition is exact.

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "solens/container.hpp"
#include "solens/model.hpp"
#include "solens/vit_engine.hpp"

namespace solens {

enum class StorageMode { Full, TopQ };

struct EffectOptions {
    // Include the constant LayerNorm bias shares B/c terms.
    bool bias_shares = true;
    StorageMode storage = StorageMode::Full;
    // Number of full vectors retained per neuron in TopQ mode.
    int top_q = 128;
    int jobs = 0;
};

/// Second-order effects phi_n^l(I) of a set of neurons over a set of images.
struct SecondOrderField {
    int layer = 0;
    std::vector<int> neurons;
    int n_images = 0;
    int d_out = 0;
    StorageMode storage = StorageMode::Full;

    std::vector<float> phi;  // Full mode: images x neurons x d_out
    Eigen::MatrixXf norms;   // images x neurons
    Eigen::MatrixXf mean;    // neurons x d_out, over all images of the field

    // TopQ mode: per neuron slot, the retained images in descending norm
    // order (ties by image index) and their vectors (q x d_out).
    struct Retained {
        std::vector<int> images;
        Eigen::MatrixXf vectors;
    };
    std::vector<Retained> retained;

    bool has_full() const { return storage == StorageMode::Full; }
    int neuron_count() const { return static_cast<int>(neurons.size()); }
    int slot_of(int neuron) const;  // throws if absent
    Eigen::VectorXf phi_at(int image, int slot) const;

    /// Top-k vectors by norm for one neuron slot (k x d_out) plus their image
    /// indices. Throws if fewer than k vectors are available.
    Eigen::MatrixXf top_vectors(int slot, int k, std::vector<int>* images = nullptr) const;

    /// Builds a field from dense vectors (images x neurons x d_out).
    static SecondOrderField from_dense(int layer, std::vector<int> neurons, int n_images, int d_out,
                                       std::vector<float> phi, StorageMode storage = StorageMode::Full,
                                       int top_q = 0);
};

SecondOrderField second_order(const WeightBundle& weights, std::span<const ImageTrace> traces, int layer,
                              std::span<const int> neurons, const EffectOptions& options = {});

/// Convenience overload for all neurons of the layer.
SecondOrderField second_order(const WeightBundle& weights, std::span<const ImageTrace> traces, int layer,
                              const EffectOptions& options = {});

/// Direct effect of one neuron through the final LayerNorm and projection,
/// images x d_out.
Eigen::MatrixXf first_order_neuron(const WeightBundle& weights, std::span<const ImageTrace> traces, int layer,
                                   int neuron, bool bias_shares = false);

/// Direct effect of an MSA layer's class-token output, d_out.
Eigen::VectorXf first_order_msa(const WeightBundle& weights, const ImageTrace& trace, int layer);

/// forward(image) - forward(image with the neuron patched to per_token_means).
Eigen::VectorXf indirect_effect(const WeightBundle& weights, std::span<const float> image, int layer, int neuron,
                                const Eigen::VectorXf& per_token_means);

/// Mean post-GELU activation per token over the traces, tokens x N.
Eigen::MatrixXf per_token_means(std::span<const ImageTrace> traces, int layer);

/// Arithmetic mean of phi per neuron (neurons x d_out). Recomputes from the
/// stored vectors in Full mode.
Eigen::MatrixXf mean_over_reference(const SecondOrderField& field);

/// Euclidean norms, images x neurons.
Eigen::MatrixXf effect_norms(const SecondOrderField& field);

/// Frozen attention/LayerNorm map from a residual contribution written at
/// layer `layer` (tokens x d_model) to the output, through every later MSA's
/// value path. Affine: apply(0) is the bias-share offset.
class FrozenPathMap {
public:
    FrozenPathMap(const WeightBundle& weights, const ImageTrace& trace, int layer, bool bias_shares = true);

    Eigen::VectorXd apply(const Eigen::MatrixXd& contribution) const;
    int layer() const { return layer_; }

private:
    struct Path {
        Eigen::VectorXd attention;  // tokens
        Eigen::VectorXd inv_sigma;  // tokens
        Eigen::MatrixXd vo_gamma;   // W_VO * diag(gamma of the MSA LayerNorm)
        Eigen::VectorXd bias_term;  // constant contribution of this path, d_model
    };
    int layer_;
    std::vector<Path> paths_;
    Eigen::MatrixXd output_map_;  // P * diag(final gamma / final sigma)
    Eigen::VectorXd offset_;      // final-LN bias share in output space
};

Container field_to_container(const SecondOrderField& field);
SecondOrderField field_from_container(const Container& container);

}  // namespace solens
