#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "solens/container.hpp"
#include "solens/model.hpp"

namespace solens {

/// Everything recorded from one forward pass of one image.
struct ImageTrace {
    std::vector<Eigen::MatrixXf> post_gelu;       // per layer: tokens x N
    std::vector<Eigen::MatrixXf> attn_class_row;  // per layer: H x tokens
    Eigen::MatrixXf ln_mu;                        // ln_count x tokens
    Eigen::MatrixXf ln_sigma;                     // ln_count x tokens, sqrt(var + eps)
    Eigen::MatrixXf msa_class_out;                // L x d_model, class-token MSA output (incl. biases)
    Eigen::VectorXf class_token_prelnpost;        // final residual class token
    Eigen::VectorXf representation;               // d_out
};

/// Replace the post-GELU activation of one neuron on every token.
struct Intervention {
    int layer = 0;
    int neuron = 0;
    Eigen::VectorXf replacement;  // tokens
};

/// Image tensors are preprocessed 3 x image_size x image_size, row-major.
ImageTrace forward(const WeightBundle& weights, std::span<const float> image);

Eigen::VectorXf forward_with_intervention(const WeightBundle& weights, std::span<const float> image,
                                          std::span<const Intervention> interventions);

/// Head-restricted value/output composition W_O[:, head] * W_V[head, :].
Eigen::MatrixXf compute_vo(const WeightBundle& weights, int layer, int head);

/// Runs forward over a batch of images (images x 3 x S x S).
std::vector<ImageTrace> trace_images(const WeightBundle& weights, const Tensor& images, int jobs = 0);

std::span<const float> image_at(const Tensor& images, std::int64_t index);

Container traces_to_container(std::span<const ImageTrace> traces, const ModelSpec& spec);
std::vector<ImageTrace> traces_from_container(const Container& container, const ModelSpec& spec);

/// Stacked representations, images x d_out.
Eigen::MatrixXf representations(std::span<const ImageTrace> traces);

}  // namespace solens
