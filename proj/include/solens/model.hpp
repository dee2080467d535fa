#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "solens/tensor.hpp"

namespace solens {

/// Dimensions of a CLIP-style ViT image encoder.
struct ModelSpec {
    int layers = 0;      // L
    int heads = 0;       // H
    int width = 0;       // N, MLP neurons per layer
    int d_model = 0;     // residual width
    int d_out = 0;       // joint-space dimension
    int patch_size = 0;
    int image_size = 0;
    float ln_eps = 1e-5f;

    int grid() const { return image_size / patch_size; }
    int patches() const { return grid() * grid(); }  // K
    int tokens() const { return patches() + 1; }     // K + 1, class token first
    int head_dim() const { return d_model / heads; }
    int patch_dim() const { return 3 * patch_size * patch_size; }

    // LayerNorm slots recorded in traces: pre, (ln1, ln2) per layer, post.
    int ln_count() const { return 2 * layers + 2; }
    static int ln_pre() { return 0; }
    static int ln_attn(int layer) { return 1 + 2 * layer; }
    static int ln_mlp(int layer) { return 2 + 2 * layer; }
    int ln_post() const { return 2 * layers + 1; }

    /// Throws ValidationError on non-positive sizes, d_model % heads != 0, or
    /// image_size not a multiple of patch_size.
    void validate() const;

    bool operator==(const ModelSpec&) const = default;
};

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

/// The toy configuration used throughout the tests and the gen-toy command.
ModelSpec toy_spec();

struct ValidationIssue {
    enum class Kind { Missing, Shape, Spec };
    Kind kind;
    std::string tensor;
    int layer = -1;  // -1 for non-layer parameters
    std::string message;
};

struct ValidationReport {
    std::vector<ValidationIssue> issues;
    bool ok() const { return issues.empty(); }
    std::string to_string() const;
};

/// Expected tensor names and shapes for a bundle of the given spec.
std::vector<std::pair<std::string, Shape>> bundle_schema(const ModelSpec& spec);
std::string bundle_role(const std::string& tensor_name);

/// Reports every missing or ill-shaped parameter. Never throws.
ValidationReport validate_bundle(const TensorMap& tensors, const ModelSpec& spec);

struct LayerWeights {
    Eigen::VectorXf ln1_gamma, ln1_beta;
    // Projections are stored (out x in), applied as W * x.
    Eigen::MatrixXf W_q, W_k, W_v, W_o;
    Eigen::VectorXf b_q, b_k, b_v, b_o;
    Eigen::VectorXf ln2_gamma, ln2_beta;
    Eigen::MatrixXf W_in;   // N x d_model
    Eigen::VectorXf b_in;
    Eigen::MatrixXf W_out;  // d_model x N, column n is the neuron's write direction
    Eigen::VectorXf b_out;
};

/// All encoder parameters. Immutable after construction; safe to share
/// across threads.
struct WeightBundle {
    ModelSpec spec;
    Eigen::MatrixXf patch_embed;  // d_model x (3 * p * p), input order (channel, row, col)
    Eigen::VectorXf class_embed;
    Eigen::MatrixXf pos_embed;    // tokens x d_model
    Eigen::VectorXf ln_pre_gamma, ln_pre_beta;
    std::vector<LayerWeights> layers;
    Eigen::VectorXf ln_post_gamma, ln_post_beta;
    Eigen::MatrixXf proj;         // d_out x d_model

    /// Throws ValidationError carrying the full report when the map does not
    /// match the schema.
    static WeightBundle from_tensors(const TensorMap& tensors, const ModelSpec& spec);
    TensorMap to_tensors() const;
};

/// Reproducible pseudo-random bundle. Generator: std::mt19937_64 seeded with
/// `seed`, normal draws via std::normal_distribution in schema order.
/// Projections ~ N(0, 1/fan_in); biases ~ N(0, 0.02^2); LayerNorm gains
/// ~ 1 + N(0, 0.1^2), shifts ~ N(0, 0.05^2); class/positional embeddings
/// ~ N(0, 0.5^2).
WeightBundle generate_toy(std::uint64_t seed, const ModelSpec& spec);

}  // namespace solens
