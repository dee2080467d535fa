#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "solens/container.hpp"
#include "solens/effects.hpp"
#include "solens/rank1.hpp"
#include "solens/vit_engine.hpp"

namespace solens {

struct ClassSet {
    std::vector<std::string> names;
    Eigen::MatrixXf embeddings;  // C x d_out

    int size() const { return static_cast<int>(names.size()); }
};

ClassSet classes_from_container(const Container& container);
Container classes_to_container(const ClassSet& classes);

/// Predicted class per image by maximal cosine similarity (lowest index on
/// ties). Images with a zero-norm representation get -1.
std::vector<int> classify(const Eigen::MatrixXf& representations, const ClassSet& classes);

/// Percentage of correct predictions, skipping predictions of -1.
double accuracy(std::span<const int> predictions, std::span<const int> labels);

enum class AblationMode { All, SmallNorm, LargeNormTopQ, Pc1Reconstruction, Indirect, FirstOrderMsa };

std::string to_string(AblationMode mode);
AblationMode ablation_mode_from_string(const std::string& name);

struct AblationConfig {
    std::vector<int> layers;
    AblationMode mode = AblationMode::All;
    int Q = 100;
    std::string eval_set = "eval";
};

/// Data for one layer. Which members are needed depends on the mode.
struct LayerAblationData {
    int layer = 0;
    const SecondOrderField* field = nullptr;      // effects on the evaluation images
    Eigen::MatrixXf reference_mean;               // neurons x d_out, empty = field mean
    std::vector<NeuronDirection> directions;      // pc1 mode, aligned with field slots
    Eigen::MatrixXf token_means;                  // indirect mode: tokens x N
    Eigen::VectorXf msa_reference_mean;           // first_order_msa mode
};

struct AblationContext {
    const ClassSet* classes = nullptr;
    std::vector<int> labels;
    Eigen::MatrixXf representations;  // images x d_out, baseline
    // Needed by the indirect and first_order_msa modes.
    const WeightBundle* weights = nullptr;
    const Tensor* images = nullptr;
    std::span<const ImageTrace> traces;
    int jobs = 0;
};

/// Applies one layer's ablation to `representations` and returns the result.
/// Neuron slots default to every neuron in the field.
Eigen::MatrixXf ablate_representations(const AblationContext& context, const LayerAblationData& data,
                                       AblationMode mode, int Q, const Eigen::MatrixXf& representations);

struct AblationRow {
    int layer = 0;
    AblationMode mode = AblationMode::All;
    double baseline_accuracy = 0.0;
    double ablated_accuracy = 0.0;
    int n_images = 0;
    int n_neurons = 0;
};

std::vector<AblationRow> run_ablation(const AblationConfig& config, const AblationContext& context,
                                      std::span<const LayerAblationData> layers);

std::string ablation_csv(std::span<const AblationRow> rows);

/// First-PC explained variance of rows centered on their mean.
double first_pc_variance_explained(const Eigen::MatrixXd& effects);

struct VarianceRow {
    int layer = 0;
    double second_order = 0.0;            // percent, mean over neurons
    std::optional<double> indirect;       // percent, mean over neurons
};

double mean_variance_explained(std::span<const NeuronDirection> directions);

/// Indirect-effect vectors (images x d_out) of one neuron.
Eigen::MatrixXd indirect_effect_vectors(const WeightBundle& weights, const Tensor& images, int layer, int neuron,
                                        const Eigen::VectorXf& token_means, int jobs = 0);

std::string variance_csv(std::span<const VarianceRow> rows);

}  // namespace solens
