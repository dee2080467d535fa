#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "solens/effects.hpp"
#include "solens/rank1.hpp"
#include "solens/sparse_decomp.hpp"
#include "solens/vit_engine.hpp"

namespace solens {

struct NeuronRef {
    int layer = 0;
    int neuron = 0;
    double score = 0.0;  // |<v, r>| for selections
    bool operator==(const NeuronRef& o) const { return layer == o.layer && neuron == o.neuron; }
};

/// Top-k directions by |<v, r>|; ties broken by (layer, neuron).
std::vector<NeuronRef> select_neurons_by_direction(std::span<const NeuronDirection> directions,
                                                   const Eigen::VectorXf& v, int k);

struct PhraseScore {
    int index = 0;
    double score = 0.0;
};

/// Phrase scores sorted descending (ties by phrase index).
struct PhraseRanking {
    std::vector<PhraseScore> entries;
    std::string context;
};

/// w_j = sum_{n in N} gamma_j^n <v, r_n>.
PhraseRanking contribution_scores(std::span<const NeuronRef> neurons, std::span<const SparseCode> codes,
                                  std::span<const NeuronDirection> directions, const Eigen::VectorXf& v);

struct ClassDirection {
    Eigen::VectorXf v;
    bool degenerate = false;
};

/// v = b - a: positive scores push toward class b.
ClassDirection classification_direction(const Eigen::VectorXf& class_a, const Eigen::VectorXf& class_b);

enum class PercentileScope { PerNeuron, Global };

struct PercentileTable {
    int layer = 0;
    std::vector<int> neurons;
    std::vector<float> thresholds;
};

/// Linear-interpolated percentile of the field norms per neuron (or over all
/// neurons when scope is Global).
PercentileTable percentile_table(const SecondOrderField& reference, double percentile = 98.0,
                                 PercentileScope scope = PercentileScope::PerNeuron);

/// Neurons whose effect norm on `image` exceeds their threshold contribute
/// gamma_j * ||phi||. Returns the top `top` phrases.
PhraseRanking discover_concepts(std::span<const SecondOrderField> fields, std::span<const PercentileTable> tables,
                                std::span<const SparseCode> codes, int image, int top = 10);

struct Heatmap {
    int grid = 0;
    int size = 0;
    std::vector<float> grid_scores;  // grid x grid, standardized to [0, 1]
    std::vector<float> upsampled;    // size x size
    std::vector<std::uint8_t> mask;  // size x size, 1 where upsampled >= threshold
    bool degenerate = false;
};

/// Average patch activations of the selected neurons, min-max standardize,
/// bilinear upsample (half-pixel centers, clamped edges), threshold.
Heatmap heatmap_from_neurons(const ImageTrace& trace, std::span<const NeuronRef> neurons, const ModelSpec& spec,
                             float threshold = 0.5f);

Heatmap segment(const ImageTrace& trace, std::span<const NeuronDirection> directions,
                const Eigen::VectorXf& class_embedding, const ModelSpec& spec, int k = 200, float threshold = 0.5f);

/// Bilinear resize of a row-major grid to size x size.
std::vector<float> upsample_bilinear(std::span<const float> grid, int grid_size, int size);

struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;
};

struct SegmentationMetrics {
    double pixel_accuracy = 0.0;  // percent
    double miou = 0.0;            // percent
    double map = 0.0;             // percent
    int images_without_foreground = 0;
};

/// Average precision of scores ranked against binary labels (ties grouped).
double average_precision(std::span<const float> scores, std::span<const std::uint8_t> labels);

SegmentationMetrics segmentation_metrics(std::span<const Heatmap> predicted, std::span<const BinaryMask> truth);

}  // namespace solens
