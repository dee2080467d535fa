#include "solens/eval_harness.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "solens/errors.hpp"
#include "solens/parallel.hpp"

namespace solens {

using Eigen::MatrixXd;
using Eigen::MatrixXf;
using Eigen::VectorXd;
using Eigen::VectorXf;

ClassSet classes_from_container(const Container& c) {
    const auto emb = c.find_role("classes.embeddings");
    const auto names = c.find_role("classes.names");
    if (!emb || !names) throw ValidationError("class container needs classes.embeddings and classes.names");
    ClassSet set{c.strings_at(*names), to_matrix(c.at(*emb))};
    if (set.size() < 2) throw ValidationError("class set needs at least two classes");
    if (set.embeddings.rows() != set.size()) throw ValidationError("class names and embeddings disagree in count");
    if (!set.embeddings.allFinite()) throw ValidationError("class embeddings must be finite");
    return set;
}

Container classes_to_container(const ClassSet& classes) {
    Container c;
    c.put("embeddings", "classes.embeddings", tensor_from(classes.embeddings));
    c.put_strings("names", "classes.names", classes.names);
    return c;
}

std::vector<int> classify(const MatrixXf& reps, const ClassSet& classes) {
    if (reps.rows() > 0 && reps.cols() != classes.embeddings.cols())
        throw ValidationError("representation and class embedding dimensions differ");
    const VectorXf class_norms = classes.embeddings.rowwise().norm();
    std::vector<int> out(static_cast<std::size_t>(reps.rows()), -1);
    for (Eigen::Index i = 0; i < reps.rows(); ++i) {
        const float norm = reps.row(i).norm();
        if (!(norm > 0.0f)) continue;
        const VectorXf dots = classes.embeddings * reps.row(i).transpose();
        int best = 0;
        float best_sim = -std::numeric_limits<float>::infinity();
        for (Eigen::Index c = 0; c < dots.size(); ++c) {
            const float sim = class_norms(c) > 0.0f ? dots(c) / (class_norms(c) * norm) : 0.0f;
            if (sim > best_sim) {
                best_sim = sim;
                best = static_cast<int>(c);
            }
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw ValidationError("accuracy: prediction/label count mismatch");
    std::size_t counted = 0, correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] < 0) continue;
        ++counted;
        correct += predictions[i] == labels[i];
    }
    if (counted == 0) throw ValidationError("accuracy: no scorable predictions");
    return 100.0 * static_cast<double>(correct) / static_cast<double>(counted);
}

std::string to_string(AblationMode mode) {
    switch (mode) {
        case AblationMode::All: return "all";
        case AblationMode::SmallNorm: return "small_norm";
        case AblationMode::LargeNormTopQ: return "large_norm_topQ";
        case AblationMode::Pc1Reconstruction: return "pc1_reconstruction";
        case AblationMode::Indirect: return "indirect";
        case AblationMode::FirstOrderMsa: return "first_order_msa";
    }
    return "unknown";
}

AblationMode ablation_mode_from_string(const std::string& name) {
    for (auto m : {AblationMode::All, AblationMode::SmallNorm, AblationMode::LargeNormTopQ,
                   AblationMode::Pc1Reconstruction, AblationMode::Indirect, AblationMode::FirstOrderMsa})
        if (to_string(m) == name) return m;
    throw ValidationError("unknown ablation mode '" + name + "'");
}

namespace {

// in_top(i, s): image i is among the Q largest norms of slot s (ties by index).
std::vector<std::vector<char>> top_q_membership(const SecondOrderField& field, int Q) {
    std::vector<std::vector<char>> member(static_cast<std::size_t>(field.neuron_count()),
                                          std::vector<char>(static_cast<std::size_t>(field.n_images), 0));
    std::vector<int> order(static_cast<std::size_t>(field.n_images));
    for (int s = 0; s < field.neuron_count(); ++s) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return field.norms(a, s) > field.norms(b, s); });
        for (int k = 0; k < std::min(Q, field.n_images); ++k)
            member[static_cast<std::size_t>(s)][static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = 1;
    }
    return member;
}

}  // namespace

MatrixXf ablate_representations(const AblationContext& ctx, const LayerAblationData& data, AblationMode mode, int Q,
                                const MatrixXf& reps) {
    const auto n_images = reps.rows();
    MatrixXf out = reps;
    switch (mode) {
        case AblationMode::All:
        case AblationMode::SmallNorm:
        case AblationMode::LargeNormTopQ:
        case AblationMode::Pc1Reconstruction: {
            const SecondOrderField* field = data.field;
            if (!field || !field->has_full())
                throw ValidationError("ablation mode " + to_string(mode) + " needs full second-order effects for layer " +
                                      std::to_string(data.layer));
            if (field->n_images != n_images) throw ValidationError("effect field and representations differ in image count");
            const MatrixXf& mean = data.reference_mean.size() ? data.reference_mean : field->mean;
            if (mean.rows() != field->neuron_count()) throw ValidationError("reference mean does not match the field");
            std::vector<std::vector<char>> top;
            if (mode == AblationMode::SmallNorm || mode == AblationMode::LargeNormTopQ) top = top_q_membership(*field, Q);
            std::vector<const NeuronDirection*> dirs(static_cast<std::size_t>(field->neuron_count()), nullptr);
            if (mode == AblationMode::Pc1Reconstruction) {
                for (int s = 0; s < field->neuron_count(); ++s) {
                    const int neuron = field->neurons[static_cast<std::size_t>(s)];
                    auto it = std::find_if(data.directions.begin(), data.directions.end(),
                                           [&](const NeuronDirection& d) { return d.neuron == neuron; });
                    if (it == data.directions.end())
                        throw ValidationError("pc1 ablation: no direction for neuron " + std::to_string(neuron));
                    dirs[static_cast<std::size_t>(s)] = &*it;
                }
            }
            for (Eigen::Index i = 0; i < n_images; ++i) {
                for (int s = 0; s < field->neuron_count(); ++s) {
                    const auto ss = static_cast<std::size_t>(s);
                    if (mode == AblationMode::SmallNorm && top[ss][static_cast<std::size_t>(i)]) continue;
                    if (mode == AblationMode::LargeNormTopQ && !top[ss][static_cast<std::size_t>(i)]) continue;
                    const VectorXf phi = field->phi_at(static_cast<int>(i), s);
                    const VectorXf replacement = mode == AblationMode::Pc1Reconstruction
                                                     ? reconstruct(*dirs[ss], coefficient(*dirs[ss], phi))
                                                     : VectorXf(mean.row(s).transpose());
                    out.row(i) += (replacement - phi).transpose();
                }
            }
            break;
        }
        case AblationMode::Indirect: {
            if (!ctx.weights || !ctx.images) throw ValidationError("indirect ablation needs weights and images");
            if (data.token_means.rows() != ctx.weights->spec.tokens() || data.token_means.cols() != ctx.weights->spec.width)
                throw ValidationError("indirect ablation needs per-token means (tokens x N)");
            std::vector<int> neurons;
            if (data.field) {
                neurons = data.field->neurons;
            } else {
                neurons.resize(static_cast<std::size_t>(ctx.weights->spec.width));
                std::iota(neurons.begin(), neurons.end(), 0);
            }
            std::vector<Intervention> patch;
            for (int n : neurons) patch.push_back({data.layer, n, data.token_means.col(n)});
            parallel_for(static_cast<std::size_t>(n_images), ctx.jobs, [&](std::size_t i) {
                const auto row = static_cast<Eigen::Index>(i);
                const VectorXf patched =
                    forward_with_intervention(*ctx.weights, image_at(*ctx.images, static_cast<std::int64_t>(i)), patch);
                out.row(row) = reps.row(row) - ctx.representations.row(row) + patched.transpose();
            });
            break;
        }
        case AblationMode::FirstOrderMsa: {
            if (!ctx.weights || static_cast<Eigen::Index>(ctx.traces.size()) != n_images)
                throw ValidationError("first_order_msa ablation needs weights and traces");
            if (data.msa_reference_mean.size() != reps.cols())
                throw ValidationError("first_order_msa ablation needs the reference mean");
            for (Eigen::Index i = 0; i < n_images; ++i) {
                const VectorXf direct = first_order_msa(*ctx.weights, ctx.traces[static_cast<std::size_t>(i)], data.layer);
                out.row(i) += (data.msa_reference_mean - direct).transpose();
            }
            break;
        }
    }
    return out;
}

std::vector<AblationRow> run_ablation(const AblationConfig& config, const AblationContext& ctx,
                                      std::span<const LayerAblationData> layers) {
    if (!ctx.classes) throw ValidationError("run_ablation needs a class set");
    const double baseline = accuracy(classify(ctx.representations, *ctx.classes), ctx.labels);
    std::vector<AblationRow> rows;
    for (int layer : config.layers) {
        auto it = std::find_if(layers.begin(), layers.end(), [&](const LayerAblationData& d) { return d.layer == layer; });
        if (it == layers.end()) throw ValidationError("no ablation data for layer " + std::to_string(layer));
        const MatrixXf ablated = ablate_representations(ctx, *it, config.mode, config.Q, ctx.representations);
        AblationRow row;
        row.layer = layer;
        row.mode = config.mode;
        row.baseline_accuracy = baseline;
        row.ablated_accuracy = accuracy(classify(ablated, *ctx.classes), ctx.labels);
        row.n_images = static_cast<int>(ctx.representations.rows());
        if (config.mode == AblationMode::FirstOrderMsa)
            row.n_neurons = 0;
        else if (it->field)
            row.n_neurons = it->field->neuron_count();
        else
            row.n_neurons = ctx.weights ? ctx.weights->spec.width : 0;
        rows.push_back(row);
    }
    return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
    std::string out = "layer,mode,baseline_acc,ablated_acc,n_images,n_neurons\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%s,%.4f,%.4f,%d,%d\n", r.layer, to_string(r.mode).c_str(), r.baseline_accuracy,
                      r.ablated_accuracy, r.n_images, r.n_neurons);
        out += buf;
    }
    return out;
}

double first_pc_variance_explained(const MatrixXd& effects) {
    const VectorXd mean = effects.colwise().mean().transpose();
    return fit_direction_from(effects, mean, mean).variance_explained;
}

double mean_variance_explained(std::span<const NeuronDirection> directions) {
    if (directions.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& d : directions) sum += d.variance_explained;
    return sum / static_cast<double>(directions.size());
}

MatrixXd indirect_effect_vectors(const WeightBundle& weights, const Tensor& images, int layer, int neuron,
                                 const VectorXf& token_means, int jobs) {
    MatrixXd out(images.dim(0), weights.spec.d_out);
    parallel_for(static_cast<std::size_t>(images.dim(0)), jobs, [&](std::size_t i) {
        out.row(static_cast<Eigen::Index>(i)) =
            indirect_effect(weights, image_at(images, static_cast<std::int64_t>(i)), layer, neuron, token_means)
                .cast<double>()
                .transpose();
    });
    return out;
}

std::string variance_csv(std::span<const VarianceRow> rows) {
    std::string out = "layer,second_order_ve,indirect_ve\n";
    char buf[128];
    for (const auto& r : rows) {
        if (r.indirect)
            std::snprintf(buf, sizeof buf, "%d,%.4f,%.4f\n", r.layer, r.second_order, *r.indirect);
        else
            std::snprintf(buf, sizeof buf, "%d,%.4f,\n", r.layer, r.second_order);
        out += buf;
    }
    return out;
}

}  // namespace solens
