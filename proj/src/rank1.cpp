#include "solens/rank1.hpp"

#include "solens/errors.hpp"
#include "solens/parallel.hpp"

namespace solens {

using Eigen::MatrixXd;
using Eigen::MatrixXf;
using Eigen::VectorXd;
using Eigen::VectorXf;

double variance_explained(const MatrixXd& support, const VectorXd& r) {
    const VectorXd mean = support.colwise().mean();
    const MatrixXd centered = support.rowwise() - mean.transpose();
    const double total = centered.squaredNorm();
    if (total <= 1e-300) return 1.0;
    return std::min(1.0, (centered * r).squaredNorm() / total);
}

NeuronDirection fit_direction_from(const MatrixXd& support, const VectorXd& center, const VectorXd& b,
                                   const Rank1Options& options) {
    if (support.rows() < 2) throw ValidationError("fit_direction needs a support of at least 2 effects");
    const Eigen::Index d = support.cols();
    if (center.size() != d || b.size() != d) throw ValidationError("fit_direction: dimension mismatch");

    NeuronDirection out;
    out.support_size = static_cast<int>(support.rows());
    out.b = b.cast<float>();
    const MatrixXd x = support.rowwise() - center.transpose();

    Eigen::Index start_row = 0;
    const double largest = x.rowwise().squaredNorm().maxCoeff(&start_row);
    VectorXd r = VectorXd::Unit(d, 0);
    if (largest <= 1e-300) {
        out.degenerate = true;
    } else {
        r = x.row(start_row).transpose() / std::sqrt(largest);
        for (int it = 0; it < options.max_iterations; ++it) {
            VectorXd next = x.transpose() * (x * r);
            const double n = next.norm();
            if (n <= 1e-300) {
                out.degenerate = true;
                break;
            }
            next /= n;
            const double change = (next - r).norm();
            r = std::move(next);
            if (change < options.tolerance) break;
        }
        const VectorXd proj = x * r;
        Eigen::Index arg = 0;
        proj.cwiseAbs().maxCoeff(&arg);
        if (proj(arg) < 0) r = -r;
    }
    const VectorXd mean_s = support.colwise().mean();
    if ((support.rowwise() - mean_s.transpose()).squaredNorm() <= 1e-300) out.degenerate = true;
    out.variance_explained = variance_explained(support, r);
    out.r = r.cast<float>();
    return out;
}

NeuronDirection fit_direction(const SecondOrderField& field, int neuron, const Rank1Options& options) {
    if (options.support_size < 2) throw ValidationError("support_size must be at least 2");
    const int slot = field.slot_of(neuron);
    const MatrixXd support = field.top_vectors(slot, options.support_size).cast<double>();
    const VectorXd b = field.mean.row(slot).transpose().cast<double>();
    const VectorXd center = options.center_on_support ? VectorXd(support.colwise().mean().transpose()) : b;
    NeuronDirection out = fit_direction_from(support, center, b, options);
    out.layer = field.layer;
    out.neuron = neuron;
    return out;
}

std::vector<NeuronDirection> fit_layer(const SecondOrderField& field, const Rank1Options& options) {
    std::vector<NeuronDirection> out(field.neurons.size());
    parallel_for(out.size(), options.jobs, [&](std::size_t i) { out[i] = fit_direction(field, field.neurons[i], options); });
    return out;
}

float coefficient(const NeuronDirection& d, const VectorXf& phi) { return (phi - d.b).dot(d.r); }

VectorXf reconstruct(const NeuronDirection& d, float x) { return x * d.r + d.b; }

Container directions_to_container(std::span<const NeuronDirection> directions) {
    Container c;
    nlohmann::json layers = nlohmann::json::array(), neurons = nlohmann::json::array(),
                   support = nlohmann::json::array(), degenerate = nlohmann::json::array();
    if (!directions.empty()) {
        const auto n = static_cast<Eigen::Index>(directions.size());
        const Eigen::Index d = directions[0].r.size();
        MatrixXf r(n, d), b(n, d);
        VectorXf ve(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto& dir = directions[static_cast<std::size_t>(i)];
            r.row(i) = dir.r.transpose();
            b.row(i) = dir.b.transpose();
            ve(i) = static_cast<float>(dir.variance_explained);
            layers.push_back(dir.layer);
            neurons.push_back(dir.neuron);
            support.push_back(dir.support_size);
            degenerate.push_back(dir.degenerate);
        }
        c.put("r", "rank1.r", tensor_from(r));
        c.put("b", "rank1.b", tensor_from(b));
        c.put("var_explained", "rank1.var_explained", tensor_from(ve));
    }
    c.manifest.attributes = {{"layers", layers}, {"neurons", neurons}, {"support_size", support}, {"degenerate", degenerate}};
    return c;
}

std::vector<NeuronDirection> directions_from_container(const Container& c) {
    const auto& a = c.manifest.attributes;
    const auto layers = a.at("layers").get<std::vector<int>>();
    const auto neurons = a.at("neurons").get<std::vector<int>>();
    const auto support = a.at("support_size").get<std::vector<int>>();
    const auto degenerate = a.at("degenerate").get<std::vector<bool>>();
    std::vector<NeuronDirection> out(layers.size());
    if (out.empty()) return out;
    const MatrixXf r = to_matrix(c.at("r"));
    const MatrixXf b = to_matrix(c.at("b"));
    const VectorXf ve = to_vector(c.at("var_explained"));
    if (r.rows() != static_cast<Eigen::Index>(out.size()) || b.rows() != r.rows() || ve.size() != r.rows())
        throw ValidationError("rank1 container tensors disagree with its attributes");
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        out[i] = {layers[i], neurons[i], r.row(row).transpose(), b.row(row).transpose(), ve(row), support[i], degenerate[i]};
    }
    return out;
}

}  // namespace solens
