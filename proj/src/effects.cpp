#include "solens/effects.hpp"

#include <algorithm>
#include <numeric>

#include "solens/errors.hpp"
#include "solens/parallel.hpp"

namespace solens {

using Eigen::MatrixXd;
using Eigen::MatrixXf;
using Eigen::VectorXd;
using Eigen::VectorXf;

namespace {

void check_layer(const ModelSpec& spec, int layer) {
    if (layer < 0 || layer >= spec.layers)
        throw ValidationError("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(spec.layers) + ")");
}

void check_trace(const ModelSpec& spec, const ImageTrace& t) {
    if (static_cast<int>(t.post_gelu.size()) != spec.layers ||
        static_cast<int>(t.attn_class_row.size()) != spec.layers || t.ln_sigma.rows() != spec.ln_count() ||
        t.ln_sigma.cols() != spec.tokens() || t.post_gelu[0].cols() != spec.width)
        throw ValidationError("trace does not match the weights' model spec");
}

// Divides B^{l'} among the neurons of every MLP layer before l'.
double inner_share(const ModelSpec& s, int later_layer) { return static_cast<double>(later_layer) * s.width; }
// Divides the final LayerNorm bias among all MLP neurons.
double final_share(const ModelSpec& s) { return static_cast<double>(s.layers) * s.width; }

struct HeadPath {
    int layer;
    int head;
    MatrixXf q;   // d_out x selected neurons: P diag(gamma_f) W_VO diag(gamma_l') W_out
    VectorXf g1;  // P diag(gamma_f) W_VO gamma_l'
    VectorXf g2;  // P diag(gamma_f) W_VO beta_l'
    float inv_share;
};

struct TopEntry {
    float norm;
    int image;
    VectorXf phi;
};

bool top_before(const TopEntry& a, const TopEntry& b) {
    return a.norm != b.norm ? a.norm > b.norm : a.image < b.image;
}

}  // namespace

int SecondOrderField::slot_of(int neuron) const {
    auto it = std::find(neurons.begin(), neurons.end(), neuron);
    if (it == neurons.end()) throw ValidationError("neuron " + std::to_string(neuron) + " not in field");
    return static_cast<int>(it - neurons.begin());
}

VectorXf SecondOrderField::phi_at(int image, int slot) const {
    if (!has_full()) throw ValidationError("field stores only top-q vectors");
    if (image < 0 || image >= n_images || slot < 0 || slot >= neuron_count())
        throw ValidationError("phi_at index out of range");
    const auto offset = (static_cast<std::size_t>(image) * neurons.size() + static_cast<std::size_t>(slot)) *
                        static_cast<std::size_t>(d_out);
    return Eigen::Map<const VectorXf>(phi.data() + offset, d_out);
}

MatrixXf SecondOrderField::top_vectors(int slot, int k, std::vector<int>* images) const {
    if (slot < 0 || slot >= neuron_count()) throw ValidationError("slot out of range");
    std::vector<int> order;
    if (has_full()) {
        order.resize(static_cast<std::size_t>(n_images));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return norms(a, slot) > norms(b, slot); });
    } else {
        order = retained[static_cast<std::size_t>(slot)].images;
    }
    if (k > static_cast<int>(order.size()))
        throw ValidationError("requested " + std::to_string(k) + " effect vectors, only " +
                              std::to_string(order.size()) + " stored");
    order.resize(static_cast<std::size_t>(k));
    MatrixXf out(k, d_out);
    for (int i = 0; i < k; ++i)
        if (has_full())
            out.row(i) = phi_at(order[static_cast<std::size_t>(i)], slot).transpose();
        else
            out.row(i) = retained[static_cast<std::size_t>(slot)].vectors.row(i);
    if (images) *images = std::move(order);
    return out;
}

SecondOrderField SecondOrderField::from_dense(int layer, std::vector<int> neurons, int n_images, int d_out,
                                              std::vector<float> phi, StorageMode storage, int top_q) {
    const auto n_sel = static_cast<int>(neurons.size());
    if (static_cast<std::size_t>(n_images) * neurons.size() * static_cast<std::size_t>(d_out) != phi.size())
        throw ValidationError("dense effect buffer has the wrong size");
    SecondOrderField f;
    f.layer = layer;
    f.neurons = std::move(neurons);
    f.n_images = n_images;
    f.d_out = d_out;
    f.storage = StorageMode::Full;
    f.phi = std::move(phi);
    f.norms.resize(n_images, n_sel);
    MatrixXd sum = MatrixXd::Zero(n_sel, d_out);
    for (int i = 0; i < n_images; ++i)
        for (int s = 0; s < n_sel; ++s) {
            const VectorXf v = f.phi_at(i, s);
            f.norms(i, s) = v.norm();
            sum.row(s) += v.cast<double>().transpose();
        }
    f.mean = n_images > 0 ? MatrixXf((sum / n_images).cast<float>()) : MatrixXf::Zero(n_sel, d_out);
    if (storage == StorageMode::TopQ) {
        const int q = std::min(top_q, n_images);
        f.retained.resize(static_cast<std::size_t>(n_sel));
        for (int s = 0; s < n_sel; ++s) {
            std::vector<int> images;
            f.retained[static_cast<std::size_t>(s)].vectors = f.top_vectors(s, q, &images);
            f.retained[static_cast<std::size_t>(s)].images = std::move(images);
        }
        f.storage = StorageMode::TopQ;
        f.phi.clear();
        f.phi.shrink_to_fit();
    }
    return f;
}

SecondOrderField second_order(const WeightBundle& w, std::span<const ImageTrace> traces, int layer,
                              std::span<const int> neurons, const EffectOptions& options) {
    const ModelSpec& spec = w.spec;
    check_layer(spec, layer);
    for (int n : neurons)
        if (n < 0 || n >= spec.width) throw ValidationError("neuron " + std::to_string(n) + " out of range");
    for (const auto& t : traces) check_trace(spec, t);
    if (options.storage == StorageMode::TopQ && options.top_q < 1) throw ValidationError("top_q must be positive");

    const int n_sel = static_cast<int>(neurons.size());
    const int n_images = static_cast<int>(traces.size());
    const int d_out = spec.d_out;
    const auto& source = w.layers[static_cast<std::size_t>(layer)];

    MatrixXf w_sel(spec.d_model, n_sel);
    for (int s = 0; s < n_sel; ++s) w_sel.col(s) = source.W_out.col(neurons[static_cast<std::size_t>(s)]);
    const MatrixXf p_gamma = w.proj * w.ln_post_gamma.asDiagonal();
    const VectorXf p_gamma_f = w.proj * w.ln_post_gamma;
    const VectorXf p_beta_f = w.proj * w.ln_post_beta;

    std::vector<HeadPath> paths;
    for (int lp = layer + 1; lp < spec.layers; ++lp) {
        const auto& later = w.layers[static_cast<std::size_t>(lp)];
        for (int h = 0; h < spec.heads; ++h) {
            const MatrixXf pvo = p_gamma * compute_vo(w, lp, h);
            HeadPath path{lp, h, pvo * later.ln1_gamma.asDiagonal() * w_sel, pvo * later.ln1_gamma,
                          pvo * later.ln1_beta, static_cast<float>(1.0 / inner_share(spec, lp))};
            paths.push_back(std::move(path));
        }
    }
    const float inv_final = static_cast<float>(1.0 / final_share(spec));

    SecondOrderField field;
    field.layer = layer;
    field.neurons.assign(neurons.begin(), neurons.end());
    field.n_images = n_images;
    field.d_out = d_out;
    field.storage = options.storage;
    field.norms.resize(n_images, n_sel);
    if (options.storage == StorageMode::Full)
        field.phi.assign(static_cast<std::size_t>(n_images) * static_cast<std::size_t>(n_sel) * static_cast<std::size_t>(d_out), 0.0f);

    const int q = std::min(options.top_q, n_images);
    std::vector<std::vector<TopEntry>> top(options.storage == StorageMode::TopQ ? static_cast<std::size_t>(n_sel) : 0);
    MatrixXd sum = MatrixXd::Zero(n_sel, d_out);

    // Chunks bound the memory held for TopQ mode; reductions run in image order.
    const int chunk = 64;
    std::vector<MatrixXf> buffer(static_cast<std::size_t>(std::min(chunk, std::max(n_images, 1))));
    for (int start = 0; start < n_images; start += chunk) {
        const int count = std::min(chunk, n_images - start);
        parallel_for(static_cast<std::size_t>(count), options.jobs, [&](std::size_t c) {
            const ImageTrace& tr = traces[static_cast<std::size_t>(start) + c];
            MatrixXf p_sel(spec.tokens(), n_sel);
            for (int s = 0; s < n_sel; ++s)
                p_sel.col(s) = tr.post_gelu[static_cast<std::size_t>(layer)].col(neurons[static_cast<std::size_t>(s)]);
            MatrixXf acc = MatrixXf::Zero(d_out, n_sel);
            VectorXf attn_mass = VectorXf::Zero(n_sel);
            for (const auto& path : paths) {
                const VectorXf a = tr.attn_class_row[static_cast<std::size_t>(path.layer)].row(path.head).transpose();
                const int slot = ModelSpec::ln_attn(path.layer);
                const VectorXf weighted = a.cwiseQuotient(tr.ln_sigma.row(slot).transpose());
                acc.noalias() += path.q * (p_sel.transpose() * weighted).asDiagonal();
                if (options.bias_shares) {
                    const VectorXf alpha = p_sel.transpose() * weighted.cwiseProduct(tr.ln_mu.row(slot).transpose());
                    const VectorXf beta = p_sel.transpose() * a;
                    acc.noalias() -= path.inv_share * (path.g1 * alpha.transpose() - path.g2 * beta.transpose());
                    attn_mass += beta;
                }
            }
            const float sigma_f = tr.ln_sigma(spec.ln_post(), 0);
            const float mu_f = tr.ln_mu(spec.ln_post(), 0);
            acc /= sigma_f;
            if (options.bias_shares) {
                const VectorXf p_bias_f = (mu_f / sigma_f) * p_gamma_f - p_beta_f;
                acc.noalias() -= inv_final * p_bias_f * attn_mass.transpose();
            }
            buffer[c] = std::move(acc);
        });
        for (int c = 0; c < count; ++c) {
            const int image = start + c;
            const MatrixXf& phi = buffer[static_cast<std::size_t>(c)];
            for (int s = 0; s < n_sel; ++s) {
                field.norms(image, s) = phi.col(s).norm();
                sum.row(s) += phi.col(s).cast<double>().transpose();
                if (options.storage == StorageMode::Full) {
                    const auto offset = (static_cast<std::size_t>(image) * static_cast<std::size_t>(n_sel) +
                                         static_cast<std::size_t>(s)) * static_cast<std::size_t>(d_out);
                    Eigen::Map<VectorXf>(field.phi.data() + offset, d_out) = phi.col(s);
                } else {
                    auto& list = top[static_cast<std::size_t>(s)];
                    list.push_back({field.norms(image, s), image, phi.col(s)});
                    if (static_cast<int>(list.size()) > 2 * q) {
                        std::partial_sort(list.begin(), list.begin() + q, list.end(), top_before);
                        list.resize(static_cast<std::size_t>(q));
                    }
                }
            }
        }
    }
    field.mean = n_images > 0 ? MatrixXf((sum / n_images).cast<float>()) : MatrixXf::Zero(n_sel, d_out);
    if (options.storage == StorageMode::TopQ) {
        field.retained.resize(static_cast<std::size_t>(n_sel));
        for (int s = 0; s < n_sel; ++s) {
            auto& list = top[static_cast<std::size_t>(s)];
            std::sort(list.begin(), list.end(), top_before);
            list.resize(static_cast<std::size_t>(std::min<int>(q, static_cast<int>(list.size()))));
            auto& r = field.retained[static_cast<std::size_t>(s)];
            r.vectors.resize(static_cast<Eigen::Index>(list.size()), d_out);
            for (std::size_t i = 0; i < list.size(); ++i) {
                r.images.push_back(list[i].image);
                r.vectors.row(static_cast<Eigen::Index>(i)) = list[i].phi.transpose();
            }
        }
    }
    return field;
}

SecondOrderField second_order(const WeightBundle& weights, std::span<const ImageTrace> traces, int layer,
                              const EffectOptions& options) {
    std::vector<int> all(static_cast<std::size_t>(weights.spec.width));
    std::iota(all.begin(), all.end(), 0);
    return second_order(weights, traces, layer, all, options);
}

MatrixXf first_order_neuron(const WeightBundle& w, std::span<const ImageTrace> traces, int layer, int neuron,
                            bool bias_shares) {
    const ModelSpec& spec = w.spec;
    check_layer(spec, layer);
    if (neuron < 0 || neuron >= spec.width) throw ValidationError("neuron out of range");
    const VectorXf dir = w.layers[static_cast<std::size_t>(layer)].W_out.col(neuron);
    MatrixXf out(static_cast<Eigen::Index>(traces.size()), spec.d_out);
    for (std::size_t i = 0; i < traces.size(); ++i) {
        const auto& tr = traces[i];
        check_trace(spec, tr);
        const float p0 = tr.post_gelu[static_cast<std::size_t>(layer)](0, neuron);
        const float sigma_f = tr.ln_sigma(spec.ln_post(), 0);
        VectorXf e = w.proj * (w.ln_post_gamma.cwiseProduct(dir) * (p0 / sigma_f));
        if (bias_shares) {
            const VectorXf bias = tr.ln_mu(spec.ln_post(), 0) / sigma_f * w.ln_post_gamma - w.ln_post_beta;
            e -= w.proj * bias / static_cast<float>(final_share(spec));
        }
        out.row(static_cast<Eigen::Index>(i)) = e.transpose();
    }
    return out;
}

VectorXf first_order_msa(const WeightBundle& w, const ImageTrace& trace, int layer) {
    check_layer(w.spec, layer);
    check_trace(w.spec, trace);
    const float sigma_f = trace.ln_sigma(w.spec.ln_post(), 0);
    return w.proj * (w.ln_post_gamma.cwiseProduct(trace.msa_class_out.row(layer).transpose()) / sigma_f);
}

VectorXf indirect_effect(const WeightBundle& w, std::span<const float> image, int layer, int neuron,
                         const VectorXf& token_means) {
    check_layer(w.spec, layer);
    if (token_means.size() != w.spec.tokens()) throw ValidationError("per-token means must have K+1 entries");
    const Intervention patch{layer, neuron, token_means};
    const VectorXf base = forward_with_intervention(w, image, {});
    return base - forward_with_intervention(w, image, std::span<const Intervention>(&patch, 1));
}

MatrixXf per_token_means(std::span<const ImageTrace> traces, int layer) {
    if (traces.empty()) throw ValidationError("per_token_means: no traces");
    MatrixXd sum = MatrixXd::Zero(traces[0].post_gelu.at(static_cast<std::size_t>(layer)).rows(),
                                  traces[0].post_gelu.at(static_cast<std::size_t>(layer)).cols());
    for (const auto& t : traces) sum += t.post_gelu.at(static_cast<std::size_t>(layer)).cast<double>();
    return (sum / static_cast<double>(traces.size())).cast<float>();
}

MatrixXf mean_over_reference(const SecondOrderField& field) {
    if (field.n_images == 0) throw ValidationError("mean_over_reference: empty image set");
    if (!field.has_full()) return field.mean;
    MatrixXd sum = MatrixXd::Zero(field.neuron_count(), field.d_out);
    for (int i = 0; i < field.n_images; ++i)
        for (int s = 0; s < field.neuron_count(); ++s) sum.row(s) += field.phi_at(i, s).cast<double>().transpose();
    return (sum / field.n_images).cast<float>();
}

MatrixXf effect_norms(const SecondOrderField& field) { return field.norms; }

FrozenPathMap::FrozenPathMap(const WeightBundle& w, const ImageTrace& trace, int layer, bool bias_shares)
    : layer_(layer) {
    const ModelSpec& spec = w.spec;
    check_layer(spec, layer);
    check_trace(spec, trace);
    const double sigma_f = trace.ln_sigma(spec.ln_post(), 0);
    const double mu_f = trace.ln_mu(spec.ln_post(), 0);
    const MatrixXd proj = w.proj.cast<double>();
    const VectorXd gamma_f = w.ln_post_gamma.cast<double>();
    output_map_ = proj * (gamma_f / sigma_f).asDiagonal();
    offset_ = VectorXd::Zero(spec.d_out);
    for (int lp = layer + 1; lp < spec.layers; ++lp) {
        const auto& later = w.layers[static_cast<std::size_t>(lp)];
        const int slot = ModelSpec::ln_attn(lp);
        const VectorXd gamma = later.ln1_gamma.cast<double>();
        const VectorXd beta = later.ln1_beta.cast<double>();
        for (int h = 0; h < spec.heads; ++h) {
            Path p;
            p.attention = trace.attn_class_row[static_cast<std::size_t>(lp)].row(h).transpose().cast<double>();
            p.inv_sigma = trace.ln_sigma.row(slot).transpose().cast<double>().cwiseInverse();
            const MatrixXd vo = compute_vo(w, lp, h).cast<double>();
            p.vo_gamma = vo * gamma.asDiagonal();
            p.bias_term = VectorXd::Zero(spec.d_model);
            if (bias_shares) {
                VectorXd weighted_b = VectorXd::Zero(spec.d_model);
                for (int i = 0; i < spec.tokens(); ++i) {
                    const double mu = trace.ln_mu(slot, i);
                    weighted_b += p.attention(i) * (mu * p.inv_sigma(i) * gamma - beta);
                }
                p.bias_term = -(vo * weighted_b) / inner_share(spec, lp);
                const VectorXd b_f = mu_f / sigma_f * gamma_f - w.ln_post_beta.cast<double>();
                offset_ -= proj * b_f / final_share(spec);
            }
            paths_.push_back(std::move(p));
        }
    }
}

VectorXd FrozenPathMap::apply(const MatrixXd& x) const {
    VectorXd inner = VectorXd::Zero(output_map_.cols());
    for (const auto& p : paths_) {
        if (x.rows() != p.attention.size() || x.cols() != output_map_.cols())
            throw ValidationError("contribution must be tokens x d_model");
        inner += p.vo_gamma * (x.transpose() * p.attention.cwiseProduct(p.inv_sigma)) + p.bias_term;
    }
    return output_map_ * inner + offset_;
}

Container field_to_container(const SecondOrderField& f) {
    Container c;
    c.manifest.attributes["layer"] = f.layer;
    c.manifest.attributes["neurons"] = f.neurons;
    c.manifest.attributes["n_images"] = f.n_images;
    c.manifest.attributes["d_out"] = f.d_out;
    c.manifest.attributes["storage"] = f.has_full() ? "full" : "topq";
    const std::int64_t n = f.n_images, s = f.neuron_count(), d = f.d_out;
    if (f.has_full() && n > 0 && s > 0) c.put("phi", "effects.phi", Tensor({n, s, d}, f.phi));
    if (n > 0 && s > 0) c.put("norms", "effects.norms", tensor_from(MatrixXf(f.norms)));
    if (s > 0) c.put("mean", "effects.mean", tensor_from(MatrixXf(f.mean)));
    if (!f.has_full() && s > 0 && !f.retained.empty() && !f.retained[0].images.empty()) {
        const std::int64_t q = static_cast<std::int64_t>(f.retained[0].images.size());
        Tensor images({s, q}), vectors({s, q, d});
        for (std::int64_t k = 0; k < s; ++k) {
            const auto& r = f.retained[static_cast<std::size_t>(k)];
            for (std::int64_t j = 0; j < q; ++j) images.data[static_cast<std::size_t>(k * q + j)] = static_cast<float>(r.images[static_cast<std::size_t>(j)]);
            Eigen::Map<RowMatrixXf>(vectors.data.data() + k * q * d, q, d) = r.vectors;
        }
        c.put("topq_images", "effects.topq_images", std::move(images));
        c.put("topq_phi", "effects.topq_phi", std::move(vectors));
    }
    return c;
}

SecondOrderField field_from_container(const Container& c) {
    const auto& a = c.manifest.attributes;
    SecondOrderField f;
    try {
        f.layer = a.at("layer").get<int>();
        f.neurons = a.at("neurons").get<std::vector<int>>();
        f.n_images = a.at("n_images").get<int>();
        f.d_out = a.at("d_out").get<int>();
        f.storage = a.at("storage").get<std::string>() == "full" ? StorageMode::Full : StorageMode::TopQ;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("effects container attributes: ") + e.what());
    }
    const std::int64_t n = f.n_images, s = f.neuron_count(), d = f.d_out;
    if (n > 0 && s > 0) {
        const Tensor& norms = c.at("norms");
        if (norms.shape != Shape{n, s}) throw ValidationError("effects.norms has the wrong shape");
        f.norms = to_matrix(norms);
    } else {
        f.norms.resize(n, s);
    }
    f.mean = s > 0 ? to_matrix(c.at("mean")) : MatrixXf(0, d);
    if (f.has_full()) {
        if (n > 0 && s > 0) {
            const Tensor& phi = c.at("phi");
            if (phi.shape != Shape{n, s, d}) throw ValidationError("effects.phi has the wrong shape");
            f.phi = phi.data;
        }
    } else if (c.contains("topq_images")) {
        const Tensor& images = c.at("topq_images");
        const Tensor& vectors = c.at("topq_phi");
        const std::int64_t q = images.dim(1);
        f.retained.resize(static_cast<std::size_t>(s));
        for (std::int64_t k = 0; k < s; ++k) {
            auto& r = f.retained[static_cast<std::size_t>(k)];
            for (std::int64_t j = 0; j < q; ++j) r.images.push_back(static_cast<int>(images.data[static_cast<std::size_t>(k * q + j)]));
            r.vectors = Eigen::Map<const RowMatrixXf>(vectors.data.data() + k * q * d, q, d);
        }
    }
    return f;
}

}  // namespace solens
