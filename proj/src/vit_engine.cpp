#include "solens/vit_engine.hpp"

#include <cmath>

#include "solens/errors.hpp"
#include "solens/parallel.hpp"

namespace solens {

using Eigen::MatrixXf;
using Eigen::VectorXf;

namespace {

// Row-wise LayerNorm over tokens x d. Mean and variance are Eigen row
// reductions in f32; sigma includes eps.
MatrixXf layer_norm(const MatrixXf& x, const VectorXf& gamma, const VectorXf& beta, float eps, VectorXf& mu,
                    VectorXf& sigma) {
    const auto d = static_cast<float>(x.cols());
    MatrixXf y(x.rows(), x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const float m = x.row(t).sum() / d;
        const float var = (x.row(t).array() - m).square().sum() / d;
        const float s = std::sqrt(var + eps);
        mu(t) = m;
        sigma(t) = s;
        y.row(t) = ((x.row(t).array() - m) / s) * gamma.transpose().array() + beta.transpose().array();
    }
    return y;
}

float gelu(float v) { return 0.5f * v * (1.0f + std::erf(v * static_cast<float>(M_SQRT1_2))); }

void check_finite(const MatrixXf& x, int layer, const char* where) {
    if (!x.allFinite())
        throw NumericalError(std::string("non-finite values in ") + where + " at layer " + std::to_string(layer),
                             layer);
}

VectorXf run(const WeightBundle& w, std::span<const float> image, std::span<const Intervention> interventions,
             ImageTrace* trace) {
    const ModelSpec& spec = w.spec;
    const int S = spec.image_size, p = spec.patch_size, g = spec.grid();
    const int T = spec.tokens(), d = spec.d_model, H = spec.heads, dh = spec.head_dim();
    if (static_cast<int>(image.size()) != 3 * S * S)
        throw ValidationError("image has " + std::to_string(image.size()) + " values, expected 3 x " +
                              std::to_string(S) + " x " + std::to_string(S));
    for (const auto& iv : interventions) {
        if (iv.layer < 0 || iv.layer >= spec.layers || iv.neuron < 0 || iv.neuron >= spec.width)
            throw ValidationError("intervention index out of range (layer " + std::to_string(iv.layer) +
                                  ", neuron " + std::to_string(iv.neuron) + ")");
        if (iv.replacement.size() != T) throw ValidationError("intervention replacement must have one value per token");
    }

    VectorXf mu(T), sigma(T);
    auto record = [&](int slot) {
        if (!trace) return;
        trace->ln_mu.row(slot) = mu.transpose();
        trace->ln_sigma.row(slot) = sigma.transpose();
    };
    if (trace) {
        trace->post_gelu.assign(static_cast<std::size_t>(spec.layers), MatrixXf());
        trace->attn_class_row.assign(static_cast<std::size_t>(spec.layers), MatrixXf(H, T));
        trace->ln_mu.resize(spec.ln_count(), T);
        trace->ln_sigma.resize(spec.ln_count(), T);
        trace->msa_class_out.resize(spec.layers, d);
    }

    MatrixXf x(T, d);
    x.row(0) = w.class_embed.transpose();
    VectorXf patch(spec.patch_dim());
    for (int k = 0; k < spec.patches(); ++k) {
        const int gy = k / g, gx = k % g;
        int idx = 0;
        for (int c = 0; c < 3; ++c)
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    patch(idx++) = image[static_cast<std::size_t>(c * S * S + (gy * p + py) * S + gx * p + px)];
        x.row(1 + k) = (w.patch_embed * patch).transpose();
    }
    x += w.pos_embed;
    x = layer_norm(x, w.ln_pre_gamma, w.ln_pre_beta, spec.ln_eps, mu, sigma);
    record(ModelSpec::ln_pre());
    check_finite(x, -1, "embedding");

    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    for (int l = 0; l < spec.layers; ++l) {
        const auto& L = w.layers[static_cast<std::size_t>(l)];
        MatrixXf h = layer_norm(x, L.ln1_gamma, L.ln1_beta, spec.ln_eps, mu, sigma);
        record(ModelSpec::ln_attn(l));
        const MatrixXf q = (h * L.W_q.transpose()).rowwise() + L.b_q.transpose();
        const MatrixXf k = (h * L.W_k.transpose()).rowwise() + L.b_k.transpose();
        const MatrixXf v = (h * L.W_v.transpose()).rowwise() + L.b_v.transpose();
        MatrixXf heads_out(T, d);
        for (int hh = 0; hh < H; ++hh) {
            MatrixXf scores = q.middleCols(hh * dh, dh) * k.middleCols(hh * dh, dh).transpose() * scale;
            for (int t = 0; t < T; ++t) {
                const float mx = scores.row(t).maxCoeff();
                scores.row(t) = (scores.row(t).array() - mx).exp();
                scores.row(t) /= scores.row(t).sum();
            }
            heads_out.middleCols(hh * dh, dh) = scores * v.middleCols(hh * dh, dh);
            if (trace) trace->attn_class_row[static_cast<std::size_t>(l)].row(hh) = scores.row(0);
        }
        const MatrixXf msa = (heads_out * L.W_o.transpose()).rowwise() + L.b_o.transpose();
        check_finite(msa, l, "attention");
        if (trace) trace->msa_class_out.row(l) = msa.row(0);
        x += msa;

        h = layer_norm(x, L.ln2_gamma, L.ln2_beta, spec.ln_eps, mu, sigma);
        record(ModelSpec::ln_mlp(l));
        MatrixXf post = (h * L.W_in.transpose()).rowwise() + L.b_in.transpose();
        post = post.unaryExpr(&gelu);
        for (const auto& iv : interventions)
            if (iv.layer == l) post.col(iv.neuron) = iv.replacement;
        x += (post * L.W_out.transpose()).rowwise() + L.b_out.transpose();
        check_finite(x, l, "MLP");
        if (trace) trace->post_gelu[static_cast<std::size_t>(l)] = std::move(post);
    }

    const VectorXf out_token = layer_norm(x, w.ln_post_gamma, w.ln_post_beta, spec.ln_eps, mu, sigma).row(0).transpose();
    record(spec.ln_post());
    VectorXf rep = w.proj * out_token;
    check_finite(rep, spec.layers - 1, "projection");
    if (trace) {
        trace->class_token_prelnpost = x.row(0).transpose();
        trace->representation = rep;
    }
    return rep;
}

}  // namespace

ImageTrace forward(const WeightBundle& weights, std::span<const float> image) {
    ImageTrace trace;
    run(weights, image, {}, &trace);
    return trace;
}

VectorXf forward_with_intervention(const WeightBundle& weights, std::span<const float> image,
                                   std::span<const Intervention> interventions) {
    return run(weights, image, interventions, nullptr);
}

MatrixXf compute_vo(const WeightBundle& weights, int layer, int head) {
    const ModelSpec& s = weights.spec;
    if (layer < 0 || layer >= s.layers || head < 0 || head >= s.heads)
        throw ValidationError("compute_vo: layer/head out of range");
    const auto& L = weights.layers[static_cast<std::size_t>(layer)];
    const int dh = s.head_dim();
    return L.W_o.middleCols(head * dh, dh) * L.W_v.middleRows(head * dh, dh);
}

std::span<const float> image_at(const Tensor& images, std::int64_t index) {
    if (images.rank() != 4 || images.dim(1) != 3) throw ValidationError("images must be shaped (n, 3, S, S)");
    if (index < 0 || index >= images.dim(0)) throw ValidationError("image index out of range");
    const auto stride = images.dim(1) * images.dim(2) * images.dim(3);
    return std::span<const float>(images.data).subspan(static_cast<std::size_t>(index * stride),
                                                       static_cast<std::size_t>(stride));
}

std::vector<ImageTrace> trace_images(const WeightBundle& weights, const Tensor& images, int jobs) {
    if (images.rank() != 4 || images.dim(2) != weights.spec.image_size || images.dim(3) != weights.spec.image_size)
        throw ValidationError("images tensor " + shape_string(images.shape) + " does not match the model spec");
    std::vector<ImageTrace> out(static_cast<std::size_t>(images.dim(0)));
    parallel_for(out.size(), jobs, [&](std::size_t i) { out[i] = forward(weights, image_at(images, static_cast<std::int64_t>(i))); });
    return out;
}

MatrixXf representations(std::span<const ImageTrace> traces) {
    if (traces.empty()) return {};
    MatrixXf reps(static_cast<Eigen::Index>(traces.size()), traces[0].representation.size());
    for (std::size_t i = 0; i < traces.size(); ++i) reps.row(static_cast<Eigen::Index>(i)) = traces[i].representation.transpose();
    return reps;
}

Container traces_to_container(std::span<const ImageTrace> traces, const ModelSpec& spec) {
    const std::int64_t n = static_cast<std::int64_t>(traces.size());
    const std::int64_t L = spec.layers, T = spec.tokens(), N = spec.width, H = spec.heads, d = spec.d_model;
    Tensor post({n, L, T, N}), attn({n, L, H, T}), mu({n, spec.ln_count(), T}), sigma({n, spec.ln_count(), T});
    Tensor msa({n, L, d}), pre({n, d}), rep({n, spec.d_out});
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& tr = traces[static_cast<std::size_t>(i)];
        float* pp = post.data.data() + i * L * T * N;
        float* pa = attn.data.data() + i * L * H * T;
        for (std::int64_t l = 0; l < L; ++l) {
            Eigen::Map<RowMatrixXf>(pp + l * T * N, T, N) = tr.post_gelu[static_cast<std::size_t>(l)];
            Eigen::Map<RowMatrixXf>(pa + l * H * T, H, T) = tr.attn_class_row[static_cast<std::size_t>(l)];
        }
        Eigen::Map<RowMatrixXf>(mu.data.data() + i * spec.ln_count() * T, spec.ln_count(), T) = tr.ln_mu;
        Eigen::Map<RowMatrixXf>(sigma.data.data() + i * spec.ln_count() * T, spec.ln_count(), T) = tr.ln_sigma;
        Eigen::Map<RowMatrixXf>(msa.data.data() + i * L * d, L, d) = tr.msa_class_out;
        Eigen::Map<Eigen::VectorXf>(pre.data.data() + i * d, d) = tr.class_token_prelnpost;
        Eigen::Map<Eigen::VectorXf>(rep.data.data() + i * spec.d_out, spec.d_out) = tr.representation;
    }
    Container c;
    c.manifest.attributes["model_spec"] = spec;
    c.put("post_gelu", "trace.post_gelu", std::move(post));
    c.put("attn_class_row", "trace.attn_class_row", std::move(attn));
    c.put("ln_mu", "trace.ln_mu", std::move(mu));
    c.put("ln_sigma", "trace.ln_sigma", std::move(sigma));
    c.put("msa_class_out", "trace.msa_class_out", std::move(msa));
    c.put("class_token_prelnpost", "trace.class_token_prelnpost", std::move(pre));
    c.put("representation", "trace.representation", std::move(rep));
    return c;
}

std::vector<ImageTrace> traces_from_container(const Container& c, const ModelSpec& spec) {
    const Tensor& post = c.at("post_gelu");
    const std::int64_t n = post.dim(0);
    const std::int64_t L = spec.layers, T = spec.tokens(), N = spec.width, H = spec.heads, d = spec.d_model;
    const auto expect = [&](const char* name, const Shape& shape) -> const Tensor& {
        const Tensor& t = c.at(name);
        if (t.shape != shape)
            throw ValidationError(std::string("trace tensor ") + name + " has shape " + shape_string(t.shape) +
                                  ", expected " + shape_string(shape));
        return t;
    };
    expect("post_gelu", {n, L, T, N});
    const Tensor& attn = expect("attn_class_row", {n, L, H, T});
    const Tensor& mu = expect("ln_mu", {n, spec.ln_count(), T});
    const Tensor& sigma = expect("ln_sigma", {n, spec.ln_count(), T});
    const Tensor& msa = expect("msa_class_out", {n, L, d});
    const Tensor& pre = expect("class_token_prelnpost", {n, d});
    const Tensor& rep = expect("representation", {n, spec.d_out});
    std::vector<ImageTrace> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        auto& tr = out[static_cast<std::size_t>(i)];
        for (std::int64_t l = 0; l < L; ++l) {
            tr.post_gelu.emplace_back(Eigen::Map<const RowMatrixXf>(post.data.data() + (i * L + l) * T * N, T, N));
            tr.attn_class_row.emplace_back(Eigen::Map<const RowMatrixXf>(attn.data.data() + (i * L + l) * H * T, H, T));
        }
        tr.ln_mu = Eigen::Map<const RowMatrixXf>(mu.data.data() + i * spec.ln_count() * T, spec.ln_count(), T);
        tr.ln_sigma = Eigen::Map<const RowMatrixXf>(sigma.data.data() + i * spec.ln_count() * T, spec.ln_count(), T);
        tr.msa_class_out = Eigen::Map<const RowMatrixXf>(msa.data.data() + i * L * d, L, d);
        tr.class_token_prelnpost = Eigen::Map<const VectorXf>(pre.data.data() + i * d, d);
        tr.representation = Eigen::Map<const VectorXf>(rep.data.data() + i * spec.d_out, spec.d_out);
    }
    return out;
}

}  // namespace solens
