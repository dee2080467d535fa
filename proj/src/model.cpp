#include "solens/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "solens/errors.hpp"

namespace solens {

void ModelSpec::validate() const {
    auto positive = [](int v, const char* what) {
        if (v <= 0) throw ValidationError(std::string("model spec: ") + what + " must be positive");
    };
    positive(layers, "layers");
    positive(heads, "heads");
    positive(width, "width");
    positive(d_model, "d_model");
    positive(d_out, "d_out");
    positive(patch_size, "patch_size");
    positive(image_size, "image_size");
    if (d_model % heads != 0) throw ValidationError("model spec: d_model must be divisible by heads");
    if (image_size % patch_size != 0) throw ValidationError("model spec: image_size must be a multiple of patch_size");
    if (!(ln_eps > 0.0f)) throw ValidationError("model spec: ln_eps must be positive");
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
    j = {{"L", s.layers},         {"H", s.heads},         {"N", s.width},
         {"d_model", s.d_model},  {"d_out", s.d_out},     {"K", s.patches()},
         {"patch_size", s.patch_size}, {"image_size", s.image_size}, {"ln_eps", s.ln_eps}};
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
    s.layers = j.at("L").get<int>();
    s.heads = j.at("H").get<int>();
    s.width = j.at("N").get<int>();
    s.d_model = j.at("d_model").get<int>();
    s.d_out = j.at("d_out").get<int>();
    s.patch_size = j.at("patch_size").get<int>();
    s.image_size = j.at("image_size").get<int>();
    s.ln_eps = j.value("ln_eps", 1e-5f);
    if (j.contains("K") && s.patch_size > 0 && j.at("K").get<int>() != s.patches())
        throw ValidationError("model spec: K does not equal (image_size / patch_size)^2");
}

ModelSpec toy_spec() {
    ModelSpec s;
    s.layers = 4;
    s.heads = 4;
    s.width = 64;
    s.d_model = 32;
    s.d_out = 16;
    s.patch_size = 4;
    s.image_size = 16;
    return s;
}

std::string ValidationReport::to_string() const {
    std::ostringstream os;
    for (const auto& issue : issues) os << issue.message << '\n';
    return os.str();
}

namespace {

std::string layer_name(int l, const char* rest) { return "layers." + std::to_string(l) + "." + rest; }

}  // namespace

std::vector<std::pair<std::string, Shape>> bundle_schema(const ModelSpec& s) {
    const std::int64_t d = s.d_model, n = s.width;
    std::vector<std::pair<std::string, Shape>> out = {
        {"embed.patch", {d, s.patch_dim()}},
        {"embed.class", {d}},
        {"embed.pos", {s.tokens(), d}},
        {"ln_pre.gamma", {d}},
        {"ln_pre.beta", {d}},
    };
    for (int l = 0; l < s.layers; ++l) {
        out.emplace_back(layer_name(l, "ln1.gamma"), Shape{d});
        out.emplace_back(layer_name(l, "ln1.beta"), Shape{d});
        for (const char* w : {"attn.W_q", "attn.W_k", "attn.W_v"}) out.emplace_back(layer_name(l, w), Shape{d, d});
        for (const char* b : {"attn.b_q", "attn.b_k", "attn.b_v"}) out.emplace_back(layer_name(l, b), Shape{d});
        out.emplace_back(layer_name(l, "attn.W_o"), Shape{d, d});
        out.emplace_back(layer_name(l, "attn.b_o"), Shape{d});
        out.emplace_back(layer_name(l, "ln2.gamma"), Shape{d});
        out.emplace_back(layer_name(l, "ln2.beta"), Shape{d});
        out.emplace_back(layer_name(l, "mlp.W_in"), Shape{n, d});
        out.emplace_back(layer_name(l, "mlp.b_in"), Shape{n});
        out.emplace_back(layer_name(l, "mlp.W_out"), Shape{d, n});
        out.emplace_back(layer_name(l, "mlp.b_out"), Shape{d});
    }
    out.emplace_back("ln_post.gamma", Shape{d});
    out.emplace_back("ln_post.beta", Shape{d});
    out.emplace_back("proj", Shape{s.d_out, d});
    return out;
}

// "layers.3.mlp.W_out" -> "weights.mlp.W_out.3"; "embed.pos" -> "weights.embed.pos".
std::string bundle_role(const std::string& name) {
    if (name.rfind("layers.", 0) == 0) {
        const auto dot = name.find('.', 7);
        if (dot != std::string::npos) return "weights." + name.substr(dot + 1) + "." + name.substr(7, dot - 7);
    }
    return "weights." + name;
}

ValidationReport validate_bundle(const TensorMap& tensors, const ModelSpec& spec) {
    ValidationReport report;
    try {
        spec.validate();
    } catch (const ValidationError& e) {
        report.issues.push_back({ValidationIssue::Kind::Spec, "", -1, e.what()});
        return report;
    }
    for (const auto& [name, shape] : bundle_schema(spec)) {
        int layer = -1;
        if (name.rfind("layers.", 0) == 0) layer = std::stoi(name.substr(7));
        const std::string where = layer >= 0 ? " (layer " + std::to_string(layer) + ")" : "";
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            report.issues.push_back({ValidationIssue::Kind::Missing, name, layer, "missing tensor " + name + where});
        } else if (it->second.shape != shape) {
            report.issues.push_back({ValidationIssue::Kind::Shape, name, layer,
                                     "tensor " + name + where + " has shape " + shape_string(it->second.shape) +
                                         ", expected " + shape_string(shape)});
        }
    }
    return report;
}

WeightBundle WeightBundle::from_tensors(const TensorMap& t, const ModelSpec& spec) {
    const auto report = validate_bundle(t, spec);
    if (!report.ok()) throw ValidationError("invalid weight bundle:\n" + report.to_string());
    auto mat = [&](const std::string& n) { return to_matrix(t.at(n)); };
    auto vec = [&](const std::string& n) { return to_vector(t.at(n)); };
    WeightBundle w;
    w.spec = spec;
    w.patch_embed = mat("embed.patch");
    w.class_embed = vec("embed.class");
    w.pos_embed = mat("embed.pos");
    w.ln_pre_gamma = vec("ln_pre.gamma");
    w.ln_pre_beta = vec("ln_pre.beta");
    w.layers.resize(static_cast<std::size_t>(spec.layers));
    for (int l = 0; l < spec.layers; ++l) {
        auto& L = w.layers[static_cast<std::size_t>(l)];
        auto n = [&](const char* rest) { return layer_name(l, rest); };
        L.ln1_gamma = vec(n("ln1.gamma"));
        L.ln1_beta = vec(n("ln1.beta"));
        L.W_q = mat(n("attn.W_q"));
        L.W_k = mat(n("attn.W_k"));
        L.W_v = mat(n("attn.W_v"));
        L.b_q = vec(n("attn.b_q"));
        L.b_k = vec(n("attn.b_k"));
        L.b_v = vec(n("attn.b_v"));
        L.W_o = mat(n("attn.W_o"));
        L.b_o = vec(n("attn.b_o"));
        L.ln2_gamma = vec(n("ln2.gamma"));
        L.ln2_beta = vec(n("ln2.beta"));
        L.W_in = mat(n("mlp.W_in"));
        L.b_in = vec(n("mlp.b_in"));
        L.W_out = mat(n("mlp.W_out"));
        L.b_out = vec(n("mlp.b_out"));
    }
    w.ln_post_gamma = vec("ln_post.gamma");
    w.ln_post_beta = vec("ln_post.beta");
    w.proj = mat("proj");
    return w;
}

TensorMap WeightBundle::to_tensors() const {
    TensorMap t;
    t["embed.patch"] = tensor_from(patch_embed);
    t["embed.class"] = tensor_from(class_embed);
    t["embed.pos"] = tensor_from(pos_embed);
    t["ln_pre.gamma"] = tensor_from(ln_pre_gamma);
    t["ln_pre.beta"] = tensor_from(ln_pre_beta);
    for (int l = 0; l < spec.layers; ++l) {
        const auto& L = layers[static_cast<std::size_t>(l)];
        auto n = [&](const char* rest) { return layer_name(l, rest); };
        t[n("ln1.gamma")] = tensor_from(L.ln1_gamma);
        t[n("ln1.beta")] = tensor_from(L.ln1_beta);
        t[n("attn.W_q")] = tensor_from(L.W_q);
        t[n("attn.W_k")] = tensor_from(L.W_k);
        t[n("attn.W_v")] = tensor_from(L.W_v);
        t[n("attn.b_q")] = tensor_from(L.b_q);
        t[n("attn.b_k")] = tensor_from(L.b_k);
        t[n("attn.b_v")] = tensor_from(L.b_v);
        t[n("attn.W_o")] = tensor_from(L.W_o);
        t[n("attn.b_o")] = tensor_from(L.b_o);
        t[n("ln2.gamma")] = tensor_from(L.ln2_gamma);
        t[n("ln2.beta")] = tensor_from(L.ln2_beta);
        t[n("mlp.W_in")] = tensor_from(L.W_in);
        t[n("mlp.b_in")] = tensor_from(L.b_in);
        t[n("mlp.W_out")] = tensor_from(L.W_out);
        t[n("mlp.b_out")] = tensor_from(L.b_out);
    }
    t["ln_post.gamma"] = tensor_from(ln_post_gamma);
    t["ln_post.beta"] = tensor_from(ln_post_beta);
    t["proj"] = tensor_from(proj);
    return t;
}

WeightBundle generate_toy(std::uint64_t seed, const ModelSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(seed);
    TensorMap tensors;
    for (const auto& [name, shape] : bundle_schema(spec)) {
        const auto ends_with = [&](const char* suffix) {
            const std::string s(suffix);
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        float mean = 0.0f, stddev = 0.0f;
        if (ends_with("gamma")) {
            mean = 1.0f;
            stddev = 0.1f;
        } else if (ends_with("beta")) {
            stddev = 0.05f;
        } else if (name == "embed.class" || name == "embed.pos") {
            stddev = 0.5f;
        } else if (shape.size() == 2) {
            stddev = 1.0f / std::sqrt(static_cast<float>(shape[1]));
        } else {
            stddev = 0.02f;
        }
        std::normal_distribution<float> dist(mean, stddev);
        Tensor t(shape);
        for (auto& v : t.data) v = dist(rng);
        tensors.emplace(name, std::move(t));
    }
    return WeightBundle::from_tensors(tensors, spec);
}

}  // namespace solens
