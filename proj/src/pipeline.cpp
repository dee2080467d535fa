#include "solens/pipeline.hpp"

#include <random>

#include "solens/applications.hpp"
#include "solens/container.hpp"
#include "solens/effects.hpp"
#include "solens/errors.hpp"
#include "solens/eval_harness.hpp"
#include "solens/exports.hpp"
#include "solens/rank1.hpp"
#include "solens/sparse_decomp.hpp"
#include "solens/vit_engine.hpp"

namespace fs = std::filesystem;
using Eigen::MatrixXf;
using Eigen::VectorXf;

namespace solens {

namespace paths {
fs::path trace_eval(const RunConfig& c) { return c.output / "trace_eval"; }
fs::path trace_reference(const RunConfig& c) { return c.output / "trace_reference"; }
fs::path effects(const RunConfig& c, int layer, bool reference) {
    return c.output / "effects" / ("layer_" + std::to_string(layer) + (reference ? "_reference" : "_eval"));
}
fs::path rank1(const RunConfig& c, int layer) { return c.output / "rank1" / ("layer_" + std::to_string(layer)); }
fs::path codes(const RunConfig& c, int layer) {
    return c.output / "decompose" / ("layer_" + std::to_string(layer) + ".jsonl");
}
fs::path ablation(const RunConfig& c) { return c.output / ("ablation_" + c.mode + ".csv"); }
fs::path spurious(const RunConfig& c) {
    return c.output / "spurious" / (std::to_string(c.class_a) + "_to_" + std::to_string(c.class_b) + ".jsonl");
}
fs::path discover(const RunConfig& c, int image) {
    return c.output / "discover" / ("image_" + std::to_string(image) + ".jsonl");
}
fs::path segment(const RunConfig& c) { return c.output / "segment"; }
fs::path metrics(const RunConfig& c) { return c.output / "metrics.json"; }
}  // namespace paths

namespace {

void require_path(const fs::path& p, const char* what) {
    if (p.empty()) throw ValidationError(std::string("config: '") + what + "' path is required");
    if (!fs::exists(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

struct Model {
    ModelSpec spec;
    WeightBundle weights;
};

Model load_model(const RunConfig& c) {
    require_path(c.weights, "weights");
    const Container container = read_container(c.weights);
    ModelSpec spec;
    if (c.model_spec) {
        spec = *c.model_spec;
    } else if (container.manifest.attributes.contains("model_spec")) {
        spec = container.manifest.attributes.at("model_spec").get<ModelSpec>();
    } else {
        throw ValidationError("weights container has no model_spec attribute and the config gives none");
    }
    spec.validate();
    return {spec, WeightBundle::from_tensors(container.tensors, spec)};
}

const Tensor& image_tensor(const Container& c) {
    const auto name = c.find_role("images.pixels");
    if (!name) throw ValidationError("images container has no images.pixels tensor");
    return c.at(*name);
}

std::vector<int> labels_of(const Container& c) {
    const auto name = c.find_role("images.labels");
    if (!name) throw ValidationError("images container has no images.labels tensor");
    std::vector<int> out;
    for (float v : c.at(*name).data) out.push_back(static_cast<int>(std::lround(v)));
    return out;
}

void check_layers(const RunConfig& c, const ModelSpec& spec) {
    if (c.layers.empty()) throw ValidationError("config: layers is empty");
    for (int l : c.layers)
        if (l >= spec.layers)
            throw ValidationError("config: layer " + std::to_string(l) + " out of range for a " +
                                  std::to_string(spec.layers) + "-layer model");
}

std::vector<ImageTrace> load_traces(const fs::path& dir, const ModelSpec& spec) {
    if (!fs::exists(dir)) throw IoError("trace container not found: " + dir.string() + " (run 'trace' first)");
    return traces_from_container(read_container(dir), spec);
}

SecondOrderField load_field(const RunConfig& c, int layer, bool reference) {
    const fs::path dir = paths::effects(c, layer, reference);
    if (!fs::exists(dir)) throw IoError("effects not found: " + dir.string() + " (run 'effects' first)");
    return field_from_container(read_container(dir));
}

std::vector<NeuronDirection> load_directions(const RunConfig& c, int layer) {
    const fs::path dir = paths::rank1(c, layer);
    if (!fs::exists(dir)) throw IoError("directions not found: " + dir.string() + " (run 'rank1' first)");
    return directions_from_container(read_container(dir));
}

std::vector<SparseCode> load_codes(const RunConfig& c, int layer) {
    const fs::path file = paths::codes(c, layer);
    if (!fs::exists(file)) throw IoError("codes not found: " + file.string() + " (run 'decompose' first)");
    return codes_from_jsonl(read_text_file(file));
}

EffectOptions effect_options(const RunConfig& c, bool reference) {
    EffectOptions o;
    o.bias_shares = c.bias_shares;
    o.storage = reference && c.storage == "topq" ? StorageMode::TopQ : StorageMode::Full;
    o.top_q = std::max(c.support_size, c.Q);
    o.jobs = c.jobs;
    return o;
}

}  // namespace

void run_gen_toy(const RunConfig& c, const fs::path& out) {
    const ModelSpec spec = c.model_spec.value_or(toy_spec());
    spec.validate();
    const WeightBundle weights = generate_toy(c.seed, spec);
    WriteOptions wo{c.force};

    Container wc;
    for (auto& [name, t] : weights.to_tensors()) wc.put(name, bundle_role(name), std::move(t));
    wc.manifest.attributes["model_spec"] = spec;
    wc.manifest.attributes["generator"] = {{"kind", "toy"}, {"seed", c.seed}};
    write_container(wc, out / "weights", wo);

    // Data streams are derived from the seed but independent of the weights draw.
    std::mt19937_64 rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    const std::int64_t S = spec.image_size;
    auto make_images = [&](int n) {
        Tensor t({n, 3, S, S});
        for (auto& v : t.data) v = normal(rng);
        return t;
    };
    const Tensor eval_images = make_images(c.toy_eval_images);
    const Tensor reference_images = make_images(c.toy_reference_images);

    ClassSet classes;
    classes.embeddings.resize(c.toy_classes, spec.d_out);
    for (int i = 0; i < c.toy_classes; ++i) {
        classes.names.push_back("class_" + std::to_string(i));
        for (int j = 0; j < spec.d_out; ++j) classes.embeddings(i, j) = normal(rng);
    }
    MatrixXf pool_emb(c.toy_pool, spec.d_out);
    std::vector<std::string> phrases;
    for (int i = 0; i < c.toy_pool; ++i) {
        phrases.push_back("phrase_" + std::to_string(i));
        for (int j = 0; j < spec.d_out; ++j) pool_emb(i, j) = normal(rng);
    }

    // Labels are the unablated predictions, so the toy baseline scores 100%.
    const auto traces = trace_images(weights, eval_images, c.jobs);
    const auto predicted = classify(representations(traces), classes);
    Tensor labels({c.toy_eval_images});
    for (int i = 0; i < c.toy_eval_images; ++i) labels.data[static_cast<std::size_t>(i)] = static_cast<float>(std::max(predicted[static_cast<std::size_t>(i)], 0));

    Container ec;
    ec.put("pixels", "images.pixels", eval_images);
    ec.put("labels", "images.labels", std::move(labels));
    write_container(ec, out / "images", wo);
    Container rc;
    rc.put("pixels", "images.pixels", reference_images);
    write_container(rc, out / "reference_images", wo);
    write_container(classes_to_container(classes), out / "classes", wo);
    write_container(pool_to_container(TextPool::make(phrases, pool_emb)), out / "pool", wo);

    // Ground-truth masks: one random axis-aligned rectangle per image.
    Tensor masks({c.toy_eval_images, S, S});
    std::uniform_int_distribution<std::int64_t> corner(0, S / 2), extent(S / 4, S / 2);
    for (int i = 0; i < c.toy_eval_images; ++i) {
        const auto y0 = corner(rng), x0 = corner(rng), h = extent(rng), w = extent(rng);
        for (std::int64_t y = y0; y < std::min(S, y0 + h); ++y)
            for (std::int64_t x = x0; x < std::min(S, x0 + w); ++x)
                masks.data[static_cast<std::size_t>((i * S + y) * S + x)] = 1.0f;
    }
    Container mc;
    mc.put("masks", "segmentation.masks", std::move(masks));
    write_container(mc, out / "masks", wo);

    const int last_useful = std::max(0, spec.layers - 2);
    nlohmann::json cfg = {{"weights", "weights"},
                          {"images", "images"},
                          {"reference_images", "reference_images"},
                          {"pool", "pool"},
                          {"classes", "classes"},
                          {"masks", "masks"},
                          {"output", "run"},
                          {"layers", std::vector<int>{std::max(0, last_useful - 1), last_useful}},
                          {"m", std::min(8, std::min(spec.d_out, c.toy_pool))},
                          {"support_size", std::min(16, c.toy_reference_images)},
                          {"k", 8},
                          {"segment_k", 16},
                          {"Q", 4},
                          {"top_phrases", 10},
                          {"seed", c.seed}};
    write_text_file(out / "config.json", cfg.dump(2) + "\n", c.force);
}

void run_trace(const RunConfig& c) {
    const Model model = load_model(c);
    require_path(c.images, "images");
    const auto eval = trace_images(model.weights, image_tensor(read_container(c.images)), c.jobs);
    write_container(traces_to_container(eval, model.spec), paths::trace_eval(c), {c.force});
    if (!c.reference_images.empty()) {
        require_path(c.reference_images, "reference_images");
        const auto ref = trace_images(model.weights, image_tensor(read_container(c.reference_images)), c.jobs);
        write_container(traces_to_container(ref, model.spec), paths::trace_reference(c), {c.force});
    }
}

void run_effects(const RunConfig& c) {
    const Model model = load_model(c);
    check_layers(c, model.spec);
    const auto eval = load_traces(paths::trace_eval(c), model.spec);
    const auto ref = load_traces(paths::trace_reference(c), model.spec);
    for (int layer : c.layers) {
        const auto ref_field = second_order(model.weights, ref, layer, effect_options(c, true));
        write_container(field_to_container(ref_field), paths::effects(c, layer, true), {c.force});
        const auto eval_field = second_order(model.weights, eval, layer, effect_options(c, false));
        write_container(field_to_container(eval_field), paths::effects(c, layer, false), {c.force});
    }
}

void run_rank1(const RunConfig& c) {
    if (c.layers.empty()) throw ValidationError("config: layers is empty");
    Rank1Options o;
    o.support_size = c.support_size;
    o.center_on_support = c.center_on_support;
    o.jobs = c.jobs;
    std::vector<VarianceRow> rows;
    for (int layer : c.layers) {
        const auto field = load_field(c, layer, true);
        const auto dirs = fit_layer(field, o);
        write_container(directions_to_container(dirs), paths::rank1(c, layer), {c.force});
        rows.push_back({layer, 100.0 * mean_variance_explained(dirs), std::nullopt});
    }
    write_text_file(c.output / "rank1" / "variance_explained.csv", variance_csv(rows), c.force);
}

void run_decompose(const RunConfig& c) {
    require_path(c.pool, "pool");
    const TextPool pool = pool_from_container(read_container(c.pool));
    for (int layer : c.layers) {
        const auto dirs = load_directions(c, layer);
        const auto codes = decompose_layer(dirs, pool, c.m, c.jobs);
        write_text_file(paths::codes(c, layer), codes_jsonl(codes), c.force);
    }
}

void run_ablate(const RunConfig& c) {
    const AblationMode mode = ablation_mode_from_string(c.mode);
    require_path(c.classes, "classes");
    require_path(c.images, "images");
    const ClassSet classes = classes_from_container(read_container(c.classes));
    const Container images = read_container(c.images);
    const Model model = load_model(c);
    check_layers(c, model.spec);
    const auto eval = load_traces(paths::trace_eval(c), model.spec);
    std::vector<ImageTrace> ref;
    if (mode == AblationMode::Indirect || mode == AblationMode::FirstOrderMsa)
        ref = load_traces(paths::trace_reference(c), model.spec);

    AblationContext ctx;
    ctx.classes = &classes;
    ctx.labels = labels_of(images);
    ctx.representations = representations(eval);
    ctx.weights = &model.weights;
    ctx.images = &image_tensor(images);
    ctx.traces = eval;
    ctx.jobs = c.jobs;

    std::vector<SecondOrderField> fields;
    fields.reserve(c.layers.size());
    std::vector<LayerAblationData> data;
    for (int layer : c.layers) {
        LayerAblationData d;
        d.layer = layer;
        switch (mode) {
            case AblationMode::Indirect:
                d.token_means = per_token_means(ref, layer);
                break;
            case AblationMode::FirstOrderMsa: {
                Eigen::VectorXd sum = Eigen::VectorXd::Zero(model.spec.d_out);
                for (const auto& t : ref) sum += first_order_msa(model.weights, t, layer).cast<double>();
                d.msa_reference_mean = (sum / static_cast<double>(ref.size())).cast<float>();
                break;
            }
            default: {
                fields.push_back(load_field(c, layer, false));
                d.field = &fields.back();
                d.reference_mean = load_field(c, layer, true).mean;
                if (mode == AblationMode::Pc1Reconstruction) d.directions = load_directions(c, layer);
            }
        }
        data.push_back(std::move(d));
    }
    AblationConfig config{c.layers, mode, c.Q, "eval"};
    const auto rows = run_ablation(config, ctx, data);
    write_text_file(paths::ablation(c), ablation_csv(rows), c.force);
}

void run_spurious(const RunConfig& c) {
    require_path(c.classes, "classes");
    require_path(c.pool, "pool");
    const ClassSet classes = classes_from_container(read_container(c.classes));
    const TextPool pool = pool_from_container(read_container(c.pool));
    if (c.class_a < 0 || c.class_a >= classes.size() || c.class_b < 0 || c.class_b >= classes.size())
        throw ValidationError("config: class_a/class_b out of range");
    const auto dir = classification_direction(classes.embeddings.row(c.class_a).transpose(),
                                              classes.embeddings.row(c.class_b).transpose());
    if (dir.degenerate) throw ValidationError("class_a and class_b have identical embeddings");
    std::vector<NeuronDirection> dirs;
    std::vector<SparseCode> codes;
    for (int layer : c.layers) {
        auto d = load_directions(c, layer);
        dirs.insert(dirs.end(), d.begin(), d.end());
        auto k = load_codes(c, layer);
        codes.insert(codes.end(), k.begin(), k.end());
    }
    const auto selected = select_neurons_by_direction(dirs, dir.v, c.k);
    PhraseRanking ranking = contribution_scores(selected, codes, dirs, dir.v);
    if (static_cast<int>(ranking.entries.size()) > c.top_phrases)
        ranking.entries.resize(static_cast<std::size_t>(c.top_phrases));
    write_text_file(paths::spurious(c), ranking_jsonl(ranking, pool.phrases), c.force);
}

void run_discover(const RunConfig& c) {
    require_path(c.pool, "pool");
    const TextPool pool = pool_from_container(read_container(c.pool));
    std::vector<SecondOrderField> fields;
    std::vector<PercentileTable> tables;
    std::vector<SparseCode> codes;
    const auto scope = c.percentile_scope == "global" ? PercentileScope::Global : PercentileScope::PerNeuron;
    for (int layer : c.layers) {
        tables.push_back(percentile_table(load_field(c, layer, true), c.percentile, scope));
        fields.push_back(load_field(c, layer, false));
        auto k = load_codes(c, layer);
        codes.insert(codes.end(), k.begin(), k.end());
    }
    const int n_images = fields.empty() ? 0 : fields[0].n_images;
    std::vector<int> targets;
    if (c.image >= 0) {
        if (c.image >= n_images) throw ValidationError("config: image index out of range");
        targets.push_back(c.image);
    } else {
        for (int i = 0; i < n_images; ++i) targets.push_back(i);
    }
    for (int image : targets) {
        const auto ranking = discover_concepts(fields, tables, codes, image, c.discover_top);
        write_text_file(paths::discover(c, image), ranking_jsonl(ranking, pool.phrases), c.force);
    }
}

void run_segment(const RunConfig& c) {
    require_path(c.classes, "classes");
    require_path(c.images, "images");
    const Model model = load_model(c);
    check_layers(c, model.spec);
    const ClassSet classes = classes_from_container(read_container(c.classes));
    const auto labels = labels_of(read_container(c.images));
    const auto eval = load_traces(paths::trace_eval(c), model.spec);
    std::vector<NeuronDirection> dirs;
    for (int layer : c.layers) {
        auto d = load_directions(c, layer);
        dirs.insert(dirs.end(), d.begin(), d.end());
    }
    const std::int64_t n = static_cast<std::int64_t>(eval.size()), S = model.spec.image_size, g = model.spec.grid();
    Tensor heat({n, S, S}), masks({n, S, S}), grid({n, g, g});
    const fs::path out = paths::segment(c);
    for (std::int64_t i = 0; i < n; ++i) {
        const int cls = c.class_index >= 0 ? c.class_index : labels.at(static_cast<std::size_t>(i));
        if (cls < 0 || cls >= classes.size()) throw ValidationError("segmentation class out of range");
        const Heatmap h = segment(eval[static_cast<std::size_t>(i)], dirs, classes.embeddings.row(cls).transpose(),
                                  model.spec, c.segment_k, static_cast<float>(c.threshold));
        std::copy(h.upsampled.begin(), h.upsampled.end(), heat.data.begin() + i * S * S);
        std::transform(h.mask.begin(), h.mask.end(), masks.data.begin() + i * S * S, [](std::uint8_t v) { return static_cast<float>(v); });
        std::copy(h.grid_scores.begin(), h.grid_scores.end(), grid.data.begin() + i * g * g);
        const std::string stem = "image_" + std::to_string(i);
        write_text_file(out / "pgm" / (stem + "_heatmap.pgm"), pgm_gray(h.upsampled, h.size, h.size), c.force);
        write_text_file(out / "pgm" / (stem + "_mask.pgm"), pgm_mask(h.mask, h.size, h.size), c.force);
    }
    Container sc;
    sc.manifest.attributes["threshold"] = c.threshold;
    sc.put("heatmaps", "segment.heatmap", std::move(heat));
    sc.put("masks", "segment.mask", std::move(masks));
    sc.put("grid", "segment.grid", std::move(grid));
    write_container(sc, out, {c.force});
}

void run_metrics(const RunConfig& c) {
    require_path(c.masks, "masks");
    const Container pred = read_container(paths::segment(c));
    const Container truth = read_container(c.masks);
    const auto truth_name = truth.find_role("segmentation.masks");
    if (!truth_name) throw ValidationError("masks container has no segmentation.masks tensor");
    const Tensor& gt = truth.at(*truth_name);
    const Tensor& heat = pred.at("heatmaps");
    const Tensor& mask = pred.at("masks");
    if (gt.rank() != 3 || heat.shape != gt.shape) throw ValidationError("predicted heatmaps and ground-truth masks differ in shape");
    const std::int64_t n = gt.dim(0), H = gt.dim(1), W = gt.dim(2);
    if (H != W) throw ValidationError("masks must be square");
    std::vector<Heatmap> maps(static_cast<std::size_t>(n));
    std::vector<BinaryMask> masks(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        auto& h = maps[static_cast<std::size_t>(i)];
        h.size = static_cast<int>(H);
        h.upsampled.assign(heat.data.begin() + i * H * W, heat.data.begin() + (i + 1) * H * W);
        for (std::int64_t k = 0; k < H * W; ++k) h.mask.push_back(mask.data[static_cast<std::size_t>(i * H * W + k)] != 0.0f);
        auto& m = masks[static_cast<std::size_t>(i)];
        m.height = static_cast<int>(H);
        m.width = static_cast<int>(W);
        for (std::int64_t k = 0; k < H * W; ++k) m.data.push_back(gt.data[static_cast<std::size_t>(i * H * W + k)] != 0.0f);
    }
    const auto m = segmentation_metrics(maps, masks);
    const nlohmann::json j = {{"pixel_acc", m.pixel_accuracy},
                              {"miou", m.miou},
                              {"map", m.map},
                              {"n_images", n},
                              {"images_without_foreground", m.images_without_foreground}};
    write_text_file(paths::metrics(c), j.dump(2) + "\n", c.force);
}

}  // namespace solens
