#include "solens/config.hpp"

#include <set>

#include "solens/errors.hpp"
#include "solens/exports.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace solens {

void RunConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ValidationError("config: " + what);
    };
    require(m >= 1, "m must be >= 1");
    require(support_size >= 2, "support_size must be >= 2");
    require(k >= 1, "k must be >= 1");
    require(segment_k >= 1, "segment_k must be >= 1");
    require(Q >= 0, "Q must be >= 0");
    require(top_phrases >= 1 && discover_top >= 1, "top_phrases and discover_top must be >= 1");
    require(threshold >= 0.0 && threshold <= 1.0, "threshold must be in [0, 1]");
    require(percentile >= 0.0 && percentile <= 100.0, "percentile must be in [0, 100]");
    require(percentile_scope == "per_neuron" || percentile_scope == "global", "percentile_scope must be per_neuron or global");
    require(storage == "full" || storage == "topq", "storage must be full or topq");
    require(jobs >= 0, "jobs must be >= 0");
    require(toy_eval_images >= 1 && toy_reference_images >= 2 && toy_classes >= 2 && toy_pool >= 1, "toy sizes out of range");
    for (int l : layers) require(l >= 0, "layers must be non-negative");
    if (model_spec) model_spec->validate();
}

RunConfig config_from_json(const json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    static const std::set<std::string> known = {
        "weights", "images", "reference_images", "pool", "classes", "masks", "output", "model_spec",
        "layers", "m", "support_size", "k", "segment_k", "Q", "top_phrases", "discover_top", "threshold",
        "percentile", "percentile_scope", "seed", "storage", "bias_shares", "center_on_support", "mode",
        "class_a", "class_b", "class_index", "image", "jobs", "force", "toy_eval_images",
        "toy_reference_images", "toy_classes", "toy_pool"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw ValidationError("config: unknown key '" + key + "'");

    RunConfig c;
    auto path = [&](const char* key, fs::path& dst) {
        if (!j.contains(key)) return;
        fs::path p = j.at(key).get<std::string>();
        dst = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    try {
        path("weights", c.weights);
        path("images", c.images);
        path("reference_images", c.reference_images);
        path("pool", c.pool);
        path("classes", c.classes);
        path("masks", c.masks);
        path("output", c.output);
        if (j.contains("model_spec")) c.model_spec = j.at("model_spec").get<ModelSpec>();
        auto get = [&](const char* key, auto& dst) {
            if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
        };
        get("layers", c.layers);
        get("m", c.m);
        get("support_size", c.support_size);
        get("k", c.k);
        get("segment_k", c.segment_k);
        get("Q", c.Q);
        get("top_phrases", c.top_phrases);
        get("discover_top", c.discover_top);
        get("threshold", c.threshold);
        get("percentile", c.percentile);
        get("percentile_scope", c.percentile_scope);
        get("seed", c.seed);
        get("storage", c.storage);
        get("bias_shares", c.bias_shares);
        get("center_on_support", c.center_on_support);
        get("mode", c.mode);
        get("class_a", c.class_a);
        get("class_b", c.class_b);
        get("class_index", c.class_index);
        get("image", c.image);
        get("jobs", c.jobs);
        get("force", c.force);
        get("toy_eval_images", c.toy_eval_images);
        get("toy_reference_images", c.toy_reference_images);
        get("toy_classes", c.toy_classes);
        get("toy_pool", c.toy_pool);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig parse_config(const std::string& text, const fs::path& base_dir) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        // e.byte is 1-based and points just past the offending character.
        const std::size_t offset = e.byte > 0 ? std::min<std::size_t>(e.byte - 1, text.size()) : 0;
        std::size_t line = 1, column = 1;
        for (std::size_t i = 0; i < offset; ++i) {
            if (text[i] == '\n') {
                ++line;
                column = 1;
            } else {
                ++column;
            }
        }
        throw ValidationError("config parse error at line " + std::to_string(line) + ", column " +
                              std::to_string(column) + ": " + e.what());
    }
    return config_from_json(j, base_dir);
}

RunConfig load_config(const fs::path& path) {
    return parse_config(read_text_file(path), path.parent_path());
}

json config_to_json(const RunConfig& c) {
    json j = {{"weights", c.weights.string()},
              {"images", c.images.string()},
              {"reference_images", c.reference_images.string()},
              {"pool", c.pool.string()},
              {"classes", c.classes.string()},
              {"masks", c.masks.string()},
              {"output", c.output.string()},
              {"layers", c.layers},
              {"m", c.m},
              {"support_size", c.support_size},
              {"k", c.k},
              {"segment_k", c.segment_k},
              {"Q", c.Q},
              {"top_phrases", c.top_phrases},
              {"discover_top", c.discover_top},
              {"threshold", c.threshold},
              {"percentile", c.percentile},
              {"percentile_scope", c.percentile_scope},
              {"seed", c.seed},
              {"storage", c.storage},
              {"bias_shares", c.bias_shares},
              {"center_on_support", c.center_on_support},
              {"mode", c.mode},
              {"class_a", c.class_a},
              {"class_b", c.class_b},
              {"class_index", c.class_index},
              {"image", c.image},
              {"jobs", c.jobs}};
    if (c.model_spec) j["model_spec"] = *c.model_spec;
    return j;
}

}  // namespace solens
