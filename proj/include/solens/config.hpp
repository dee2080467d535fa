#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "solens/model.hpp"

namespace solens {

/// Paths and stage parameters for a pipeline run. Relative paths in a config
/// file resolve against the file's directory.
struct RunConfig {
    std::filesystem::path weights;
    std::filesystem::path images;
    std::filesystem::path reference_images;
    std::filesystem::path pool;
    std::filesystem::path classes;
    std::filesystem::path masks;
    std::filesystem::path output = "solens_out";
    std::optional<ModelSpec> model_spec;

    std::vector<int> layers{8, 9, 10};
    int m = 128;
    int support_size = 128;
    int k = 100;          // neurons for class-pair mining
    int segment_k = 200;  // neurons for segmentation
    int Q = 100;
    int top_phrases = 25;
    int discover_top = 10;
    double threshold = 0.5;
    double percentile = 98.0;
    std::string percentile_scope = "per_neuron";
    std::uint64_t seed = 42;
    std::string storage = "full";
    bool bias_shares = true;
    bool center_on_support = false;
    std::string mode = "all";
    int class_a = 0;
    int class_b = 1;
    int class_index = -1;  // segmentation class; -1 uses each image's label
    int image = -1;        // discover target; -1 means every evaluation image
    int jobs = 0;
    bool force = false;

    // gen-toy sizes
    int toy_eval_images = 32;
    int toy_reference_images = 64;
    int toy_classes = 5;
    int toy_pool = 48;

    /// Throws ValidationError when a parameter is outside its documented range.
    void validate() const;
};

/// Strict: unknown keys are rejected. Errors carry line and column.
RunConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
nlohmann::json config_to_json(const RunConfig& config);

}  // namespace solens
