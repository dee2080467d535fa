#pragma once

// Directory container: manifest.json plus one raw little-endian f32 file per
// tensor, row-major. String lists (phrases, class names) live next to the
// tensors as UTF-8 JSON arrays and are listed in the manifest as well.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "solens/tensor.hpp"

namespace solens {

inline constexpr const char* kFormatTag = "solens-container";
inline constexpr int kFormatVersion = 1;

struct ManifestEntry {
    std::string name;
    Shape shape;
    std::string dtype = "f32";
    std::string file;
    std::string role;
};

struct StringListEntry {
    std::string name;
    std::string file;
    std::string role;
};

struct TensorManifest {
    std::string format_tag = kFormatTag;
    int version = kFormatVersion;
    std::vector<ManifestEntry> entries;
    std::vector<StringListEntry> string_lists;
    // Free-form metadata such as the ModelSpec or preprocessing provenance.
    nlohmann::json attributes = nlohmann::json::object();
};

/// A manifest together with the tensors and string lists it describes.
struct Container {
    TensorManifest manifest;
    TensorMap tensors;
    std::map<std::string, std::vector<std::string>> strings;

    // Adds or replaces a tensor; the manifest entry is kept in sync.
    void put(const std::string& name, const std::string& role, Tensor tensor);
    void put_strings(const std::string& name, const std::string& role, std::vector<std::string> values);

    bool contains(const std::string& name) const { return tensors.count(name) != 0; }
    const Tensor& at(const std::string& name) const;
    const std::vector<std::string>& strings_at(const std::string& name) const;
    std::optional<std::string> find_role(const std::string& role) const;
};

Container read_container(const std::filesystem::path& dir);

struct WriteOptions {
    bool overwrite = false;
};

/// Writes manifest.json and one .bin per tensor. Output bytes depend only on
/// the container contents. Refuses to replace an existing manifest unless
/// options.overwrite is set.
void write_container(const Container& container, const std::filesystem::path& dir,
                     const WriteOptions& options = {});

nlohmann::json manifest_to_json(const TensorManifest& manifest);
TensorManifest manifest_from_json(const nlohmann::json& j);

}  // namespace solens
