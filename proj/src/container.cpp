#include "solens/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "solens/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace solens {

namespace {

constexpr const char* kManifestName = "manifest.json";

bool safe_file_name(const std::string& name) {
    if (name.empty() || name == "." || name == "..") return false;
    return std::all_of(name.begin(), name.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
    });
}

std::uint32_t byteswap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

void to_little_endian(std::vector<float>& values) {
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& f : values) f = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(f)));
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void Container::put(const std::string& name, const std::string& role, Tensor tensor) {
    ManifestEntry entry{name, tensor.shape, "f32", name + ".bin", role};
    auto it = std::find_if(manifest.entries.begin(), manifest.entries.end(),
                           [&](const ManifestEntry& e) { return e.name == name; });
    if (it == manifest.entries.end())
        manifest.entries.push_back(std::move(entry));
    else
        *it = std::move(entry);
    tensors[name] = std::move(tensor);
}

void Container::put_strings(const std::string& name, const std::string& role, std::vector<std::string> values) {
    StringListEntry entry{name, name + ".json", role};
    auto it = std::find_if(manifest.string_lists.begin(), manifest.string_lists.end(),
                           [&](const StringListEntry& e) { return e.name == name; });
    if (it == manifest.string_lists.end())
        manifest.string_lists.push_back(std::move(entry));
    else
        *it = std::move(entry);
    strings[name] = std::move(values);
}

const Tensor& Container::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("container has no tensor '" + name + "'");
    return it->second;
}

const std::vector<std::string>& Container::strings_at(const std::string& name) const {
    auto it = strings.find(name);
    if (it == strings.end()) throw ValidationError("container has no string list '" + name + "'");
    return it->second;
}

std::optional<std::string> Container::find_role(const std::string& role) const {
    for (const auto& e : manifest.entries)
        if (e.role == role) return e.name;
    for (const auto& e : manifest.string_lists)
        if (e.role == role) return e.name;
    return std::nullopt;
}

json manifest_to_json(const TensorManifest& manifest) {
    json entries = json::array();
    for (const auto& e : manifest.entries)
        entries.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}, {"file", e.file}, {"role", e.role}});
    json j = {{"format_tag", manifest.format_tag}, {"version", manifest.version}, {"entries", entries}};
    if (!manifest.string_lists.empty()) {
        json lists = json::array();
        for (const auto& s : manifest.string_lists)
            lists.push_back({{"name", s.name}, {"file", s.file}, {"role", s.role}});
        j["string_lists"] = lists;
    }
    if (!manifest.attributes.empty()) j["attributes"] = manifest.attributes;
    return j;
}

TensorManifest manifest_from_json(const json& j) {
    TensorManifest m;
    try {
        m.format_tag = j.at("format_tag").get<std::string>();
        m.version = j.at("version").get<int>();
        if (m.format_tag != kFormatTag) throw IoError("unknown container format '" + m.format_tag + "'");
        if (m.version != kFormatVersion)
            throw IoError("unsupported container version " + std::to_string(m.version));
        std::set<std::string> names;
        for (const auto& e : j.at("entries")) {
            ManifestEntry entry;
            entry.name = e.at("name").get<std::string>();
            entry.shape = e.at("shape").get<Shape>();
            entry.dtype = e.at("dtype").get<std::string>();
            entry.file = e.at("file").get<std::string>();
            entry.role = e.value("role", std::string{});
            if (!names.insert(entry.name).second) throw IoError("duplicate entry '" + entry.name + "'");
            if (entry.dtype != "f32") throw IoError("entry '" + entry.name + "': unsupported dtype " + entry.dtype);
            for (auto d : entry.shape)
                if (d <= 0) throw IoError("entry '" + entry.name + "': non-positive dimension");
            if (!safe_file_name(entry.file)) throw IoError("entry '" + entry.name + "': invalid file name");
            m.entries.push_back(std::move(entry));
        }
        if (j.contains("string_lists")) {
            for (const auto& s : j.at("string_lists")) {
                StringListEntry entry{s.at("name").get<std::string>(), s.at("file").get<std::string>(),
                                      s.value("role", std::string{})};
                if (!names.insert(entry.name).second) throw IoError("duplicate entry '" + entry.name + "'");
                if (!safe_file_name(entry.file)) throw IoError("entry '" + entry.name + "': invalid file name");
                m.string_lists.push_back(std::move(entry));
            }
        }
        if (j.contains("attributes")) m.attributes = j.at("attributes");
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

Container read_container(const fs::path& dir) {
    const fs::path manifest_path = dir / kManifestName;
    if (!fs::exists(manifest_path)) throw IoError("missing manifest: " + manifest_path.string());
    json j;
    try {
        j = json::parse(read_text(manifest_path));
    } catch (const json::parse_error& e) {
        throw IoError(manifest_path.string() + ": " + e.what());
    }
    Container c;
    c.manifest = manifest_from_json(j);
    for (const auto& e : c.manifest.entries) {
        const fs::path file = dir / e.file;
        if (!fs::exists(file)) throw IoError("entry '" + e.name + "': missing file " + file.string());
        const auto expected = static_cast<std::uintmax_t>(element_count(e.shape)) * sizeof(float);
        const auto actual = fs::file_size(file);
        if (actual != expected)
            throw IoError("entry '" + e.name + "': file has " + std::to_string(actual) + " bytes, shape " +
                          shape_string(e.shape) + " needs " + std::to_string(expected));
        Tensor t(e.shape);
        std::ifstream in(file, std::ios::binary);
        if (!in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(expected)))
            throw IoError("entry '" + e.name + "': short read");
        to_little_endian(t.data);  // involution: converts back to native order
        c.tensors.emplace(e.name, std::move(t));
    }
    for (const auto& s : c.manifest.string_lists) {
        const fs::path file = dir / s.file;
        if (!fs::exists(file)) throw IoError("entry '" + s.name + "': missing file " + file.string());
        try {
            c.strings.emplace(s.name, json::parse(read_text(file)).get<std::vector<std::string>>());
        } catch (const json::exception& ex) {
            throw IoError("entry '" + s.name + "': " + ex.what());
        }
    }
    return c;
}

void write_container(const Container& c, const fs::path& dir, const WriteOptions& options) {
    std::set<std::string> listed;
    for (const auto& e : c.manifest.entries) {
        auto it = c.tensors.find(e.name);
        if (it == c.tensors.end()) throw ValidationError("manifest entry '" + e.name + "' has no tensor");
        if (it->second.shape != e.shape)
            throw ValidationError("entry '" + e.name + "': tensor shape " + shape_string(it->second.shape) +
                                  " differs from manifest " + shape_string(e.shape));
        if (!safe_file_name(e.file)) throw ValidationError("entry '" + e.name + "': invalid file name");
        if (!listed.insert(e.name).second) throw ValidationError("duplicate entry '" + e.name + "'");
    }
    for (const auto& s : c.manifest.string_lists) {
        if (!c.strings.count(s.name)) throw ValidationError("string list '" + s.name + "' missing");
        if (!listed.insert(s.name).second) throw ValidationError("duplicate entry '" + s.name + "'");
    }
    if (listed.size() != c.tensors.size() + c.strings.size())
        throw ValidationError("container holds tensors not listed in its manifest");

    std::error_code ec;
    if (fs::exists(dir / kManifestName) && !options.overwrite)
        throw ValidationError("refusing to overwrite existing container " + dir.string() + " (use --force)");
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    for (const auto& e : c.manifest.entries) {
        std::vector<float> bytes = c.tensors.at(e.name).data;
        to_little_endian(bytes);
        write_bytes(dir / e.file, bytes.data(), bytes.size() * sizeof(float));
    }
    for (const auto& s : c.manifest.string_lists) {
        const std::string text = json(c.strings.at(s.name)).dump(1) + "\n";
        write_bytes(dir / s.file, text.data(), text.size());
    }
    const std::string text = manifest_to_json(c.manifest).dump(2) + "\n";
    write_bytes(dir / kManifestName, text.data(), text.size());
}

}  // namespace solens
