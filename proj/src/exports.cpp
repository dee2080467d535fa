#include "solens/exports.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "solens/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace solens {

std::string ranking_jsonl(const PhraseRanking& ranking, const std::vector<std::string>& phrases) {
    std::string out;
    for (const auto& e : ranking.entries) {
        const json line = {{"phrase", phrases.at(static_cast<std::size_t>(e.index))},
                           {"score", e.score},
                           {"sign", e.score < 0 ? "-" : "+"}};
        out += line.dump() + "\n";
    }
    return out;
}

std::string codes_jsonl(std::span<const SparseCode> codes) {
    std::string out;
    for (const auto& c : codes) {
        const json line = {{"layer", c.layer},
                           {"neuron", c.neuron},
                           {"indices", c.indices},
                           {"gamma", c.gamma},
                           {"residual_norm", c.residual_norm}};
        out += line.dump() + "\n";
    }
    return out;
}

std::vector<SparseCode> codes_from_jsonl(const std::string& text) {
    std::vector<SparseCode> out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            SparseCode c;
            c.layer = j.value("layer", -1);
            c.neuron = j.at("neuron").get<int>();
            c.indices = j.at("indices").get<std::vector<int>>();
            c.gamma = j.at("gamma").get<std::vector<double>>();
            c.residual_norm = j.at("residual_norm").get<double>();
            if (c.indices.size() != c.gamma.size()) throw ValidationError("indices and gamma differ in length");
            out.push_back(std::move(c));
        } catch (const json::exception& e) {
            throw ValidationError("codes line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::string pgm_gray(std::span<const float> values, int width, int height) {
    if (static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != values.size())
        throw ValidationError("pgm: size mismatch");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (float v : values) {
        const float c = std::clamp(v, 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
    }
    return out;
}

std::string pgm_mask(std::span<const std::uint8_t> values, int width, int height) {
    if (static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != values.size())
        throw ValidationError("pgm: size mismatch");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n1\n";
    for (auto v : values) out.push_back(static_cast<char>(v ? 1 : 0));
    return out;
}

void write_text_file(const fs::path& path, const std::string& content, bool overwrite) {
    if (fs::exists(path) && !overwrite)
        throw ValidationError("refusing to overwrite " + path.string() + " (use --force)");
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << content;
    if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace solens
