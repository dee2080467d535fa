#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "solens/applications.hpp"
#include "solens/sparse_decomp.hpp"

namespace solens {

/// One JSON object per line: {"phrase", "score", "sign"}.
std::string ranking_jsonl(const PhraseRanking& ranking, const std::vector<std::string>& phrases);

/// One JSON object per line: {"layer", "neuron", "indices", "gamma", "residual_norm"}.
std::string codes_jsonl(std::span<const SparseCode> codes);
std::vector<SparseCode> codes_from_jsonl(const std::string& text);

/// Binary PGM (P5), values in [0, 1] scaled to 0..255.
std::string pgm_gray(std::span<const float> values, int width, int height);
/// Binary PGM (P5) with maxval 1.
std::string pgm_mask(std::span<const std::uint8_t> values, int width, int height);

/// Writes a file, refusing to replace an existing one unless overwrite is set.
void write_text_file(const std::filesystem::path& path, const std::string& content, bool overwrite);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace solens
