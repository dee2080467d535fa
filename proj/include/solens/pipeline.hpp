#pragma once

// Library entry points behind each CLI subcommand. Every function reads its
// inputs from the RunConfig paths and writes under config.output.

#include <filesystem>

#include "solens/config.hpp"

namespace solens {

/// Writes a toy bundle, evaluation/reference images, classes, a text pool,
/// ground-truth masks and a ready-to-run config.json into `out`.
void run_gen_toy(const RunConfig& config, const std::filesystem::path& out);

void run_trace(const RunConfig& config);
void run_effects(const RunConfig& config);
void run_rank1(const RunConfig& config);
void run_decompose(const RunConfig& config);
void run_ablate(const RunConfig& config);
void run_spurious(const RunConfig& config);
void run_discover(const RunConfig& config);
void run_segment(const RunConfig& config);
void run_metrics(const RunConfig& config);

/// Output locations, shared by the CLI, tests and the Python bindings.
namespace paths {
std::filesystem::path trace_eval(const RunConfig& c);
std::filesystem::path trace_reference(const RunConfig& c);
std::filesystem::path effects(const RunConfig& c, int layer, bool reference);
std::filesystem::path rank1(const RunConfig& c, int layer);
std::filesystem::path codes(const RunConfig& c, int layer);
std::filesystem::path ablation(const RunConfig& c);
std::filesystem::path spurious(const RunConfig& c);
std::filesystem::path discover(const RunConfig& c, int image);
std::filesystem::path segment(const RunConfig& c);
std::filesystem::path metrics(const RunConfig& c);
}  // namespace paths

}  // namespace solens
