#pragma once

// Command-line orchestration: vocabulary training, data building,
// pretraining, finetuning, evaluation, the checkpoint-sensitivity grid, and
// report emission. One JSON config file drives every subcommand; unknown
// keys are rejected. Exit codes: 0 ok, 2 config error, 3 data error,
// 4 numeric failure.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace smlm::cli {

// Full default configuration (also the config schema); printed by the
// `defaults` subcommand.
nlohmann::json default_config();

// Rejects unknown keys (with their full path) and type mismatches.
void validate_config(const nlohmann::json& user);

// Defaults overlaid with the user config (validated first).
nlohmann::json merge_config(const nlohmann::json& user);

// argv-style entry points; errors are printed to stderr and mapped to the
// exit-code contract.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

// Re-hashes the files listed and records them in <out_dir>/manifest.json.
void record_artifacts(const std::string& out_dir,
                      const std::vector<std::string>& paths);

}  // namespace smlm::cli
