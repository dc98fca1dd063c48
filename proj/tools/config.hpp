#pragma once

// Experiment configuration: one JSON document whose shape is fixed by the
// defaults below. Unknown keys and type mismatches are config errors.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vstar/env.hpp"
#include "vstar/eval.hpp"
#include "vstar/train.hpp"

namespace vstar::cli {

struct ScaleConfig {
  std::vector<int> multipliers = {1, 2, 3, 4};  // budget k x (1 + 2B)
  int base_width = 16;                          // B
  int value_iterations = 5;                     // TD-only VED passes before the sweep
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string out = "runs/default";
  std::optional<std::string> env_dir;
  EnvSizes env;
  MisalignmentSpec misalignment;
  LoopConfig loop;
  int checkpoint_every = 0;  // 0: final snapshots only
  ScaleConfig scale;
  AlignmentConfig alignment;
  int alignment_queries = 0;  // 0: every held-out query
};

// The full default document; doubles as the schema.
nlohmann::json default_config_json();

// Applies `doc` over the defaults. Throws ConfigError naming the offending key.
ExperimentConfig parse_config(const nlohmann::json& doc);

// Sets a dotted key ("rl.learning_rate") from text; the text is read as JSON
// when it parses, otherwise as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

nlohmann::json to_json(const ExperimentConfig& cfg);

}  // namespace vstar::cli
