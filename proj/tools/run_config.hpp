#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "floodlora/data.hpp"
#include "floodlora/lora.hpp"
#include "floodlora/model.hpp"
#include "floodlora/training.hpp"
#include "json.hpp"

namespace floodlora::cli {

// Strategy as written in a config file; alpha absent means 2 * rank.
struct StrategySpec {
  std::string kind = "frozen";
  std::size_t rank = 0;
  std::optional<double> alpha;
  double dropout = 0.1;
  std::string init = "zero_B";
  LoraScaling scaling = LoraScaling::NominalRank;

  // Throws UsageError when a lora strategy has no rank.
  Strategy build() const;
};

struct SweepSpec {
  std::vector<std::size_t> ranks{4, 8, 16};
  bool include_full = false;
};

// Everything a subcommand reads. One seed drives data generation, model
// initialization, shuffling, dropout and MAE masking.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string data;
  std::string init_from;
  std::string checkpoint;
  std::string split = "test";
  SynthConfig synth;
  EncoderConfig model;
  StrategySpec strategy;
  TrainConfig train;
  MaeConfig pretrain;
  SweepSpec sweep;

  // Copies the top-level seed into the nested configs.
  void propagate_seed();
};

nlohmann::json to_json(const RunConfig& cfg);
// Strict: unknown keys anywhere raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);

// Sets a dotted path ("train.lr") that must already exist in `j`. The value
// is parsed as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// defaults <- config file <- flag edits <- --set overrides.
RunConfig resolve_config(const std::optional<std::filesystem::path>& config_file,
                         const std::function<void(nlohmann::json&)>& apply_flags,
                         const std::vector<std::string>& overrides);

void write_resolved_config(const std::filesystem::path& out_dir, const RunConfig& cfg);

}  // namespace floodlora::cli
