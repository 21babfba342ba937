#include "run_config.hpp"

#include <fstream>

#include "floodlora/errors.hpp"
#include "floodlora/serialization.hpp"

namespace floodlora::cli {

namespace fs = std::filesystem;
using nlohmann::json;

Strategy StrategySpec::build() const {
  switch (parse_strategy_kind(kind)) {
    case Strategy::Kind::Full:
      return Strategy::full();
    case Strategy::Kind::Frozen:
      return Strategy::frozen();
    case Strategy::Kind::Lora:
      break;
  }
  if (rank == 0) throw UsageError("strategy lora requires --rank (a positive adapter rank)");
  Strategy s = Strategy::lora(rank, alpha, dropout, parse_lora_init(init));
  s.scaling = scaling;
  return s;
}

void RunConfig::propagate_seed() {
  synth.seed = seed;
  train.seed = seed;
  pretrain.seed = seed;
}

namespace {

json strategy_json(const StrategySpec& s) {
  return {{"kind", s.kind},
          {"rank", s.rank},
          {"alpha", s.alpha ? json(*s.alpha) : json(nullptr)},
          {"dropout", s.dropout},
          {"init", s.init},
          {"scaling", s.scaling}};
}

StrategySpec strategy_from_json(const json& j) {
  json_detail::require_known_keys(j, {"kind", "rank", "alpha", "dropout", "init", "scaling"}, "strategy");
  StrategySpec s;
  json_detail::read_if_present(j, "kind", s.kind);
  json_detail::read_if_present(j, "rank", s.rank);
  if (j.contains("alpha") && !j.at("alpha").is_null()) s.alpha = j.at("alpha").get<double>();
  json_detail::read_if_present(j, "dropout", s.dropout);
  json_detail::read_if_present(j, "init", s.init);
  json_detail::read_if_present(j, "scaling", s.scaling);
  parse_strategy_kind(s.kind);
  parse_lora_init(s.init);
  return s;
}

// Like merge_patch, but null is a value rather than a deletion.
void merge_into(json& dst, const json& src) {
  for (const auto& [key, value] : src.items()) {
    if (value.is_object() && dst.contains(key) && dst[key].is_object()) {
      merge_into(dst[key], value);
    } else {
      dst[key] = value;
    }
  }
}

// The nested seeds are derived, so they are not part of the file format.
json without_seed(json j) {
  j.erase("seed");
  return j;
}

}  // namespace

json to_json(const RunConfig& cfg) {
  return {{"seed", cfg.seed},
          {"data", cfg.data},
          {"init_from", cfg.init_from},
          {"checkpoint", cfg.checkpoint},
          {"split", cfg.split},
          {"synth", without_seed(json(cfg.synth))},
          {"model", json(cfg.model)},
          {"strategy", strategy_json(cfg.strategy)},
          {"train", without_seed(json(cfg.train))},
          {"pretrain", without_seed(json(cfg.pretrain))},
          {"sweep", {{"ranks", cfg.sweep.ranks}, {"include_full", cfg.sweep.include_full}}}};
}

RunConfig run_config_from_json(const json& j) {
  json_detail::require_known_keys(
      j, {"seed", "data", "init_from", "checkpoint", "split", "synth", "model", "strategy", "train", "pretrain", "sweep"},
      "run config");
  RunConfig cfg;
  json_detail::read_if_present(j, "seed", cfg.seed);
  json_detail::read_if_present(j, "data", cfg.data);
  json_detail::read_if_present(j, "init_from", cfg.init_from);
  json_detail::read_if_present(j, "checkpoint", cfg.checkpoint);
  json_detail::read_if_present(j, "split", cfg.split);
  parse_split(cfg.split);
  const auto section = [&j](const char* key, const char* what) {
    json s = j.contains(key) ? j.at(key) : json::object();
    if (!s.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
    if (s.contains("seed")) throw ConfigError(std::string(what) + ": unknown key 'seed' (use the top-level seed)");
    return s;
  };
  try {
    cfg.synth = section("synth", "synth").get<SynthConfig>();
    cfg.model = section("model", "model").get<EncoderConfig>();
    cfg.train = section("train", "train").get<TrainConfig>();
    cfg.pretrain = section("pretrain", "pretrain").get<MaeConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  cfg.strategy = strategy_from_json(section("strategy", "strategy"));
  const json sweep = section("sweep", "sweep");
  json_detail::require_known_keys(sweep, {"ranks", "include_full"}, "sweep");
  json_detail::read_if_present(sweep, "ranks", cfg.sweep.ranks);
  json_detail::read_if_present(sweep, "include_full", cfg.sweep.include_full);
  for (std::size_t r : cfg.sweep.ranks) {
    if (r == 0) throw ConfigError("sweep.ranks entries must be positive");
  }
  cfg.propagate_seed();
  return cfg;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = value;
}

RunConfig resolve_config(const std::optional<fs::path>& config_file, const std::function<void(json&)>& apply_flags,
                         const std::vector<std::string>& overrides) {
  json j = to_json(RunConfig{});
  if (config_file) {
    std::ifstream in(*config_file);
    if (!in) throw IoError(*config_file, "cannot open config file");
    json file = json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError(config_file->string() + ": not valid JSON");
    // Validate keys against the schema before merging.
    run_config_from_json(file);
    merge_into(j, file);
  }
  if (apply_flags) apply_flags(j);
  for (const std::string& assignment : overrides) apply_override(j, assignment);
  return run_config_from_json(j);
}

void write_resolved_config(const fs::path& out_dir, const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir, "cannot create output directory: " + ec.message());
  const fs::path path = out_dir / "config.resolved.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << to_json(cfg).dump(2) << '\n';
  if (!out) throw IoError(path, "write failed");
}

}  // namespace floodlora::cli
