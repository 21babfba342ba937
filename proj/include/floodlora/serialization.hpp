#pragma once

// JSON mappings for configuration and report types. Readers accept partial
// objects (absent keys keep their defaults) and reject unknown keys.

#include <initializer_list>
#include <optional>
#include <string>

#include "floodlora/data.hpp"
#include "floodlora/errors.hpp"
#include "floodlora/lora.hpp"
#include "floodlora/model.hpp"
#include "floodlora/objective.hpp"
#include "floodlora/training.hpp"
#include "json.hpp"

namespace floodlora {

namespace json_detail {

inline void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_if_present(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("key '") + key + "': " + e.what());
  }
}

}  // namespace json_detail

NLOHMANN_JSON_SERIALIZE_ENUM(Split, {{Split::Train, "train"}, {Split::Val, "val"}, {Split::Test, "test"},
                                     {Split::Ood, "ood"}})
NLOHMANN_JSON_SERIALIZE_ENUM(LabelMode, {{LabelMode::AllPostWater, "all_post_water"},
                                         {LabelMode::FloodOnly, "flood_only"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DiceReduction, {{DiceReduction::Batch, "batch"}, {DiceReduction::PerImage, "per_image"}})
NLOHMANN_JSON_SERIALIZE_ENUM(LoraScaling, {{LoraScaling::NominalRank, "nominal_rank"},
                                           {LoraScaling::NumericRank, "numeric_rank"}})

// Range -------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
inline void from_json(const nlohmann::json& j, Range& r) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("range must be a two-element array [lo, hi]");
  r.lo = j[0].get<double>();
  r.hi = j[1].get<double>();
}

// SceneRegime / SynthConfig -----------------------------------------------

inline void to_json(nlohmann::json& j, const SceneRegime& r) {
  j = {{"terrain_scale", r.terrain_scale}, {"water_fraction", r.water_fraction},
       {"flood_growth", r.flood_growth},   {"land_db", r.land_db},
       {"land_slope_db", r.land_slope_db}, {"water_db", r.water_db},
       {"vh_offset_db", r.vh_offset_db},   {"desc_offset_db", r.desc_offset_db},
       {"speckle", r.speckle}};
}
inline void from_json(const nlohmann::json& j, SceneRegime& r) {
  json_detail::require_known_keys(j, {"terrain_scale", "water_fraction", "flood_growth", "land_db", "land_slope_db",
                                      "water_db", "vh_offset_db", "desc_offset_db", "speckle"},
                                  "scene regime");
  json_detail::read_if_present(j, "terrain_scale", r.terrain_scale);
  json_detail::read_if_present(j, "water_fraction", r.water_fraction);
  json_detail::read_if_present(j, "flood_growth", r.flood_growth);
  json_detail::read_if_present(j, "land_db", r.land_db);
  json_detail::read_if_present(j, "land_slope_db", r.land_slope_db);
  json_detail::read_if_present(j, "water_db", r.water_db);
  json_detail::read_if_present(j, "vh_offset_db", r.vh_offset_db);
  json_detail::read_if_present(j, "desc_offset_db", r.desc_offset_db);
  json_detail::read_if_present(j, "speckle", r.speckle);
}

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"image_size", c.image_size}, {"n_train", c.n_train},       {"n_val", c.n_val},
       {"n_test", c.n_test},         {"n_ood", c.n_ood},           {"seed", c.seed},
       {"label_mode", c.label_mode}, {"regime", c.regime},         {"ood_regime", c.ood_regime}};
}
inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  json_detail::require_known_keys(
      j, {"image_size", "n_train", "n_val", "n_test", "n_ood", "seed", "label_mode", "regime", "ood_regime"},
      "synthetic data config");
  json_detail::read_if_present(j, "image_size", c.image_size);
  json_detail::read_if_present(j, "n_train", c.n_train);
  json_detail::read_if_present(j, "n_val", c.n_val);
  json_detail::read_if_present(j, "n_test", c.n_test);
  json_detail::read_if_present(j, "n_ood", c.n_ood);
  json_detail::read_if_present(j, "seed", c.seed);
  json_detail::read_if_present(j, "label_mode", c.label_mode);
  json_detail::read_if_present(j, "regime", c.regime);
  json_detail::read_if_present(j, "ood_regime", c.ood_regime);
}

// Dataset manifest --------------------------------------------------------

inline void to_json(nlohmann::json& j, const SampleRecord& s) {
  j = {{"id", s.id}, {"split", s.split}, {"pre", s.pre_path}, {"post", s.post_path}, {"mask", s.mask_path}};
}
inline void from_json(const nlohmann::json& j, SampleRecord& s) {
  j.at("id").get_to(s.id);
  j.at("split").get_to(s.split);
  j.at("pre").get_to(s.pre_path);
  j.at("post").get_to(s.post_path);
  j.at("mask").get_to(s.mask_path);
}

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = {{"format", "fseg-dataset"},
       {"version", m.version},
       {"image_size", m.image_size},
       {"channels", m.channels},
       {"normalization", {{"mean", m.stats.mean}, {"std", m.stats.stddev}}},
       {"generator", m.generator_json.empty() ? nlohmann::json(nullptr) : nlohmann::json::parse(m.generator_json)},
       {"samples", m.samples}};
}
inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("version").get_to(m.version);
  j.at("image_size").get_to(m.image_size);
  j.at("channels").get_to(m.channels);
  j.at("normalization").at("mean").get_to(m.stats.mean);
  j.at("normalization").at("std").get_to(m.stats.stddev);
  m.generator_json = j.contains("generator") ? j.at("generator").dump() : std::string();
  j.at("samples").get_to(m.samples);
}

// Model and strategy ------------------------------------------------------

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"d_model", c.d_model},         {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
       {"patch_size", c.patch_size},   {"in_channels", c.in_channels}, {"image_size", c.image_size},
       {"mlp_ratio", c.mlp_ratio}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  json_detail::require_known_keys(
      j, {"d_model", "n_heads", "n_layers", "patch_size", "in_channels", "image_size", "mlp_ratio"}, "model config");
  json_detail::read_if_present(j, "d_model", c.d_model);
  json_detail::read_if_present(j, "n_heads", c.n_heads);
  json_detail::read_if_present(j, "n_layers", c.n_layers);
  json_detail::read_if_present(j, "patch_size", c.patch_size);
  json_detail::read_if_present(j, "in_channels", c.in_channels);
  json_detail::read_if_present(j, "image_size", c.image_size);
  json_detail::read_if_present(j, "mlp_ratio", c.mlp_ratio);
}

inline void to_json(nlohmann::json& j, const Strategy& s) {
  j = {{"kind", to_string(s.kind)}};
  if (s.is_lora()) {
    j["rank"] = s.rank;
    j["alpha"] = s.alpha;
    j["dropout"] = s.dropout;
    j["init"] = to_string(s.init);
    j["scaling"] = s.scaling;
  }
}
// A lora strategy needs "rank"; "alpha" defaults to 2 * rank.
inline void from_json(const nlohmann::json& j, Strategy& s) {
  json_detail::require_known_keys(j, {"kind", "rank", "alpha", "dropout", "init", "scaling"}, "strategy");
  const Strategy::Kind kind = parse_strategy_kind(j.value("kind", to_string(s.kind)));
  if (kind == Strategy::Kind::Full) {
    s = Strategy::full();
    return;
  }
  if (kind == Strategy::Kind::Frozen) {
    s = Strategy::frozen();
    return;
  }
  if (!j.contains("rank") || j.at("rank").get<long long>() <= 0) {
    throw UsageError("strategy lora requires a positive rank");
  }
  const auto rank = j.at("rank").get<std::size_t>();
  std::optional<double> alpha;
  if (j.contains("alpha") && !j.at("alpha").is_null()) alpha = j.at("alpha").get<double>();
  Strategy out = Strategy::lora(rank, alpha, j.value("dropout", 0.1),
                                parse_lora_init(j.value("init", to_string(LoraInit::ZeroB))));
  json_detail::read_if_present(j, "scaling", out.scaling);
  s = out;
}

// Training ----------------------------------------------------------------

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"lambda_bce", c.lambda_bce},
       {"lambda_dice", c.lambda_dice},
       {"epsilon", c.epsilon},
       {"prob_clamp", c.prob_clamp},
       {"dice_reduction", c.dice_reduction}};
}
inline void from_json(const nlohmann::json& j, LossConfig& c) {
  json_detail::require_known_keys(j, {"lambda_bce", "lambda_dice", "epsilon", "prob_clamp", "dice_reduction"},
                                  "loss config");
  json_detail::read_if_present(j, "lambda_bce", c.lambda_bce);
  json_detail::read_if_present(j, "lambda_dice", c.lambda_dice);
  json_detail::read_if_present(j, "epsilon", c.epsilon);
  json_detail::read_if_present(j, "prob_clamp", c.prob_clamp);
  json_detail::read_if_present(j, "dice_reduction", c.dice_reduction);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"max_epochs", c.max_epochs},
       {"early_stop_patience", c.early_stop_patience},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"sched_factor", c.sched_factor},
       {"sched_patience", c.sched_patience},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"loss", c.loss}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  json_detail::require_known_keys(j, {"max_epochs", "early_stop_patience", "lr", "weight_decay", "beta1", "beta2",
                                      "adam_eps", "sched_factor", "sched_patience", "batch_size", "seed", "loss"},
                                  "train config");
  json_detail::read_if_present(j, "max_epochs", c.max_epochs);
  json_detail::read_if_present(j, "early_stop_patience", c.early_stop_patience);
  json_detail::read_if_present(j, "lr", c.lr);
  json_detail::read_if_present(j, "weight_decay", c.weight_decay);
  json_detail::read_if_present(j, "beta1", c.beta1);
  json_detail::read_if_present(j, "beta2", c.beta2);
  json_detail::read_if_present(j, "adam_eps", c.adam_eps);
  json_detail::read_if_present(j, "sched_factor", c.sched_factor);
  json_detail::read_if_present(j, "sched_patience", c.sched_patience);
  json_detail::read_if_present(j, "batch_size", c.batch_size);
  json_detail::read_if_present(j, "seed", c.seed);
  json_detail::read_if_present(j, "loss", c.loss);
}

inline void to_json(nlohmann::json& j, const MaeConfig& c) {
  j = {{"mask_ratio", c.mask_ratio}, {"epochs", c.epochs},         {"lr", c.lr},
       {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, MaeConfig& c) {
  json_detail::require_known_keys(j, {"mask_ratio", "epochs", "lr", "weight_decay", "batch_size", "seed"},
                                  "pretrain config");
  json_detail::read_if_present(j, "mask_ratio", c.mask_ratio);
  json_detail::read_if_present(j, "epochs", c.epochs);
  json_detail::read_if_present(j, "lr", c.lr);
  json_detail::read_if_present(j, "weight_decay", c.weight_decay);
  json_detail::read_if_present(j, "batch_size", c.batch_size);
  json_detail::read_if_present(j, "seed", c.seed);
}

// Reports -----------------------------------------------------------------

// Flat record: the six ratios as percentages rounded to 2 decimals.
inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = {{"accuracy", as_percent(r.accuracy)}, {"precision", as_percent(r.precision)},
       {"recall", as_percent(r.recall)},     {"f1", as_percent(r.f1)},
       {"iou", as_percent(r.iou)},           {"dice", as_percent(r.dice)},
       {"tp", r.counts.tp},                  {"fp", r.counts.fp},
       {"fn", r.counts.fn},                  {"tn", r.counts.tn},
       {"degenerate", r.degenerate}};
}

}  // namespace floodlora
