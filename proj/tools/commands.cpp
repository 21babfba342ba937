#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "floodlora/accounting.hpp"
#include "floodlora/analysis.hpp"
#include "floodlora/checkpoint.hpp"
#include "floodlora/errors.hpp"
#include "floodlora/serialization.hpp"
#include "json.hpp"
#include "run_config.hpp"

namespace floodlora::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Shortest text that round-trips the double.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError(path.parent_path(), "cannot create directory: " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << text;
  if (!out) throw IoError(path, "write failed");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string ratio_columns() { return "accuracy,precision,recall,f1,iou,dice"; }

std::string ratio_values(const MetricsReport& m) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%.2f,%.2f,%.2f,%.2f,%.2f,%.2f", as_percent(m.accuracy), as_percent(m.precision),
                as_percent(m.recall), as_percent(m.f1), as_percent(m.iou), as_percent(m.dice));
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---------------------------------------------------------------------------
// Flag plumbing. Every flag writes one JSON pointer of the run config, so
// flags and --set overrides go through the same strict schema.

struct FlagBinding {
  CLI::Option* option;
  std::string pointer;
  std::function<json()> value;
};

struct Command {
  CLI::App* app = nullptr;
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
  CLI::Option* config_option = nullptr;
  std::vector<FlagBinding> bindings;

  template <class T>
  CLI::Option* flag(const std::string& name, const std::string& pointer, T& storage, const std::string& help) {
    CLI::Option* opt = app->add_option(name, storage, help);
    bindings.push_back({opt, pointer, [&storage] { return json(storage); }});
    return opt;
  }

  RunConfig resolve() const {
    std::optional<fs::path> file;
    if (config_option->count() > 0) file = config_file;
    return resolve_config(
        file,
        [this](json& j) {
          for (const FlagBinding& b : bindings) {
            if (b.option->count() > 0) j[json::json_pointer(b.pointer)] = b.value();
          }
        },
        overrides);
  }
};

void add_common(Command& cmd, bool out_required) {
  cmd.config_option = cmd.app->add_option("--config", cmd.config_file, "JSON run config");
  cmd.app->add_option("--set", cmd.overrides, "dotted override key=value (repeatable)");
  CLI::Option* out = cmd.app->add_option("--out", cmd.out, "output directory");
  if (out_required) out->required();
}

// Flag storage for every subcommand; lives for one run_cli call.
struct FlagValues {
  std::uint64_t seed = 0;
  std::string data;
  std::string init_from;
  std::string checkpoint;
  std::string split;
  std::size_t size = 0, n_train = 0, n_val = 0, n_test = 0, n_ood = 0;
  std::string label_mode;
  std::string strategy;
  std::size_t rank = 0;
  double alpha = 0.0;
  double lora_dropout = 0.0;
  std::string lora_init;
  std::size_t epochs = 0;
  double lr = 0.0;
  std::size_t batch_size = 0;
  double mask_ratio = 0.0;
  std::vector<std::size_t> ranks;
  bool include_full = false;
  std::string preset;
  bool detail = false;
};

// ---------------------------------------------------------------------------

Dataset open_dataset(const RunConfig& cfg) {
  if (cfg.data.empty()) throw UsageError("no dataset given (use --data)");
  return Dataset::open(cfg.data);
}

// The model input size follows the dataset; the encoder then validates it.
void adopt_dataset_geometry(RunConfig& cfg, const Dataset& ds) {
  cfg.model.image_size = ds.manifest().image_size;
  try {
    cfg.model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("dataset ") + cfg.data + " cannot feed this encoder: " + e.what());
  }
}

void check_geometry(const SegModel& model, const Dataset& ds, const std::string& checkpoint) {
  const std::size_t expected = model.config().image_size;
  const std::size_t actual = ds.manifest().image_size;
  if (expected != actual) {
    throw ValidationError("checkpoint " + checkpoint + " expects " + std::to_string(expected) + "x" +
                          std::to_string(expected) + " inputs but dataset " + ds.root().string() + " holds " +
                          std::to_string(actual) + "x" + std::to_string(actual) + " scenes");
  }
}

std::vector<FloodSample> load_nonempty(const Dataset& ds, Split split) {
  std::vector<FloodSample> samples = ds.load_split(split);
  if (samples.empty()) throw UsageError("dataset " + ds.root().string() + " has no '" + to_string(split) + "' samples");
  return samples;
}

void load_pretrained_encoder(SegModel& model, const std::string& path) {
  const LoadedCheckpoint ckpt = read_checkpoint(path);
  if (!(ckpt.info.config == model.config())) {
    throw ValidationError("pretrained checkpoint " + path + " was built for " + json(ckpt.info.config).dump() +
                          " but this run uses " + json(model.config()).dump());
  }
  model.load_encoder_state(ckpt.state);
}

json param_counts_json(const ParamCountReport& r) {
  return {{"encoder_base", r.encoder_base},
          {"adapter", r.adapter},
          {"decoder", r.decoder},
          {"trainable", r.trainable},
          {"total", r.total()}};
}

struct Splits {
  std::vector<FloodSample> train, val, test, ood;
};

Splits load_splits(const Dataset& ds) {
  Splits s;
  s.train = load_nonempty(ds, Split::Train);
  s.val = load_nonempty(ds, Split::Val);
  s.test = load_nonempty(ds, Split::Test);
  s.ood = ds.load_split(Split::Ood);
  return s;
}

// Trains one strategy into `dir`; returns report.json's content.
json train_into(const RunConfig& cfg, const Strategy& strategy, const Splits& splits, const fs::path& dir,
                std::ostream& out) {
  SegModel model(cfg.model, strategy, cfg.seed);
  if (!cfg.init_from.empty()) load_pretrained_encoder(model, cfg.init_from);
  const ParamCountReport counts = count_trainable(model);

  std::ostringstream log;
  log << "epoch,train_loss,val_loss,lr,val_accuracy,val_precision,val_recall,val_f1,val_iou,val_dice\n";
  const auto start = std::chrono::steady_clock::now();
  const TrainResult result = train(model, splits.train, splits.val, cfg.train, [&](const EpochRecord& r) {
    log << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.val_loss) << ',' << fmt(r.lr) << ','
        << ratio_values(r.val_metrics) << '\n';
    out << "  [" << strategy.label() << "] epoch " << r.epoch << " train " << std::fixed << std::setprecision(4)
        << r.train_loss << " val " << r.val_loss << " val_f1 " << std::setprecision(2)
        << as_percent(r.val_metrics.f1) << " lr " << std::defaultfloat << r.lr << '\n';
  });
  write_text(dir / "epochs.csv", log.str());
  save_checkpoint(dir / "checkpoints" / "best.flck", model);

  json report = {{"command", "train"},
                 {"strategy", strategy.label()},
                 {"seed", cfg.seed},
                 {"trainable_params", counts.trainable},
                 {"param_counts", param_counts_json(counts)},
                 {"epochs_run", result.epochs.size()},
                 {"best_epoch", result.best_epoch},
                 {"best_val_loss", result.best_val_loss},
                 {"stopped_early", result.stopped_early}};
  const std::size_t batch = cfg.train.batch_size;
  report["test"] = evaluate(model, splits.test, batch).aggregate;
  if (!splits.ood.empty()) report["ood"] = evaluate(model, splits.ood, batch).aggregate;
  write_json(dir / "report.json", report);
  out << "  [" << strategy.label() << "] trainable " << counts.trainable << ", best epoch " << result.best_epoch
      << ", test F1 " << report["test"]["f1"].get<double>() << ", " << std::fixed << std::setprecision(1)
      << seconds_since(start) << std::defaultfloat << " s\n";
  return report;
}

// ---------------------------------------------------------------------------

void cmd_gen_data(const Command& cmd, std::ostream& out) {
  RunConfig cfg = cmd.resolve();
  generate_synthetic(cfg.synth, cmd.out);
  write_resolved_config(cmd.out, cfg);
  const Dataset ds = Dataset::open(cmd.out);
  out << "wrote " << ds.size() << " samples to " << cmd.out << '\n';
  for (Split s : {Split::Train, Split::Val, Split::Test, Split::Ood}) {
    out << "  " << to_string(s) << ": " << ds.indices(s).size() << '\n';
  }
}

void cmd_pretrain(const Command& cmd, std::ostream& out) {
  RunConfig cfg = cmd.resolve();
  const Dataset ds = open_dataset(cfg);
  adopt_dataset_geometry(cfg, ds);
  cfg.pretrain.validate();
  const fs::path dir = cmd.out;
  write_resolved_config(dir, cfg);

  SegModel model(cfg.model, Strategy::full(), cfg.seed);
  if (!cfg.init_from.empty()) load_pretrained_encoder(model, cfg.init_from);
  const std::vector<Tensor> images = snapshot_images(load_nonempty(ds, Split::Train));
  std::ostringstream log;
  log << "epoch,loss\n";
  const MaeResult result = mae_pretrain(model, images, cfg.pretrain, [&](std::size_t epoch, double loss) {
    log << epoch << ',' << fmt(loss) << '\n';
    out << "  mae epoch " << epoch << " loss " << std::fixed << std::setprecision(5) << loss << std::defaultfloat
        << '\n';
  });
  write_text(dir / "epochs.csv", log.str());
  save_checkpoint(dir / "checkpoints" / "pretrained.flck", model);
  write_json(dir / "report.json", {{"command", "pretrain"},
                                   {"images", images.size()},
                                   {"epoch_losses", result.epoch_losses},
                                   {"final_loss", result.epoch_losses.back()}});
  out << "wrote " << (dir / "checkpoints" / "pretrained.flck").string() << '\n';
}

void cmd_train(const Command& cmd, std::ostream& out) {
  RunConfig cfg = cmd.resolve();
  const Strategy strategy = cfg.strategy.build();
  const Dataset ds = open_dataset(cfg);
  adopt_dataset_geometry(cfg, ds);
  cfg.train.validate();
  write_resolved_config(cmd.out, cfg);
  train_into(cfg, strategy, load_splits(ds), cmd.out, out);
}

void cmd_sweep(const Command& cmd, std::ostream& out) {
  RunConfig cfg = cmd.resolve();
  const Dataset ds = open_dataset(cfg);
  adopt_dataset_geometry(cfg, ds);
  cfg.train.validate();
  const fs::path dir = cmd.out;
  write_resolved_config(dir, cfg);
  const Splits splits = load_splits(ds);

  std::vector<std::pair<Strategy, std::size_t>> runs{{Strategy::frozen(), 0}};
  for (std::size_t r : cfg.sweep.ranks) {
    StrategySpec spec = cfg.strategy;
    spec.kind = "lora";
    spec.rank = r;
    spec.alpha.reset();
    runs.emplace_back(spec.build(), r);
  }
  if (cfg.sweep.include_full) runs.emplace_back(Strategy::full(), 0);

  std::ostringstream csv;
  csv << "strategy,rank,trainable_params,split," << ratio_columns() << '\n';
  json summary = json::array();
  for (const auto& [strategy, rank] : runs) {
    const json report = train_into(cfg, strategy, splits, dir / strategy.label(), out);
    for (const char* split : {"test", "ood"}) {
      if (!report.contains(split)) continue;
      const json& m = report.at(split);
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%.2f,%.2f,%.2f,%.2f,%.2f,%.2f", m["accuracy"].get<double>(),
                    m["precision"].get<double>(), m["recall"].get<double>(), m["f1"].get<double>(),
                    m["iou"].get<double>(), m["dice"].get<double>());
      csv << strategy.label() << ',' << rank << ',' << report["trainable_params"].get<std::size_t>() << ',' << split
          << ',' << buf << '\n';
    }
    summary.push_back(report);
  }
  write_text(dir / "sweep.csv", csv.str());
  write_json(dir / "report.json", {{"command", "sweep"}, {"runs", summary}});
  out << "wrote " << (dir / "sweep.csv").string() << '\n';
}

void cmd_eval(const Command& cmd, std::ostream& out) {
  RunConfig cfg = cmd.resolve();
  if (cfg.checkpoint.empty()) throw UsageError("eval requires --checkpoint");
  const SegModel model = load_checkpoint(cfg.checkpoint);
  const Dataset ds = open_dataset(cfg);
  check_geometry(model, ds, cfg.checkpoint);
  cfg.model = model.config();
  const Split split = parse_split(cfg.split);
  const fs::path dir = cmd.out;
  write_resolved_config(dir, cfg);

  const std::vector<FloodSample> samples = load_nonempty(ds, split);
  const EvalResult result = evaluate(model, samples, cfg.train.batch_size);

  std::error_code ec;
  fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError(dir / "masks", "cannot create directory: " + ec.message());
  json per_sample = json::array();
  std::ostringstream sample_csv;
  sample_csv << "id," << metrics_csv_header() << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SampleReport& s = result.samples[i];
    per_sample.push_back({{"id", s.id}, {"metrics", s.metrics}});
    sample_csv << s.id << ',' << metrics_csv_row(s.metrics) << '\n';
    const std::size_t h = samples[i].mask.dim(0);
    const std::size_t w = samples[i].mask.dim(1);
    write_pgm(dir / "masks" / (s.id + ".pred.pgm"), s.predicted, h, w);
    write_pgm(dir / "masks" / (s.id + ".truth.pgm"), to_mask(samples[i].mask), h, w);
  }
  write_json(dir / "report.json", {{"command", "eval"},
                                   {"split", cfg.split},
                                   {"strategy", model.strategy().label()},
                                   {"merged_from_rank", model.merged_from_rank()},
                                   {"aggregate", result.aggregate},
                                   {"samples", per_sample}});
  write_text(dir / "report.csv",
             "split," + metrics_csv_header() + "\n" + cfg.split + "," + metrics_csv_row(result.aggregate) + "\n");
  write_text(dir / "samples.csv", sample_csv.str());
  const MetricsReport& m = result.aggregate;
  out << cfg.split << ": accuracy " << as_percent(m.accuracy) << " precision " << as_percent(m.precision)
      << " recall " << as_percent(m.recall) << " F1 " << as_percent(m.f1) << " IoU " << as_percent(m.iou) << " Dice "
      << as_percent(m.dice) << '\n';
}

void cmd_merge(const Command& cmd, std::ostream& out) {
  RunConfig cfg = cmd.resolve();
  if (cfg.checkpoint.empty()) throw UsageError("merge requires --checkpoint");
  SegModel model = load_checkpoint(cfg.checkpoint);
  if (!model.strategy().is_lora()) {
    throw UsageError("checkpoint " + cfg.checkpoint + " has strategy '" + model.strategy().label() +
                     "'; only lora checkpoints can be merged");
  }
  const std::string source = model.strategy().label();
  cfg.model = model.config();
  const fs::path dir = cmd.out;
  write_resolved_config(dir, cfg);
  model.merge_adapters();
  const fs::path target = dir / "checkpoints" / "merged.flck";
  save_checkpoint(target, model);
  write_json(dir / "report.json", {{"command", "merge"},
                                   {"source_strategy", source},
                                   {"merged_from_rank", model.merged_from_rank()},
                                   {"records", model.parameters().size()}});
  out << "merged " << source << " into " << target.string() << '\n';
}

void cmd_count_params(const Command& cmd, const FlagValues& flags, std::ostream& out) {
  RunConfig cfg = cmd.resolve();
  cfg.model.validate();
  std::vector<Strategy> strategies{Strategy::full(), Strategy::frozen()};
  for (std::size_t r : cfg.sweep.ranks) strategies.push_back(Strategy::lora(r));

  std::ostringstream csv;
  csv << "strategy,rank,trainable,encoder_base,adapter,decoder,total,train_memory_bytes\n";
  json rows = json::array();
  out << std::left << std::setw(12) << "strategy" << std::right << std::setw(14) << "trainable" << std::setw(14)
      << "adapter" << std::setw(12) << "decoder" << std::setw(14) << "total" << std::setw(14) << "train_MiB"
      << '\n';
  for (const Strategy& s : strategies) {
    const ParamCountReport r = count_trainable(cfg.model, s);
    const MemoryEstimate mem = estimate_training_memory(cfg.model, s, cfg.train.batch_size);
    out << std::left << std::setw(12) << r.strategy << std::right << std::setw(14) << r.trainable << std::setw(14)
        << r.adapter << std::setw(12) << r.decoder << std::setw(14) << r.total() << std::setw(14) << std::fixed
        << std::setprecision(1) << mem.total() / (1024.0 * 1024.0) << std::defaultfloat << '\n';
    if (flags.detail) {
      for (const ParamCountItem& item : r.items) {
        out << "    " << std::left << std::setw(36) << item.layer << std::right << std::setw(12) << item.trainable
            << " / " << item.total << '\n';
      }
    }
    csv << r.strategy << ',' << s.rank << ',' << r.trainable << ',' << r.encoder_base << ',' << r.adapter << ','
        << r.decoder << ',' << r.total() << ',' << fmt(mem.total()) << '\n';
    json row = param_counts_json(r);
    row["strategy"] = r.strategy;
    row["rank"] = s.rank;
    row["train_memory_bytes"] = mem.total();
    rows.push_back(row);
  }
  const bool paper = cfg.model == EncoderConfig::paper();
  if (paper) out << paper_table_note() << '\n';
  if (!cmd.out.empty()) {
    write_resolved_config(cmd.out, cfg);
    write_text(fs::path(cmd.out) / "params.csv", csv.str());
    json report = {{"command", "count-params"}, {"model", cfg.model}, {"rows", rows}};
    if (paper) report["note"] = paper_table_note();
    write_json(fs::path(cmd.out) / "report.json", report);
  } else {
    out << "resolved config: " << to_json(cfg).dump() << '\n';
  }
}

void cmd_embed(const Command& cmd, std::ostream& out) {
  RunConfig cfg = cmd.resolve();
  if (cfg.checkpoint.empty()) throw UsageError("embed requires --checkpoint");
  const SegModel model = load_checkpoint(cfg.checkpoint);
  const Dataset ds = open_dataset(cfg);
  check_geometry(model, ds, cfg.checkpoint);
  cfg.model = model.config();
  const Split split = parse_split(cfg.split);
  const fs::path dir = cmd.out;
  write_resolved_config(dir, cfg);

  const std::vector<FloodSample> samples = load_nonempty(ds, split);
  const PatchEmbeddings emb = patch_embeddings(model, samples, cfg.train.batch_size);
  const PcaResult proj = pca(emb.embeddings, 2);

  std::ostringstream raw;
  raw << "sample_id,patch,water";
  for (std::size_t j = 0; j < emb.embeddings.cols; ++j) raw << ",e" << j;
  raw << '\n';
  std::ostringstream projection;
  projection << "sample_id,patch,water,pc1,pc2\n";
  for (std::size_t i = 0; i < emb.embeddings.rows; ++i) {
    raw << emb.sample_ids[i] << ',' << emb.patch_index[i] << ',' << int(emb.water[i]);
    for (std::size_t j = 0; j < emb.embeddings.cols; ++j) raw << ',' << fmt(emb.embeddings(i, j));
    raw << '\n';
    projection << emb.sample_ids[i] << ',' << emb.patch_index[i] << ',' << int(emb.water[i]) << ','
               << fmt(proj.projection(i, 0)) << ',' << fmt(proj.projection(i, 1)) << '\n';
  }
  write_text(dir / "embeddings" / "embeddings.csv", raw.str());
  write_text(dir / "embeddings" / "projection.csv", projection.str());
  write_json(dir / "embeddings" / "pca.json", {{"mean", proj.mean},
                                               {"components", {proj.components.rows, proj.components.cols}},
                                               {"component_values", proj.components.values},
                                               {"explained_variance", proj.explained}});

  json report = {{"command", "embed"}, {"split", cfg.split}, {"rows", emb.embeddings.rows},
                 {"explained_variance", proj.explained}};
  if (split != Split::Train) {
    // Probe fit on train-split patches, scored on the requested split.
    const PatchEmbeddings fit = patch_embeddings(model, load_nonempty(ds, Split::Train), cfg.train.batch_size);
    const ProbeResult probe = linear_probe(fit.embeddings, fit.water, emb.embeddings, emb.water);
    report["probe"] = {{"train_accuracy", probe.train_accuracy}, {"test_accuracy", probe.test_accuracy}};
    out << "linear probe accuracy: train " << probe.train_accuracy << ", " << cfg.split << ' '
        << probe.test_accuracy << '\n';
  }
  write_json(dir / "report.json", report);
  out << "wrote " << emb.embeddings.rows << " patch embeddings to " << (dir / "embeddings").string() << '\n';
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"floodlora: LoRA adaptation of a ViT flood segmentation model on synthetic SAR scenes", "floodlora"};
  app.require_subcommand(1);
  FlagValues f;

  auto make = [&app](const std::string& name, const std::string& help) {
    Command c;
    c.app = app.add_subcommand(name, help);
    return c;
  };
  auto add_seed = [&f](Command& c) { c.flag("--seed", "/seed", f.seed, "seed for every random stream"); };
  auto add_train_flags = [&f](Command& c) {
    c.flag("--data", "/data", f.data, "dataset directory");
    c.flag("--init-from", "/init_from", f.init_from, "pretrained checkpoint for the encoder base weights");
    c.flag("--epochs", "/train/max_epochs", f.epochs, "maximum epochs");
    c.flag("--lr", "/train/lr", f.lr, "initial learning rate");
    c.flag("--batch-size", "/train/batch_size", f.batch_size, "batch size");
    c.flag("--lora-dropout", "/strategy/dropout", f.lora_dropout, "dropout on the adapter branch input");
    c.flag("--lora-init", "/strategy/init", f.lora_init, "adapter init: zero_B or both_random");
  };

  Command gen = make("gen-data", "generate a synthetic flood dataset");
  add_common(gen, true);
  add_seed(gen);
  gen.flag("--size", "/synth/image_size", f.size, "scene width and height in pixels");
  gen.flag("--train", "/synth/n_train", f.n_train, "train scenes");
  gen.flag("--val", "/synth/n_val", f.n_val, "validation scenes");
  gen.flag("--test", "/synth/n_test", f.n_test, "test scenes");
  gen.flag("--ood", "/synth/n_ood", f.n_ood, "out-of-distribution scenes");
  gen.flag("--label-mode", "/synth/label_mode", f.label_mode, "all_post_water or flood_only");

  Command pre = make("pretrain", "masked-autoencoder pretraining of the encoder");
  add_common(pre, true);
  add_seed(pre);
  pre.flag("--data", "/data", f.data, "pretraining corpus (train split is used)");
  pre.flag("--init-from", "/init_from", f.init_from, "checkpoint to continue from");
  pre.flag("--epochs", "/pretrain/epochs", f.epochs, "epochs");
  pre.flag("--lr", "/pretrain/lr", f.lr, "learning rate");
  pre.flag("--batch-size", "/pretrain/batch_size", f.batch_size, "batch size");
  pre.flag("--mask-ratio", "/pretrain/mask_ratio", f.mask_ratio, "fraction of masked patches");

  Command tr = make("train", "train a segmentation model");
  add_common(tr, true);
  add_seed(tr);
  add_train_flags(tr);
  tr.flag("--strategy", "/strategy/kind", f.strategy, "full, frozen or lora");
  tr.flag("--rank", "/strategy/rank", f.rank, "adapter rank (lora)");
  tr.flag("--alpha", "/strategy/alpha", f.alpha, "adapter alpha (default 2 * rank)");

  Command sw = make("sweep", "train frozen plus one lora model per rank and tabulate test/ood metrics");
  add_common(sw, true);
  add_seed(sw);
  add_train_flags(sw);
  sw.flag("--ranks", "/sweep/ranks", f.ranks, "adapter ranks")->delimiter(',');
  CLI::Option* full_opt = sw.app->add_flag("--include-full", f.include_full, "also train full fine-tuning");
  sw.bindings.push_back({full_opt, "/sweep/include_full", [&f] { return json(f.include_full); }});

  Command ev = make("eval", "evaluate a checkpoint on one split");
  add_common(ev, true);
  ev.flag("--checkpoint", "/checkpoint", f.checkpoint, "model checkpoint")->required();
  ev.flag("--data", "/data", f.data, "dataset directory");
  ev.flag("--split", "/split", f.split, "train, val, test or ood");

  Command mg = make("merge", "fold lora adapters into the base weights");
  add_common(mg, true);
  mg.flag("--checkpoint", "/checkpoint", f.checkpoint, "lora checkpoint")->required();

  Command cp = make("count-params", "trainable parameter counts per strategy and rank");
  add_common(cp, false);
  std::string preset;
  CLI::Option* preset_opt =
      cp.app->add_option("--preset", preset, "desk or paper encoder")->check(CLI::IsMember({"desk", "paper"}));
  cp.bindings.push_back({preset_opt, "/model", [&preset] {
                           return json(preset == "paper" ? EncoderConfig::paper() : EncoderConfig::desk());
                         }});
  cp.flag("--ranks", "/sweep/ranks", f.ranks, "adapter ranks")->delimiter(',');
  cp.app->add_flag("--detail", f.detail, "per-layer breakdown");

  Command em = make("embed", "export per-patch encoder embeddings and their PCA projection");
  add_common(em, true);
  em.flag("--checkpoint", "/checkpoint", f.checkpoint, "model checkpoint")->required();
  em.flag("--data", "/data", f.data, "dataset directory");
  em.flag("--split", "/split", f.split, "train, val, test or ood");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen.app) cmd_gen_data(gen, out);
    else if (*pre.app) cmd_pretrain(pre, out);
    else if (*tr.app) cmd_train(tr, out);
    else if (*sw.app) cmd_sweep(sw, out);
    else if (*ev.app) cmd_eval(ev, out);
    else if (*mg.app) cmd_merge(mg, out);
    else if (*cp.app) cmd_count_params(cp, f, out);
    else if (*em.app) cmd_embed(em, out);
    return kExitOk;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ValidationError& e) {
    err << "invalid data: " << e.what() << '\n';
    return kExitIo;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const StateError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
}

}  // namespace floodlora::cli
