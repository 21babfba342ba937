#include "floodlora/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "binary_io.hpp"
#include "floodlora/errors.hpp"
#include "floodlora/serialization.hpp"

namespace floodlora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'F', 'L', 'C', 'K'};

}  // namespace

void save_checkpoint(const fs::path& path, const SegModel& model) {
  const std::vector<NamedParameter> params = model.parameters();
  json records = json::array();
  for (const NamedParameter& p : params) records.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  const json manifest = {{"config", model.config()},
                         {"strategy", model.strategy()},
                         {"merged_from_rank", model.merged_from_rank()},
                         {"records", records}};

  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError(path.parent_path(), "cannot create directory: " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open checkpoint for writing");
  out.write(kMagic, 4);
  binio::write_le<std::uint32_t>(out, kCheckpointVersion);
  binio::write_blob(out, manifest.dump());
  for (const NamedParameter& p : params) binio::write_f64(out, p.tensor.data());
  if (!out) throw IoError(path, "checkpoint write failed");
}

LoadedCheckpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open checkpoint");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path, "not a model checkpoint (bad magic)");
  std::uint32_t version = 0;
  if (!binio::read_le(in, version)) throw IoError(path, "truncated checkpoint header");
  if (version != kCheckpointVersion) throw IoError(path, "unsupported checkpoint version " + std::to_string(version));
  std::string text;
  if (!binio::read_blob(in, text)) throw IoError(path, "truncated checkpoint manifest");

  LoadedCheckpoint out;
  json manifest;
  try {
    manifest = json::parse(text);
    out.info.config = manifest.at("config").get<EncoderConfig>();
    out.info.strategy = manifest.at("strategy").get<Strategy>();
    out.info.merged_from_rank = manifest.at("merged_from_rank").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError(path, std::string("corrupt checkpoint manifest: ") + e.what());
  }
  for (const json& rec : manifest.at("records")) {
    StateRecord record;
    record.shape = rec.at("shape").get<Shape>();
    record.values.resize(shape_numel(record.shape));
    const std::string name = rec.at("name").get<std::string>();
    if (!binio::read_f64(in, record.values)) throw IoError(path, "truncated data for record '" + name + "'");
    if (!out.state.emplace(name, std::move(record)).second) throw IoError(path, "duplicate record '" + name + "'");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(path, "trailing bytes after the last record");
  return out;
}

SegModel load_checkpoint(const fs::path& path) {
  LoadedCheckpoint ckpt = read_checkpoint(path);
  SegModel model(ckpt.info.config, ckpt.info.strategy, 0);
  try {
    model.load_state(ckpt.state, true);
  } catch (const std::invalid_argument& e) {
    throw ValidationError(path.string() + ": checkpoint does not match its declared configuration: " + e.what());
  }
  model.set_merged_from_rank(ckpt.info.merged_from_rank);
  return model;
}

}  // namespace floodlora
