#include "floodlora/data.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "binary_io.hpp"
#include "floodlora/errors.hpp"
#include "floodlora/rng.hpp"
#include "floodlora/serialization.hpp"

namespace floodlora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kFsegMagic[4] = {'F', 'S', 'E', 'G'};

struct FsegHeader {
  std::uint16_t version = 0;
  std::uint16_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
};

void write_header(std::ostream& out, std::uint16_t channels, std::uint32_t h, std::uint32_t w) {
  out.write(kFsegMagic, 4);
  binio::write_le<std::uint16_t>(out, kFsegVersion);
  binio::write_le<std::uint16_t>(out, channels);
  binio::write_le<std::uint32_t>(out, h);
  binio::write_le<std::uint32_t>(out, w);
}

FsegHeader read_header(std::istream& in, const fs::path& path) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kFsegMagic, 4) != 0) throw IoError(path, "not an FSEG file (bad magic)");
  FsegHeader h;
  if (!binio::read_le(in, h.version) || !binio::read_le(in, h.channels) || !binio::read_le(in, h.height) ||
      !binio::read_le(in, h.width)) {
    throw IoError(path, "truncated FSEG header");
  }
  if (h.version != kFsegVersion) throw IoError(path, "unsupported FSEG version " + std::to_string(h.version));
  if (h.channels == 0 || h.height == 0 || h.width == 0) throw IoError(path, "FSEG header has a zero extent");
  return h;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  return in;
}

void expect_eof(std::istream& in, const fs::path& path) {
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(path, "trailing bytes after raster payload");
}

// Separable Gaussian blur with mirrored borders.
std::vector<double> gaussian_blur(const std::vector<double>& src, std::size_t n, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double total = std::accumulate(kernel.begin(), kernel.end(), 0.0);
  for (double& k : kernel) k /= total;
  const int size = static_cast<int>(n);
  auto mirror = [size](int i) {
    while (i < 0 || i >= size) i = i < 0 ? -i - 1 : 2 * size - i - 1;
    return i;
  };
  std::vector<double> tmp(n * n), out(n * n);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * src[y * size + mirror(x + k)];
      tmp[y * size + x] = acc;
    }
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp[mirror(y + k) * size + x];
      out[y * size + x] = acc;
    }
  }
  return out;
}

// The `count` lowest pixels of the terrain become water.
std::vector<std::uint8_t> lowest_pixels(const std::vector<std::size_t>& order, std::size_t count) {
  std::vector<std::uint8_t> water(order.size(), 0);
  for (std::size_t i = 0; i < count && i < order.size(); ++i) water[order[i]] = 1;
  return water;
}

Raster render_snapshot(const std::vector<double>& terrain, const std::vector<std::uint8_t>& water, std::size_t n,
                       const SceneRegime& regime, Rng& rng) {
  Raster r;
  r.channels = static_cast<std::uint16_t>(kSnapshotChannels);
  r.height = r.width = static_cast<std::uint32_t>(n);
  r.values.resize(kSnapshotChannels * n * n);
  const double db_per_log = 10.0 / std::numbers::ln10;
  const double sigma = regime.speckle;
  for (std::size_t i = 0; i < n * n; ++i) {
    const bool wet = water[i] != 0;
    const double vv = wet ? regime.water_db : regime.land_db + regime.land_slope_db * std::tanh(terrain[i]);
    const double desc = wet ? -0.25 * regime.desc_offset_db : regime.desc_offset_db;
    const std::array<double, kSnapshotChannels> mean_db{vv, vv + regime.vh_offset_db, vv + desc,
                                                        vv + desc + regime.vh_offset_db};
    for (std::size_t c = 0; c < kSnapshotChannels; ++c) {
      // Log-normal multiplicative speckle with unit mean in linear power.
      const double speckle_db = db_per_log * (sigma * rng.normal() - 0.5 * sigma * sigma);
      r.values[c * n * n + i] = static_cast<float>(mean_db[c] + speckle_db);
    }
  }
  return r;
}

void check_range(const Range& r, const char* name, bool allow_zero_lo) {
  const bool lo_ok = allow_zero_lo ? r.lo >= 0.0 : r.lo > 0.0;
  if (!(lo_ok && r.hi < 1.0 && r.lo <= r.hi)) {
    throw ConfigError(std::string(name) + " range must satisfy 0 < lo <= hi < 1");
  }
}

void check_regime(const SceneRegime& regime) {
  if (!(regime.terrain_scale > 0.0)) throw ConfigError("terrain_scale must be positive");
  if (!(regime.speckle >= 0.0)) throw ConfigError("speckle must be non-negative");
  check_range(regime.water_fraction, "water_fraction", false);
  check_range(regime.flood_growth, "flood_growth", false);
}

Tensor normalized(const Raster& raster, const ChannelStats& stats, std::size_t offset) {
  const std::size_t plane = static_cast<std::size_t>(raster.height) * raster.width;
  std::vector<double> values(raster.values.size());
  for (std::size_t c = 0; c < raster.channels; ++c) {
    const double mu = stats.mean[offset + c];
    const double sd = stats.stddev[offset + c];
    for (std::size_t i = 0; i < plane; ++i) values[c * plane + i] = (raster.values[c * plane + i] - mu) / sd;
  }
  return Tensor({raster.channels, raster.height, raster.width}, std::move(values));
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(Split split) {
  switch (split) {
    case Split::Train:
      return "train";
    case Split::Val:
      return "val";
    case Split::Test:
      return "test";
    case Split::Ood:
      return "ood";
  }
  return "unknown";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  if (name == "ood") return Split::Ood;
  throw UsageError("unknown split '" + name + "' (expected train, val, test or ood)");
}

const std::array<std::string, 2 * kSnapshotChannels>& channel_names() {
  static const std::array<std::string, 2 * kSnapshotChannels> names{
      "pre_VV_asc",  "pre_VH_asc",  "pre_VV_desc",  "pre_VH_desc",
      "post_VV_asc", "post_VH_asc", "post_VV_desc", "post_VH_desc"};
  return names;
}

// ---------------------------------------------------------------------------

void write_raster(const fs::path& path, const Raster& raster) {
  if (raster.values.size() != static_cast<std::size_t>(raster.channels) * raster.height * raster.width) {
    throw DimensionError("raster payload does not match its header extents");
  }
  auto out = open_out(path);
  write_header(out, raster.channels, raster.height, raster.width);
  binio::write_f32(out, raster.values);
  if (!out) throw IoError(path, "write failed");
}

Raster read_raster(const fs::path& path) {
  auto in = open_in(path);
  const FsegHeader h = read_header(in, path);
  Raster r;
  r.channels = h.channels;
  r.height = h.height;
  r.width = h.width;
  r.values.resize(static_cast<std::size_t>(h.channels) * h.height * h.width);
  if (!binio::read_f32(in, r.values)) throw IoError(path, "truncated raster payload");
  expect_eof(in, path);
  for (float v : r.values) {
    if (!std::isfinite(v)) throw IoError(path, "raster contains non-finite values");
  }
  return r;
}

void write_mask(const fs::path& path, const MaskRaster& mask) {
  if (mask.values.size() != static_cast<std::size_t>(mask.height) * mask.width) {
    throw DimensionError("mask payload does not match its header extents");
  }
  auto out = open_out(path);
  write_header(out, 1, mask.height, mask.width);
  out.write(reinterpret_cast<const char*>(mask.values.data()), static_cast<std::streamsize>(mask.values.size()));
  if (!out) throw IoError(path, "write failed");
}

MaskRaster read_mask(const fs::path& path) {
  auto in = open_in(path);
  const FsegHeader h = read_header(in, path);
  if (h.channels != 1) throw IoError(path, "mask must have exactly one channel");
  MaskRaster m;
  m.height = h.height;
  m.width = h.width;
  m.values.resize(static_cast<std::size_t>(h.height) * h.width);
  if (!in.read(reinterpret_cast<char*>(m.values.data()), static_cast<std::streamsize>(m.values.size()))) {
    throw IoError(path, "truncated mask payload");
  }
  expect_eof(in, path);
  for (std::uint8_t v : m.values) {
    if (v > 1) throw IoError(path, "mask values must be 0 or 1");
  }
  return m;
}

// ---------------------------------------------------------------------------

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const SampleRecord& s : samples) {
    if (!ids.insert(s.id).second) throw ValidationError("manifest: duplicate sample id '" + s.id + "'");
  }
  if (channels.size() != 2 * kSnapshotChannels) throw ValidationError("manifest: expected 8 channel names");
  for (std::size_t c = 0; c < stats.stddev.size(); ++c) {
    if (!(stats.stddev[c] > 0.0) || !std::isfinite(stats.mean[c])) {
      throw ValidationError("manifest: normalization stats missing or invalid for channel " + channels[c]);
    }
  }
  if (image_size == 0) throw ValidationError("manifest: image_size must be positive");
}

SceneRegime SynthConfig::default_ood_regime() {
  SceneRegime r;
  r.terrain_scale = 3.0;
  r.water_fraction = {0.01, 0.08};
  r.flood_growth = {0.3, 0.8};
  r.land_db = -9.5;
  r.land_slope_db = 3.0;
  r.water_db = -15.0;
  r.vh_offset_db = -6.0;
  r.desc_offset_db = 1.5;
  r.speckle = 0.8;
  return r;
}

void SynthConfig::validate() const {
  if (image_size < 2) throw ConfigError("image_size must be at least 2");
  if (n_train == 0) throw ConfigError("the train split needs at least one sample for normalization stats");
  check_regime(regime);
  check_regime(ood_regime);
}

SyntheticScene make_scene(std::size_t n, const SceneRegime& regime, LabelMode label_mode, Rng& rng) {
  check_regime(regime);
  std::vector<double> noise(n * n);
  for (double& v : noise) v = rng.normal();
  std::vector<double> terrain = gaussian_blur(noise, n, regime.terrain_scale);
  const double mu = std::accumulate(terrain.begin(), terrain.end(), 0.0) / static_cast<double>(terrain.size());
  double var = 0.0;
  for (double v : terrain) var += (v - mu) * (v - mu);
  const double sd = std::sqrt(var / static_cast<double>(terrain.size()));
  for (double& v : terrain) v = sd > 0.0 ? (v - mu) / sd : 0.0;

  SyntheticScene scene;
  scene.post_water_fraction = rng.uniform(regime.water_fraction.lo, regime.water_fraction.hi);
  const double growth = rng.uniform(regime.flood_growth.lo, regime.flood_growth.hi);
  const double pre_fraction = scene.post_water_fraction * (1.0 - growth);

  std::vector<std::size_t> order(n * n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return terrain[a] < terrain[b]; });
  const auto count = [&](double f) { return static_cast<std::size_t>(std::llround(f * static_cast<double>(n * n))); };
  // Lower threshold for pre-event water keeps it inside the flood extent.
  scene.pre_water = lowest_pixels(order, count(pre_fraction));
  scene.post_water = lowest_pixels(order, count(scene.post_water_fraction));

  scene.pre = render_snapshot(terrain, scene.pre_water, n, regime, rng);
  scene.post = render_snapshot(terrain, scene.post_water, n, regime, rng);
  scene.mask.height = scene.mask.width = static_cast<std::uint32_t>(n);
  scene.mask.values.resize(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    const bool post = scene.post_water[i] != 0;
    const bool pre = scene.pre_water[i] != 0;
    scene.mask.values[i] = label_mode == LabelMode::AllPostWater ? post : (post && !pre);
  }
  return scene;
}

DatasetManifest generate_synthetic(const SynthConfig& cfg, const fs::path& root) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(root / "samples", ec);
  if (ec) throw IoError(root / "samples", "cannot create directory: " + ec.message());

  DatasetManifest manifest;
  manifest.image_size = cfg.image_size;
  manifest.channels.assign(channel_names().begin(), channel_names().end());
  manifest.generator_json = json(cfg).dump();

  // Running sums for train-split normalization stats.
  std::array<double, 2 * kSnapshotChannels> sum{}, sum_sq{};
  std::size_t train_pixels = 0;

  const struct {
    Split split;
    std::size_t count;
  } plan[] = {{Split::Train, cfg.n_train}, {Split::Val, cfg.n_val}, {Split::Test, cfg.n_test}, {Split::Ood, cfg.n_ood}};

  const Rng in_dist(cfg.seed, streams::kSynthInDist);
  for (const auto& [split, count] : plan) {
    const bool ood = split == Split::Ood;
    Rng rng = ood ? Rng(cfg.seed, streams::kSynthOod) : in_dist.fork(static_cast<std::uint64_t>(split));
    const SceneRegime& regime = ood ? cfg.ood_regime : cfg.regime;
    for (std::size_t i = 0; i < count; ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "%s-%04zu", to_string(split).c_str(), i);
      SyntheticScene scene = make_scene(cfg.image_size, regime, cfg.label_mode, rng);
      SampleRecord record{id, split, std::string("samples/") + id + ".pre.fseg",
                          std::string("samples/") + id + ".post.fseg", std::string("samples/") + id + ".mask.fseg"};
      write_raster(root / record.pre_path, scene.pre);
      write_raster(root / record.post_path, scene.post);
      write_mask(root / record.mask_path, scene.mask);
      if (split == Split::Train) {
        const std::size_t plane = cfg.image_size * cfg.image_size;
        for (std::size_t c = 0; c < kSnapshotChannels; ++c) {
          for (std::size_t p = 0; p < plane; ++p) {
            const double a = scene.pre.values[c * plane + p];
            const double b = scene.post.values[c * plane + p];
            sum[c] += a;
            sum_sq[c] += a * a;
            sum[kSnapshotChannels + c] += b;
            sum_sq[kSnapshotChannels + c] += b * b;
          }
        }
        train_pixels += plane;
      }
      manifest.samples.push_back(std::move(record));
    }
  }
  for (std::size_t c = 0; c < sum.size(); ++c) {
    const double n = static_cast<double>(train_pixels);
    manifest.stats.mean[c] = sum[c] / n;
    manifest.stats.stddev[c] = std::sqrt(std::max(sum_sq[c] / n - manifest.stats.mean[c] * manifest.stats.mean[c], 1e-12));
  }
  manifest.validate();

  const fs::path manifest_path = root / "manifest.json";
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError(manifest_path, "cannot open for writing");
  out << json(manifest).dump(2) << '\n';
  if (!out) throw IoError(manifest_path, "write failed");
  return manifest;
}

// ---------------------------------------------------------------------------

Dataset Dataset::open(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open dataset manifest");
  Dataset ds;
  ds.root_ = root;
  try {
    ds.manifest_ = json::parse(in).get<DatasetManifest>();
  } catch (const json::exception& e) {
    throw IoError(path, std::string("corrupt manifest: ") + e.what());
  }
  ds.manifest_.validate();
  return ds;
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest_.samples.size(); ++i) {
    if (manifest_.samples[i].split == split) out.push_back(i);
  }
  return out;
}

SyntheticScene Dataset::load_raw(std::size_t index) const {
  if (index >= manifest_.samples.size()) throw UsageError("sample index out of range");
  const SampleRecord& rec = manifest_.samples[index];
  SyntheticScene scene;
  try {
    scene.pre = read_raster(root_ / rec.pre_path);
    scene.post = read_raster(root_ / rec.post_path);
    scene.mask = read_mask(root_ / rec.mask_path);
  } catch (const IoError& e) {
    throw IoError(e.path(), "sample '" + rec.id + "': " + e.what());
  }
  const std::size_t n = manifest_.image_size;
  const auto fits = [n](const Raster& r) {
    return r.channels == kSnapshotChannels && r.height == n && r.width == n;
  };
  if (!fits(scene.pre) || !fits(scene.post) || scene.mask.height != n || scene.mask.width != n) {
    throw ValidationError("sample '" + rec.id + "': raster shape does not match the manifest (" +
                          std::to_string(kSnapshotChannels) + "x" + std::to_string(n) + "x" + std::to_string(n) + ")");
  }
  return scene;
}

FloodSample Dataset::load(std::size_t index) const {
  const SyntheticScene raw = load_raw(index);
  const SampleRecord& rec = manifest_.samples[index];
  FloodSample s;
  s.id = rec.id;
  s.split = rec.split;
  s.pre = normalized(raw.pre, manifest_.stats, 0);
  s.post = normalized(raw.post, manifest_.stats, kSnapshotChannels);
  std::vector<double> mask(raw.mask.values.begin(), raw.mask.values.end());
  s.mask = Tensor({raw.mask.height, raw.mask.width}, std::move(mask));
  return s;
}

std::vector<FloodSample> Dataset::load_split(Split split) const {
  std::vector<FloodSample> out;
  for (std::size_t i : indices(split)) out.push_back(load(i));
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> split_iter(std::size_t split_size, Split split, std::size_t batch_size,
                                                 std::uint64_t shuffle_seed) {
  if (split_size == 0) throw UsageError("split '" + to_string(split) + "' is empty");
  if (batch_size == 0) throw UsageError("batch size must be positive");
  std::vector<std::size_t> order(split_size);
  std::iota(order.begin(), order.end(), 0);
  if (split == Split::Train) {
    Rng rng(shuffle_seed, streams::kShuffle);
    rng.shuffle(order);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < split_size; start += batch_size) {
    const std::size_t end = std::min(split_size, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::vector<std::vector<std::size_t>> split_iter(const Dataset& dataset, Split split, std::size_t batch_size,
                                                 std::uint64_t shuffle_seed) {
  const std::vector<std::size_t> members = dataset.indices(split);
  auto batches = split_iter(members.size(), split, batch_size, shuffle_seed);
  for (auto& batch : batches) {
    for (std::size_t& pos : batch) pos = members[pos];
  }
  return batches;
}

Batch make_batch(const std::vector<FloodSample>& samples, std::span<const std::size_t> positions) {
  if (positions.empty()) throw UsageError("empty batch");
  const FloodSample& first = samples.at(positions[0]);
  const Shape snap = first.pre.shape();
  const std::size_t snap_n = first.pre.numel();
  const std::size_t mask_n = first.mask.numel();
  std::vector<double> pre, post, mask;
  pre.reserve(positions.size() * snap_n);
  post.reserve(positions.size() * snap_n);
  mask.reserve(positions.size() * mask_n);
  for (std::size_t pos : positions) {
    const FloodSample& s = samples.at(pos);
    if (s.pre.shape() != snap || s.post.shape() != snap || s.mask.numel() != mask_n) {
      throw DimensionError("sample '" + s.id + "' does not match the batch's raster shape");
    }
    pre.insert(pre.end(), s.pre.data().begin(), s.pre.data().end());
    post.insert(post.end(), s.post.data().begin(), s.post.data().end());
    mask.insert(mask.end(), s.mask.data().begin(), s.mask.data().end());
  }
  const std::size_t b = positions.size();
  return {Tensor({b, snap[0], snap[1], snap[2]}, std::move(pre)), Tensor({b, snap[0], snap[1], snap[2]}, std::move(post)),
          Tensor({b, 1, snap[1], snap[2]}, std::move(mask))};
}

void write_pgm(const fs::path& path, std::span<const std::uint8_t> mask, std::size_t height, std::size_t width) {
  if (mask.size() != height * width) throw DimensionError("pgm: mask size does not match extents");
  auto out = open_out(path);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (std::uint8_t v : mask) out.put(static_cast<char>(v ? 255 : 0));
  if (!out) throw IoError(path, "write failed");
}

}  // namespace floodlora
