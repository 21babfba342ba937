#include "floodlora/model.hpp"

#include <cmath>

#include "floodlora/errors.hpp"
#include "floodlora/rng.hpp"

namespace floodlora {

namespace {

// Decoder upsampling: three stride-2 stages.
constexpr std::size_t kDecoderUpsample = 8;

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(values), true);
}

ConvLayer make_conv(std::size_t cin, std::size_t cout, std::size_t k, Conv2dGeometry geom, bool transposed, Rng& rng) {
  // fan_in counts the inputs contributing to one output pixel.
  const std::size_t fan_in = transposed ? std::max<std::size_t>(1, cin * k * k / (geom.stride * geom.stride))
                                        : cin * k * k;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  ConvLayer layer;
  layer.weight = transposed ? uniform_tensor({cin, cout, k, k}, bound, rng) : uniform_tensor({cout, cin, k, k}, bound, rng);
  layer.bias = uniform_tensor({cout}, bound, rng);
  layer.geom = geom;
  layer.transposed = transposed;
  return layer;
}

void push_linear(std::vector<NamedParameter>& out, const std::string& prefix, const AdaptedLinear& layer) {
  out.push_back({prefix + ".weight", layer.weight(), ParamGroup::EncoderBase});
  if (layer.bias().defined()) out.push_back({prefix + ".bias", layer.bias(), ParamGroup::EncoderBase});
  if (layer.has_adapter()) {
    out.push_back({prefix + ".lora_B", layer.adapter().B, ParamGroup::Adapter});
    out.push_back({prefix + ".lora_A", layer.adapter().A, ParamGroup::Adapter});
  }
}

void push_norm(std::vector<NamedParameter>& out, const std::string& prefix, const LayerNormParams& norm) {
  out.push_back({prefix + ".gamma", norm.gamma, ParamGroup::EncoderBase});
  out.push_back({prefix + ".beta", norm.beta, ParamGroup::EncoderBase});
}

void set_trainable(LayerNormParams& norm, bool trainable) {
  norm.gamma.set_requires_grad(trainable);
  norm.beta.set_requires_grad(trainable);
}

}  // namespace

// ---------------------------------------------------------------------------

EncoderConfig EncoderConfig::desk() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::paper() {
  EncoderConfig c;
  c.d_model = 768;
  c.n_heads = 12;
  c.n_layers = 12;
  c.patch_size = 8;
  c.in_channels = 4;
  c.image_size = 512;
  c.mlp_ratio = 4;
  return c;
}

void EncoderConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || patch_size == 0 || in_channels == 0 || image_size == 0 ||
      mlp_ratio == 0) {
    throw ConfigError("encoder config values must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_model % 4 != 0) throw ConfigError("d_model must be divisible by 4 for the 2-D position encoding");
  if (image_size % patch_size != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch size " +
                      std::to_string(patch_size));
  }
}

LayerNormParams LayerNormParams::create(std::size_t width) {
  return {Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
}

Tensor sincos_position_encoding(std::size_t grid, std::size_t d_model) {
  if (d_model % 4 != 0) throw ConfigError("position encoding needs d_model divisible by 4");
  const std::size_t quarter = d_model / 4;
  std::vector<double> values(grid * grid * d_model);
  for (std::size_t row = 0; row < grid; ++row) {
    for (std::size_t col = 0; col < grid; ++col) {
      double* dst = values.data() + (row * grid + col) * d_model;
      for (std::size_t i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
        dst[i] = std::sin(row * omega);
        dst[quarter + i] = std::cos(row * omega);
        dst[2 * quarter + i] = std::sin(col * omega);
        dst[3 * quarter + i] = std::cos(col * omega);
      }
    }
  }
  return Tensor({grid * grid, d_model}, std::move(values));
}

// ---------------------------------------------------------------------------

AttentionOutput attention_forward(const AttentionBlock& block, const Tensor& x, std::size_t n_heads,
                                  const ForwardMode& mode) {
  if (x.rank() != 3) throw DimensionError("attention expects [b, n, d_model], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (d != block.to_out.d_out() || d % n_heads != 0) {
    throw DimensionError("attention: input " + shape_str(x.shape()) + " does not match d_model " +
                         std::to_string(block.to_out.d_out()));
  }
  const std::size_t dh = d / n_heads;
  const Tensor qkv = block.to_qkv.forward(x, mode.training, mode.rng);
  const auto [q, k, v] = chunk3(qkv);
  auto heads = [&](const Tensor& t) { return reshape(permute(reshape(t, {b, n, n_heads, dh}), {0, 2, 1, 3}), {b * n_heads, n, dh}); };
  const Tensor qh = heads(q);
  const Tensor kh = heads(k);
  const Tensor vh = heads(v);
  const Tensor scores = mul_scalar(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor weights = softmax_lastdim(scores);
  const Tensor context = matmul(weights, vh);
  const Tensor merged = reshape(permute(reshape(context, {b, n_heads, n, dh}), {0, 2, 1, 3}), {b, n, d});
  return {block.to_out.forward(merged, mode.training, mode.rng), weights};
}

Tensor block_forward(const AttentionBlock& block, const Tensor& x, std::size_t n_heads, const ForwardMode& mode) {
  const Tensor h = add(x, attention_forward(block, block.norm1.forward(x), n_heads, mode).out);
  const Tensor mlp = block.mlp_out.forward(relu(block.mlp_in.forward(block.norm2.forward(h))));
  return add(h, mlp);
}

// ---------------------------------------------------------------------------

Encoder::Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  patch_proj_ = AdaptedLinear::create(config_.patch_dim(), d, true, rng);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    AttentionBlock block;
    block.norm1 = LayerNormParams::create(d);
    block.to_qkv = AdaptedLinear::create(d, 3 * d, true, rng);
    block.to_out = AdaptedLinear::create(d, d, true, rng);
    block.norm2 = LayerNormParams::create(d);
    block.mlp_in = AdaptedLinear::create(d, config_.mlp_ratio * d, true, rng);
    block.mlp_out = AdaptedLinear::create(config_.mlp_ratio * d, d, true, rng);
    blocks_.push_back(std::move(block));
  }
  final_norm_ = LayerNormParams::create(d);
  position_ = sincos_position_encoding(config_.grid(), d);
}

void Encoder::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.in_channels) {
    throw DimensionError("encoder expects [b, " + std::to_string(config_.in_channels) + ", H, W], got " +
                         shape_str(x.shape()));
  }
  if (x.dim(2) % config_.patch_size != 0 || x.dim(3) % config_.patch_size != 0) {
    throw ConfigError("input extents " + shape_str(x.shape()) + " not divisible by patch size " +
                      std::to_string(config_.patch_size));
  }
  if (x.dim(2) != config_.image_size || x.dim(3) != config_.image_size) {
    throw DimensionError("encoder configured for " + std::to_string(config_.image_size) + "x" +
                         std::to_string(config_.image_size) + " input, got " + shape_str(x.shape()));
  }
}

Tensor Encoder::patchify(const Tensor& x) const {
  check_input(x);
  const std::size_t b = x.dim(0), c = config_.in_channels, p = config_.patch_size, g = config_.grid();
  const Tensor split = reshape(x, {b, c, g, p, g, p});
  return reshape(permute(split, {0, 2, 4, 1, 3, 5}), {b, g * g, c * p * p});
}

Tensor Encoder::patch_embed(const Tensor& x) const {
  return add_broadcast(patch_proj_.forward(patchify(x)), position_);
}

Tensor Encoder::encode(const Tensor& x, const ForwardMode& mode, const TokenMask* mask) const {
  Tensor h = patch_proj_.forward(patchify(x));
  if (mask != nullptr) h = replace_rows(h, mask->token, mask->rows);
  h = add_broadcast(h, position_);
  for (const AttentionBlock& block : blocks_) h = block_forward(block, h, config_.n_heads, mode);
  return final_norm_.forward(h);
}

// ---------------------------------------------------------------------------

SegDecoder::SegDecoder(std::size_t d_model, std::size_t grid, Rng& rng) : d_model_(d_model), grid_(grid) {
  if (d_model % 32 != 0) throw ConfigError("decoder channel schedule needs d_model divisible by 32");
  const Conv2dGeometry same{1, 1};
  const Conv2dGeometry up{2, 0};
  conv1_ = make_conv(d_model, d_model / 2, 3, same, false, rng);
  conv2_ = make_conv(d_model / 2, d_model / 4, 3, same, false, rng);
  deconv1_ = make_conv(d_model / 4, d_model / 8, 2, up, true, rng);
  deconv2_ = make_conv(d_model / 8, d_model / 16, 2, up, true, rng);
  deconv3_ = make_conv(d_model / 16, d_model / 32, 2, up, true, rng);
  fusion_ = make_conv(2 * (d_model / 32), 1, 3, same, false, rng);
}

Tensor SegDecoder::decode(const Tensor& z) const {
  if (z.rank() != 3 || z.dim(1) != grid_ * grid_ || z.dim(2) != d_model_) {
    throw DimensionError("decoder expects [b, " + std::to_string(grid_ * grid_) + ", " + std::to_string(d_model_) +
                         "], got " + shape_str(z.shape()));
  }
  const std::size_t b = z.dim(0);
  Tensor h = permute(reshape(z, {b, grid_, grid_, d_model_}), {0, 3, 1, 2});
  for (const ConvLayer* layer : {&conv1_, &conv2_, &deconv1_, &deconv2_, &deconv3_}) h = relu(layer->forward(h));
  return h;
}

Tensor SegDecoder::decode_and_fuse(const Tensor& z_pre, const Tensor& z_post) const {
  if (z_pre.shape() != z_post.shape()) {
    throw DimensionError("pre/post snapshot features differ: " + shape_str(z_pre.shape()) + " vs " +
                         shape_str(z_post.shape()));
  }
  return fusion_.forward(concat_channels(decode(z_pre), decode(z_post)));
}

std::vector<std::pair<std::string, ConvLayer*>> SegDecoder::layers() {
  return {{"conv1", &conv1_},     {"conv2", &conv2_},     {"deconv1", &deconv1_},
          {"deconv2", &deconv2_}, {"deconv3", &deconv3_}, {"fusion", &fusion_}};
}

std::vector<std::pair<std::string, const ConvLayer*>> SegDecoder::layers() const {
  return {{"conv1", &conv1_},     {"conv2", &conv2_},     {"deconv1", &deconv1_},
          {"deconv2", &deconv2_}, {"deconv3", &deconv3_}, {"fusion", &fusion_}};
}

// ---------------------------------------------------------------------------

SegModel::SegModel(const EncoderConfig& config, const Strategy& strategy, std::uint64_t seed) : strategy_(strategy) {
  config.validate();
  if (config.patch_size != kDecoderUpsample) {
    throw ConfigError("segmentation model needs patch size " + std::to_string(kDecoderUpsample) +
                      " to match the decoder's x8 upsampling, got " + std::to_string(config.patch_size));
  }
  Rng init(seed, streams::kInit);
  encoder_ = Encoder(config, init);
  decoder_ = SegDecoder(config.d_model, config.grid(), init);
  Rng adapter_rng(seed, streams::kAdapterInit);
  apply_strategy(adapter_rng);
}

void SegModel::apply_strategy(Rng& adapter_rng) {
  const bool train_base = strategy_.kind == Strategy::Kind::Full;
  encoder_.patch_proj().set_base_trainable(train_base);
  for (AttentionBlock& block : encoder_.blocks()) {
    set_trainable(block.norm1, train_base);
    set_trainable(block.norm2, train_base);
    for (AdaptedLinear* layer : {&block.to_qkv, &block.to_out, &block.mlp_in, &block.mlp_out}) {
      layer->set_base_trainable(train_base);
    }
  }
  set_trainable(encoder_.final_norm(), train_base);
  if (!strategy_.is_lora()) return;
  if (!(strategy_.dropout >= 0.0 && strategy_.dropout < 1.0)) throw ConfigError("LoRA dropout must lie in [0,1)");
  for (AttentionBlock& block : encoder_.blocks()) {
    for (AdaptedLinear* layer : {&block.to_qkv, &block.to_out}) {
      LoraAdapter adapter = init_adapter(layer->d_in(), layer->d_out(), strategy_.rank, strategy_.alpha,
                                         strategy_.dropout, strategy_.init, adapter_rng);
      adapter.scaling = strategy_.scaling;
      layer->attach(std::move(adapter));
    }
  }
}

Tensor SegModel::forward(const Tensor& pre, const Tensor& post, const ForwardMode& mode) const {
  if (pre.shape() != post.shape()) {
    throw DimensionError("pre/post snapshots differ: " + shape_str(pre.shape()) + " vs " + shape_str(post.shape()));
  }
  const Tensor z_pre = encoder_.encode(pre, mode);
  const Tensor z_post = encoder_.encode(post, mode);
  return decoder_.decode_and_fuse(z_pre, z_post);
}

std::vector<NamedParameter> SegModel::parameters() const {
  std::vector<NamedParameter> out;
  push_linear(out, "encoder.patch_proj", encoder_.patch_proj());
  for (std::size_t i = 0; i < encoder_.blocks().size(); ++i) {
    const AttentionBlock& block = encoder_.blocks()[i];
    const std::string prefix = "encoder.blocks." + std::to_string(i);
    push_norm(out, prefix + ".norm1", block.norm1);
    push_linear(out, prefix + ".attn.to_qkv", block.to_qkv);
    push_linear(out, prefix + ".attn.to_out", block.to_out);
    push_norm(out, prefix + ".norm2", block.norm2);
    push_linear(out, prefix + ".mlp.fc1", block.mlp_in);
    push_linear(out, prefix + ".mlp.fc2", block.mlp_out);
  }
  push_norm(out, "encoder.final_norm", encoder_.final_norm());
  for (const auto& [name, layer] : decoder_.layers()) {
    out.push_back({"decoder." + name + ".weight", layer->weight, ParamGroup::Decoder});
    out.push_back({"decoder." + name + ".bias", layer->bias, ParamGroup::Decoder});
  }
  return out;
}

std::vector<Tensor> SegModel::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const NamedParameter& p : parameters()) {
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  }
  return out;
}

std::vector<AdaptedLinear*> SegModel::adapted_layers() {
  std::vector<AdaptedLinear*> out;
  for (AttentionBlock& block : encoder_.blocks()) {
    if (block.to_qkv.has_adapter()) out.push_back(&block.to_qkv);
    if (block.to_out.has_adapter()) out.push_back(&block.to_out);
  }
  return out;
}

std::vector<const AdaptedLinear*> SegModel::adapted_layers() const {
  std::vector<const AdaptedLinear*> out;
  for (const AttentionBlock& block : encoder_.blocks()) {
    if (block.to_qkv.has_adapter()) out.push_back(&block.to_qkv);
    if (block.to_out.has_adapter()) out.push_back(&block.to_out);
  }
  return out;
}

void SegModel::merge_adapters() {
  if (!strategy_.is_lora()) throw StateError("merge: model strategy is " + strategy_.label() + ", not lora");
  const std::size_t rank = strategy_.rank;
  for (AdaptedLinear* layer : adapted_layers()) layer->fold_adapter();
  strategy_ = Strategy::frozen();
  merged_rank_ = rank;
}

StateDict SegModel::state() const {
  StateDict out;
  for (const NamedParameter& p : parameters()) {
    out[p.name] = StateRecord{p.tensor.shape(), std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())};
  }
  return out;
}

void SegModel::load_state(const StateDict& state, bool strict) {
  std::size_t matched = 0;
  for (NamedParameter& p : parameters()) {
    auto it = state.find(p.name);
    if (it == state.end()) {
      if (strict) throw ValidationError("state is missing parameter '" + p.name + "'");
      continue;
    }
    if (it->second.shape != p.tensor.shape()) {
      throw DimensionError("parameter '" + p.name + "' has shape " + shape_str(p.tensor.shape()) +
                           " but the state holds " + shape_str(it->second.shape));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    ++matched;
  }
  if (strict && matched != state.size()) {
    throw ValidationError("state holds " + std::to_string(state.size() - matched) + " unknown parameter record(s)");
  }
}

void SegModel::load_encoder_state(const StateDict& state) {
  for (NamedParameter& p : parameters()) {
    if (p.group != ParamGroup::EncoderBase) continue;
    auto it = state.find(p.name);
    if (it == state.end()) throw ValidationError("encoder state is missing parameter '" + p.name + "'");
    if (it->second.shape != p.tensor.shape()) {
      throw DimensionError("parameter '" + p.name + "' has shape " + shape_str(p.tensor.shape()) +
                           " but the state holds " + shape_str(it->second.shape));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
  }
}

}  // namespace floodlora
