#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "floodlora/lora.hpp"
#include "floodlora/tensor.hpp"

namespace floodlora {

class Rng;

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t patch_size = 8;
  std::size_t in_channels = 4;
  std::size_t image_size = 64;
  std::size_t mlp_ratio = 4;

  // d_model 64, 4 heads, 4 layers, 64x64 input, 8x8 token grid.
  static EncoderConfig desk();
  // d_model 768, 12 heads, 12 layers, 512x512 input, 64x64 token grid.
  static EncoderConfig paper();

  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return in_channels * patch_size * patch_size; }

  // Throws ConfigError on divisibility violations.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;  // dropout stream; required when training with LoRA dropout
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams create(std::size_t width);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct AttentionBlock {
  LayerNormParams norm1;
  AdaptedLinear to_qkv;  // d_model -> 3 d_model
  AdaptedLinear to_out;  // d_model -> d_model
  LayerNormParams norm2;
  AdaptedLinear mlp_in;
  AdaptedLinear mlp_out;
};

struct AttentionOutput {
  Tensor out;      // [b, n, d_model]
  Tensor weights;  // [b * n_heads, n, n], rows sum to 1
};

// Multi-head scaled dot-product self-attention (no residual, no norm).
AttentionOutput attention_forward(const AttentionBlock& block, const Tensor& x, std::size_t n_heads,
                                  const ForwardMode& mode);

// Pre-norm transformer block: x + attn(norm1(x)), then + mlp(norm2(.)).
Tensor block_forward(const AttentionBlock& block, const Tensor& x, std::size_t n_heads, const ForwardMode& mode);

// Fixed 2-D sinusoidal position encoding [grid*grid, d_model].
Tensor sincos_position_encoding(std::size_t grid, std::size_t d_model);

// Rows to replace with a learned token before position encoding is added.
struct TokenMask {
  std::vector<std::uint8_t> rows;  // length b * tokens, row-major over (batch, token)
  Tensor token;                    // [d_model]
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, Rng& rng);

  const EncoderConfig& config() const { return config_; }

  // [b,C,H,W] -> [b, tokens, C*P*P]; token t = row-major grid cell, features
  // ordered (channel, dy, dx).
  Tensor patchify(const Tensor& x) const;
  // Linear projection of patches plus position encoding: [b, tokens, d_model].
  Tensor patch_embed(const Tensor& x) const;
  Tensor encode(const Tensor& x, const ForwardMode& mode, const TokenMask* mask = nullptr) const;

  const Tensor& position_encoding() const { return position_; }
  AdaptedLinear& patch_proj() { return patch_proj_; }
  const AdaptedLinear& patch_proj() const { return patch_proj_; }
  std::vector<AttentionBlock>& blocks() { return blocks_; }
  const std::vector<AttentionBlock>& blocks() const { return blocks_; }
  LayerNormParams& final_norm() { return final_norm_; }
  const LayerNormParams& final_norm() const { return final_norm_; }

 private:
  void check_input(const Tensor& x) const;

  EncoderConfig config_;
  AdaptedLinear patch_proj_;
  std::vector<AttentionBlock> blocks_;
  LayerNormParams final_norm_;
  Tensor position_;
};

struct ConvLayer {
  Tensor weight;  // conv: [cout,cin,k,k]; transposed: [cin,cout,k,k]
  Tensor bias;
  Conv2dGeometry geom;
  bool transposed = false;

  Tensor forward(const Tensor& x) const {
    return transposed ? deconv2d(x, weight, bias, geom) : conv2d(x, weight, bias, geom);
  }
};

// Channel schedule d -> d/2 -> d/4 (3x3 convs) -> d/8 -> d/16 -> d/32
// (stride-2 2x2 deconvs), ReLU after each; fusion 3x3 conv on the two
// concatenated snapshot outputs -> 1 logit channel.
class SegDecoder {
 public:
  SegDecoder() = default;
  SegDecoder(std::size_t d_model, std::size_t grid, Rng& rng);

  // z [b, grid*grid, d_model] -> [b, d_model/32, 8*grid, 8*grid]
  Tensor decode(const Tensor& z) const;
  // -> logits [b, 1, 8*grid, 8*grid]
  Tensor decode_and_fuse(const Tensor& z_pre, const Tensor& z_post) const;

  std::size_t grid() const { return grid_; }
  std::size_t d_model() const { return d_model_; }

  std::vector<std::pair<std::string, ConvLayer*>> layers();
  std::vector<std::pair<std::string, const ConvLayer*>> layers() const;

 private:
  std::size_t d_model_ = 0;
  std::size_t grid_ = 0;
  ConvLayer conv1_, conv2_, deconv1_, deconv2_, deconv3_, fusion_;
};

enum class ParamGroup { EncoderBase, Adapter, Decoder };

struct NamedParameter {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

struct StateRecord {
  Shape shape;
  std::vector<double> values;
};
using StateDict = std::map<std::string, StateRecord>;

class SegModel {
 public:
  // Base weights come from stream (seed, init); adapters from (seed,
  // adapter_init), so two models with the same seed share base weights
  // regardless of strategy.
  SegModel(const EncoderConfig& config, const Strategy& strategy, std::uint64_t seed);

  const EncoderConfig& config() const { return encoder_.config(); }
  const Strategy& strategy() const { return strategy_; }
  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  SegDecoder& decoder() { return decoder_; }
  const SegDecoder& decoder() const { return decoder_; }

  // pre, post: [b, C, H, W] -> logits [b, 1, H, W]. No sigmoid.
  Tensor forward(const Tensor& pre, const Tensor& post, const ForwardMode& mode = {}) const;

  // Every parameter, in a stable order, with adapter factors included.
  std::vector<NamedParameter> parameters() const;
  std::vector<Tensor> trainable_parameters() const;
  std::vector<AdaptedLinear*> adapted_layers();
  std::vector<const AdaptedLinear*> adapted_layers() const;

  // Fold every adapter into its base weight and drop it; the strategy becomes
  // frozen. Throws StateError when the model is not a LoRA model.
  void merge_adapters();
  bool merged_from_lora() const { return merged_rank_ > 0; }
  std::size_t merged_from_rank() const { return merged_rank_; }

  StateDict state() const;
  // Copies values into matching parameters. When strict, every parameter
  // must be present and no extra records may exist.
  void load_state(const StateDict& state, bool strict = true);
  // Copies only encoder base weights ("encoder." records without adapters).
  void load_encoder_state(const StateDict& state);

  // Used by checkpoint loading.
  void set_merged_from_rank(std::size_t rank) { merged_rank_ = rank; }
  void set_strategy_label(const Strategy& strategy) { strategy_ = strategy; }

 private:
  void apply_strategy(Rng& adapter_rng);

  Encoder encoder_;
  SegDecoder decoder_;
  Strategy strategy_;
  std::size_t merged_rank_ = 0;
};

}  // namespace floodlora
