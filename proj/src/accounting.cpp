#include "floodlora/accounting.hpp"

namespace floodlora {

namespace {

std::size_t linear_count(std::size_t d_in, std::size_t d_out) { return d_in * d_out + d_out; }

std::size_t conv_count(std::size_t cin, std::size_t cout, std::size_t k) { return cin * cout * k * k + cout; }

void push(ParamCountReport& report, std::string layer, std::size_t total, bool trainable) {
  report.items.push_back({std::move(layer), total, trainable ? total : 0});
  if (trainable) report.trainable += total;
}

}  // namespace

std::size_t decoder_parameter_count(std::size_t d) {
  return conv_count(d, d / 2, 3) + conv_count(d / 2, d / 4, 3) + conv_count(d / 4, d / 8, 2) +
         conv_count(d / 8, d / 16, 2) + conv_count(d / 16, d / 32, 2) + conv_count(2 * (d / 32), 1, 3);
}

std::size_t adapter_parameter_count(const EncoderConfig& c, std::size_t rank) {
  const std::size_t d = c.d_model;
  return c.n_layers * (rank * (d + 3 * d) + rank * (d + d));
}

const char* paper_table_note() {
  return "note: these counts apply LoRA to to_qkv and to_out only. Reference counts for the Clay encoder grow "
         "faster per rank, which implies further adapted matrices inside it; those absolute values are not "
         "reproduced here.";
}

ParamCountReport count_trainable(const EncoderConfig& c, const Strategy& strategy) {
  c.validate();
  ParamCountReport r;
  r.strategy = strategy.label();
  const bool base = strategy.kind == Strategy::Kind::Full;
  const bool lora = strategy.is_lora();
  const std::size_t d = c.d_model;
  const std::size_t hidden = d * c.mlp_ratio;

  auto encoder_item = [&](const std::string& name, std::size_t n) {
    push(r, name, n, base);
    r.encoder_base += n;
  };
  encoder_item("encoder.patch_proj", linear_count(c.patch_dim(), d));
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string prefix = "encoder.blocks." + std::to_string(i);
    encoder_item(prefix + ".norm1", 2 * d);
    encoder_item(prefix + ".attn.to_qkv", linear_count(d, 3 * d));
    if (lora) {
      push(r, prefix + ".attn.to_qkv.lora", strategy.rank * (d + 3 * d), true);
      r.adapter += strategy.rank * (d + 3 * d);
    }
    encoder_item(prefix + ".attn.to_out", linear_count(d, d));
    if (lora) {
      push(r, prefix + ".attn.to_out.lora", strategy.rank * (d + d), true);
      r.adapter += strategy.rank * (d + d);
    }
    encoder_item(prefix + ".norm2", 2 * d);
    encoder_item(prefix + ".mlp.fc1", linear_count(d, hidden));
    encoder_item(prefix + ".mlp.fc2", linear_count(hidden, d));
  }
  encoder_item("encoder.final_norm", 2 * d);

  const std::pair<const char*, std::size_t> decoder[] = {
      {"decoder.conv1", conv_count(d, d / 2, 3)},        {"decoder.conv2", conv_count(d / 2, d / 4, 3)},
      {"decoder.deconv1", conv_count(d / 4, d / 8, 2)},  {"decoder.deconv2", conv_count(d / 8, d / 16, 2)},
      {"decoder.deconv3", conv_count(d / 16, d / 32, 2)}, {"decoder.fusion", conv_count(2 * (d / 32), 1, 3)}};
  for (const auto& [name, n] : decoder) {
    push(r, name, n, true);
    r.decoder += n;
  }
  return r;
}

ParamCountReport count_trainable(const SegModel& model) {
  ParamCountReport r;
  r.strategy = model.strategy().label();
  for (const NamedParameter& p : model.parameters()) {
    const std::size_t n = p.tensor.numel();
    const bool trainable = p.tensor.requires_grad();
    const std::string layer = p.name.substr(0, p.name.rfind('.'));
    if (!r.items.empty() && r.items.back().layer == layer) {
      r.items.back().total += n;
      r.items.back().trainable += trainable ? n : 0;
    } else {
      r.items.push_back({layer, n, trainable ? n : 0});
    }
    if (trainable) r.trainable += n;
    switch (p.group) {
      case ParamGroup::EncoderBase:
        r.encoder_base += n;
        break;
      case ParamGroup::Adapter:
        r.adapter += n;
        break;
      case ParamGroup::Decoder:
        r.decoder += n;
        break;
    }
  }
  return r;
}

MemoryEstimate estimate_training_memory(const EncoderConfig& c, const Strategy& strategy, std::size_t batch,
                                        std::size_t bytes) {
  const ParamCountReport counts = count_trainable(c, strategy);
  const double b = static_cast<double>(bytes);
  MemoryEstimate m;
  m.parameter_bytes = static_cast<double>(counts.total()) * b;
  m.gradient_bytes = static_cast<double>(counts.trainable) * b;
  m.optimizer_bytes = 2.0 * static_cast<double>(counts.trainable) * b;

  const double n = static_cast<double>(c.tokens());
  const double d = static_cast<double>(c.d_model);
  const double heads = static_cast<double>(c.n_heads);
  const double hidden = d * static_cast<double>(c.mlp_ratio);
  // Saved tensors per block and snapshot: norms, qkv, attention scores and
  // probabilities, head outputs, projections, MLP hidden pre/post ReLU.
  const double per_block = n * (2.0 * d + 3.0 * d + d + d + 2.0 * hidden + d) + 2.0 * heads * n * n;
  double activations = 0.0;
  if (strategy.kind != Strategy::Kind::Frozen) activations += static_cast<double>(c.n_layers) * per_block + n * d;
  // Decoder feature maps at each stage, both snapshots.
  const double g = static_cast<double>(c.grid());
  const double decoder_maps = g * g * (d / 2 + d / 4) + 4 * g * g * (d / 8) + 16 * g * g * (d / 16) +
                              64 * g * g * (d / 32) * 2.0;
  activations += decoder_maps + 64 * g * g;  // plus logits
  m.activation_bytes = 2.0 * static_cast<double>(batch) * activations * b;
  return m;
}

}  // namespace floodlora
