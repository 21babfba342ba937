#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "floodlora/lora.hpp"
#include "floodlora/model.hpp"

namespace floodlora {

struct ParamCountItem {
  std::string layer;
  std::size_t total = 0;
  std::size_t trainable = 0;
};

struct ParamCountReport {
  std::string strategy;
  std::size_t encoder_base = 0;  // all encoder weights, trainable or not
  std::size_t adapter = 0;
  std::size_t decoder = 0;
  std::size_t trainable = 0;
  std::vector<ParamCountItem> items;

  std::size_t total() const { return encoder_base + adapter + decoder; }
};

// Closed-form counts from the architecture alone; never allocates weights.
ParamCountReport count_trainable(const EncoderConfig& config, const Strategy& strategy);
// Counts read off an instantiated model's requires_grad flags.
ParamCountReport count_trainable(const SegModel& model);

std::size_t decoder_parameter_count(std::size_t d_model);
// r (d_in + d_out) summed over to_qkv and to_out of every block.
std::size_t adapter_parameter_count(const EncoderConfig& config, std::size_t rank);

// Printed next to paper-preset counts.
const char* paper_table_note();

struct MemoryEstimate {
  double parameter_bytes = 0.0;
  double gradient_bytes = 0.0;
  double optimizer_bytes = 0.0;
  double activation_bytes = 0.0;

  double total() const { return parameter_bytes + gradient_bytes + optimizer_bytes + activation_bytes; }
};

// Rough training-memory bill: weights, gradients and Adam moments for the
// trainable set, plus the activations a reverse pass keeps alive. Frozen
// strategies keep no encoder activations for backward.
MemoryEstimate estimate_training_memory(const EncoderConfig& config, const Strategy& strategy, std::size_t batch_size,
                                        std::size_t bytes_per_value = 4);

}  // namespace floodlora
