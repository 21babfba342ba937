#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>

#include "floodlora/tensor.hpp"

namespace floodlora {

class Rng;

enum class LoraInit {
  ZeroB,       // A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0
  BothRandom,  // A, B ~ N(0, 0.02)
};

enum class LoraScaling {
  NominalRank,  // scale = alpha / r
  NumericRank,  // scale = alpha / numeric_rank(BA), falling back to alpha when BA = 0
};

std::string to_string(LoraInit init);
LoraInit parse_lora_init(const std::string& name);

// Low-rank update attached to one frozen [d_in, d_out] weight:
//   W' = W + scale * B A,  B [d_in, r], A [r, d_out].
struct LoraAdapter {
  Tensor B;
  Tensor A;
  std::size_t rank = 0;
  double alpha = 0.0;
  double dropout_p = 0.0;
  LoraInit init = LoraInit::ZeroB;
  LoraScaling scaling = LoraScaling::NominalRank;

  std::size_t d_in() const { return B.dim(0); }
  std::size_t d_out() const { return A.dim(1); }
  double scale() const;
  std::size_t parameter_count() const { return rank * (d_in() + d_out()); }
  // scale * B A as a constant [d_in, d_out] tensor.
  Tensor delta() const;
};

LoraAdapter init_adapter(std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha, double dropout_p,
                         LoraInit init, Rng& rng);

// Numerical rank of a row-major [rows, cols] matrix (SVD, relative tolerance).
std::size_t numeric_rank(const Tensor& matrix, double rel_tol = 1e-10);

// y = x W + b (+ scale * dropout(x) B A while an unmerged adapter is attached).
class AdaptedLinear {
 public:
  AdaptedLinear() = default;
  AdaptedLinear(Tensor weight, Tensor bias);

  // Base weights ~ U(-1/sqrt(d_in), 1/sqrt(d_in)); bias likewise.
  static AdaptedLinear create(std::size_t d_in, std::size_t d_out, bool with_bias, Rng& rng);

  std::size_t d_in() const { return weight_.dim(0); }
  std::size_t d_out() const { return weight_.dim(1); }

  Tensor forward(const Tensor& x, bool training = false, Rng* rng = nullptr) const;

  // Attaching freezes the base weight and bias.
  void attach(LoraAdapter adapter);
  void remove_adapter();
  bool has_adapter() const { return adapter_.has_value(); }
  const LoraAdapter& adapter() const;
  LoraAdapter& adapter();

  bool merged() const { return merged_; }
  void merge();
  void unmerge();
  // Merges (if needed) and drops the adapter, leaving a plain linear map.
  void fold_adapter();

  void set_base_trainable(bool trainable);

  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
  std::optional<LoraAdapter> adapter_;
  bool merged_ = false;
};

// Adaptation strategy for a segmentation model.
struct Strategy {
  enum class Kind { Full, Frozen, Lora };

  Kind kind = Kind::Frozen;
  std::size_t rank = 0;
  double alpha = 0.0;
  double dropout = 0.1;
  LoraInit init = LoraInit::ZeroB;
  LoraScaling scaling = LoraScaling::NominalRank;

  static Strategy full();
  static Strategy frozen();
  // alpha defaults to 2 * rank.
  static Strategy lora(std::size_t rank, std::optional<double> alpha = std::nullopt, double dropout = 0.1,
                       LoraInit init = LoraInit::ZeroB);

  bool is_lora() const { return kind == Kind::Lora; }
  // "full", "frozen", "lora-r8"
  std::string label() const;
};

std::string to_string(Strategy::Kind kind);
Strategy::Kind parse_strategy_kind(const std::string& name);

// Adapter checkpoint: "FLAD" magic, u64 manifest length, JSON manifest
// (d_in, d_out, r, alpha, dropout_p, init_mode), then B and A as raw
// little-endian 64-bit floats.
void save_adapter(std::ostream& out, const LoraAdapter& adapter);
LoraAdapter load_adapter(std::istream& in);

}  // namespace floodlora
