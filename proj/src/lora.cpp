#include "floodlora/lora.hpp"

#include <Eigen/Core>
#include <Eigen/SVD>
#include "json.hpp"

#include <cmath>

#include "binary_io.hpp"
#include "floodlora/errors.hpp"
#include "floodlora/rng.hpp"

namespace floodlora {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

constexpr char kAdapterMagic[4] = {'F', 'L', 'A', 'D'};

Tensor uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

}  // namespace

std::string to_string(LoraInit init) { return init == LoraInit::ZeroB ? "zero_B" : "both_random"; }

LoraInit parse_lora_init(const std::string& name) {
  if (name == "zero_B") return LoraInit::ZeroB;
  if (name == "both_random") return LoraInit::BothRandom;
  throw ConfigError("unknown LoRA init mode '" + name + "' (expected zero_B or both_random)");
}

// ---------------------------------------------------------------------------

double LoraAdapter::scale() const {
  if (scaling == LoraScaling::NominalRank) return alpha / static_cast<double>(rank);
  const Tensor product = [&] {
    NoGradGuard guard;
    return matmul(B, A);
  }();
  const std::size_t r = numeric_rank(product);
  return alpha / static_cast<double>(r == 0 ? 1 : r);
}

Tensor LoraAdapter::delta() const {
  NoGradGuard guard;
  return mul_scalar(matmul(B, A), scale());
}

LoraAdapter init_adapter(std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha, double dropout_p,
                         LoraInit init, Rng& rng) {
  if (rank < 1 || rank > std::min(d_in, d_out)) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " outside [1, min(" + std::to_string(d_in) + ", " +
                      std::to_string(d_out) + ")]");
  }
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("LoRA dropout must lie in [0,1)");
  LoraAdapter adapter;
  adapter.rank = rank;
  adapter.alpha = alpha;
  adapter.dropout_p = dropout_p;
  adapter.init = init;
  if (init == LoraInit::ZeroB) {
    adapter.A = uniform_tensor({rank, d_out}, 1.0 / std::sqrt(static_cast<double>(d_in)), rng, true);
    adapter.B = Tensor::zeros({d_in, rank}, true);
  } else {
    adapter.B = normal_tensor({d_in, rank}, 0.02, rng, true);
    adapter.A = normal_tensor({rank, d_out}, 0.02, rng, true);
  }
  return adapter;
}

std::size_t numeric_rank(const Tensor& matrix, double rel_tol) {
  if (matrix.rank() != 2) throw DimensionError("numeric_rank expects a matrix, got " + shape_str(matrix.shape()));
  ConstMap m(matrix.data().data(), matrix.dim(0), matrix.dim(1));
  Eigen::BDCSVD<RowMat> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  std::size_t r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > rel_tol * sv(0)) ++r;
  }
  return r;
}

// ---------------------------------------------------------------------------

AdaptedLinear::AdaptedLinear(Tensor weight, Tensor bias) : weight_(std::move(weight)), bias_(std::move(bias)) {
  if (weight_.rank() != 2) throw DimensionError("linear weight must be [d_in, d_out], got " + shape_str(weight_.shape()));
  if (bias_.defined() && (bias_.rank() != 1 || bias_.dim(0) != weight_.dim(1))) {
    throw DimensionError("linear bias " + shape_str(bias_.shape()) + " does not match weight " +
                         shape_str(weight_.shape()));
  }
}

AdaptedLinear AdaptedLinear::create(std::size_t d_in, std::size_t d_out, bool with_bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  Tensor w = uniform_tensor({d_in, d_out}, bound, rng, true);
  Tensor b = with_bias ? uniform_tensor({d_out}, bound, rng, true) : Tensor();
  return AdaptedLinear(std::move(w), std::move(b));
}

Tensor AdaptedLinear::forward(const Tensor& x, bool training, Rng* rng) const {
  if (x.rank() == 0 || x.shape().back() != d_in()) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight_.shape()));
  }
  const std::size_t rows = x.numel() / d_in();
  const Tensor flat = x.rank() == 2 ? x : reshape(x, {rows, d_in()});
  Tensor y = matmul(flat, weight_);
  if (bias_.defined()) y = add_broadcast(y, bias_);
  if (adapter_ && !merged_) {
    const Tensor branch_in = dropout(flat, adapter_->dropout_p, training, rng);
    const Tensor low = matmul(matmul(branch_in, adapter_->B), adapter_->A);
    y = add(y, mul_scalar(low, adapter_->scale()));
  }
  if (x.rank() == 2) return y;
  Shape out_shape = x.shape();
  out_shape.back() = d_out();
  return reshape(y, std::move(out_shape));
}

void AdaptedLinear::attach(LoraAdapter adapter) {
  if (adapter_) throw StateError("layer already has a LoRA adapter");
  if (adapter.d_in() != d_in() || adapter.d_out() != d_out()) {
    throw DimensionError("adapter [" + std::to_string(adapter.d_in()) + "->" + std::to_string(adapter.d_out()) +
                         "] does not fit weight " + shape_str(weight_.shape()));
  }
  adapter_ = std::move(adapter);
  merged_ = false;
  set_base_trainable(false);
}

void AdaptedLinear::remove_adapter() {
  if (merged_) throw StateError("cannot remove a merged adapter; unmerge first or keep the merged weights");
  adapter_.reset();
}

const LoraAdapter& AdaptedLinear::adapter() const {
  if (!adapter_) throw StateError("layer has no LoRA adapter");
  return *adapter_;
}

LoraAdapter& AdaptedLinear::adapter() {
  if (!adapter_) throw StateError("layer has no LoRA adapter");
  return *adapter_;
}

void AdaptedLinear::merge() {
  if (!adapter_) throw StateError("merge: layer has no LoRA adapter");
  if (merged_) throw StateError("merge: adapter already merged");
  const Tensor d = adapter_->delta();
  auto w = weight_.mutable_data();
  const auto dv = d.data();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += dv[i];
  merged_ = true;
}

void AdaptedLinear::unmerge() {
  if (!adapter_) throw StateError("unmerge: layer has no LoRA adapter");
  if (!merged_) throw StateError("unmerge: adapter is not merged");
  const Tensor d = adapter_->delta();
  auto w = weight_.mutable_data();
  const auto dv = d.data();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= dv[i];
  merged_ = false;
}

void AdaptedLinear::fold_adapter() {
  if (!adapter_) throw StateError("fold_adapter: layer has no LoRA adapter");
  if (!merged_) merge();
  adapter_.reset();
  merged_ = false;
}

void AdaptedLinear::set_base_trainable(bool trainable) {
  weight_.set_requires_grad(trainable);
  if (bias_.defined()) bias_.set_requires_grad(trainable);
}

// ---------------------------------------------------------------------------

Strategy Strategy::full() {
  Strategy s;
  s.kind = Kind::Full;
  return s;
}

Strategy Strategy::frozen() { return Strategy{}; }

Strategy Strategy::lora(std::size_t rank, std::optional<double> alpha, double dropout, LoraInit init) {
  if (rank < 1) throw ConfigError("LoRA strategy needs rank >= 1");
  Strategy s;
  s.kind = Kind::Lora;
  s.rank = rank;
  s.alpha = alpha.value_or(2.0 * static_cast<double>(rank));
  s.dropout = dropout;
  s.init = init;
  return s;
}

std::string Strategy::label() const {
  if (kind == Kind::Lora) return "lora-r" + std::to_string(rank);
  return to_string(kind);
}

std::string to_string(Strategy::Kind kind) {
  switch (kind) {
    case Strategy::Kind::Full:
      return "full";
    case Strategy::Kind::Frozen:
      return "frozen";
    case Strategy::Kind::Lora:
      return "lora";
  }
  return "unknown";
}

Strategy::Kind parse_strategy_kind(const std::string& name) {
  if (name == "full") return Strategy::Kind::Full;
  if (name == "frozen") return Strategy::Kind::Frozen;
  if (name == "lora") return Strategy::Kind::Lora;
  throw UsageError("unknown strategy '" + name + "' (expected full, frozen or lora)");
}

// ---------------------------------------------------------------------------

void save_adapter(std::ostream& out, const LoraAdapter& adapter) {
  nlohmann::json manifest = {
      {"d_in", adapter.d_in()},       {"d_out", adapter.d_out()},
      {"r", adapter.rank},            {"alpha", adapter.alpha},
      {"dropout_p", adapter.dropout_p}, {"init_mode", to_string(adapter.init)},
  };
  out.write(kAdapterMagic, 4);
  binio::write_blob(out, manifest.dump());
  binio::write_f64(out, adapter.B.data());
  binio::write_f64(out, adapter.A.data());
  if (!out) throw std::runtime_error("failed writing adapter checkpoint");
}

LoraAdapter load_adapter(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kAdapterMagic, 4) != 0) {
    throw ValidationError("adapter checkpoint: bad magic");
  }
  std::string text;
  if (!binio::read_blob(in, text)) throw ValidationError("adapter checkpoint: truncated manifest");
  const auto manifest = nlohmann::json::parse(text);
  LoraAdapter adapter;
  const std::size_t d_in = manifest.at("d_in").get<std::size_t>();
  const std::size_t d_out = manifest.at("d_out").get<std::size_t>();
  adapter.rank = manifest.at("r").get<std::size_t>();
  adapter.alpha = manifest.at("alpha").get<double>();
  adapter.dropout_p = manifest.at("dropout_p").get<double>();
  adapter.init = parse_lora_init(manifest.at("init_mode").get<std::string>());
  if (adapter.rank < 1 || adapter.rank > std::min(d_in, d_out)) throw ValidationError("adapter checkpoint: bad rank");
  std::vector<double> b(d_in * adapter.rank);
  std::vector<double> a(adapter.rank * d_out);
  if (!binio::read_f64(in, b) || !binio::read_f64(in, a)) throw ValidationError("adapter checkpoint: truncated data");
  adapter.B = Tensor({d_in, adapter.rank}, std::move(b), true);
  adapter.A = Tensor({adapter.rank, d_out}, std::move(a), true);
  return adapter;
}

}  // namespace floodlora
