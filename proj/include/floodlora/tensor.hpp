#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Nodes produced by an op
// while grad mode is enabled and at least one input requires a gradient keep
// references to their inputs plus a backward closure; everything else is a
// constant. Calling backward() on a scalar builds a Tape (topological order of
// the reachable graph), propagates gradients, and releases the interior graph.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace floodlora {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require it.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // In-place access for parameter updates. Only valid on leaves.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  void backward() const;

  // New leaf sharing no history; copies the values.
  Tensor detach() const;
  Tensor clone_leaf(bool requires_grad) const;

  const char* op_name() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Thread-local switch; when disabled, ops never record history.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Topologically ordered view of the graph feeding a root tensor. Only nodes
// that require gradients are recorded.
class Tape {
 public:
  explicit Tape(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t i) const { return nodes_[i]->op; }
  // Positions (within this tape) of node i's recorded parents.
  const std::vector<std::size_t>& parents_of(std::size_t i) const { return parent_pos_[i]; }

  // Seeds the root with 1, runs every backward closure once in reverse order,
  // then releases interior history.
  void run();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  std::vector<std::vector<std::size_t>> parent_pos_;
};

// ---- structural ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose_last2(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor concat_channels(const Tensor& a, const Tensor& b);
std::vector<Tensor> split_lastdim(const Tensor& x, std::size_t parts);
std::array<Tensor, 3> chunk3(const Tensor& x);
// Rows of x viewed as [rows, last]; output [indices.size(), last].
Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows);
// Rows of x (viewed as [rows, last]) with mask[row] != 0 replaced by token.
Tensor replace_rows(const Tensor& x, const Tensor& token, const std::vector<std::uint8_t>& mask);

// ---- linear algebra ----
// [m,k]x[k,n] or batched [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
// b's shape must equal the trailing dimensions of a; broadcast over the rest.
Tensor add_broadcast(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);
// Gradient passes only where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// ---- neural-network primitives (tensor_nn.cpp) ----
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Inverted dropout. Identity (same handle) when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, Rng* rng);

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x [b,cin,h,w], weight [cout,cin,k,k], bias [cout] or undefined.
// Cross-correlation, no kernel flip.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dGeometry geom);
// Transposed convolution. x [b,cin,h,w], weight [cin,cout,k,k].
// Output extent (h-1)*stride - 2*padding + k.
Tensor deconv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dGeometry geom);

}  // namespace floodlora
