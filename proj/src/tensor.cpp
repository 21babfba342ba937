#include "floodlora/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "floodlora/errors.hpp"
#include "tensor_internal.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace floodlora {

namespace {

#if defined(__GLIBC__)
// Tape buffers are large and short-lived; serving them from mmap faults
// fresh pages on every allocation.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf) throw StateError("mutable_data() is only valid on leaf tensors");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank does not match " + shape_str(s));
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for " + shape_str(s));
    offset = offset * s[axis] + i;
    ++axis;
  }
  return node_->data[offset];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf) throw StateError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

bool Tensor::is_leaf() const { return node_->is_leaf; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) throw StateError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

void Tensor::backward() const {
  if (numel() != 1) throw UsageError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!requires_grad()) throw UsageError("backward() on a tensor that is not on the tape");
  Tape(*this).run();
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

Tensor Tensor::clone_leaf(bool requires_grad) const { return Tensor(node_->shape, node_->data, requires_grad); }

const char* Tensor::op_name() const { return node_->op; }

// ---------------------------------------------------------------------------
// Grad mode

namespace {
thread_local bool grad_enabled = true;
}

bool GradMode::enabled() { return grad_enabled; }
void GradMode::set_enabled(bool enabled) { grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }
NoGradGuard::~NoGradGuard() { grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape(const Tensor& root) {
  if (!root.defined() || !root.requires_grad()) return;
  std::unordered_map<const Node*, std::size_t> position;
  struct Frame {
    Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  std::unordered_map<const Node*, NodePtr> owner;
  owner[root.node().get()] = root.node();
  stack.push_back({root.node().get(), 0});
  std::unordered_map<const Node*, bool> on_stack;
  on_stack[root.node().get()] = true;

  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      const NodePtr& parent = top.node->parents[top.next_parent++];
      if (!parent->requires_grad) continue;
      if (position.count(parent.get()) || on_stack[parent.get()]) continue;
      owner[parent.get()] = parent;
      on_stack[parent.get()] = true;
      stack.push_back({parent.get(), 0});
      continue;
    }
    Node* done = top.node;
    stack.pop_back();
    on_stack[done] = false;
    position[done] = nodes_.size();
    nodes_.push_back(owner[done]);
  }

  parent_pos_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (const NodePtr& parent : nodes_[i]->parents) {
      auto it = position.find(parent.get());
      if (it != position.end()) parent_pos_[i].push_back(it->second);
    }
  }
}

void Tape::run() {
  if (nodes_.empty()) return;
  NodePtr& root = nodes_.back();
  if (root->data.size() != 1) throw UsageError("backward() needs a scalar loss, got shape " + shape_str(root->shape));
  root->grad_buffer()[0] += 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = *nodes_[i];
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
  for (NodePtr& node : nodes_) {
    if (node->is_leaf) continue;
    node->parents.clear();
    node->backward = nullptr;
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

// ---------------------------------------------------------------------------
// Op plumbing

namespace detail {

Tensor make_op(Shape shape, std::vector<double> data, const char* op, std::initializer_list<Tensor> inputs,
               std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->is_leaf = false;
  node->op = op;
  bool needs = false;
  if (GradMode::enabled()) {
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_op(Shape shape, std::vector<double> data, const char* op, const std::vector<Tensor>& inputs,
               std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->is_leaf = false;
  node->op = op;
  bool needs = false;
  if (GradMode::enabled()) {
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

using detail::make_op;
using detail::require_same_shape;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

template <class F>
Tensor unary(const Tensor& x, const char* op, F&& forward, std::function<void(Node&)> backward) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return make_op(x.shape(), std::move(out), op, {x}, std::move(backward));
}

// Map from output linear index to input linear index for a permutation.
std::vector<std::size_t> permutation_map(const Shape& in_shape, const std::vector<std::size_t>& order) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[order[i]];
    step[i] = in_strides[order[i]];
  }
  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t linear = 0; linear < n; ++linear) {
    map[linear] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      offset += step[axis];
      if (counter[axis] < out_shape[axis]) break;
      offset -= step[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return map;
}

}  // namespace

// ---------------------------------------------------------------------------
// Structural ops

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op(std::move(shape), std::move(out), "reshape", {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& in_shape = x.shape();
  if (order.size() != in_shape.size()) {
    throw DimensionError("permute: order of length " + std::to_string(order.size()) + " for " + shape_str(in_shape));
  }
  std::vector<bool> seen(order.size(), false);
  for (std::size_t axis : order) {
    if (axis >= order.size() || seen[axis]) throw DimensionError("permute: invalid axis order");
    seen[axis] = true;
  }
  Shape out_shape(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) out_shape[i] = in_shape[order[i]];
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_map(in_shape, order));
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*map)[i]];
  return make_op(std::move(out_shape), std::move(out), "permute", {x}, [map](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*map)[i]] += self.grad[i];
  });
}

Tensor transpose_last2(const Tensor& x) {
  const std::size_t rank = x.rank();
  if (rank < 2) throw DimensionError("transpose_last2 needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> order(rank);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[rank - 1], order[rank - 2]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& part : parts) {
    const Shape& s = part.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = std::accumulate(first.begin(), first.begin() + axis, std::size_t{1}, std::multiplies<>());
  const std::size_t inner = std::accumulate(first.begin() + axis + 1, first.end(), std::size_t{1}, std::multiplies<>());
  auto widths = std::make_shared<std::vector<std::size_t>>();
  for (const Tensor& part : parts) widths->push_back(part.shape()[axis] * inner);
  const std::size_t row = out_shape[axis] * inner;

  std::vector<double> out(outer * row);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    const std::size_t w = (*widths)[k];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * w, w, out.begin() + o * row + col);
    }
    col += w;
  }
  return make_op(std::move(out_shape), std::move(out), "concat", parts, [widths, outer, row](Node& self) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      const std::size_t w = (*widths)[k];
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < w; ++j) g[o * w + j] += self.grad[o * row + col + j];
        }
      }
      col += w;
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4) {
    throw DimensionError("concat_channels expects [b,c,h,w] tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  return concat({a, b}, 1);
}

std::vector<Tensor> split_lastdim(const Tensor& x, std::size_t parts) {
  const Shape& s = x.shape();
  if (s.empty() || parts == 0 || s.back() % parts != 0) {
    throw ConfigError("split_lastdim: last extent of " + shape_str(s) + " not divisible by " + std::to_string(parts));
  }
  const std::size_t last = s.back();
  const std::size_t width = last / parts;
  const std::size_t rows = x.numel() / last;
  Shape out_shape = s;
  out_shape.back() = width;
  std::vector<Tensor> result;
  const auto in = x.data();
  for (std::size_t k = 0; k < parts; ++k) {
    std::vector<double> out(rows * width);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(in.begin() + r * last + k * width, width, out.begin() + r * width);
    }
    result.push_back(make_op(out_shape, std::move(out), "split", {x}, [k, width, last, rows](Node& self) {
      Node& p = *self.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < width; ++j) g[r * last + k * width + j] += self.grad[r * width + j];
      }
    }));
  }
  return result;
}

std::array<Tensor, 3> chunk3(const Tensor& x) {
  auto parts = split_lastdim(x, 3);
  return {parts[0], parts[1], parts[2]};
}

Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() == 0) throw DimensionError("select_rows on a scalar");
  const std::size_t width = x.shape().back();
  const std::size_t total = x.numel() / width;
  if (rows.empty()) throw UsageError("select_rows with no rows");
  std::vector<double> out(rows.size() * width);
  const auto in = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total) throw DimensionError("select_rows: row index out of range");
    std::copy_n(in.begin() + rows[i] * width, width, out.begin() + i * width);
  }
  auto picked = std::make_shared<std::vector<std::size_t>>(rows);
  return make_op({rows.size(), width}, std::move(out), "select_rows", {x}, [picked, width](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < picked->size(); ++i) {
      for (std::size_t j = 0; j < width; ++j) g[(*picked)[i] * width + j] += self.grad[i * width + j];
    }
  });
}

Tensor replace_rows(const Tensor& x, const Tensor& token, const std::vector<std::uint8_t>& mask) {
  if (x.rank() == 0) throw DimensionError("replace_rows on a scalar");
  const std::size_t width = x.shape().back();
  if (token.numel() != width) {
    throw DimensionError("replace_rows: token " + shape_str(token.shape()) + " vs rows of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / width;
  if (mask.size() != rows) throw DimensionError("replace_rows: mask length does not match row count");
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto t = token.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r]) std::copy(t.begin(), t.end(), out.begin() + r * width);
  }
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask);
  return make_op(x.shape(), std::move(out), "replace_rows", {x, token}, [m, width](Node& self) {
    Node& px = *self.parents[0];
    Node& pt = *self.parents[1];
    const std::size_t rows = m->size();
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        if ((*m)[r]) continue;
        for (std::size_t j = 0; j < width; ++j) g[r * width + j] += self.grad[r * width + j];
      }
    }
    if (pt.requires_grad) {
      auto& g = pt.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        if (!(*m)[r]) continue;
        for (std::size_t j = 0; j < width; ++j) g[j] += self.grad[r * width + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool plain = sa.size() == 2 && sb.size() == 2;
  const bool batched = sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0];
  if (!(plain || batched) || sa.back() != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t batch = plain ? 1 : sa[0];
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  Shape out_shape = plain ? Shape{m, n} : Shape{batch, m, n};
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMap A(a.data().data() + i * m * k, m, k);
    ConstMap B(b.data().data() + i * k * n, k, n);
    MutMap C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  return make_op(std::move(out_shape), std::move(out), "matmul", {a, b}, [batch, m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMap G(self.grad.data() + i * m * n, m, n);
      if (pa.requires_grad) {
        ConstMap B(pb.data.data() + i * k * n, k, n);
        MutMap GA(pa.grad_buffer().data() + i * m * k, m, k);
        GA.noalias() += G * B.transpose();
      }
      if (pb.requires_grad) {
        ConstMap A(pa.data.data() + i * m * k, m, k);
        MutMap GB(pb.grad_buffer().data() + i * k * n, k, n);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_op(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
    for (const NodePtr& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_op(a.shape(), std::move(out), "sub", {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_op(a.shape(), std::move(out), "mul", {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return make_op(a.shape(), std::move(out), "div", {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * pa.data[i] / (pb.data[i] * pb.data[i]);
    }
  });
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  if (!ok) throw DimensionError("add_broadcast: " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
  const std::size_t inner = b.numel();
  const std::size_t outer = a.numel() / inner;
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] += y[j];
  }
  return make_op(sa, std::move(out), "add_broadcast", {a, b}, [outer, inner](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) g[j] += self.grad[o * inner + j];
      }
    }
  });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary(x, "mul_scalar", [s](double v) { return v * s; }, [s](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](double v) { return v + s; }, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0.0 || std::isnan(v) ? v : 0.0; }, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.data[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  auto f = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  return unary(x, "sigmoid", f, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.data[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); }, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / p.data[i];
  });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.data[i];
  });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](double v) { return v * v; }, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * self.grad[i] * p.data[i];
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lo must not exceed hi");
  return unary(x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); }, [lo, hi](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.data[i] >= lo && p.data[i] <= hi) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const auto in = x.data();
  const double total = std::accumulate(in.begin(), in.end(), 0.0);
  return make_op({}, {total}, "sum", {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const auto in = x.data();
  const double n = static_cast<double>(in.size());
  const double avg = std::accumulate(in.begin(), in.end(), 0.0) / n;
  return make_op({}, {avg}, "mean", {x}, [n](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (double& v : g) v += self.grad[0] / n;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const auto x = a.data();
  const auto y = b.data();
  const double n = static_cast<double>(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += (x[i] - y[i]) * (x[i] - y[i]);
  return make_op({}, {total / n}, "mse", {a, b}, [n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double scale = 2.0 * self.grad[0] / n;
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (pa.data[i] - pb.data[i]);
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= scale * (pa.data[i] - pb.data[i]);
    }
  });
}

}  // namespace floodlora

// Heap blocks of a cache line or more start on a 64-byte boundary. Eigen
// peels unaligned heads off vectorized loops, so the summation order of a
// reduction would otherwise depend on where the allocator put its operand,
// and two runs with the same seed could differ in the last bit.
namespace {

constexpr std::size_t kHeapAlign = 64;

// malloc keeps its thread cache fast path; the block handed out is rounded
// up to the boundary and the raw pointer is stored just below it.
void* aligned_block(std::size_t n) noexcept {
  void* raw = std::malloc(n + kHeapAlign);
  if (raw == nullptr) return nullptr;
  const auto base = reinterpret_cast<std::uintptr_t>(raw) + sizeof(void*);
  void* p = reinterpret_cast<void*>((base + kHeapAlign - 1) & ~(kHeapAlign - 1));
  static_cast<void**>(p)[-1] = raw;
  return p;
}

void release_block(void* p) noexcept {
  if (p != nullptr) std::free(static_cast<void**>(p)[-1]);
}

void* aligned_block_or_throw(std::size_t n) {
  void* p = aligned_block(n);
  if (p == nullptr) throw std::bad_alloc();
  return p;
}

}  // namespace

void* operator new(std::size_t n) { return aligned_block_or_throw(n); }
void* operator new[](std::size_t n) { return aligned_block_or_throw(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return aligned_block(n); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return aligned_block(n); }
void operator delete(void* p) noexcept { release_block(p); }
void operator delete[](void* p) noexcept { release_block(p); }
void operator delete(void* p, std::size_t) noexcept { release_block(p); }
void operator delete[](void* p, std::size_t) noexcept { release_block(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { release_block(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { release_block(p); }
