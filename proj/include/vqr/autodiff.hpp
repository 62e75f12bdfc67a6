#pragma once

// Dense 32-bit tensors and an eagerly evaluated computation graph with
// reverse-mode differentiation. One Graph is built per forward pass; the
// values of every node are computed as soon as the node is created.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vqr::ad {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an operation produces NaN or Inf. Carries the op name so a
// diverging training run can say where it blew up.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Tensor {
  Shape shape;
  std::vector<float> values;

  Tensor() = default;
  Tensor(Shape s, std::vector<float> v);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, float value);
  static Tensor scalar(float value);

  std::size_t size() const { return values.size(); }
  float item() const;
};

enum class OpKind : int {
  Leaf = 0,
  MatMul,
  Add,
  Sub,
  Mul,
  AddScalar,
  MulScalar,
  Concat,
  Slice,
  Reshape,
  Permute,
  Tanh,
  Sigmoid,
  Gelu,
  Softmax,
  LogSoftmax,
  Mean,
  Variance,
  Normalize,
  Gather,
  Pick,
  Sum,
};

const char* op_name(OpKind op);

struct OpAttrs {
  int axis = -1;                      // Softmax, Concat, Slice, Mean, Variance
  std::size_t start = 0;              // Slice
  std::size_t length = 0;             // Slice
  Shape shape;                        // Reshape
  std::vector<std::size_t> perm;      // Permute
  std::vector<std::int32_t> indices;  // Gather, Pick
  float scalar = 0.0f;                // AddScalar, MulScalar
  float epsilon = 1e-5f;              // Normalize
  bool transpose_b = false;           // MatMul
  // Softmax: optional allow-mask, 1 = allowed. Its length must divide the
  // input size; the mask repeats over leading elements.
  std::shared_ptr<const std::vector<std::uint8_t>> mask;
};

struct TensorNode {
  NodeId id = 0;
  Shape shape;
  std::vector<float> values;
  bool requires_grad = false;
  OpKind op = OpKind::Leaf;
  std::vector<NodeId> parents;
  OpAttrs attrs;
  std::vector<float> saved;  // per-op forward state needed by backward
};

// Result of a backward pass: gradient buffers for requires_grad nodes.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::vector<float>> grads) : grads_(std::move(grads)) {}

  bool has(NodeId id) const { return id < grads_.size() && !grads_[id].empty(); }
  const std::vector<float>& at(NodeId id) const;
  std::size_t count() const;

 private:
  std::vector<std::vector<float>> grads_;
};

class Graph {
 public:
  NodeId leaf(Tensor t, bool requires_grad = false);
  NodeId apply(OpKind op, std::span<const NodeId> inputs, const OpAttrs& attrs = {});

  const TensorNode& node(NodeId id) const;
  const std::vector<float>& value(NodeId id) const { return node(id).values; }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  Tensor tensor(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  // Drops every node created after the first `n`. Used by decoders that
  // rebuild a forward pass per step on top of bound parameters.
  void truncate(std::size_t n);

  // Gradients of a scalar-shaped `loss` with respect to every
  // requires_grad ancestor. Repeated calls return identical results.
  Gradients backward(NodeId loss) const;

  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId add_scalar(NodeId a, float s);
  NodeId mul_scalar(NodeId a, float s);
  NodeId concat(std::span<const NodeId> parts, int axis);
  NodeId slice(NodeId a, int axis, std::size_t start, std::size_t length);
  NodeId reshape(NodeId a, Shape shape);
  NodeId permute(NodeId a, std::vector<std::size_t> perm);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId gelu(NodeId a);
  NodeId softmax(NodeId a, int axis = -1);
  NodeId masked_softmax(NodeId a, std::shared_ptr<const std::vector<std::uint8_t>> mask);
  NodeId log_softmax(NodeId a);
  NodeId mean(NodeId a, int axis);
  NodeId variance(NodeId a, int axis);
  NodeId normalize(NodeId a, float epsilon);
  NodeId gather(NodeId table, std::vector<std::int32_t> indices);
  NodeId pick(NodeId a, std::vector<std::int32_t> indices);
  NodeId sum(NodeId a);

 private:
  std::vector<TensorNode> nodes_;
};

// Row-major C = A * B (or A * B^T) accumulated into C. Exposed for the
// inference paths that bypass the graph.
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool transpose_b);

}  // namespace vqr::ad
