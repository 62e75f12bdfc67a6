#include "vqr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace vqr::ad {

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

std::size_t resolve_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit out;
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  out.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

void axpy_rows(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<float> transposed(const float* b, std::size_t rows, std::size_t cols) {
  std::vector<float> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = b[i * cols + j];
  return t;
}

// Output strides for a permutation: out index -> in offset.
std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

void permute_copy(const std::vector<float>& in, const Shape& in_shape,
                  const std::vector<std::size_t>& perm, std::vector<float>& out, bool inverse) {
  // Forward: out[idx] = in[offset(idx)] where out dim d = in dim perm[d].
  // Inverse: the scatter direction of the same mapping.
  const std::size_t rank = in_shape.size();
  Shape out_shape(rank);
  for (std::size_t d = 0; d < rank; ++d) out_shape[d] = in_shape[perm[d]];
  const auto in_strides = strides_of(in_shape);
  std::vector<std::size_t> step(rank);
  for (std::size_t d = 0; d < rank; ++d) step[d] = in_strides[perm[d]];
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = numel(in_shape);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    if (inverse) {
      out[offset] += in[flat];
    } else {
      out[flat] = in[offset];
    }
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        offset += step[d];
        break;
      }
      offset -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<float> v) : shape(std::move(s)), values(std::move(v)) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
  }
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
}

Tensor Tensor::zeros(Shape s) { return full(std::move(s), 0.0f); }

Tensor Tensor::full(Shape s, float value) {
  const auto n = numel(s);
  return Tensor(std::move(s), std::vector<float>(n, value));
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

float Tensor::item() const {
  if (values.size() != 1) throw ShapeError("item: tensor " + shape_str(shape) + " is not scalar");
  return values[0];
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::MulScalar: return "mul_scalar";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Reshape: return "reshape";
    case OpKind::Permute: return "permute";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Gelu: return "gelu";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Mean: return "mean";
    case OpKind::Variance: return "variance";
    case OpKind::Normalize: return "normalize";
    case OpKind::Gather: return "gather";
    case OpKind::Pick: return "pick";
    case OpKind::Sum: return "sum";
  }
  return "unknown";
}

const std::vector<float>& Gradients::at(NodeId id) const {
  if (!has(id)) throw std::out_of_range("gradients: no gradient for node " + std::to_string(id));
  return grads_[id];
}

std::size_t Gradients::count() const {
  return static_cast<std::size_t>(
      std::count_if(grads_.begin(), grads_.end(), [](const auto& g) { return !g.empty(); }));
}

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool transpose_b) {
  if (transpose_b) {
    const auto bt = transposed(b, n, k);
    axpy_rows(a, bt.data(), c, m, k, n);
  } else {
    axpy_rows(a, b, c, m, k, n);
  }
}

NodeId Graph::leaf(Tensor t, bool requires_grad) {
  if (t.values.size() != numel(t.shape) || t.shape.empty()) {
    throw ShapeError("leaf: malformed tensor " + shape_str(t.shape));
  }
  TensorNode n;
  n.id = nodes_.size();
  n.shape = std::move(t.shape);
  n.values = std::move(t.values);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return nodes_.back().id;
}

const TensorNode& Graph::node(NodeId id) const {
  if (id >= nodes_.size()) throw std::out_of_range("graph: node " + std::to_string(id) + " not in graph");
  return nodes_[id];
}

Tensor Graph::tensor(NodeId id) const {
  const auto& n = node(id);
  return Tensor(n.shape, n.values);
}

void Graph::truncate(std::size_t n) {
  if (n < nodes_.size()) nodes_.resize(n);
}

NodeId Graph::apply(OpKind op, std::span<const NodeId> inputs, const OpAttrs& attrs) {
  for (auto id : inputs) {
    if (id >= nodes_.size()) {
      throw std::out_of_range(std::string(op_name(op)) + ": input node " + std::to_string(id) +
                              " not in graph");
    }
  }
  auto need = [&](std::size_t count) {
    if (inputs.size() != count) {
      throw std::invalid_argument(std::string(op_name(op)) + ": expected " + std::to_string(count) +
                                  " inputs, got " + std::to_string(inputs.size()));
    }
  };

  TensorNode out;
  out.op = op;
  out.attrs = attrs;
  out.parents.assign(inputs.begin(), inputs.end());

  switch (op) {
    case OpKind::MatMul: {
      need(2);
      const auto& a = nodes_[inputs[0]];
      const auto& b = nodes_[inputs[1]];
      const bool tb = attrs.transpose_b;
      if (a.shape.size() == 2 && b.shape.size() == 2) {
        const std::size_t m = a.shape[0], k = a.shape[1];
        const std::size_t bk = tb ? b.shape[1] : b.shape[0];
        const std::size_t n = tb ? b.shape[0] : b.shape[1];
        if (k != bk) mismatch("matmul", a.shape, b.shape);
        out.shape = {m, n};
        out.values.assign(m * n, 0.0f);
        gemm(a.values.data(), b.values.data(), out.values.data(), m, k, n, tb);
      } else if (a.shape.size() == 3 && b.shape.size() == 3) {
        const std::size_t batch = a.shape[0], m = a.shape[1], k = a.shape[2];
        const std::size_t bk = tb ? b.shape[2] : b.shape[1];
        const std::size_t n = tb ? b.shape[1] : b.shape[2];
        if (b.shape[0] != batch || k != bk) mismatch("matmul", a.shape, b.shape);
        out.shape = {batch, m, n};
        out.values.assign(batch * m * n, 0.0f);
        for (std::size_t i = 0; i < batch; ++i) {
          gemm(a.values.data() + i * m * k, b.values.data() + i * k * n, out.values.data() + i * m * n,
               m, k, n, tb);
        }
      } else {
        mismatch("matmul", a.shape, b.shape);
      }
      break;
    }
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      need(2);
      const auto& a = nodes_[inputs[0]];
      const auto& b = nodes_[inputs[1]];
      const bool same = a.shape == b.shape;
      const bool bias = op == OpKind::Add && b.shape.size() == 1 && !a.shape.empty() &&
                        a.shape.back() == b.shape[0] && !same;
      if (!same && !bias) mismatch(op_name(op), a.shape, b.shape);
      out.shape = a.shape;
      out.values.resize(a.values.size());
      if (bias) {
        const std::size_t cols = b.shape[0];
        for (std::size_t i = 0; i < a.values.size(); ++i) out.values[i] = a.values[i] + b.values[i % cols];
      } else if (op == OpKind::Add) {
        for (std::size_t i = 0; i < a.values.size(); ++i) out.values[i] = a.values[i] + b.values[i];
      } else if (op == OpKind::Sub) {
        for (std::size_t i = 0; i < a.values.size(); ++i) out.values[i] = a.values[i] - b.values[i];
      } else {
        for (std::size_t i = 0; i < a.values.size(); ++i) out.values[i] = a.values[i] * b.values[i];
      }
      break;
    }
    case OpKind::AddScalar:
    case OpKind::MulScalar: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      out.shape = a.shape;
      out.values.resize(a.values.size());
      if (op == OpKind::AddScalar) {
        for (std::size_t i = 0; i < a.values.size(); ++i) out.values[i] = a.values[i] + attrs.scalar;
      } else {
        for (std::size_t i = 0; i < a.values.size(); ++i) out.values[i] = a.values[i] * attrs.scalar;
      }
      break;
    }
    case OpKind::Concat: {
      if (inputs.empty()) throw std::invalid_argument("concat: no inputs");
      const auto& first = nodes_[inputs[0]];
      const std::size_t axis = resolve_axis(attrs.axis, first.shape.size(), "concat");
      out.attrs.axis = static_cast<int>(axis);
      Shape shape = first.shape;
      std::size_t total = 0;
      for (auto id : inputs) {
        const auto& p = nodes_[id];
        if (p.shape.size() != shape.size()) mismatch("concat", first.shape, p.shape);
        for (std::size_t d = 0; d < shape.size(); ++d) {
          if (d != axis && p.shape[d] != shape[d]) mismatch("concat", first.shape, p.shape);
        }
        total += p.shape[axis];
      }
      shape[axis] = total;
      out.shape = shape;
      const auto split = split_at(shape, axis);
      out.values.resize(numel(shape));
      std::size_t offset = 0;
      for (auto id : inputs) {
        const auto& p = nodes_[id];
        const std::size_t chunk = p.shape[axis] * split.inner;
        for (std::size_t o = 0; o < split.outer; ++o) {
          std::copy_n(p.values.data() + o * chunk, chunk,
                      out.values.data() + o * split.extent * split.inner + offset);
        }
        offset += chunk;
      }
      break;
    }
    case OpKind::Slice: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      const std::size_t axis = resolve_axis(attrs.axis, a.shape.size(), "slice");
      out.attrs.axis = static_cast<int>(axis);
      if (attrs.length == 0 || attrs.start + attrs.length > a.shape[axis]) {
        throw ShapeError("slice: range [" + std::to_string(attrs.start) + ", " +
                         std::to_string(attrs.start + attrs.length) + ") invalid for shape " +
                         shape_str(a.shape));
      }
      out.shape = a.shape;
      out.shape[axis] = attrs.length;
      const auto split = split_at(a.shape, axis);
      const std::size_t chunk = attrs.length * split.inner;
      out.values.resize(split.outer * chunk);
      for (std::size_t o = 0; o < split.outer; ++o) {
        std::copy_n(a.values.data() + o * split.extent * split.inner + attrs.start * split.inner, chunk,
                    out.values.data() + o * chunk);
      }
      break;
    }
    case OpKind::Reshape: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      if (numel(attrs.shape) != a.values.size() || attrs.shape.empty()) {
        mismatch("reshape", a.shape, attrs.shape);
      }
      out.shape = attrs.shape;
      out.values = a.values;
      break;
    }
    case OpKind::Permute: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      auto sorted = attrs.perm;
      std::sort(sorted.begin(), sorted.end());
      std::vector<std::size_t> iota(a.shape.size());
      std::iota(iota.begin(), iota.end(), std::size_t{0});
      if (sorted != iota) {
        throw ShapeError("permute: invalid permutation for shape " + shape_str(a.shape));
      }
      out.shape.resize(a.shape.size());
      for (std::size_t d = 0; d < a.shape.size(); ++d) out.shape[d] = a.shape[attrs.perm[d]];
      out.values.resize(a.values.size());
      permute_copy(a.values, a.shape, attrs.perm, out.values, false);
      break;
    }
    case OpKind::Tanh:
    case OpKind::Sigmoid:
    case OpKind::Gelu: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      out.shape = a.shape;
      out.values.resize(a.values.size());
      for (std::size_t i = 0; i < a.values.size(); ++i) {
        const float x = a.values[i];
        if (op == OpKind::Tanh) {
          out.values[i] = std::tanh(x);
        } else if (op == OpKind::Sigmoid) {
          out.values[i] = 1.0f / (1.0f + std::exp(-x));
        } else {
          out.values[i] = 0.5f * x * (1.0f + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
        }
      }
      break;
    }
    case OpKind::Softmax:
    case OpKind::LogSoftmax: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      const int requested = op == OpKind::LogSoftmax ? -1 : attrs.axis;
      const std::size_t axis = resolve_axis(requested, a.shape.size(), op_name(op));
      out.attrs.axis = static_cast<int>(axis);
      const auto split = split_at(a.shape, axis);
      const std::uint8_t* mask = nullptr;
      std::size_t mask_len = 0;
      if (op == OpKind::Softmax && attrs.mask) {
        mask = attrs.mask->data();
        mask_len = attrs.mask->size();
        if (mask_len == 0 || a.values.size() % mask_len != 0) {
          throw ShapeError("softmax: mask of length " + std::to_string(mask_len) +
                           " does not tile shape " + shape_str(a.shape));
        }
      }
      out.shape = a.shape;
      out.values.assign(a.values.size(), 0.0f);
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t in = 0; in < split.inner; ++in) {
          const std::size_t base = o * split.extent * split.inner + in;
          auto at = [&](std::size_t j) { return base + j * split.inner; };
          auto allowed = [&](std::size_t j) { return !mask || mask[at(j) % mask_len] != 0; };
          float mx = -INFINITY;
          for (std::size_t j = 0; j < split.extent; ++j) {
            if (allowed(j)) mx = std::max(mx, a.values[at(j)]);
          }
          if (mx == -INFINITY) {
            throw std::invalid_argument("softmax: every position masked in a row");
          }
          float denom = 0.0f;
          for (std::size_t j = 0; j < split.extent; ++j) {
            if (allowed(j)) denom += std::exp(a.values[at(j)] - mx);
          }
          if (op == OpKind::Softmax) {
            for (std::size_t j = 0; j < split.extent; ++j) {
              if (allowed(j)) out.values[at(j)] = std::exp(a.values[at(j)] - mx) / denom;
            }
          } else {
            const float log_denom = std::log(denom);
            for (std::size_t j = 0; j < split.extent; ++j) {
              out.values[at(j)] = a.values[at(j)] - mx - log_denom;
            }
          }
        }
      }
      break;
    }
    case OpKind::Mean:
    case OpKind::Variance: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      const std::size_t axis = resolve_axis(attrs.axis, a.shape.size(), op_name(op));
      out.attrs.axis = static_cast<int>(axis);
      const auto split = split_at(a.shape, axis);
      out.shape = a.shape;
      out.shape[axis] = 1;
      out.values.assign(split.outer * split.inner, 0.0f);
      if (op == OpKind::Variance) out.saved.assign(split.outer * split.inner, 0.0f);
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t in = 0; in < split.inner; ++in) {
          const std::size_t base = o * split.extent * split.inner + in;
          double acc = 0.0;
          for (std::size_t j = 0; j < split.extent; ++j) acc += a.values[base + j * split.inner];
          const double mu = acc / static_cast<double>(split.extent);
          const std::size_t dst = o * split.inner + in;
          if (op == OpKind::Mean) {
            out.values[dst] = static_cast<float>(mu);
          } else {
            double sq = 0.0;
            for (std::size_t j = 0; j < split.extent; ++j) {
              const double d = a.values[base + j * split.inner] - mu;
              sq += d * d;
            }
            out.values[dst] = static_cast<float>(sq / static_cast<double>(split.extent));
            out.saved[dst] = static_cast<float>(mu);
          }
        }
      }
      break;
    }
    case OpKind::Normalize: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      if (attrs.epsilon <= 0.0f) throw std::invalid_argument("normalize: epsilon must be positive");
      const std::size_t d = a.shape.back();
      const std::size_t rows = a.values.size() / d;
      out.shape = a.shape;
      out.values.resize(a.values.size());
      out.saved.resize(rows * 2);  // (sigma, 1/(sigma+eps)) per row
      for (std::size_t r = 0; r < rows; ++r) {
        const float* x = a.values.data() + r * d;
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += x[j];
        const double mu = acc / static_cast<double>(d);
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += (x[j] - mu) * (x[j] - mu);
        const double sigma = std::sqrt(sq / static_cast<double>(d));
        const double inv = 1.0 / (sigma + attrs.epsilon);
        out.saved[2 * r] = static_cast<float>(sigma);
        out.saved[2 * r + 1] = static_cast<float>(inv);
        for (std::size_t j = 0; j < d; ++j) {
          out.values[r * d + j] = static_cast<float>((x[j] - mu) * inv);
        }
      }
      break;
    }
    case OpKind::Gather: {
      need(1);
      const auto& t = nodes_[inputs[0]];
      if (t.shape.size() != 2) throw ShapeError("gather: table must be 2-D, got " + shape_str(t.shape));
      if (attrs.indices.empty()) throw std::invalid_argument("gather: no indices");
      const std::size_t rows = t.shape[0], cols = t.shape[1];
      out.shape = {attrs.indices.size(), cols};
      out.values.resize(attrs.indices.size() * cols);
      for (std::size_t i = 0; i < attrs.indices.size(); ++i) {
        const auto idx = attrs.indices[i];
        if (idx < 0 || static_cast<std::size_t>(idx) >= rows) {
          throw std::out_of_range("gather: index " + std::to_string(idx) + " out of range for " +
                                  shape_str(t.shape));
        }
        std::copy_n(t.values.data() + static_cast<std::size_t>(idx) * cols, cols,
                    out.values.data() + i * cols);
      }
      break;
    }
    case OpKind::Pick: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      if (a.shape.size() != 2 || attrs.indices.size() != a.shape[0]) {
        throw ShapeError("pick: input " + shape_str(a.shape) + " with " +
                         std::to_string(attrs.indices.size()) + " indices");
      }
      const std::size_t cols = a.shape[1];
      out.shape = {a.shape[0]};
      out.values.resize(a.shape[0]);
      for (std::size_t i = 0; i < a.shape[0]; ++i) {
        const auto idx = attrs.indices[i];
        if (idx < 0 || static_cast<std::size_t>(idx) >= cols) {
          throw std::out_of_range("pick: index " + std::to_string(idx) + " out of range");
        }
        out.values[i] = a.values[i * cols + static_cast<std::size_t>(idx)];
      }
      break;
    }
    case OpKind::Sum: {
      need(1);
      const auto& a = nodes_[inputs[0]];
      double acc = 0.0;
      for (float v : a.values) acc += v;
      out.shape = {1};
      out.values = {static_cast<float>(acc)};
      break;
    }
    case OpKind::Leaf:
    default:
      throw std::invalid_argument("apply: unknown or non-applicable op kind " +
                                  std::to_string(static_cast<int>(op)));
  }

  for (float v : out.values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op_name(op)) + ": produced non-finite value (node " +
                           std::to_string(nodes_.size()) + ", shape " + shape_str(out.shape) + ")");
    }
  }
  for (auto id : inputs) out.requires_grad = out.requires_grad || nodes_[id].requires_grad;
  out.id = nodes_.size();
  nodes_.push_back(std::move(out));
  return nodes_.back().id;
}

Gradients Graph::backward(NodeId loss) const {
  const auto& ln = node(loss);
  if (ln.values.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(ln.shape));
  }
  std::vector<std::vector<float>> grads(loss + 1);
  if (!ln.requires_grad) return Gradients(std::move(grads));

  // Only nodes on a path from a requires_grad leaf to the loss need buffers.
  std::vector<char> live(loss + 1, 0);
  live[loss] = 1;
  for (std::size_t i = loss + 1; i-- > 0;) {
    if (!live[i]) continue;
    for (auto p : nodes_[i].parents) {
      if (nodes_[p].requires_grad) live[p] = 1;
    }
  }
  auto buffer = [&](NodeId id) -> std::vector<float>& {
    auto& g = grads[id];
    if (g.empty()) g.assign(nodes_[id].values.size(), 0.0f);
    return g;
  };
  grads[loss].assign(1, 1.0f);

  for (std::size_t i = loss + 1; i-- > 0;) {
    if (!live[i] || grads[i].empty()) continue;
    const TensorNode& n = nodes_[i];
    const std::vector<float>& g = grads[i];
    auto wants = [&](std::size_t k) { return live[n.parents[k]] != 0; };

    switch (n.op) {
      case OpKind::Leaf:
        break;
      case OpKind::MatMul: {
        const auto& a = nodes_[n.parents[0]];
        const auto& b = nodes_[n.parents[1]];
        const bool tb = n.attrs.transpose_b;
        const bool batched = a.shape.size() == 3;
        const std::size_t batch = batched ? a.shape[0] : 1;
        const std::size_t m = a.shape[batched ? 1 : 0];
        const std::size_t k = a.shape[batched ? 2 : 1];
        const std::size_t nn = n.shape.back();
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const float* gp = g.data() + bi * m * nn;
          const float* ap = a.values.data() + bi * m * k;
          const float* bp = b.values.data() + bi * k * nn;
          if (wants(0)) {
            float* da = buffer(n.parents[0]).data() + bi * m * k;
            // C = A B -> dA = G B^T ; C = A B^T -> dA = G B
            gemm(gp, bp, da, m, nn, k, !tb);
          }
          if (wants(1)) {
            float* db = buffer(n.parents[1]).data() + bi * k * nn;
            if (tb) {
              // dB (n x k) = G^T A
              const auto gt = transposed(gp, m, nn);
              gemm(gt.data(), ap, db, nn, m, k, false);
            } else {
              const auto at = transposed(ap, m, k);
              gemm(at.data(), gp, db, k, m, nn, false);
            }
          }
        }
        break;
      }
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        const auto& a = nodes_[n.parents[0]];
        const auto& b = nodes_[n.parents[1]];
        const bool bias = a.shape != b.shape;
        if (wants(0)) {
          auto& da = buffer(n.parents[0]);
          if (n.op == OpKind::Mul) {
            for (std::size_t j = 0; j < g.size(); ++j) da[j] += g[j] * b.values[j];
          } else {
            for (std::size_t j = 0; j < g.size(); ++j) da[j] += g[j];
          }
        }
        if (wants(1)) {
          auto& db = buffer(n.parents[1]);
          if (bias) {
            const std::size_t cols = b.shape[0];
            for (std::size_t j = 0; j < g.size(); ++j) db[j % cols] += g[j];
          } else if (n.op == OpKind::Add) {
            for (std::size_t j = 0; j < g.size(); ++j) db[j] += g[j];
          } else if (n.op == OpKind::Sub) {
            for (std::size_t j = 0; j < g.size(); ++j) db[j] -= g[j];
          } else {
            for (std::size_t j = 0; j < g.size(); ++j) db[j] += g[j] * a.values[j];
          }
        }
        break;
      }
      case OpKind::AddScalar:
      case OpKind::MulScalar: {
        if (!wants(0)) break;
        auto& da = buffer(n.parents[0]);
        const float s = n.op == OpKind::MulScalar ? n.attrs.scalar : 1.0f;
        for (std::size_t j = 0; j < g.size(); ++j) da[j] += g[j] * s;
        break;
      }
      case OpKind::Concat: {
        const auto axis = static_cast<std::size_t>(n.attrs.axis);
        const auto split = split_at(n.shape, axis);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          const auto& p = nodes_[n.parents[k]];
          const std::size_t chunk = p.shape[axis] * split.inner;
          if (wants(k)) {
            auto& dp = buffer(n.parents[k]);
            for (std::size_t o = 0; o < split.outer; ++o) {
              const float* src = g.data() + o * split.extent * split.inner + offset;
              float* dst = dp.data() + o * chunk;
              for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
            }
          }
          offset += chunk;
        }
        break;
      }
      case OpKind::Slice: {
        if (!wants(0)) break;
        const auto& a = nodes_[n.parents[0]];
        const auto axis = static_cast<std::size_t>(n.attrs.axis);
        const auto split = split_at(a.shape, axis);
        const std::size_t chunk = n.attrs.length * split.inner;
        auto& da = buffer(n.parents[0]);
        for (std::size_t o = 0; o < split.outer; ++o) {
          float* dst = da.data() + o * split.extent * split.inner + n.attrs.start * split.inner;
          const float* src = g.data() + o * chunk;
          for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
        }
        break;
      }
      case OpKind::Reshape: {
        if (!wants(0)) break;
        auto& da = buffer(n.parents[0]);
        for (std::size_t j = 0; j < g.size(); ++j) da[j] += g[j];
        break;
      }
      case OpKind::Permute: {
        if (!wants(0)) break;
        const auto& a = nodes_[n.parents[0]];
        permute_copy(g, a.shape, n.attrs.perm, buffer(n.parents[0]), true);
        break;
      }
      case OpKind::Tanh:
      case OpKind::Sigmoid:
      case OpKind::Gelu: {
        if (!wants(0)) break;
        const auto& a = nodes_[n.parents[0]];
        auto& da = buffer(n.parents[0]);
        for (std::size_t j = 0; j < g.size(); ++j) {
          const float y = n.values[j];
          float d;
          if (n.op == OpKind::Tanh) {
            d = 1.0f - y * y;
          } else if (n.op == OpKind::Sigmoid) {
            d = y * (1.0f - y);
          } else {
            const float x = a.values[j];
            const float inner = kGeluC * (x + kGeluA * x * x * x);
            const float t = std::tanh(inner);
            d = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluA * x * x);
          }
          da[j] += g[j] * d;
        }
        break;
      }
      case OpKind::Softmax:
      case OpKind::LogSoftmax: {
        if (!wants(0)) break;
        auto& da = buffer(n.parents[0]);
        const auto split = split_at(n.shape, static_cast<std::size_t>(n.attrs.axis));
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t in = 0; in < split.inner; ++in) {
            const std::size_t base = o * split.extent * split.inner + in;
            double acc = 0.0;
            if (n.op == OpKind::Softmax) {
              for (std::size_t j = 0; j < split.extent; ++j) {
                const std::size_t at = base + j * split.inner;
                acc += static_cast<double>(g[at]) * n.values[at];
              }
              for (std::size_t j = 0; j < split.extent; ++j) {
                const std::size_t at = base + j * split.inner;
                da[at] += n.values[at] * (g[at] - static_cast<float>(acc));
              }
            } else {
              for (std::size_t j = 0; j < split.extent; ++j) acc += g[base + j * split.inner];
              for (std::size_t j = 0; j < split.extent; ++j) {
                const std::size_t at = base + j * split.inner;
                da[at] += g[at] - std::exp(n.values[at]) * static_cast<float>(acc);
              }
            }
          }
        }
        break;
      }
      case OpKind::Mean:
      case OpKind::Variance: {
        if (!wants(0)) break;
        const auto& a = nodes_[n.parents[0]];
        auto& da = buffer(n.parents[0]);
        const auto split = split_at(a.shape, static_cast<std::size_t>(n.attrs.axis));
        const float inv_n = 1.0f / static_cast<float>(split.extent);
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t in = 0; in < split.inner; ++in) {
            const std::size_t base = o * split.extent * split.inner + in;
            const std::size_t src = o * split.inner + in;
            for (std::size_t j = 0; j < split.extent; ++j) {
              const std::size_t at = base + j * split.inner;
              if (n.op == OpKind::Mean) {
                da[at] += g[src] * inv_n;
              } else {
                da[at] += g[src] * 2.0f * (a.values[at] - n.saved[src]) * inv_n;
              }
            }
          }
        }
        break;
      }
      case OpKind::Normalize: {
        if (!wants(0)) break;
        auto& da = buffer(n.parents[0]);
        const std::size_t d = n.shape.back();
        const std::size_t rows = n.values.size() / d;
        for (std::size_t r = 0; r < rows; ++r) {
          const float sigma = n.saved[2 * r];
          const float inv = n.saved[2 * r + 1];
          const float* y = n.values.data() + r * d;
          const float* gr = g.data() + r * d;
          double g_mean = 0.0, g_dot_y = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            g_mean += gr[j];
            g_dot_y += static_cast<double>(gr[j]) * y[j];
          }
          g_mean /= static_cast<double>(d);
          // y = (x - mu) * inv, so (x - mu) = y / inv.
          // dx = inv * (g - mean(g)) - (x - mu) * inv^2 / (d * sigma) * sum(g * (x - mu))
          //    = inv * (g - mean(g)) - y * inv / (d * sigma) * sum(g * y) / inv
          const double coeff = sigma > 0.0f ? g_dot_y / (static_cast<double>(d) * sigma) : 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            da[r * d + j] += static_cast<float>(inv * (gr[j] - g_mean) - y[j] * coeff);
          }
        }
        break;
      }
      case OpKind::Gather: {
        if (!wants(0)) break;
        auto& dt = buffer(n.parents[0]);
        const std::size_t cols = n.shape[1];
        for (std::size_t r = 0; r < n.attrs.indices.size(); ++r) {
          float* dst = dt.data() + static_cast<std::size_t>(n.attrs.indices[r]) * cols;
          const float* src = g.data() + r * cols;
          for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
        }
        break;
      }
      case OpKind::Pick: {
        if (!wants(0)) break;
        auto& da = buffer(n.parents[0]);
        const std::size_t cols = nodes_[n.parents[0]].shape[1];
        for (std::size_t r = 0; r < n.attrs.indices.size(); ++r) {
          da[r * cols + static_cast<std::size_t>(n.attrs.indices[r])] += g[r];
        }
        break;
      }
      case OpKind::Sum: {
        if (!wants(0)) break;
        auto& da = buffer(n.parents[0]);
        for (auto& v : da) v += g[0];
        break;
      }
    }
  }
  return Gradients(std::move(grads));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_b) {
  OpAttrs at;
  at.transpose_b = transpose_b;
  const NodeId in[] = {a, b};
  return apply(OpKind::MatMul, in, at);
}

NodeId Graph::add(NodeId a, NodeId b) {
  const NodeId in[] = {a, b};
  return apply(OpKind::Add, in);
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const NodeId in[] = {a, b};
  return apply(OpKind::Sub, in);
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const NodeId in[] = {a, b};
  return apply(OpKind::Mul, in);
}

NodeId Graph::add_scalar(NodeId a, float s) {
  OpAttrs at;
  at.scalar = s;
  const NodeId in[] = {a};
  return apply(OpKind::AddScalar, in, at);
}

NodeId Graph::mul_scalar(NodeId a, float s) {
  OpAttrs at;
  at.scalar = s;
  const NodeId in[] = {a};
  return apply(OpKind::MulScalar, in, at);
}

NodeId Graph::concat(std::span<const NodeId> parts, int axis) {
  OpAttrs at;
  at.axis = axis;
  return apply(OpKind::Concat, parts, at);
}

NodeId Graph::slice(NodeId a, int axis, std::size_t start, std::size_t length) {
  OpAttrs at;
  at.axis = axis;
  at.start = start;
  at.length = length;
  const NodeId in[] = {a};
  return apply(OpKind::Slice, in, at);
}

NodeId Graph::reshape(NodeId a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  const NodeId in[] = {a};
  return apply(OpKind::Reshape, in, at);
}

NodeId Graph::permute(NodeId a, std::vector<std::size_t> perm) {
  OpAttrs at;
  at.perm = std::move(perm);
  const NodeId in[] = {a};
  return apply(OpKind::Permute, in, at);
}

NodeId Graph::tanh(NodeId a) {
  const NodeId in[] = {a};
  return apply(OpKind::Tanh, in);
}

NodeId Graph::sigmoid(NodeId a) {
  const NodeId in[] = {a};
  return apply(OpKind::Sigmoid, in);
}

NodeId Graph::gelu(NodeId a) {
  const NodeId in[] = {a};
  return apply(OpKind::Gelu, in);
}

NodeId Graph::softmax(NodeId a, int axis) {
  OpAttrs at;
  at.axis = axis;
  const NodeId in[] = {a};
  return apply(OpKind::Softmax, in, at);
}

NodeId Graph::masked_softmax(NodeId a, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  OpAttrs at;
  at.axis = -1;
  at.mask = std::move(mask);
  const NodeId in[] = {a};
  return apply(OpKind::Softmax, in, at);
}

NodeId Graph::log_softmax(NodeId a) {
  const NodeId in[] = {a};
  return apply(OpKind::LogSoftmax, in);
}

NodeId Graph::mean(NodeId a, int axis) {
  OpAttrs at;
  at.axis = axis;
  const NodeId in[] = {a};
  return apply(OpKind::Mean, in, at);
}

NodeId Graph::variance(NodeId a, int axis) {
  OpAttrs at;
  at.axis = axis;
  const NodeId in[] = {a};
  return apply(OpKind::Variance, in, at);
}

NodeId Graph::normalize(NodeId a, float epsilon) {
  OpAttrs at;
  at.epsilon = epsilon;
  const NodeId in[] = {a};
  return apply(OpKind::Normalize, in, at);
}

NodeId Graph::gather(NodeId table, std::vector<std::int32_t> indices) {
  OpAttrs at;
  at.indices = std::move(indices);
  const NodeId in[] = {table};
  return apply(OpKind::Gather, in, at);
}

NodeId Graph::pick(NodeId a, std::vector<std::int32_t> indices) {
  OpAttrs at;
  at.indices = std::move(indices);
  const NodeId in[] = {a};
  return apply(OpKind::Pick, in, at);
}

NodeId Graph::sum(NodeId a) {
  const NodeId in[] = {a};
  return apply(OpKind::Sum, in);
}

}  // namespace vqr::ad
