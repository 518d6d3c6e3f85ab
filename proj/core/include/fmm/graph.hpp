#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fmm/tensor.hpp"

namespace fmm {

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  mul,
  sub,
  relu,
  gelu,
  sigmoid,
  softmax,
  layernorm,
  conv2d,
  avgpool2d,
  mean,
  sum,
  concat,
  slice,
  transpose,
  embed_lookup,
  reshape,
  scale,
  bce_logits,
};

std::string_view op_name(OpKind kind);
// Throws ValueError for names that are not an op kind.
OpKind parse_op_kind(std::string_view name);

// Per-op arguments. Only the fields relevant to a kind are read:
//   mean/sum     axis (kAllAxes reduces everything to shape [1])
//   concat       axis
//   slice        axis, begin, end
//   conv2d       stride, padding
//   avgpool2d    kernel, stride
//   layernorm    epsilon
//   scale        scalar
//   reshape      shape
//   embed_lookup indices
struct OpAttrs {
  static constexpr int kAllAxes = -1;

  int axis = kAllAxes;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t kernel = 0;
  double scalar = 1.0;
  double epsilon = 1e-5;
  Shape shape;
  std::vector<std::size_t> indices;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph& graph() const;
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

using GradientMap = std::map<std::string, Tensor>;

/// Tape of operations recorded in insertion order. Insertion order is a
/// topological order because every node's inputs exist before it does.
class Graph {
 public:
  // A non-differentiable graph evaluates eagerly and keeps no backward state.
  explicit Graph(bool differentiable = true) : differentiable_(differentiable) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Named leaf. Trainable leaves appear in the gradient map under their name.
  Var parameter(const std::string& name, Tensor value, bool trainable);

  Var apply(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});
  Var apply(OpKind kind, std::initializer_list<Var> inputs, const OpAttrs& attrs = {}) {
    return apply(kind, std::span<const Var>(inputs.begin(), inputs.size()), attrs);
  }

  const Tensor& value(Var v) const;
  OpKind kind(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  bool differentiable() const { return differentiable_; }

  // Reverse-mode gradients of a single-element loss with respect to every
  // trainable leaf reachable from it. Frozen leaves and constants are absent.
  GradientMap backward(Var loss) const;

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    OpAttrs attrs;
    Tensor value;
    Tensor aux;
    std::vector<double> stats;
    std::string name;
    bool requires_grad = false;
  };

  template <class T>
  GradientMap backward_impl(std::size_t loss_id) const;

  bool differentiable_;
  std::vector<Node> nodes_;
};

/// Graph-free evaluation of a single op.
Tensor apply_op(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var sub(Var a, Var b);
Var relu(Var x);
Var gelu(Var x);
Var sigmoid(Var x);
Var softmax(Var x);
Var layer_norm(Var x, double epsilon = 1e-5);
Var layer_norm(Var x, Var gamma, Var beta, double epsilon = 1e-5);
Var conv2d(Var input, Var weight, std::size_t stride, std::size_t padding);
Var conv2d(Var input, Var weight, Var bias, std::size_t stride, std::size_t padding);
Var avg_pool2d(Var x, std::size_t kernel, std::size_t stride);
Var mean(Var x, int axis = OpAttrs::kAllAxes);
Var sum(Var x, int axis = OpAttrs::kAllAxes);
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var slice(Var x, int axis, std::size_t begin, std::size_t end);
Var transpose(Var x);
Var embed_lookup(Var table, std::vector<std::size_t> indices);
Var reshape(Var x, Shape shape);
Var scale(Var x, double factor);
Var bce_with_logits(Var logits, Var labels);

}  // namespace ops

}  // namespace fmm
