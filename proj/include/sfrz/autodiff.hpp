// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. A Tape records operations in insertion order; backward walks the
// record in reverse and scatters gradients into the leaf tensors that were
// bound with Tape::param.
#pragma once

#include "sfrz/types.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sfrz {

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense 64-bit tensor. Data is flat and row-major; shape dimensions are >= 1.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, VecXd data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);
  static Tensor from_matrix(const RowMatXd& m, bool requires_grad = false);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  std::size_t rank() const { return shape_.size(); }
  // Rows/cols of the 2-D view; a 1-D tensor is viewed as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  VecXd& data() { return data_; }
  const VecXd& data() const { return data_; }
  MatMap mat() { return MatMap(data_.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data_.data(), rows(), cols()); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool value) { requires_grad_ = value; }

  bool has_grad() const { return grad_.has_value(); }
  const VecXd& grad() const;
  // Returns the gradient buffer, allocating a zero buffer on first use.
  VecXd& grad_buffer();
  void zero_grad();
  void clear_grad() { grad_.reset(); }

 private:
  Shape shape_;
  VecXd data_;
  bool requires_grad_ = false;
  std::optional<VecXd> grad_;
};

class Tape;

enum class OpKind {
  kParam,
  kConstant,
  kMatMul,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kScale,
  kRelu,
  kAddBias,
  kSum,
  kMean,
  kReshape,
  kSoftmaxCrossEntropy,
  kEmbedding,
  kContextWindow,
};

const char* op_name(OpKind kind);

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Shape& shape() const;
  const VecXd& value() const;
  ConstMatMap mat() const;
  // Value of a single-element node.
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    Shape shape;
    VecXd value;
    bool needs_grad = false;
    Tensor* leaf = nullptr;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Binds an external tensor as a leaf. Gradients are accumulated into it
  // on backward when it requires grad. The tensor must outlive the tape.
  Var param(Tensor& tensor);
  Var constant(const Tensor& tensor);
  Var constant(Shape shape, VecXd data);

  // Low-level node construction used by the operator library.
  Var push(OpKind op, std::vector<std::size_t> inputs, Shape shape, VecXd value, BackwardFn backward);

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Gradient buffer of a node during backward; allocated on first touch.
  VecXd& grad_of(std::size_t id);
  const VecXd& grad_at(std::size_t id) const { return grads_[id]; }

  // Reverse pass from a scalar loss. A tape supports exactly one backward.
  void backward(Var loss);

  // Node ids in the order the last backward visited them.
  const std::vector<std::size_t>& backward_order() const { return backward_order_; }

 private:
  std::vector<Node> nodes_;
  std::vector<VecXd> grads_;
  std::vector<std::size_t> backward_order_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Operators. All operands must live on the same tape.

Var matmul(Var a, Var b);
Var transpose(Var a);

// Elementwise family. Operands share a shape, or one of them has a single
// element and is broadcast.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
// Subgradient at exactly zero is zero.
Var relu(Var a);

// x[m x n] + bias[n], bias repeated over rows.
Var add_bias(Var x, Var bias);
Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, Shape shape);

// Mean over rows of -log softmax(logits)[target], stabilized by row max.
Var softmax_cross_entropy(Var logits, std::span<const int> targets);

// Row gather from table[V x d]; backward scatter-adds.
Var embedding_lookup(Var table, std::span<const int> ids);

// For every position t of every sequence, concatenates the embeddings of the
// `window` tokens ending at t (oldest first). Positions before the sequence
// start contribute zero vectors. Output is [sum(len) x window*d].
Var context_window(Var table, std::span<const TokenSeq> sequences, std::size_t window);

}  // namespace sfrz
