// SPDX-License-Identifier: Apache-2.0
#include "sfrz/autodiff.hpp"

#include "sfrz/errors.hpp"

#include <cmath>
#include <sstream>

namespace sfrz {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in " + shape_to_string(shape));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : shape_{1}, data_(VecXd::Zero(1)) {}

Tensor::Tensor(Shape shape, VecXd data, bool requires_grad)
    : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
  check_shape(shape_);
  if (shape_numel(shape_) != size()) {
    throw DimensionError("shape " + shape_to_string(shape_) + " does not match " +
                         std::to_string(size()) + " elements");
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = static_cast<Eigen::Index>(shape_numel(shape));
  return Tensor(std::move(shape), VecXd::Zero(n), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  VecXd d(1);
  d[0] = value;
  return Tensor({1}, std::move(d), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
  VecXd d(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double v : values) d[i++] = v;
  return Tensor({values.size()}, std::move(d), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  VecXd d(static_cast<Eigen::Index>(r * c));
  Eigen::Index i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    for (double v : row) d[i++] = v;
  }
  return Tensor({r, c}, std::move(d), requires_grad);
}

Tensor Tensor::from_matrix(const RowMatXd& m, bool requires_grad) {
  VecXd d = Eigen::Map<const VecXd>(m.data(), m.size());
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(d),
                requires_grad);
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  return size() / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.back(); }

const VecXd& Tensor::grad() const {
  if (!grad_) throw ContractError("tensor has no gradient");
  return *grad_;
}

VecXd& Tensor::grad_buffer() {
  if (!grad_) grad_ = VecXd::Zero(data_.size());
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) grad_->setZero();
}

// ---------------------------------------------------------------------------
// Var / Tape

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kParam: return "param";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kRelu: return "relu";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kEmbedding: return "embedding_lookup";
    case OpKind::kContextWindow: return "context_window";
  }
  return "?";
}

const Shape& Var::shape() const { return tape_->node(id_).shape; }
const VecXd& Var::value() const { return tape_->node(id_).value; }

ConstMatMap Var::mat() const {
  const auto& n = tape_->node(id_);
  const std::size_t cols = n.shape.back();
  return ConstMatMap(n.value.data(), n.value.size() / cols, cols);
}

double Var::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ContractError("item() on a tensor with " + std::to_string(v.size()) + " elements");
  return v[0];
}

Var Tape::param(Tensor& tensor) {
  nodes_.push_back(Node{OpKind::kParam, {}, tensor.shape(), tensor.data(), tensor.requires_grad(), &tensor, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(const Tensor& tensor) {
  nodes_.push_back(Node{OpKind::kConstant, {}, tensor.shape(), tensor.data(), false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Shape shape, VecXd data) { return constant(Tensor(std::move(shape), std::move(data))); }

Var Tape::push(OpKind op, std::vector<std::size_t> inputs, Shape shape, VecXd value, BackwardFn backward) {
  if (consumed_) throw ContractError("tape already consumed by backward");
  bool needs_grad = false;
  for (auto in : inputs) {
    if (in >= nodes_.size()) throw ContractError("node input refers to a later node");
    needs_grad = needs_grad || nodes_[in].needs_grad;
  }
  nodes_.push_back(Node{op, std::move(inputs), std::move(shape), std::move(value), needs_grad, nullptr,
                        needs_grad ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

VecXd& Tape::grad_of(std::size_t id) {
  auto& g = grads_[id];
  if (g.size() == 0) g = VecXd::Zero(nodes_[id].value.size());
  return g;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("loss belongs to a different tape");
  if (consumed_) throw ContractError("backward already ran on this tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  consumed_ = true;
  grads_.assign(nodes_.size(), VecXd());
  backward_order_.clear();
  grad_of(loss.id())[0] = 1.0;

  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.needs_grad || grads_[k].size() == 0) continue;
    backward_order_.push_back(k);
    if (n.op == OpKind::kParam) {
      n.leaf->grad_buffer() += grads_[k];
    } else if (n.backward) {
      n.backward(*this, k);
    }
  }
  for (auto& n : nodes_) n.backward = nullptr;
  grads_.clear();
}

// ---------------------------------------------------------------------------
// Operators

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return *a.tape();
}

Tape& tape_of(Var a) {
  if (a.tape() == nullptr) throw ContractError("operand is not bound to a tape");
  return *a.tape();
}

bool is_matrix(const Shape& s) { return s.size() == 2; }

enum class Broadcast { kNone, kLeftScalar, kRightScalar };

Broadcast broadcast_kind(const char* op, Var a, Var b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) return Broadcast::kNone;
  if (b.value().size() == 1) return Broadcast::kRightScalar;
  if (a.value().size() == 1) return Broadcast::kLeftScalar;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(sa) + " and " +
                       shape_to_string(sb));
}

// Adds `delta` (computed in the broadcast output space) into operand `id`.
void accumulate_operand(Tape& t, std::size_t id, const VecXd& delta, bool is_broadcast_scalar) {
  if (!t.node(id).needs_grad) return;
  if (is_broadcast_scalar) {
    t.grad_of(id)[0] += delta.sum();
  } else {
    t.grad_of(id) += delta;
  }
}

template <typename Fwd, typename DA, typename DB>
Var binary_elementwise(OpKind op, Var a, Var b, Fwd fwd, DA grad_a, DB grad_b) {
  Tape& t = same_tape(a, b);
  const Broadcast bc = broadcast_kind(op_name(op), a, b);
  const Shape out_shape = bc == Broadcast::kLeftScalar ? b.shape() : a.shape();
  const auto n = static_cast<Eigen::Index>(shape_numel(out_shape));
  auto expand = [n](const VecXd& v) -> VecXd { return v.size() == 1 ? VecXd::Constant(n, v[0]) : v; };
  VecXd av = expand(a.value());
  VecXd bv = expand(b.value());
  VecXd out = fwd(av, bv);
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(op, {ia, ib}, out_shape, std::move(out),
                [ia, ib, bc, av = std::move(av), bv = std::move(bv), grad_a, grad_b](Tape& tp, std::size_t self) {
                  const VecXd& g = tp.grad_at(self);
                  if (tp.node(ia).needs_grad) accumulate_operand(tp, ia, grad_a(g, av, bv), bc == Broadcast::kLeftScalar);
                  if (tp.node(ib).needs_grad) accumulate_operand(tp, ib, grad_b(g, av, bv), bc == Broadcast::kRightScalar);
                });
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (!is_matrix(a.shape()) || !is_matrix(b.shape()) || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], n = b.shape()[1];
  RowMatXd c = a.mat() * b.mat();
  VecXd out = Eigen::Map<const VecXd>(c.data(), c.size());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(OpKind::kMatMul, {ia, ib}, {m, n}, std::move(out), [ia, ib, m, n](Tape& tp, std::size_t self) {
    const auto& na = tp.node(ia);
    const auto& nb = tp.node(ib);
    ConstMatMap dc(tp.grad_at(self).data(), m, n);
    ConstMatMap av(na.value.data(), na.shape[0], na.shape[1]);
    ConstMatMap bv(nb.value.data(), nb.shape[0], nb.shape[1]);
    if (na.needs_grad) {
      MatMap da(tp.grad_of(ia).data(), na.shape[0], na.shape[1]);
      da.noalias() += dc * bv.transpose();
    }
    if (nb.needs_grad) {
      MatMap db(tp.grad_of(ib).data(), nb.shape[0], nb.shape[1]);
      db.noalias() += av.transpose() * dc;
    }
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  if (!is_matrix(a.shape())) throw DimensionError("transpose: expected a matrix, got " + shape_to_string(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  RowMatXd tr = a.mat().transpose();
  VecXd out = Eigen::Map<const VecXd>(tr.data(), tr.size());
  const std::size_t ia = a.id();
  return t.push(OpKind::kTranspose, {ia}, {c, r}, std::move(out), [ia, r, c](Tape& tp, std::size_t self) {
    ConstMatMap g(tp.grad_at(self).data(), c, r);
    MatMap da(tp.grad_of(ia).data(), r, c);
    da += g.transpose();
  });
}

Var add(Var a, Var b) {
  return binary_elementwise(
      OpKind::kAdd, a, b, [](const VecXd& x, const VecXd& y) -> VecXd { return x + y; },
      [](const VecXd& g, const VecXd&, const VecXd&) -> VecXd { return g; },
      [](const VecXd& g, const VecXd&, const VecXd&) -> VecXd { return g; });
}

Var sub(Var a, Var b) {
  return binary_elementwise(
      OpKind::kSub, a, b, [](const VecXd& x, const VecXd& y) -> VecXd { return x - y; },
      [](const VecXd& g, const VecXd&, const VecXd&) -> VecXd { return g; },
      [](const VecXd& g, const VecXd&, const VecXd&) -> VecXd { return -g; });
}

Var mul(Var a, Var b) {
  return binary_elementwise(
      OpKind::kMul, a, b, [](const VecXd& x, const VecXd& y) -> VecXd { return x.cwiseProduct(y); },
      [](const VecXd& g, const VecXd&, const VecXd& y) -> VecXd { return g.cwiseProduct(y); },
      [](const VecXd& g, const VecXd& x, const VecXd&) -> VecXd { return g.cwiseProduct(x); });
}

Var scale(Var a, double c) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  return t.push(OpKind::kScale, {ia}, a.shape(), a.value() * c,
                [ia, c](Tape& tp, std::size_t self) { tp.grad_of(ia) += c * tp.grad_at(self); });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  VecXd out = a.value().cwiseMax(0.0);
  return t.push(OpKind::kRelu, {ia}, a.shape(), std::move(out), [ia](Tape& tp, std::size_t self) {
    const VecXd& x = tp.node(ia).value;
    const VecXd& g = tp.grad_at(self);
    VecXd& da = tp.grad_of(ia);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0) da[i] += g[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  Tape& t = same_tape(x, bias);
  if (!is_matrix(x.shape()) || bias.value().size() != static_cast<Eigen::Index>(x.shape()[1])) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match columns of " +
                         shape_to_string(x.shape()));
  }
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  RowMatXd out = x.mat();
  out.rowwise() += bias.value().transpose();
  VecXd flat = Eigen::Map<const VecXd>(out.data(), out.size());
  const std::size_t ix = x.id(), ib = bias.id();
  return t.push(OpKind::kAddBias, {ix, ib}, x.shape(), std::move(flat), [ix, ib, m, n](Tape& tp, std::size_t self) {
    const VecXd& g = tp.grad_at(self);
    if (tp.node(ix).needs_grad) tp.grad_of(ix) += g;
    if (tp.node(ib).needs_grad) {
      ConstMatMap gm(g.data(), m, n);
      tp.grad_of(ib) += gm.colwise().sum().transpose();
    }
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  VecXd out(1);
  out[0] = a.value().sum();
  return t.push(OpKind::kSum, {ia}, {1}, std::move(out),
                [ia](Tape& tp, std::size_t self) { tp.grad_of(ia).array() += tp.grad_at(self)[0]; });
}

Var mean(Var a) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  const double n = static_cast<double>(a.value().size());
  VecXd out(1);
  out[0] = a.value().sum() / n;
  return t.push(OpKind::kMean, {ia}, {1}, std::move(out),
                [ia, n](Tape& tp, std::size_t self) { tp.grad_of(ia).array() += tp.grad_at(self)[0] / n; });
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a);
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::size_t>(a.value().size())) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  }
  const std::size_t ia = a.id();
  return t.push(OpKind::kReshape, {ia}, std::move(shape), a.value(),
                [ia](Tape& tp, std::size_t self) { tp.grad_of(ia) += tp.grad_at(self); });
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
  Tape& t = tape_of(logits);
  if (!is_matrix(logits.shape())) {
    throw DimensionError("softmax_cross_entropy: logits must be a matrix, got " + shape_to_string(logits.shape()));
  }
  const std::size_t b = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(b) + " rows");
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw IndexError("target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(v) + ")");
    }
  }
  auto x = logits.mat();
  RowMatXd probs(b, v);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double row_max = x.row(i).maxCoeff();
    auto shifted = (x.row(i).array() - row_max).eval();
    const double lse = std::log(shifted.exp().sum());
    probs.row(i) = (shifted - lse).exp().matrix();
    total += lse - shifted[targets[i]];
  }
  VecXd out(1);
  out[0] = total / static_cast<double>(b);
  std::vector<int> tgt(targets.begin(), targets.end());
  const std::size_t il = logits.id();
  return t.push(OpKind::kSoftmaxCrossEntropy, {il}, {1}, std::move(out),
                [il, b, v, probs = std::move(probs), tgt = std::move(tgt)](Tape& tp, std::size_t self) {
                  const double g = tp.grad_at(self)[0] / static_cast<double>(b);
                  MatMap dl(tp.grad_of(il).data(), b, v);
                  dl += g * probs;
                  for (std::size_t i = 0; i < b; ++i) dl(i, tgt[i]) -= g;
                });
}

Var embedding_lookup(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  if (!is_matrix(table.shape())) throw DimensionError("embedding_lookup: table must be a matrix");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
    }
  }
  auto tab = table.mat();
  RowMatXd out(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(i) = tab.row(ids[i]);
  VecXd flat = Eigen::Map<const VecXd>(out.data(), out.size());
  std::vector<int> idv(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return t.push(OpKind::kEmbedding, {it}, {ids.size(), d}, std::move(flat),
                [it, vocab, d, idv = std::move(idv)](Tape& tp, std::size_t self) {
                  ConstMatMap g(tp.grad_at(self).data(), idv.size(), d);
                  MatMap dt(tp.grad_of(it).data(), vocab, d);
                  for (std::size_t i = 0; i < idv.size(); ++i) dt.row(idv[i]) += g.row(i);
                });
}

Var context_window(Var table, std::span<const TokenSeq> sequences, std::size_t window) {
  Tape& t = tape_of(table);
  if (!is_matrix(table.shape())) throw DimensionError("context_window: table must be a matrix");
  if (window == 0) throw DimensionError("context_window: window must be >= 1");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::size_t rows = 0;
  for (const auto& seq : sequences) {
    for (int id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw IndexError("token id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
      }
    }
    rows += seq.size();
  }
  if (rows == 0) throw DimensionError("context_window: no tokens");

  // slot[r * window + k] = token id feeding slot k of output row r, or -1.
  std::vector<int> slots(rows * window, -1);
  std::size_t r = 0;
  for (const auto& seq : sequences) {
    for (std::size_t pos = 0; pos < seq.size(); ++pos, ++r) {
      for (std::size_t k = 0; k < window; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(pos) - static_cast<std::ptrdiff_t>(window - 1 - k);
        if (src >= 0) slots[r * window + k] = seq[static_cast<std::size_t>(src)];
      }
    }
  }
  auto tab = table.mat();
  RowMatXd out = RowMatXd::Zero(rows, window * d);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < window; ++k) {
      const int id = slots[i * window + k];
      if (id >= 0) out.block(i, k * d, 1, d) = tab.row(id);
    }
  }
  VecXd flat = Eigen::Map<const VecXd>(out.data(), out.size());
  const std::size_t it = table.id();
  return t.push(OpKind::kContextWindow, {it}, {rows, window * d}, std::move(flat),
                [it, vocab, d, rows, window, slots = std::move(slots)](Tape& tp, std::size_t self) {
                  ConstMatMap g(tp.grad_at(self).data(), rows, window * d);
                  MatMap dt(tp.grad_of(it).data(), vocab, d);
                  for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t k = 0; k < window; ++k) {
                      const int id = slots[i * window + k];
                      if (id >= 0) dt.row(id) += g.block(i, k * d, 1, d);
                    }
                  }
                });
}

}  // namespace sfrz
