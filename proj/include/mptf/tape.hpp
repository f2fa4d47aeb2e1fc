#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mptf/common.hpp"

namespace mptf::ad {

/// Up to four dimensions: feature maps use (1, C, H, W), conv kernels
/// (C_out, C_in, k_h, k_w), flat vectors (1, 1, 1, D).
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  static Shape chw(int c, int h, int w) { return {1, c, h, w}; }
  static Shape flat(int d) { return {1, 1, 1, d}; }
  static Shape matrix(int rows, int cols) { return {1, 1, rows, cols}; }
  static Shape kernel(int out, int in, int kh, int kw) { return {out, in, kh, kw}; }

  std::size_t size() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
/// lives.
class Tensor {
 public:
  Tensor() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool defined() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::span<const double> value() const;
  std::span<const double> grad() const;
  bool requires_grad() const;
  double item() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

/// Append-only record of forward values. Node ids are assigned in creation
/// order and every op's inputs precede it, so walking ids downwards is a
/// reverse topological order. Single writer: one pass at a time per tape.
class Tape {
 public:
  /// Accumulates into input gradients given this node's output gradient.
  using Backward = std::function<void(Tape&, std::span<const double>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Shape shape, std::vector<double> value) {
    return push(shape, std::move(value), false, nullptr, "constant");
  }
  Tensor parameter(Shape shape, std::vector<double> value) {
    return push(shape, std::move(value), true, nullptr, "parameter");
  }

  /// Records an op output. It requires grad iff any input does; `backward` is
  /// dropped otherwise.
  Tensor record(std::string_view op, Shape shape, std::vector<double> value,
                std::initializer_list<Tensor> inputs, Backward backward) {
    return record(op, shape, std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }
  Tensor record(std::string_view op, Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                Backward backward) {
    bool needs = false;
    for (const Tensor& t : inputs) {
      if (t.tape_ != this) throw Error(std::string(op) + ": input recorded on a different tape");
      needs = needs || nodes_[t.id_].requires_grad;
    }
    return push(shape, std::move(value), needs, needs ? std::move(backward) : nullptr, op);
  }

  /// Reverse pass from a scalar loss. Clears previous gradients first.
  void backward(Tensor loss) {
    if (loss.tape_ != this || nodes_.empty()) throw Error("backward: no forward pass recorded for this loss");
    if (nodes_[loss.id_].value.size() != 1) {
      throw Error("backward: loss must be scalar, got shape " + nodes_[loss.id_].shape.str());
    }
    for (auto& node : nodes_) node.grad.clear();
    if (!nodes_[loss.id_].requires_grad) return;
    grad_mut(loss)[0] = 1.0;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
      node.backward(*this, node.grad);
    }
  }

  /// Gradient buffer of `t`, zero-initialized on first use.
  std::span<double> grad_mut(Tensor t) {
    Node& node = nodes_[t.id_];
    if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    return node.grad;
  }
  bool requires_grad(Tensor t) const { return nodes_[t.id_].requires_grad; }
  const Shape& shape(Tensor t) const { return nodes_[t.id_].shape; }
  std::span<const double> value(Tensor t) const { return nodes_[t.id_].value; }
  std::span<const double> grad(Tensor t) const { return nodes_[t.id_].grad; }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    Backward backward;
    bool requires_grad = false;
  };

  Tensor push(Shape shape, std::vector<double> value, bool requires_grad, Backward backward,
              std::string_view op) {
    if (value.size() != shape.size()) {
      throw Error(std::string(op) + ": value size " + std::to_string(value.size()) + " does not match shape " +
                  shape.str());
    }
    for (double v : value) {
      if (!std::isfinite(v)) throw Error(std::string(op) + ": produced a non-finite value");
    }
    nodes_.push_back({shape, std::move(value), {}, std::move(backward), requires_grad});
    return Tensor(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Shape& Tensor::shape() const { return tape_->shape(*this); }
inline std::span<const double> Tensor::value() const { return tape_->value(*this); }
inline std::span<const double> Tensor::grad() const { return tape_->grad(*this); }
inline bool Tensor::requires_grad() const { return tape_->requires_grad(*this); }
inline double Tensor::item() const {
  if (value().size() != 1) throw Error("item: tensor is not scalar");
  return value()[0];
}

}  // namespace mptf::ad
