#pragma once

#include "ega/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ega {

/// How the optimizer treats a parameter.
enum class ParamRole {
  kWeight,      // matrices and filter banks: decayed
  kBias,        // linear biases
  kNorm,        // LayerNorm gain/bias
  kEmbedding,   // token / position tables
  kGateScalar,  // tau, alpha, scale logits, Morlet (omega, sigma)
};

/// A named learnable tensor with its gradient accumulator.
template <typename Scalar>
struct Parameter {
  std::string name;
  std::shared_ptr<NdArray<Scalar>> value;
  NdArray<Scalar> grad;
  ParamRole role = ParamRole::kWeight;

  Parameter(std::string n, NdArray<Scalar> v, ParamRole r)
      : name(std::move(n)),
        value(std::make_shared<NdArray<Scalar>>(std::move(v))),
        grad(value->shape()),
        role(r) {}

  void zero_grad() { grad.fill(Scalar(0)); }
  std::size_t numel() const { return value->numel(); }
};

template <typename Scalar>
class Tape;

/// Handle to a value, optionally tracked on a tape. Values are immutable and shared.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(NdArray<Scalar> value)
      : value_(std::make_shared<const NdArray<Scalar>>(std::move(value))) {}
  Var(std::shared_ptr<const NdArray<Scalar>> value, Tape<Scalar>* tape, std::int64_t id)
      : value_(std::move(value)), tape_(tape), id_(id) {}

  const NdArray<Scalar>& value() const { return *value_; }
  const std::shared_ptr<const NdArray<Scalar>>& shared() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  std::size_t numel() const { return value_->numel(); }
  std::size_t dim(int axis) const { return value_->dim(axis); }
  std::size_t rank() const { return value_->rank(); }

  bool tracked() const { return tape_ != nullptr; }
  Tape<Scalar>* tape() const { return tape_; }
  std::int64_t id() const { return id_; }

 private:
  std::shared_ptr<const NdArray<Scalar>> value_;
  Tape<Scalar>* tape_ = nullptr;
  std::int64_t id_ = -1;
};

/// Records primitive applications in topological order and replays their backward rules.
///
/// A tape owns gradient buffers and backward closures, not forward values: each closure
/// captures exactly the tensors its rule needs, so intermediates nobody needs are freed
/// during the forward pass.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const NdArray<Scalar>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf for a learnable parameter; gradients land in `param.grad` after backward().
  Var<Scalar> parameter(Parameter<Scalar>& param) {
    Node node;
    node.shape = param.value->shape();
    node.param = &param;
    nodes_.push_back(std::move(node));
    return Var<Scalar>(param.value, this, static_cast<std::int64_t>(nodes_.size() - 1));
  }

  /// Leaf that requires a gradient but is not a Parameter (tests, grad checks).
  Var<Scalar> leaf(NdArray<Scalar> value) {
    Node node;
    node.shape = value.shape();
    nodes_.push_back(std::move(node));
    return Var<Scalar>(std::make_shared<const NdArray<Scalar>>(std::move(value)), this,
                       static_cast<std::int64_t>(nodes_.size() - 1));
  }

  Var<Scalar> record(std::shared_ptr<const NdArray<Scalar>> value, BackwardFn fn) {
    Node node;
    node.shape = value->shape();
    node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var<Scalar>(std::move(value), this, static_cast<std::int64_t>(nodes_.size() - 1));
  }

  /// Adds `g` into the gradient of `v`. No-op for untracked values.
  void accumulate(const Var<Scalar>& v, const NdArray<Scalar>& g) {
    if (!v.tracked()) return;
    accumulate(v.id(), g);
  }
  void accumulate(const Var<Scalar>& v, NdArray<Scalar>&& g) {
    if (!v.tracked()) return;
    Node& node = nodes_.at(static_cast<std::size_t>(v.id()));
    if (!node.has_grad) {
      if (g.shape() != node.shape) throw DimensionError("gradient shape " + shape_str(g.shape()) +
                                                        " for node of shape " + shape_str(node.shape));
      node.grad = std::move(g);
      node.has_grad = true;
    } else {
      accumulate(v.id(), static_cast<const NdArray<Scalar>&>(g));
    }
  }

  /// Mutable gradient buffer for `v`, zero-initialized on first access (nullptr if untracked).
  NdArray<Scalar>* grad_buffer(const Var<Scalar>& v) {
    if (!v.tracked()) return nullptr;
    Node& node = nodes_.at(static_cast<std::size_t>(v.id()));
    if (!node.has_grad) {
      node.grad = NdArray<Scalar>(node.shape);
      node.has_grad = true;
    }
    return &node.grad;
  }

  /// Gradient of a non-parameter leaf after backward().
  const NdArray<Scalar>& grad(const Var<Scalar>& v) const {
    const Node& node = nodes_.at(static_cast<std::size_t>(v.id()));
    if (!node.has_grad) throw ContractError("no gradient recorded for this value");
    return node.grad;
  }

  bool requires_grad(const Var<Scalar>& v) const { return v.tracked(); }

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  /// Runs reverse accumulation from a scalar loss.
  void backward(const Var<Scalar>& loss);

  /// Drops all recorded nodes so the tape can be reused.
  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Shape shape;
    NdArray<Scalar> grad;
    bool has_grad = false;
    Parameter<Scalar>* param = nullptr;
    BackwardFn backward;
  };

  void accumulate(std::int64_t id, const NdArray<Scalar>& g) {
    Node& node = nodes_.at(static_cast<std::size_t>(id));
    if (g.shape() != node.shape) {
      throw DimensionError("gradient shape " + shape_str(g.shape()) + " for node of shape " +
                           shape_str(node.shape));
    }
    if (!node.has_grad) {
      node.grad = g;
      node.has_grad = true;
    } else {
      node.grad.array() += g.array();
    }
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.tracked() || loss.tape() != this) {
    throw ContractError("backward(): loss was not recorded on this tape");
  }
  if (backward_done_) {
    throw ContractError("backward() called twice on the same tape without reset()");
  }
  backward_done_ = true;
  accumulate(loss.id(), NdArray<Scalar>(loss.shape(), Scalar(1)));
  for (std::size_t i = static_cast<std::size_t>(loss.id()) + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad) continue;
    if (node.param != nullptr) {
      node.param->grad.array() += node.grad.array();
      node.grad = NdArray<Scalar>();
      node.has_grad = false;
    } else if (node.backward) {
      node.backward(*this, node.grad);
      node.backward = nullptr;
      node.grad = NdArray<Scalar>();
      node.has_grad = false;
    }
    // plain leaves keep their gradient for inspection
  }
}

/// Records on the tape shared by the tracked inputs, or returns an untracked value.
template <typename Scalar>
Var<Scalar> make_result(std::shared_ptr<const NdArray<Scalar>> value,
                        std::initializer_list<const Var<Scalar>*> inputs,
                        typename Tape<Scalar>::BackwardFn fn) {
  Tape<Scalar>* tape = nullptr;
  for (const Var<Scalar>* in : inputs) {
    if (in->tracked()) {
      if (tape != nullptr && tape != in->tape()) {
        throw ContractError("operands recorded on different tapes");
      }
      tape = in->tape();
    }
  }
  if (tape == nullptr) return Var<Scalar>(std::move(value), nullptr, -1);
  return tape->record(std::move(value), std::move(fn));
}

template <typename Scalar>
Var<Scalar> make_result(NdArray<Scalar>&& out, std::initializer_list<const Var<Scalar>*> inputs,
                        typename Tape<Scalar>::BackwardFn fn) {
  return make_result(std::make_shared<const NdArray<Scalar>>(std::move(out)), inputs, std::move(fn));
}

}  // namespace ega
