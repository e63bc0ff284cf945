#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every op's backward rule is itself written in terms of differentiable ops,
// so gradients can be differentiated again (`create_graph = true`). The
// critic's gradient penalty depends on this: it differentiates a function of
// dD/dx with respect to the critic parameters.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dropsynth/kernels.hpp"
#include "dropsynth/tensor.hpp"

namespace dropsynth::nn {

class Var;

// Maps the gradient of an op's output to gradients of its parents (same
// order); an undefined Var means "no contribution".
using BackwardFn = std::function<std::vector<Var>(const Var& grad_output)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> parents;
  BackwardFn backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  // Mutable access for leaves (parameters, optimizer updates).
  Tensor& mutable_value();
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_ && !node_->backward; }
  // Single element of a size-1 value.
  Scalar item() const;
  // Same value, cut from the graph.
  Var detach() const { return Var(value()); }

  Node* node() const { return node_.get(); }

 private:
  friend Var make_op(Tensor value, std::vector<Var> parents, BackwardFn backward);
  std::shared_ptr<Node> node_;
};

// Records the op when gradient recording is on and some parent requires a
// gradient; otherwise returns a constant.
Var make_op(Tensor value, std::vector<Var> parents, BackwardFn backward);

bool grad_enabled();

// Scoped switch for gradient recording (thread-local).
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

// d(output)/d(inputs), seeded with `seed` (ones when undefined). Inputs that
// do not influence the output get zero gradients. With create_graph the
// returned gradients are themselves differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false,
                      const Var& seed = Var());

// ---------------------------------------------------------------------------
// Ops. Elementwise binary ops require equal shapes; use broadcast_to first.

Var constant(Tensor value);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, Scalar factor);
Var add_scalar(const Var& a, Scalar value);
Var pow(const Var& a, Scalar exponent);
Var sigmoid(const Var& a);
// log(1 + exp(a)), evaluated stably.
Var softplus(const Var& a);
Var leaky_relu(const Var& a, Scalar slope);

Var broadcast_to(const Var& a, const Shape& shape);
Var sum_to(const Var& a, const Shape& shape);
// Sum/mean of every element, shape {1}.
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, const Shape& shape);

Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var conv2d(const Var& x, const Var& w, kernels::ConvGeometry g);
Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& x_shape, kernels::ConvGeometry g);
Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& w_shape, kernels::ConvGeometry g);

Var upsample_nearest2x(const Var& a);
Var sum_pool2x(const Var& a);
Var avg_pool2x(const Var& a);
Var pixel_norm(const Var& x, Scalar eps);
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& a, std::size_t begin, std::size_t end);
Var pad_channels(const Var& a, std::size_t before, std::size_t after);

// (1 - t) * a + t * b.
Var lerp(const Var& a, const Var& b, Scalar t);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, Scalar s) { return scale(a, s); }
inline Var operator*(Scalar s, const Var& a) { return scale(a, s); }

}  // namespace dropsynth::nn
