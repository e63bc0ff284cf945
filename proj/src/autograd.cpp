#include "dropsynth/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

#include "dropsynth/error.hpp"

namespace dropsynth::nn {

namespace {

thread_local bool g_grad_enabled = true;

template <class F>
Tensor map_values(const Tensor& a, F f) {
  Tensor out(a.shape());
  const std::size_t n = a.size();
  const Scalar* src = a.data();
  Scalar* dst = out.data();
#pragma omp parallel for schedule(static) if (n > 32768)
  for (std::size_t i = 0; i < n; ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor zip_values(const Tensor& a, const Tensor& b, F f, const char* what) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(
        fmt::format("{}: shape mismatch {} vs {}", what, shape_string(a.shape()), shape_string(b.shape())));
  }
  Tensor out(a.shape());
  const std::size_t n = a.size();
  const Scalar* x = a.data();
  const Scalar* y = b.data();
  Scalar* dst = out.data();
#pragma omp parallel for schedule(static) if (n > 32768)
  for (std::size_t i = 0; i < n; ++i) dst[i] = f(x[i], y[i]);
  return out;
}

Scalar stable_sigmoid(Scalar v) {
  if (v >= 0) return 1 / (1 + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (1 + e);
}

Scalar stable_softplus(Scalar v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

// Post-order over the nodes that need gradients, without recursion.
std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].node();
      if (parent && parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
  if (!node_) throw InvalidArgument("access to an undefined Var");
  return node_->value;
}

Tensor& Var::mutable_value() {
  if (!node_) throw InvalidArgument("access to an undefined Var");
  if (node_->backward) throw InvalidArgument("only leaf Vars can be modified in place");
  return node_->value;
}

Scalar Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw InvalidArgument(fmt::format("item() on tensor of shape {}", shape_string(v.shape())));
  return v[0];
}

Var make_op(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  const bool record = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                    [](const Var& p) { return p.requires_grad(); });
  if (!record) return Var(std::move(value));
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->value = std::move(value);
  out.node_->requires_grad = true;
  out.node_->parents = std::move(parents);
  out.node_->backward = std::move(backward);
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }

GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph, const Var& seed) {
  if (!output.defined()) throw InvalidArgument("grad of an undefined Var");
  std::vector<Var> result(inputs.size());
  if (!output.requires_grad()) {
    for (std::size_t i = 0; i < inputs.size(); ++i) result[i] = Var(Tensor(inputs[i].shape()));
    return result;
  }

  std::unordered_set<Node*> wanted;
  for (const Var& in : inputs) wanted.insert(in.node());

  GradModeGuard mode(create_graph);
  std::unordered_map<Node*, Var> grads;
  grads[output.node()] = seed.defined() ? seed : Var(Tensor(output.shape(), 1));

  const std::vector<Node*> order = topological_order(output.node());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    if (!node->backward) continue;
    const Var g = found->second;
    if (!wanted.contains(node)) grads.erase(found);
    std::vector<Var> parent_grads = node->backward(g);
    for (std::size_t i = 0; i < node->parents.size() && i < parent_grads.size(); ++i) {
      Node* parent = node->parents[i].node();
      if (!parent || !parent->requires_grad || !parent_grads[i].defined()) continue;
      auto [slot, inserted] = grads.try_emplace(parent, parent_grads[i]);
      if (!inserted) slot->second = add(slot->second, parent_grads[i]);
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto found = grads.find(inputs[i].node());
    result[i] = found != grads.end() ? found->second : Var(Tensor(inputs[i].shape()));
  }
  return result;
}

// ---------------------------------------------------------------------------

Var constant(Tensor value) { return Var(std::move(value)); }

Var add(const Var& a, const Var& b) {
  return make_op(zip_values(a.value(), b.value(), std::plus<>(), "add"), {a, b},
                 [](const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  return make_op(zip_values(a.value(), b.value(), std::minus<>(), "sub"), {a, b},
                 [](const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

Var mul(const Var& a, const Var& b) {
  return make_op(zip_values(a.value(), b.value(), std::multiplies<>(), "mul"), {a, b},
                 [a, b](const Var& g) { return std::vector<Var>{mul(g, b), mul(g, a)}; });
}

Var div(const Var& a, const Var& b) {
  return make_op(zip_values(a.value(), b.value(), std::divides<>(), "div"), {a, b}, [a, b](const Var& g) {
    const Var ga = div(g, b);
    return std::vector<Var>{ga, neg(mul(ga, div(a, b)))};
  });
}

Var neg(const Var& a) {
  return make_op(map_values(a.value(), [](Scalar v) { return -v; }), {a},
                 [](const Var& g) { return std::vector<Var>{neg(g)}; });
}

Var scale(const Var& a, Scalar factor) {
  return make_op(map_values(a.value(), [factor](Scalar v) { return v * factor; }), {a},
                 [factor](const Var& g) { return std::vector<Var>{scale(g, factor)}; });
}

Var add_scalar(const Var& a, Scalar value) {
  return make_op(map_values(a.value(), [value](Scalar v) { return v + value; }), {a},
                 [](const Var& g) { return std::vector<Var>{g}; });
}

Var pow(const Var& a, Scalar exponent) {
  return make_op(map_values(a.value(), [exponent](Scalar v) { return std::pow(v, exponent); }), {a},
                 [a, exponent](const Var& g) {
                   if (exponent == 1) return std::vector<Var>{g};
                   return std::vector<Var>{mul(g, scale(pow(a, exponent - 1), exponent))};
                 });
}

Var sigmoid(const Var& a) {
  return make_op(map_values(a.value(), stable_sigmoid), {a}, [a](const Var& g) {
    const Var s = sigmoid(a);
    return std::vector<Var>{mul(g, mul(s, add_scalar(neg(s), 1)))};
  });
}

Var softplus(const Var& a) {
  return make_op(map_values(a.value(), stable_softplus), {a},
                 [a](const Var& g) { return std::vector<Var>{mul(g, sigmoid(a))}; });
}

Var leaky_relu(const Var& a, Scalar slope) {
  return make_op(kernels::leaky_relu(a.value(), slope), {a}, [a, slope](const Var& g) {
    // Piecewise linear: the slope mask is locally constant.
    return std::vector<Var>{mul(g, constant(kernels::leaky_relu_slope(a.value(), slope)))};
  });
}

Var broadcast_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Shape source = a.shape();
  return make_op(kernels::broadcast_to(a.value(), shape), {a},
                 [source](const Var& g) { return std::vector<Var>{sum_to(g, source)}; });
}

Var sum_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Shape source = a.shape();
  return make_op(kernels::sum_to(a.value(), shape), {a},
                 [source](const Var& g) { return std::vector<Var>{broadcast_to(g, source)}; });
}

Var sum(const Var& a) {
  Shape source = a.shape();
  return make_op(Tensor({1}, a.value().sum()), {a}, [source](const Var& g) {
    return std::vector<Var>{broadcast_to(reshape(g, Shape(source.size(), 1)), source)};
  });
}

Var mean(const Var& a) { return scale(sum(a), Scalar{1} / static_cast<Scalar>(a.value().size())); }

Var reshape(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Shape source = a.shape();
  return make_op(a.value().reshaped(shape), {a},
                 [source](const Var& g) { return std::vector<Var>{reshape(g, source)}; });
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  return make_op(kernels::matmul(a.value(), b.value(), trans_a, trans_b), {a, b},
                 [a, b, trans_a, trans_b](const Var& g) {
                   const Var ga = trans_a ? matmul(b, g, trans_b, true) : matmul(g, b, false, !trans_b);
                   const Var gb = trans_b ? matmul(g, a, true, trans_a) : matmul(a, g, !trans_a, false);
                   return std::vector<Var>{ga, gb};
                 });
}

Var conv2d(const Var& x, const Var& w, kernels::ConvGeometry geom) {
  return make_op(kernels::conv2d(x.value(), w.value(), geom), {x, w}, [x, w, geom](const Var& g) {
    return std::vector<Var>{conv2d_input_grad(g, w, x.shape(), geom), conv2d_weight_grad(x, g, w.shape(), geom)};
  });
}

Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& x_shape, kernels::ConvGeometry geom) {
  return make_op(kernels::conv2d_input_grad(grad_out.value(), w.value(), x_shape, geom), {grad_out, w},
                 [grad_out, w, geom](const Var& h) {
                   return std::vector<Var>{conv2d(h, w, geom), conv2d_weight_grad(h, grad_out, w.shape(), geom)};
                 });
}

Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& w_shape, kernels::ConvGeometry geom) {
  return make_op(kernels::conv2d_weight_grad(x.value(), grad_out.value(), w_shape, geom), {x, grad_out},
                 [x, grad_out, geom](const Var& h) {
                   return std::vector<Var>{conv2d_input_grad(grad_out, h, x.shape(), geom), conv2d(x, h, geom)};
                 });
}

Var upsample_nearest2x(const Var& a) {
  return make_op(kernels::upsample_nearest2x(a.value()), {a},
                 [](const Var& g) { return std::vector<Var>{sum_pool2x(g)}; });
}

Var sum_pool2x(const Var& a) {
  return make_op(kernels::sum_pool2x(a.value()), {a},
                 [](const Var& g) { return std::vector<Var>{upsample_nearest2x(g)}; });
}

Var avg_pool2x(const Var& a) { return scale(sum_pool2x(a), 0.25); }

Var pixel_norm(const Var& x, Scalar eps) {
  return make_op(kernels::pixel_norm(x.value(), eps), {x}, [x, eps](const Var& g) {
    // y_c = x_c r,  r = (mean_c x^2 + eps)^(-1/2)
    // dx_c = g_c r - x_c r^3 mean_c(g x)
    const Shape& s = x.shape();
    const Shape per_pixel{s[0], 1, s[2], s[3]};
    const Scalar inv_c = Scalar{1} / static_cast<Scalar>(s[1]);
    const Var r = pow(add_scalar(scale(sum_to(mul(x, x), per_pixel), inv_c), eps), -0.5);
    const Var gx_mean = scale(sum_to(mul(g, x), per_pixel), inv_c);
    const Var direct = mul(g, broadcast_to(r, s));
    const Var coupled = mul(x, broadcast_to(mul(pow(r, 3), gx_mean), s));
    return std::vector<Var>{sub(direct, coupled)};
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const std::size_t ca = a.shape().at(1);
  const std::size_t cb = b.shape().at(1);
  return make_op(kernels::concat_channels(a.value(), b.value()), {a, b}, [ca, cb](const Var& g) {
    return std::vector<Var>{slice_channels(g, 0, ca), slice_channels(g, ca, ca + cb)};
  });
}

Var slice_channels(const Var& a, std::size_t begin, std::size_t end) {
  const std::size_t channels = a.shape().at(1);
  return make_op(kernels::slice_channels(a.value(), begin, end), {a}, [begin, end, channels](const Var& g) {
    return std::vector<Var>{pad_channels(g, begin, channels - end)};
  });
}

Var pad_channels(const Var& a, std::size_t before, std::size_t after) {
  const std::size_t channels = a.shape().at(1);
  return make_op(kernels::pad_channels(a.value(), before, after), {a}, [before, channels](const Var& g) {
    return std::vector<Var>{slice_channels(g, before, before + channels)};
  });
}

Var lerp(const Var& a, const Var& b, Scalar t) {
  if (t == 0) return a;
  if (t == 1) return b;
  return add(scale(a, 1 - t), scale(b, t));
}

}  // namespace dropsynth::nn
