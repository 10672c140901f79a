#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "surfseg/rng.hpp"

namespace surfseg {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimension must be >= 1");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first allocated; never auto-cleared
  bool requires_grad = false;
  Tape<T>* producer = nullptr;  // tape whose op produced this node
};

template <typename T>
inline void check_finite(const std::vector<T>& v, const char* op) {
#ifndef NDEBUG
  for (const T& x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }
  }
#else
  (void)v;
  (void)op;
#endif
}

}  // namespace detail

// Dense n-dimensional array with optional gradient. Value-semantic handle to
// shared storage: copies alias the same buffer, clone() deep-copies.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T fill) {
    const std::size_t n = shape_numel(shape);
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(n, fill);
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<T> values) {
    const std::size_t n = shape_numel(shape);
    if (values.size() != n) {
      throw std::invalid_argument("value count does not match shape");
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    return t;
  }

  static Tensor scalar_value(T v) { return from_values({1}, {v}); }

  static Tensor random_uniform(Shape shape, SplitMix64& rng, T lo = T(0), T hi = T(1)) {
    const std::size_t n = shape_numel(shape);
    std::vector<T> v(n);
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = lo + static_cast<T>(rng.next_double()) * (hi - lo);
    }
    return from_values(std::move(shape), std::move(v));
  }

  static Tensor random_normal(Shape shape, SplitMix64& rng, T mean = T(0), T stddev = T(1)) {
    const std::size_t n = shape_numel(shape);
    std::vector<T> v(n);
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = mean + stddev * static_cast<T>(rng.next_normal());
    }
    return from_values(std::move(shape), std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T scalar() const {
    if (size() != 1) throw std::invalid_argument("tensor is not scalar");
    return node_->value[0];
  }

  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }

  // Gradient buffer, allocated (zeroed) on first access.
  std::vector<T>& grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    if (node_->grad.empty()) throw std::runtime_error("gradient not populated");
    return node_->grad;
  }

  void zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), T(0));
  }

  // Deep copy of shape and values; grad and graph attachment are not copied.
  Tensor clone() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  std::shared_ptr<Node> handle() const { return node_; }
  Tape<T>* producer() const { return node_ ? node_->producer : nullptr; }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Define-by-run tape: an ordered record of executed operations. Constructing
// a Tape makes it the active recording target; destruction deactivates it.
// Graph construction and backward are single-threaded.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

  Tape() { stack().push_back(this); }
  ~Tape() { stack().pop_back(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return stack().empty() ? nullptr : stack().back(); }

  void record(std::vector<NodePtr> inputs, NodePtr output, std::function<void()> backward_fn) {
    output->producer = this;
    ops_.push_back(Op{std::move(inputs), std::move(output), std::move(backward_fn)});
  }

  std::size_t op_count() const { return ops_.size(); }

  // Reverse sweep from `loss`. Grad buffers of op outputs are (re)set to
  // zero; leaf gradients are allocated if absent but otherwise accumulate.
  void run_backward(const NodePtr& loss) {
    for (Op& op : ops_) {
      op.output->grad.assign(op.output->value.size(), T(0));
    }
    for (Op& op : ops_) {
      for (NodePtr& in : op.inputs) {
        if (in->requires_grad && in->grad.empty()) {
          in->grad.assign(in->value.size(), T(0));
        }
      }
    }
    loss->grad[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      it->fn();
    }
  }

 private:
  struct Op {
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> fn;
  };
  std::vector<Op> ops_;

  static std::vector<Tape*>& stack() {
    thread_local std::vector<Tape*> s;
    return s;
  }
};

// Populates grad on every tracked tensor reachable from `loss`.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss");
  }
  Tape<T>* tape = loss.producer();
  if (tape == nullptr) {
    throw std::invalid_argument("loss is not attached to a computation graph");
  }
  tape->run_backward(loss.handle());
}

namespace detail {

// Records `fn` on the active tape when any input participates in
// differentiation. Marks the output as tracked in that case.
template <typename T>
void record_if_tracked(std::initializer_list<Tensor<T>> inputs, Tensor<T>& out,
                       std::function<void()> fn) {
  bool tracked = false;
  for (const Tensor<T>& in : inputs) tracked = tracked || in.requires_grad();
  Tape<T>* tape = Tape<T>::active();
  if (!tracked || tape == nullptr) return;
  out.set_requires_grad(true);
  std::vector<typename Tape<T>::NodePtr> in_nodes;
  in_nodes.reserve(inputs.size());
  for (const Tensor<T>& in : inputs) in_nodes.push_back(in.handle());
  tape->record(std::move(in_nodes), out.handle(), std::move(fn));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  Tensor<T> out = Tensor<T>::from_values(a.shape(), std::move(v));
  detail::check_finite(out.values(), "add");
  auto an = a.handle(), bn = b.handle(), on = out.handle();
  detail::record_if_tracked({a, b}, out, [an, bn, on]() {
    const std::vector<T>& g = on->grad;
    if (an->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  Tensor<T> out = Tensor<T>::from_values(a.shape(), std::move(v));
  detail::check_finite(out.values(), "sub");
  auto an = a.handle(), bn = b.handle(), on = out.handle();
  detail::record_if_tracked({a, b}, out, [an, bn, on]() {
    const std::vector<T>& g = on->grad;
    if (an->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  Tensor<T> out = Tensor<T>::from_values(a.shape(), std::move(v));
  detail::check_finite(out.values(), "mul");
  auto an = a.handle(), bn = b.handle(), on = out.handle();
  detail::record_if_tracked({a, b}, out, [an, bn, on]() {
    const std::vector<T>& g = on->grad;
    if (an->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * s;
  Tensor<T> out = Tensor<T>::from_values(a.shape(), std::move(v));
  detail::check_finite(out.values(), "scalar-mul");
  auto an = a.handle(), on = out.handle();
  detail::record_if_tracked({a}, out, [an, on, s]() {
    const std::vector<T>& g = on->grad;
    if (an->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * s;
    }
  });
  return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * a.values()[i];
  Tensor<T> out = Tensor<T>::from_values(a.shape(), std::move(v));
  detail::check_finite(out.values(), "square");
  auto an = a.handle(), on = out.handle();
  detail::record_if_tracked({a}, out, [an, on]() {
    const std::vector<T>& g = on->grad;
    if (an->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += T(2) * g[i] * an->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (const T& x : a.values()) acc += x;
  Tensor<T> out = Tensor<T>::scalar_value(acc);
  detail::check_finite(out.values(), "sum");
  auto an = a.handle(), on = out.handle();
  detail::record_if_tracked({a}, out, [an, on]() {
    if (!an->requires_grad) return;
    const T g = on->grad[0];
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T acc = T(0);
  for (const T& x : a.values()) acc += x;
  const T inv = T(1) / static_cast<T>(a.size());
  Tensor<T> out = Tensor<T>::scalar_value(acc * inv);
  detail::check_finite(out.values(), "mean");
  auto an = a.handle(), on = out.handle();
  detail::record_if_tracked({a}, out, [an, on, inv]() {
    if (!an->requires_grad) return;
    const T g = on->grad[0] * inv;
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
  });
  return out;
}

// Max over coordinates of |analytic - central difference| relative error,
// with the denominator floored at 1e-12. `f` must map `input` to a scalar.
template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                         const Tensor<T>& input, T step) {
  if (!(step > T(0))) throw std::invalid_argument("finite_diff_check: step must be > 0");
  Tensor<T> x = input.clone();
  x.set_requires_grad(true);
  std::vector<T> analytic;
  {
    Tape<T> tape;
    Tensor<T> y = f(x);
    if (y.size() != 1) {
      throw std::invalid_argument("finite_diff_check: function output is not scalar");
    }
    backward(y);
    analytic = x.grad();
  }
  double max_rel = 0.0;
  for (std::size_t i = 0; i < input.size(); ++i) {
    Tensor<T> xp = input.clone();
    Tensor<T> xm = input.clone();
    xp.values()[i] += step;
    xm.values()[i] -= step;
    const Tensor<T> yp = f(xp);
    const Tensor<T> ym = f(xm);
    if (yp.size() != 1 || ym.size() != 1) {
      throw std::invalid_argument("finite_diff_check: function output is not scalar");
    }
    const double numeric =
        (static_cast<double>(yp.scalar()) - static_cast<double>(ym.scalar())) /
        (2.0 * static_cast<double>(step));
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
    max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
  }
  return max_rel;
}

template <typename T>
void zero_grad(std::vector<Tensor<T>>& params) {
  for (Tensor<T>& p : params) p.zero_grad();
}

}  // namespace surfseg
