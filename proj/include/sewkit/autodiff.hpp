#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tape owns every value produced during a forward pass. Var is a cheap
// handle (tape pointer + node index). Nodes are appended in evaluation
// order, so the reverse of the append order is a valid topological order
// and backward() is a single reverse sweep.
//
// Broadcasting is limited to leading-axis expansion: in a binary op the
// smaller operand's shape must be a suffix of the larger one's.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include "sewkit/errors.hpp"

namespace sewkit::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// A plain array, used for parameters and other data living off the tape.
template <std::floating_point T>
struct Array {
  Shape shape;
  std::vector<T> data;

  Array() = default;
  explicit Array(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
  Array(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) throw ShapeMismatch("data length does not match shape " + to_string(shape));
  }
  std::size_t size() const noexcept { return data.size(); }
  bool operator==(const Array&) const = default;
};

template <std::floating_point T>
class Tape;

template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const noexcept { return tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Shape& shape() const { return tape_->node(id_).shape; }
  std::span<const T> value() const { return tape_->node(id_).value; }
  std::size_t size() const { return tape_->node(id_).value.size(); }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  bool requires_grad() const { return tape_->node(id_).requires_grad; }
  T item() const {
    if (size() != 1) throw ShapeMismatch("item() on tensor of shape " + to_string(shape()));
    return value()[0];
  }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

template <std::floating_point T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t)>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Shape shape, std::vector<T> value) { return push(std::move(shape), std::move(value), false); }
  Var<T> constant(const Array<T>& a) { return constant(a.shape, a.data); }
  Var<T> scalar(T v) { return constant({}, {v}); }
  Var<T> leaf(Shape shape, std::vector<T> value, bool requires_grad = true) {
    return push(std::move(shape), std::move(value), requires_grad);
  }
  Var<T> leaf(const Array<T>& a, bool requires_grad = true) { return leaf(a.shape, a.data, requires_grad); }

  /// Appends the result of a primitive. The backward closure is kept only if
  /// some input requires a gradient.
  Var<T> record(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || node(v.id()).requires_grad;
    return record_if(rg, std::move(shape), std::move(value), std::move(fn));
  }
  Var<T> record_if(bool requires_grad, Shape shape, std::vector<T> value, Backward fn) {
    auto v = push(std::move(shape), std::move(value), requires_grad);
    if (requires_grad) nodes_.back().backward = std::move(fn);
    return v;
  }

  Node& node(std::uint32_t id) { return nodes_[id]; }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }

  /// Gradient buffer of a node during backward; empty if it needs none.
  std::vector<T>& grad_buffer(std::uint32_t id) { return nodes_[id].grad; }
  bool needs_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  void backward(const Var<T>& root) {
    if (root.tape() != this) throw Error("backward root belongs to another tape");
    if (!root.shape().empty()) throw NonScalarRoot("backward root has shape " + to_string(root.shape()));
    for (std::uint32_t i = 0; i <= root.id(); ++i) {
      auto& n = nodes_[i];
      if (n.requires_grad) n.grad.assign(n.value.size(), T(0));
    }
    visits_ = 0;
    if (!nodes_[root.id()].requires_grad) return;
    nodes_[root.id()].grad[0] = T(1);
    for (std::uint32_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad) continue;
      ++visits_;
      if (n.backward) n.backward(*this, i);
    }
  }

  /// Gradient of the last backward() for `v`; zeros if it received none.
  std::vector<T> grad(const Var<T>& v) const {
    const auto& n = nodes_[v.id()];
    if (n.grad.size() == n.value.size()) return n.grad;
    return std::vector<T>(n.value.size(), T(0));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Nodes processed by the last backward(); each is visited at most once.
  std::size_t visits() const noexcept { return visits_; }
  void clear() {
    nodes_.clear();
    visits_ = 0;
  }

 private:
  Var<T> push(Shape shape, std::vector<T> value, bool requires_grad) {
    if (value.size() != numel(shape))
      throw ShapeMismatch("value length " + std::to_string(value.size()) + " does not match shape " + to_string(shape));
#ifndef NDEBUG
    for (T x : value)
      if (!std::isfinite(x)) throw Error("non-finite value recorded on tape");
#endif
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

// ---------------------------------------------------------------------------
// Helpers

namespace detail {

template <std::floating_point T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw Error("operands live on different tapes");
  return *a.tape();
}

template <std::floating_point T>
void accumulate(Tape<T>& t, std::uint32_t id, std::span<const T> g) {
  if (!t.needs_grad(id)) return;
  auto& dst = t.grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

/// True if `small` is a suffix of `big`.
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw ShapeMismatch(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeMismatch("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
inline std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

template <std::floating_point T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <std::floating_point T, class F, class DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  auto& t = *x.tape();
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const auto xi = x.id();
  return t.record(x.shape(), std::move(out), {x}, [xi, df](Tape<T>& tp, std::uint32_t self) {
    if (!tp.needs_grad(xi)) return;
    const auto& n = tp.node(self);
    const auto& in = tp.node(xi).value;
    auto& g = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < in.size(); ++i) g[i] += n.grad[i] * df(in[i], n.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryOp { add, sub, mul };

namespace detail {

/// Calls f(i, ia, ib) over the output; under suffix broadcasting the smaller
/// operand repeats with period equal to its size.
template <class F>
inline void broadcast_loop(std::size_t n, std::size_t na, std::size_t nb, F&& f) {
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else if (na == n) {
    for (std::size_t r = 0; r < n; r += nb)
      for (std::size_t j = 0; j < nb; ++j) f(r + j, r + j, j);
  } else {
    for (std::size_t r = 0; r < n; r += na)
      for (std::size_t j = 0; j < na; ++j) f(r + j, j, r + j);
  }
}

}  // namespace detail

template <std::floating_point T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinaryOp op) {
  auto& t = detail::same_tape(a, b);
  static constexpr const char* names[] = {"add", "sub", "mul"};
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), names[static_cast<int>(op)]);
  const std::size_t n = numel(out_shape);
  const std::size_t na = a.size(), nb = b.size();
  const T* av = a.value().data();
  const T* bv = b.value().data();
  std::vector<T> out(n);
  T* o = out.data();
  switch (op) {
    case BinaryOp::add: detail::broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t x, std::size_t y) { o[i] = av[x] + bv[y]; }); break;
    case BinaryOp::sub: detail::broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t x, std::size_t y) { o[i] = av[x] - bv[y]; }); break;
    case BinaryOp::mul: detail::broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t x, std::size_t y) { o[i] = av[x] * bv[y]; }); break;
  }
  const auto ia = a.id(), ib = b.id();
  return t.record(std::move(out_shape), std::move(out), {a, b}, [ia, ib, op, n, na, nb](Tape<T>& tp, std::uint32_t self) {
    const T* g = tp.node(self).grad.data();
    if (tp.needs_grad(ia)) {
      T* ga = tp.grad_buffer(ia).data();
      const T* bvals = tp.node(ib).value.data();
      if (op == BinaryOp::mul)
        detail::broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t x, std::size_t y) { ga[x] += g[i] * bvals[y]; });
      else
        detail::broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t x, std::size_t) { ga[x] += g[i]; });
    }
    if (tp.needs_grad(ib)) {
      T* gb = tp.grad_buffer(ib).data();
      const T* avals = tp.node(ia).value.data();
      if (op == BinaryOp::mul)
        detail::broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t x, std::size_t y) { gb[y] += g[i] * avals[x]; });
      else if (op == BinaryOp::sub)
        detail::broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t, std::size_t y) { gb[y] -= g[i]; });
      else
        detail::broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t, std::size_t y) { gb[y] += g[i]; });
    }
  });
}

template <std::floating_point T> Var<T> add(const Var<T>& a, const Var<T>& b) { return binary(a, b, BinaryOp::add); }
template <std::floating_point T> Var<T> sub(const Var<T>& a, const Var<T>& b) { return binary(a, b, BinaryOp::sub); }
template <std::floating_point T> Var<T> mul(const Var<T>& a, const Var<T>& b) { return binary(a, b, BinaryOp::mul); }

template <std::floating_point T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <std::floating_point T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <std::floating_point T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <std::floating_point T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <std::floating_point T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <std::floating_point T> Var<T> operator*(const Var<T>& a, T c) { return scale(a, c); }
template <std::floating_point T> Var<T> operator*(T c, const Var<T>& a) { return scale(a, c); }
template <std::floating_point T> Var<T> operator-(const Var<T>& a) { return scale(a, T(-1)); }

template <std::floating_point T>
Var<T> square(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return 2 * v; });
}

template <std::floating_point T>
Var<T> sqrt(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <std::floating_point T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <std::floating_point T>
Var<T> log(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <std::floating_point T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

/// Exact GELU, x * Phi(x).
template <std::floating_point T>
Var<T> gelu(const Var<T>& x) {
  using A = Eigen::Array<T, Eigen::Dynamic, 1>;
  static constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  static constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  const auto n = static_cast<Eigen::Index>(x.size());
  const A in = Eigen::Map<const A>(x.value().data(), n);  // aligned copy, see softmax
  const A y = T(0.5) * in * (T(1) + (in * inv_sqrt2).erf());
  std::vector<T> out(y.data(), y.data() + n);
  const auto xi = x.id();
  return x.tape()->record(x.shape(), std::move(out), {x}, [xi, n](Tape<T>& tp, std::uint32_t self) {
    if (!tp.needs_grad(xi)) return;
    const A v = Eigen::Map<const A>(tp.node(xi).value.data(), n);
    const A g = Eigen::Map<const A>(tp.node(self).grad.data(), n);
    const A d = g * (T(0.5) * (T(1) + (v * inv_sqrt2).erf()) + v * inv_sqrt2pi * (T(-0.5) * v * v).exp());
    auto& dst = tp.grad_buffer(xi);
    for (Eigen::Index i = 0; i < n; ++i) dst[static_cast<std::size_t>(i)] += d[i];
  });
}

/// log(1 + exp(x)), evaluated without overflow.
template <std::floating_point T>
Var<T> softplus(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) { return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); });
}

/// Elementwise minimum of equal-shape operands; ties route the gradient to `a`.
template <std::floating_point T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.shape() != b.shape()) throw ShapeMismatch("minimum: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  auto av = a.value();
  auto bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bv[i] < av[i] ? bv[i] : av[i];
  const auto ia = a.id(), ib = b.id();
  return t.record(a.shape(), std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::uint32_t self) {
    const auto& g = tp.node(self).grad;
    const auto& x = tp.node(ia).value;
    const auto& y = tp.node(ib).value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool pick_b = y[i] < x[i];
      if (!pick_b && tp.needs_grad(ia)) tp.grad_buffer(ia)[i] += g[i];
      if (pick_b && tp.needs_grad(ib)) tp.grad_buffer(ib)[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

/// [m, k] x [k, n] -> [m, n].
template <std::floating_point T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& t = detail::same_tape(a, b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeMismatch("matmul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  using M = detail::MatRM<T>;
  std::vector<T> out(m * n);
  Eigen::Map<M> C(out.data(), m, n);
  C.noalias() = Eigen::Map<const M>(a.value().data(), m, k) * Eigen::Map<const M>(b.value().data(), k, n);
  const auto ia = a.id(), ib = b.id();
  return t.record({m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& tp, std::uint32_t self) {
    Eigen::Map<const M> G(tp.node(self).grad.data(), m, n);
    if (tp.needs_grad(ia)) {
      Eigen::Map<M> GA(tp.grad_buffer(ia).data(), m, k);
      GA.noalias() += G * Eigen::Map<const M>(tp.node(ib).value.data(), k, n).transpose();
    }
    if (tp.needs_grad(ib)) {
      Eigen::Map<M> GB(tp.grad_buffer(ib).data(), k, n);
      GB.noalias() += Eigen::Map<const M>(tp.node(ia).value.data(), m, k).transpose() * G;
    }
  });
}

template <std::floating_point T>
Var<T> transpose(const Var<T>& a) {
  if (a.rank() != 2) throw ShapeMismatch("transpose: expected rank 2, got " + to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  using M = detail::MatRM<T>;
  std::vector<T> out(m * n);
  Eigen::Map<M>(out.data(), n, m) = Eigen::Map<const M>(a.value().data(), m, n).transpose();
  const auto ia = a.id();
  return a.tape()->record({n, m}, std::move(out), {a}, [ia, m, n](Tape<T>& tp, std::uint32_t self) {
    if (!tp.needs_grad(ia)) return;
    Eigen::Map<M>(tp.grad_buffer(ia).data(), m, n) += Eigen::Map<const M>(tp.node(self).grad.data(), n, m).transpose();
  });
}

template <std::floating_point T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeMismatch("reshape: " + to_string(a.shape()) + " to " + to_string(shape));
  std::vector<T> out(a.value().begin(), a.value().end());
  const auto ia = a.id();
  return a.tape()->record(std::move(shape), std::move(out), {a}, [ia](Tape<T>& tp, std::uint32_t self) {
    detail::accumulate<T>(tp, ia, tp.node(self).grad);
  });
}

template <std::floating_point T>
Var<T> concat(const std::vector<Var<T>>& parts, long axis_arg) {
  if (parts.empty()) throw ShapeMismatch("concat: no inputs");
  auto& t = *parts.front().tape();
  const Shape& s0 = parts.front().shape();
  const std::size_t axis = detail::normalize_axis(axis_arg, s0.size());
  Shape out_shape = s0;
  out_shape[axis] = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw Error("concat: operands live on different tapes");
    Shape s = p.shape();
    if (s.size() != s0.size()) throw ShapeMismatch("concat: rank mismatch " + to_string(s0) + " vs " + to_string(s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) throw ShapeMismatch("concat: shapes " + to_string(s0) + " and " + to_string(s));
    out_shape[axis] += s[axis];
    rg = rg || p.requires_grad();
  }
  const auto [outer, total, inner] = detail::split_axis(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    auto v = p.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * w), w, out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset));
    offset += w;
    ids.push_back(p.id());
    widths.push_back(w);
  }
  const std::size_t row = total * inner;
  return t.record_if(rg, std::move(out_shape), std::move(out), [ids, widths, outer, row](Tape<T>& tp, std::uint32_t self) {
    const auto& g = tp.node(self).grad;
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t w = widths[p];
      if (tp.needs_grad(ids[p])) {
        auto& dst = tp.grad_buffer(ids[p]);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < w; ++i) dst[o * w + i] += g[o * row + off + i];
      }
      off += w;
    }
  });
}

/// Elements [start, start + length) along `axis`.
template <std::floating_point T>
Var<T> slice(const Var<T>& x, long axis_arg, std::size_t start, std::size_t length) {
  const std::size_t axis = detail::normalize_axis(axis_arg, x.rank());
  if (start + length > x.dim(axis))
    throw ShapeMismatch("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) + ") out of " + to_string(x.shape()));
  const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(outer * length * inner);
  auto v = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner), length * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  const auto ix = x.id();
  return x.tape()->record(std::move(out_shape), std::move(out), {x},
                          [ix, outer = outer, extent = extent, inner = inner, start, length](Tape<T>& tp, std::uint32_t self) {
                            if (!tp.needs_grad(ix)) return;
                            const auto& g = tp.node(self).grad;
                            auto& dst = tp.grad_buffer(ix);
                            const std::size_t w = length * inner;
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t i = 0; i < w; ++i) dst[(o * extent + start) * inner + i] += g[o * w + i];
                          });
}

/// Rows of `table` [N, D] at `indices` -> [n, D].
template <std::floating_point T>
Var<T> gather_rows(const Var<T>& table, std::vector<std::size_t> indices) {
  if (table.rank() != 2) throw ShapeMismatch("gather_rows: table must be rank 2, got " + to_string(table.shape()));
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<T> out(indices.size() * d);
  auto v = table.value();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw ShapeMismatch("gather_rows: index " + std::to_string(indices[i]) + " out of " + std::to_string(rows));
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(indices[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const auto it = table.id();
  const std::size_t n = indices.size();
  return table.tape()->record({n, d}, std::move(out), {table}, [it, d, idx = std::move(indices)](Tape<T>& tp, std::uint32_t self) {
    if (!tp.needs_grad(it)) return;
    const auto& g = tp.node(self).grad;
    auto& dst = tp.grad_buffer(it);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dst[idx[i] * d + j] += g[i * d + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <std::floating_point T>
Var<T> sum(const Var<T>& x) {
  auto v = x.value();
  T s = std::accumulate(v.begin(), v.end(), T(0));
  const auto ix = x.id();
  return x.tape()->record({}, {s}, {x}, [ix](Tape<T>& tp, std::uint32_t self) {
    if (!tp.needs_grad(ix)) return;
    const T g = tp.node(self).grad[0];
    for (auto& d : tp.grad_buffer(ix)) d += g;
  });
}

template <std::floating_point T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Sum over one axis; the axis is removed from the shape.
template <std::floating_point T>
Var<T> sum(const Var<T>& x, long axis_arg) {
  const std::size_t axis = detail::normalize_axis(axis_arg, x.rank());
  const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(outer * inner, T(0));
  auto v = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * extent + e) * inner + i];
  const auto ix = x.id();
  return x.tape()->record(std::move(out_shape), std::move(out), {x},
                          [ix, outer = outer, extent = extent, inner = inner](Tape<T>& tp, std::uint32_t self) {
                            if (!tp.needs_grad(ix)) return;
                            const auto& g = tp.node(self).grad;
                            auto& dst = tp.grad_buffer(ix);
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t e = 0; e < extent; ++e)
                                for (std::size_t i = 0; i < inner; ++i) dst[(o * extent + e) * inner + i] += g[o * inner + i];
                          });
}

template <std::floating_point T>
Var<T> mean(const Var<T>& x, long axis) {
  const std::size_t a = detail::normalize_axis(axis, x.rank());
  return scale(sum(x, axis), T(1) / static_cast<T>(x.dim(a)));
}

// ---------------------------------------------------------------------------
// Normalizations

template <std::floating_point T>
Var<T> softmax(const Var<T>& x) {
  if (x.rank() == 0) throw ShapeMismatch("softmax: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  auto v = x.value();
  std::vector<T> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * d;
    T* o = out.data() + r * d;
    // Owned (aligned) Eigen storage keeps the vectorized path independent of
    // where the row happens to sit in memory, so results are reproducible.
    using A = Eigen::Array<T, Eigen::Dynamic, 1>;
    A row = Eigen::Map<const A>(in, static_cast<Eigen::Index>(d));
    row = (row - row.maxCoeff()).exp();
    row /= row.sum();
    std::copy(row.data(), row.data() + d, o);
  }
  const auto ix = x.id();
  return x.tape()->record(x.shape(), std::move(out), {x}, [ix, rows, d](Tape<T>& tp, std::uint32_t self) {
    if (!tp.needs_grad(ix)) return;
    const auto& n = tp.node(self);
    auto& dst = tp.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = n.value.data() + r * d;
      const T* g = n.grad.data() + r * d;
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) dst[r * d + j] += y[j] * (g[j] - dot);
    }
  });
}

/// Normalizes each row of the last axis to zero mean and unit variance, then
/// applies gain and bias (both shaped [D]).
template <std::floating_point T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  if (x.rank() == 0) throw ShapeMismatch("layernorm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw ShapeMismatch("layernorm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) + " for rows of " + std::to_string(d));
  const std::size_t rows = x.size() / d;
  auto v = x.value();
  auto gv = gain.value();
  auto bv = bias.value();
  std::vector<T> out(v.size()), xhat(v.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  auto& t = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  return t.record(x.shape(), std::move(out), {x, gain, bias},
                  [ix, ig, ib, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tp, std::uint32_t self) {
                    const auto& g = tp.node(self).grad;
                    const auto& gv = tp.node(ig).value;
                    if (tp.needs_grad(ig) || tp.needs_grad(ib)) {
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j) {
                          if (tp.needs_grad(ig)) tp.grad_buffer(ig)[j] += g[r * d + j] * xhat[r * d + j];
                          if (tp.needs_grad(ib)) tp.grad_buffer(ib)[j] += g[r * d + j];
                        }
                    }
                    if (!tp.needs_grad(ix)) return;
                    auto& dst = tp.grad_buffer(ix);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T m1 = 0, m2 = 0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const T gh = g[r * d + j] * gv[j];
                        m1 += gh;
                        m2 += gh * xhat[r * d + j];
                      }
                      m1 /= static_cast<T>(d);
                      m2 /= static_cast<T>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        const T gh = g[r * d + j] * gv[j];
                        dst[r * d + j] += rstd[r] * (gh - m1 - xhat[r * d + j] * m2);
                      }
                    }
                  });
}

/// x / sqrt(|x|^2 + eps) along the last axis.
template <std::floating_point T>
Var<T> l2_normalize(const Var<T>& x, T eps = T(1e-12)) {
  if (x.rank() == 0) throw ShapeMismatch("l2_normalize: scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  auto v = x.value();
  std::vector<T> out(v.size()), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = eps;
    for (std::size_t j = 0; j < d; ++j) s += v[r * d + j] * v[r * d + j];
    inv[r] = T(1) / std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = v[r * d + j] * inv[r];
  }
  const auto ix = x.id();
  return x.tape()->record(x.shape(), std::move(out), {x}, [ix, rows, d, inv = std::move(inv)](Tape<T>& tp, std::uint32_t self) {
    if (!tp.needs_grad(ix)) return;
    const auto& n = tp.node(self);
    auto& dst = tp.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += n.grad[r * d + j] * n.value[r * d + j];
      for (std::size_t j = 0; j < d; ++j) dst[r * d + j] += inv[r] * (n.grad[r * d + j] - n.value[r * d + j] * dot);
    }
  });
}

}  // namespace sewkit::ad
