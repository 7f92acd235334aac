#pragma once

// A small reverse-mode differentiation engine covering the operations the
// codec needs. Values live on a Tape in execution order; backward() walks the
// tape in exact reverse. Trainable weights are Parameters owned outside the
// tape; a backward pass accumulates into Parameter::grad.
//
// Instantiated with float for training and double for gradient checks.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "neurotok/error.hpp"
#include "neurotok/spectral.hpp"

namespace neurotok::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, Shape s) : name(std::move(n)), shape(std::move(s)) {
    value.assign(numel(shape), T{});
    grad.assign(value.size(), T{});
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), T{}); }
};

template <class T>
class Tape;

// Handle to a value recorded on a Tape.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Shape& shape() const { return tape_->node(id_).shape; }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t size() const { return tape_->node(id_).value.size(); }
  const std::vector<T>& value() const { return tape_->node(id_).value; }
  const std::vector<T>& grad() const { return tape_->node(id_).grad; }
  bool requires_grad() const { return tape_->node(id_).requires_grad; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return value()[0];
  }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  struct Node {
    const char* op = "leaf";
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void(Tape&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor<T> constant(Shape shape, std::vector<T> value) { return leaf(std::move(shape), std::move(value), false); }

  Tensor<T> input(Shape shape, std::vector<T> value, bool requires_grad = true) {
    return leaf(std::move(shape), std::move(value), requires_grad);
  }

  Tensor<T> parameter(Parameter<T>& p, bool trainable = true) {
    auto t = leaf(p.shape, p.value, trainable);
    if (trainable) nodes_.back().param = &p;
    return t;
  }

  // Records an op result. `backward` is dropped when no input needs grads.
  Tensor<T> record(const char* op, Shape shape, std::vector<T> value, bool requires_grad,
                   std::function<void(Tape&)> backward) {
    if (value.size() != numel(shape)) throw ShapeError(std::string(op) + ": value size does not match shape");
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Node& node(std::size_t id) { return nodes_.at(id); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of a node, allocated on first use.
  std::vector<T>& grad_of(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T{});
    return n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates in reverse execution order.
  // Parameter leaves add their gradient into Parameter::grad.
  void backward(const Tensor<T>& loss) {
    if (&loss.tape() != this) throw Error("backward: tensor belongs to another tape");
    if (loss.size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!node(loss.id()).requires_grad) return;
    grad_of(loss.id())[0] += T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this);
      if (n.param) {
        auto& g = n.param->grad;
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

 private:
  Tensor<T> leaf(Shape shape, std::vector<T> value, bool requires_grad) {
    if (value.size() != numel(shape)) throw ShapeError("leaf value size does not match shape " + shape_str(shape));
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
};

namespace detail {

template <class T>
void require_same_tape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": tensors live on different tapes");
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require_same_tape(a, b, op);
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Elementwise unary op with derivative expressed through input and output.
template <class T, class Fwd, class Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  auto& tape = x.tape();
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xid = x.id();
  const std::size_t oid = tape.size();
  return tape.record(op, x.shape(), std::move(out), x.requires_grad(), [xid, oid, deriv](Tape<T>& tp) {
    const auto& g = tp.node(oid).grad;
    const auto& in = tp.node(xid).value;
    const auto& outv = tp.node(oid).value;
    auto& gx = tp.grad_of(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(in[i], outv[i]);
  });
}

// Full reduction to a scalar; `deriv(x)` is d(out)/d(x_i).
template <class T, class Fwd, class Deriv>
Tensor<T> reduce(const char* op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  auto& tape = x.tape();
  const auto& xv = x.value();
  double acc = 0.0;
  for (T v : xv) acc += static_cast<double>(fwd(v));
  const std::size_t xid = x.id();
  const std::size_t oid = tape.size();
  return tape.record(op, {}, {static_cast<T>(acc)}, x.requires_grad(), [xid, oid, deriv](Tape<T>& tp) {
    const T g = tp.node(oid).grad[0];
    const auto& in = tp.node(xid).value;
    auto& gx = tp.grad_of(xid);
    for (std::size_t i = 0; i < in.size(); ++i) gx[i] += g * deriv(in[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
  detail::require_same_shape(x, y, "add");
  auto& tape = x.tape();
  std::vector<T> out(x.value());
  const auto& yv = y.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += yv[i];
  const std::size_t xid = x.id(), yid = y.id(), oid = tape.size();
  const bool gx = x.requires_grad(), gy = y.requires_grad();
  return tape.record("add", x.shape(), std::move(out), gx || gy, [=](Tape<T>& tp) {
    const auto& g = tp.node(oid).grad;
    if (gx) {
      auto& d = tp.grad_of(xid);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (gy) {
      auto& d = tp.grad_of(yid);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& x, const Tensor<T>& y) {
  detail::require_same_shape(x, y, "sub");
  auto& tape = x.tape();
  std::vector<T> out(x.value());
  const auto& yv = y.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= yv[i];
  const std::size_t xid = x.id(), yid = y.id(), oid = tape.size();
  const bool gx = x.requires_grad(), gy = y.requires_grad();
  return tape.record("sub", x.shape(), std::move(out), gx || gy, [=](Tape<T>& tp) {
    const auto& g = tp.node(oid).grad;
    if (gx) {
      auto& d = tp.grad_of(xid);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (gy) {
      auto& d = tp.grad_of(yid);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

// x / y elementwise.
template <class T>
Tensor<T> div(const Tensor<T>& x, const Tensor<T>& y) {
  detail::require_same_shape(x, y, "div");
  auto& tape = x.tape();
  const auto& xv = x.value();
  const auto& yv = y.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / yv[i];
  const std::size_t xid = x.id(), yid = y.id(), oid = tape.size();
  const bool gx = x.requires_grad(), gy = y.requires_grad();
  return tape.record("div", x.shape(), std::move(out), gx || gy, [=](Tape<T>& tp) {
    const auto& g = tp.node(oid).grad;
    const auto& yv2 = tp.node(yid).value;
    const auto& ov = tp.node(oid).value;
    if (gx) {
      auto& d = tp.grad_of(xid);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / yv2[i];
    }
    if (gy) {
      auto& d = tp.grad_of(yid);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i] * ov[i] / yv2[i];
    }
  });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T a) {
  return detail::unary("mul_scalar", x, [a](T v) { return v * a; }, [a](T, T) { return a; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T a) {
  return detail::unary("add_scalar", x, [a](T v) { return v + a; }, [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> elu(const Tensor<T>& x, T alpha = T{1}) {
  return detail::unary(
      "elu", x, [alpha](T v) { return v > T{0} ? v : alpha * (std::exp(v) - T{1}); },
      [alpha](T v, T out) { return v > T{0} ? T{1} : out + alpha; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

// |x|, subgradient 0 at 0.
template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(
      "sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T out) { return out > T{0} ? T{0.5} / out : T{0}; });
}

// ---------------------------------------------------------------------------
// Reductions (to a scalar)

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  return detail::reduce("sum", x, [](T v) { return v; }, [](T) { return T{1}; });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T{1} / static_cast<T>(x.size());
  return detail::reduce("mean", x, [inv](T v) { return v * inv; }, [inv](T) { return inv; });
}

// Sum of absolute values; subgradient 0 at 0.
template <class T>
Tensor<T> l1(const Tensor<T>& x) {
  return detail::reduce(
      "l1", x, [](T v) { return std::abs(v); }, [](T v) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

// Sum of squares.
template <class T>
Tensor<T> l2sq(const Tensor<T>& x) {
  return detail::reduce("l2sq", x, [](T v) { return v * v; }, [](T v) { return T{2} * v; });
}

// ---------------------------------------------------------------------------
// Quantizer bridge

// Forward value `quantized`, gradient passed unchanged to `z`.
template <class T>
Tensor<T> straight_through(const Tensor<T>& z, std::span<const T> quantized) {
  if (quantized.size() != z.size()) throw ShapeError("straight_through: shape mismatch");
  auto& tape = z.tape();
  std::vector<T> out(quantized.begin(), quantized.end());
  const std::size_t zid = z.id(), oid = tape.size();
  return tape.record("straight_through", z.shape(), std::move(out), z.requires_grad(), [=](Tape<T>& tp) {
    const auto& g = tp.node(oid).grad;
    auto& d = tp.grad_of(zid);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Convolutions, layout [B, C, T]

namespace detail {

// Column matrix [C*K, T_out] with col[(c*K + k), t] = x[c, t*S + k - P]
// (zero outside the input).
template <class T>
void im2col(const T* x, std::size_t C, std::size_t T_in, std::size_t K, std::size_t S, std::size_t P,
            std::size_t T_out, T* col) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < K; ++k) {
      T* dst = col + (c * K + k) * T_out;
      const T* src = x + c * T_in;
      for (std::size_t t = 0; t < T_out; ++t) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * S + k) - static_cast<std::ptrdiff_t>(P);
        dst[t] = pos >= 0 && pos < static_cast<std::ptrdiff_t>(T_in) ? src[pos] : T{};
      }
    }
}

// Adjoint of im2col: x[c, t*S + k - P] += col[(c*K + k), t].
template <class T>
void col2im_add(const T* col, std::size_t C, std::size_t T_in, std::size_t K, std::size_t S, std::size_t P,
                std::size_t T_out, T* x) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < K; ++k) {
      const T* src = col + (c * K + k) * T_out;
      T* dst = x + c * T_in;
      for (std::size_t t = 0; t < T_out; ++t) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * S + k) - static_cast<std::ptrdiff_t>(P);
        if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(T_in)) dst[pos] += src[t];
      }
    }
}

// C[M, N] += A[M, J] * B[J, N]
template <class T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t M, std::size_t J, std::size_t N) {
  for (std::size_t m = 0; m < M; ++m) {
    T* crow = C + m * N;
    for (std::size_t j = 0; j < J; ++j) {
      const T a = A[m * J + j];
      const T* brow = B + j * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[J, N] += A[M, J]^T * B[M, N]
template <class T>
void gemm_tn(const T* A, const T* B, T* C, std::size_t M, std::size_t J, std::size_t N) {
  for (std::size_t m = 0; m < M; ++m) {
    const T* brow = B + m * N;
    for (std::size_t j = 0; j < J; ++j) {
      const T a = A[m * J + j];
      T* crow = C + j * N;
      for (std::size_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t u = 0; u < 8; ++u) acc[u] += a[i + u] * b[i + u];
  T tail{};
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// C[M, J] += A[M, N] * B[J, N]^T
template <class T>
void gemm_nt(const T* A, const T* B, T* C, std::size_t M, std::size_t J, std::size_t N) {
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t j = 0; j < J; ++j) C[m * J + j] += dot(A + m * N, B + j * N, N);
}

}  // namespace detail

template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  detail::require_same_tape(x, w, "conv1d");
  detail::require_same_tape(x, bias, "conv1d");
  if (x.shape().size() != 3 || w.shape().size() != 3 || bias.shape().size() != 1)
    throw ShapeError("conv1d expects x[B,Cin,T], w[Cout,Cin,K], bias[Cout]");
  if (stride == 0) throw ValidationError("conv1d stride must be >= 1");
  const std::size_t B = x.dim(0), Cin = x.dim(1), T_in = x.dim(2);
  const std::size_t Cout = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Cin || bias.dim(0) != Cout)
    throw ShapeError("conv1d shape mismatch: x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " bias" +
                     shape_str(bias.shape()));
  if (T_in + 2 * padding < K) throw ShapeError("conv1d input shorter than kernel");
  const std::size_t T_out = (T_in + 2 * padding - K) / stride + 1;
  const std::size_t J = Cin * K;

  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  std::vector<T> out(B * Cout * T_out);
  std::vector<T> col(J * T_out);
  for (std::size_t b = 0; b < B; ++b) {
    T* ob = out.data() + b * Cout * T_out;
    for (std::size_t o = 0; o < Cout; ++o) std::fill(ob + o * T_out, ob + (o + 1) * T_out, bv[o]);
    detail::im2col(xv.data() + b * Cin * T_in, Cin, T_in, K, stride, padding, T_out, col.data());
    detail::gemm_nn(wv.data(), col.data(), ob, Cout, J, T_out);
  }

  auto& tape = x.tape();
  const std::size_t xid = x.id(), wid = w.id(), bid = bias.id(), oid = tape.size();
  const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = bias.requires_grad();
  return tape.record("conv1d", {B, Cout, T_out}, std::move(out), gx || gw || gb, [=](Tape<T>& tp) {
    const auto& g = tp.node(oid).grad;
    const auto& xv2 = tp.node(xid).value;
    const auto& wv2 = tp.node(wid).value;
    T* dx = gx ? tp.grad_of(xid).data() : nullptr;
    T* dw = gw ? tp.grad_of(wid).data() : nullptr;
    T* db = gb ? tp.grad_of(bid).data() : nullptr;
    std::vector<T> cols(J * T_out);
    for (std::size_t b = 0; b < B; ++b) {
      const T* gb_ = g.data() + b * Cout * T_out;
      if (db)
        for (std::size_t o = 0; o < Cout; ++o) {
          T acc{};
          for (std::size_t t = 0; t < T_out; ++t) acc += gb_[o * T_out + t];
          db[o] += acc;
        }
      if (dw) {
        detail::im2col(xv2.data() + b * Cin * T_in, Cin, T_in, K, stride, padding, T_out, cols.data());
        detail::gemm_nt(gb_, cols.data(), dw, Cout, J, T_out);
      }
      if (dx) {
        std::fill(cols.begin(), cols.end(), T{});
        detail::gemm_tn(wv2.data(), gb_, cols.data(), Cout, J, T_out);
        detail::col2im_add(cols.data(), Cin, T_in, K, stride, padding, T_out, dx + b * Cin * T_in);
      }
    }
  });
}

// Weight layout [Cin, Cout, K]; T_out = (T - 1)*stride - 2*padding + K.
// The forward pass is the adjoint of conv1d: out = col2im(W^T x).
template <class T>
Tensor<T> conv_transpose1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                           std::size_t padding) {
  detail::require_same_tape(x, w, "conv_transpose1d");
  detail::require_same_tape(x, bias, "conv_transpose1d");
  if (x.shape().size() != 3 || w.shape().size() != 3 || bias.shape().size() != 1)
    throw ShapeError("conv_transpose1d expects x[B,Cin,T], w[Cin,Cout,K], bias[Cout]");
  if (stride == 0) throw ValidationError("conv_transpose1d stride must be >= 1");
  const std::size_t B = x.dim(0), Cin = x.dim(1), T_in = x.dim(2);
  const std::size_t Cout = w.dim(1), K = w.dim(2);
  if (w.dim(0) != Cin || bias.dim(0) != Cout)
    throw ShapeError("conv_transpose1d shape mismatch: x" + shape_str(x.shape()) + " w" + shape_str(w.shape()));
  if (T_in == 0 || (T_in - 1) * stride + K <= 2 * padding) throw ShapeError("conv_transpose1d output would be empty");
  const std::size_t T_out = (T_in - 1) * stride + K - 2 * padding;
  const std::size_t J = Cout * K;

  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  std::vector<T> out(B * Cout * T_out);
  std::vector<T> col(J * T_in);
  for (std::size_t b = 0; b < B; ++b) {
    T* ob = out.data() + b * Cout * T_out;
    for (std::size_t o = 0; o < Cout; ++o) std::fill(ob + o * T_out, ob + (o + 1) * T_out, bv[o]);
    std::fill(col.begin(), col.end(), T{});
    detail::gemm_tn(wv.data(), xv.data() + b * Cin * T_in, col.data(), Cin, J, T_in);
    detail::col2im_add(col.data(), Cout, T_out, K, stride, padding, T_in, ob);
  }

  auto& tape = x.tape();
  const std::size_t xid = x.id(), wid = w.id(), bid = bias.id(), oid = tape.size();
  const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = bias.requires_grad();
  return tape.record("conv_transpose1d", {B, Cout, T_out}, std::move(out), gx || gw || gb, [=](Tape<T>& tp) {
    const auto& g = tp.node(oid).grad;
    const auto& xv2 = tp.node(xid).value;
    const auto& wv2 = tp.node(wid).value;
    T* dx = gx ? tp.grad_of(xid).data() : nullptr;
    T* dw = gw ? tp.grad_of(wid).data() : nullptr;
    T* db = gb ? tp.grad_of(bid).data() : nullptr;
    std::vector<T> gcol(J * T_in);
    for (std::size_t b = 0; b < B; ++b) {
      const T* gb_ = g.data() + b * Cout * T_out;
      if (db)
        for (std::size_t o = 0; o < Cout; ++o) {
          T acc{};
          for (std::size_t t = 0; t < T_out; ++t) acc += gb_[o * T_out + t];
          db[o] += acc;
        }
      detail::im2col(gb_, Cout, T_out, K, stride, padding, T_in, gcol.data());
      if (dw) detail::gemm_nt(xv2.data() + b * Cin * T_in, gcol.data(), dw, Cin, J, T_in);
      if (dx) detail::gemm_nn(wv2.data(), gcol.data(), dx + b * Cin * T_in, Cin, J, T_in);
    }
  });
}

// Non-overlapping average pooling along time; a trailing remainder is dropped.
template <class T>
Tensor<T> avg_pool1d(const Tensor<T>& x, std::size_t factor) {
  if (x.shape().size() != 3) throw ShapeError("avg_pool1d expects [B,C,T]");
  if (factor == 0) throw ValidationError("avg_pool1d factor must be >= 1");
  const std::size_t rows = x.dim(0) * x.dim(1), T_in = x.dim(2), T_out = T_in / factor;
  if (T_out == 0) throw ShapeError("avg_pool1d input shorter than pooling factor");
  const auto& xv = x.value();
  std::vector<T> out(rows * T_out, T{});
  const T inv = T{1} / static_cast<T>(factor);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < T_out; ++t) {
      T acc{};
      for (std::size_t j = 0; j < factor; ++j) acc += xv[r * T_in + t * factor + j];
      out[r * T_out + t] = acc * inv;
    }
  auto& tape = x.tape();
  const std::size_t xid = x.id(), oid = tape.size();
  return tape.record("avg_pool1d", {x.dim(0), x.dim(1), T_out}, std::move(out), x.requires_grad(),
                     [=](Tape<T>& tp) {
                       const auto& g = tp.node(oid).grad;
                       auto& d = tp.grad_of(xid);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t t = 0; t < T_out; ++t)
                           for (std::size_t j = 0; j < factor; ++j)
                             d[r * T_in + t * factor + j] += g[r * T_out + t] * inv;
                     });
}

// ---------------------------------------------------------------------------
// Differentiable STFT magnitude

inline constexpr double kMagnitudeFloor = 1e-8;

// x: [B, 1, T] (or [T]). Returns [B, bins, frames] with
// |X| = sqrt(re^2 + im^2 + 1e-8) of the Hann-windowed one-sided DFT.
template <class T>
Tensor<T> dft_magnitude(const Tensor<T>& x, const StftScale& scale) {
  const auto& sh = x.shape();
  std::size_t B = 1, len = 0;
  if (sh.size() == 1) {
    len = sh[0];
  } else if (sh.size() == 3 && sh[1] == 1) {
    B = sh[0];
    len = sh[2];
  } else {
    throw ShapeError("dft_magnitude expects [T] or [B,1,T], got " + shape_str(sh));
  }
  const std::size_t N = scale.window_length, hop = scale.hop_length;
  if (N == 0 || hop == 0) throw ValidationError("STFT window and hop must be positive");
  if (len < N) throw ValidationError("input of length " + std::to_string(len) + " is shorter than window " +
                                     std::to_string(N));
  const std::size_t frames = scale.frames(len), bins = scale.bins();
  const auto win = hann_window<T>(N);
  const auto& xv = x.value();

  std::vector<T> mag(B * bins * frames);
  // Spectra are kept for the backward pass.
  auto spectra = std::make_shared<std::vector<std::complex<T>>>(B * bins * frames);
  std::vector<std::complex<T>> buf(N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < frames; ++f) {
      const T* src = xv.data() + b * len + f * hop;
      for (std::size_t n = 0; n < N; ++n) buf[n] = {src[n] * win[n], T{0}};
      fft_inplace(buf);
      for (std::size_t k = 0; k < bins; ++k) {
        const std::size_t idx = (b * bins + k) * frames + f;
        (*spectra)[idx] = buf[k];
        mag[idx] = std::sqrt(std::norm(buf[k]) + static_cast<T>(kMagnitudeFloor));
      }
    }

  auto& tape = x.tape();
  const std::size_t xid = x.id(), oid = tape.size();
  Shape out_shape{B, bins, frames};
  return tape.record("dft_magnitude", out_shape, std::move(mag), x.requires_grad(), [=](Tape<T>& tp) {
    const auto& g = tp.node(oid).grad;
    const auto& m = tp.node(oid).value;
    auto& d = tp.grad_of(xid);
    // d|X_k|/dx_n = w_n Re(conj(X_k) e^{-2 pi i k n / N}) / |X_k|, which is the
    // real part of a forward DFT of c_k = g_k conj(X_k) / |X_k|.
    std::vector<std::complex<T>> c(N);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t f = 0; f < frames; ++f) {
        std::fill(c.begin(), c.end(), std::complex<T>{});
        for (std::size_t k = 0; k < bins; ++k) {
          const std::size_t idx = (b * bins + k) * frames + f;
          c[k] = g[idx] * std::conj((*spectra)[idx]) / m[idx];
        }
        fft_inplace(c);
        T* dst = d.data() + b * len + f * hop;
        for (std::size_t n = 0; n < N; ++n) dst[n] += win[n] * c[n].real();
      }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckOptions {
  double epsilon = 1e-4;
  // Denominator floor for the relative error, as a fraction of the largest
  // analytic gradient magnitude within the same parameter.
  double relative_floor = 1e-3;
  double absolute_floor = 1e-8;
  // Upper bound on checked elements per parameter (0 = all), taken at an even
  // stride so every region of the tensor is visited.
  std::size_t max_elements_per_parameter = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// `loss(tape)` must build a scalar from tape.parameter(p) for every p in
// `params`. Compares reverse-mode gradients against central differences.
template <class F>
GradCheckResult grad_check(F&& loss, const std::vector<Parameter<double>*>& params, const GradCheckOptions& opt = {}) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    auto l = loss(tape);
    tape.backward(l);
  }
  auto evaluate = [&]() {
    Tape<double> tape;
    return loss(tape).item();
  };

  GradCheckResult res;
  for (auto* p : params) {
    const std::vector<double> analytic = p->grad;
    double scale = 0.0;
    for (double g : analytic) scale = std::max(scale, std::abs(g));
    const double floor = std::max(opt.absolute_floor, opt.relative_floor * scale);
    const std::size_t n = p->value.size();
    const std::size_t step =
        opt.max_elements_per_parameter == 0 || n <= opt.max_elements_per_parameter
            ? 1
            : (n + opt.max_elements_per_parameter - 1) / opt.max_elements_per_parameter;
    for (std::size_t i = 0; i < n; i += step) {
      const double orig = p->value[i];
      p->value[i] = orig + opt.epsilon;
      const double up = evaluate();
      p->value[i] = orig - opt.epsilon;
      const double down = evaluate();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.epsilon);
      const double err =
          std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      ++res.checked;
      if (err > res.max_relative_error) {
        res.max_relative_error = err;
        res.worst_parameter = p->name;
        res.worst_index = i;
        res.worst_analytic = analytic[i];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace neurotok::ad
