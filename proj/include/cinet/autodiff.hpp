#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cinet/error.hpp"
#include "cinet/tensor.hpp"

namespace cinet {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  scale,
  abs_elem,
  relu,
  sqrt_elem,
  matmul,
  transpose,
  row_softmax,
  conv2d_3x3,
  pool_mean_2x2,
  pool_spatial_mean,
  fully_connected,
  sum_all,
  concat_vec,
  reshape,
  flatten_channels,
  unflatten_channels,
  cross_entropy,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::abs_elem: return "abs";
    case OpKind::relu: return "relu";
    case OpKind::sqrt_elem: return "sqrt";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::row_softmax: return "row_softmax";
    case OpKind::conv2d_3x3: return "conv2d_3x3";
    case OpKind::pool_mean_2x2: return "pool_mean_2x2";
    case OpKind::pool_spatial_mean: return "pool_spatial_mean";
    case OpKind::fully_connected: return "fully_connected";
    case OpKind::sum_all: return "sum_all";
    case OpKind::concat_vec: return "concat";
    case OpKind::reshape: return "reshape";
    case OpKind::flatten_channels: return "flatten_channels";
    case OpKind::unflatten_channels: return "unflatten_channels";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "?";
}

// Every differentiable op registered on the tape. The gradient-check suite is
// required to cover each entry; a test enforces the coverage.
inline const std::vector<OpKind>& differentiable_ops() {
  static const std::vector<OpKind> ops = {
      OpKind::add,          OpKind::sub,
      OpKind::mul,          OpKind::scale,
      OpKind::abs_elem,     OpKind::relu,
      OpKind::sqrt_elem,    OpKind::matmul,
      OpKind::transpose,    OpKind::row_softmax,
      OpKind::conv2d_3x3,   OpKind::pool_mean_2x2,
      OpKind::pool_spatial_mean, OpKind::fully_connected,
      OpKind::sum_all,      OpKind::concat_vec,
      OpKind::reshape,      OpKind::flatten_channels,
      OpKind::unflatten_channels, OpKind::cross_entropy,
  };
  return ops;
}

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  friend Var record_op(Tape& t, OpKind kind, Tensor value, std::vector<int> parents,
                       std::function<void(const Tensor&, Tape&)> backward);
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using GradMap = std::map<std::string, Tensor>;

// Records ops in execution order; backward() replays them strictly in
// reverse, accumulating gradients keyed by parameter name.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor v) {
    check_finite(v, "leaf");
    return make_leaf(std::move(v), /*requires_grad=*/false, "");
  }

  // Named leaf. Binding the same name twice returns the existing node so a
  // parameter used on several paths accumulates one gradient.
  Var param(const std::string& name, const Tensor& v) {
    auto it = bound_.find(name);
    if (it != bound_.end()) {
      if (nodes_[static_cast<std::size_t>(it->second)].value.shape() != v.shape()) {
        throw ContractError("parameter '" + name + "' rebound with a different shape");
      }
      return Var(this, it->second);
    }
    check_finite(v, "leaf");
    Var var = make_leaf(v, v.requires_grad, name);
    bound_.emplace(name, var.id());
    return var;
  }

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  std::size_t size() const { return nodes_.size(); }
  OpKind kind(int id) const { return nodes_[static_cast<std::size_t>(id)].kind; }

  // Gradients of a scalar loss with respect to every bound parameter.
  // Parameters with no path to the loss get zero tensors.
  GradMap backward(const Var& loss) {
    if (loss.tape() != this) throw ContractError("loss var does not belong to this tape");
    if (loss.value().numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(loss.value().shape()));
    }
    grads_.assign(nodes_.size(), Tensor{});
    if (node(loss.id()).requires_grad) {
      grads_[static_cast<std::size_t>(loss.id())] = Tensor::scalar(1);
    }
    for (int id = loss.id(); id >= 0; --id) {
      auto& n = node(id);
      if (!n.requires_grad || grads_[static_cast<std::size_t>(id)].numel() == 0) continue;
      if (n.backward) n.backward(grads_[static_cast<std::size_t>(id)], *this);
    }
    GradMap out;
    for (const auto& [name, id] : bound_) {
      Tensor& g = grads_[static_cast<std::size_t>(id)];
      out.emplace(name, g.numel() ? std::move(g) : Tensor(node(id).value.shape()));
    }
    return out;
  }

  // Gradient of the most recent backward() at an arbitrary node (zeros when
  // the node was off the path). For tests that differentiate w.r.t. inputs.
  Tensor grad_or_zero(const Var& v) const {
    if (v.tape() != this) throw ContractError("var does not belong to this tape");
    if (static_cast<std::size_t>(v.id()) < grads_.size() &&
        grads_[static_cast<std::size_t>(v.id())].numel()) {
      return grads_[static_cast<std::size_t>(v.id())];
    }
    return Tensor(v.value().shape());
  }

  // Smallest |input| reaching a kink (relu, abs, sqrt). Finite-difference
  // probes near a kink are meaningless; callers resample below a threshold.
  double min_kink_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& n : nodes_) {
      if (n.kind != OpKind::relu && n.kind != OpKind::abs_elem && n.kind != OpKind::sqrt_elem) {
        continue;
      }
      const Tensor& x = nodes_[static_cast<std::size_t>(n.parents[0])].value;
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        m = std::min(m, std::abs(static_cast<double>(x[i])));
      }
    }
    return m;
  }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    Tensor value;
    std::vector<int> parents;
    std::function<void(const Tensor& grad_out, Tape&)> backward;
    std::string name;
    bool requires_grad = false;
  };

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  static void check_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) {
      throw ValueError(std::string("non-finite values in output of ") + what);
    }
  }

  Var make_leaf(Tensor v, bool requires_grad, std::string name) {
    Node n;
    n.kind = OpKind::leaf;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  void accumulate(int id, const Tensor& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    Tensor& slot = grads_[static_cast<std::size_t>(id)];
    if (slot.numel() == 0) slot = Tensor(n.value.shape());
    Scalar* d = slot.data();
    const Scalar* s = g.data();
    for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += s[i];
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> bound_;
  std::vector<Tensor> grads_;

  friend Var record_op(Tape& t, OpKind kind, Tensor value, std::vector<int> parents,
                       std::function<void(const Tensor&, Tape&)> backward);
  friend void add_grad(Tape& t, int id, const Tensor& g);
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Shape& Var::shape() const { return value().shape(); }

inline Var record_op(Tape& t, OpKind kind, Tensor value, std::vector<int> parents,
                     std::function<void(const Tensor&, Tape&)> backward) {
  Tape::check_finite(value, op_name(kind));
  Tape::Node n;
  n.kind = kind;
  n.value = std::move(value);
  n.parents = std::move(parents);
  bool rg = false;
  for (int p : n.parents) rg = rg || t.node(p).requires_grad;
  n.requires_grad = rg;
  if (rg) n.backward = std::move(backward);
  t.nodes_.push_back(std::move(n));
  return Var(&t, static_cast<int>(t.nodes_.size()) - 1);
}

inline void add_grad(Tape& t, int id, const Tensor& g) { t.accumulate(id, g); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw ContractError("operands must live on the same tape");
  }
  return *a.tape();
}

inline void require_rank(const Var& v, int rank, const char* op) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + " expects rank-" + std::to_string(rank) +
                     " input, got shape " + shape_str(v.shape()));
  }
}

// add/sub/mul support same-shape operands or one single-element operand
// broadcast against the other; nothing more.
enum class Broadcast { none, left_scalar, right_scalar };

inline Broadcast broadcast_mode(const Var& a, const Var& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (a.value().numel() == 1) return Broadcast::left_scalar;
  if (b.value().numel() == 1) return Broadcast::right_scalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                   " and " + shape_str(b.shape()));
}

inline Tensor reduce_to_scalar_shape(const Tensor& g, const Shape& shape) {
  Tensor out(shape);
  Scalar acc = 0;
  for (std::int64_t i = 0; i < g.numel(); ++i) acc += g[i];
  out[0] = acc;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  auto mode = detail::broadcast_mode(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(mode == detail::Broadcast::left_scalar ? bv.shape() : av.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    Scalar x = mode == detail::Broadcast::left_scalar ? av[0] : av[i];
    Scalar y = mode == detail::Broadcast::right_scalar ? bv[0] : bv[i];
    out[i] = x + y;
  }
  int ia = a.id(), ib = b.id();
  return record_op(t, OpKind::add, std::move(out), {ia, ib},
                   [ia, ib, mode](const Tensor& g, Tape& tp) {
                     if (mode == detail::Broadcast::left_scalar) {
                       add_grad(tp, ia, detail::reduce_to_scalar_shape(g, tp.value(ia).shape()));
                     } else {
                       add_grad(tp, ia, g);
                     }
                     if (mode == detail::Broadcast::right_scalar) {
                       add_grad(tp, ib, detail::reduce_to_scalar_shape(g, tp.value(ib).shape()));
                     } else {
                       add_grad(tp, ib, g);
                     }
                   });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  auto mode = detail::broadcast_mode(a, b, "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(mode == detail::Broadcast::left_scalar ? bv.shape() : av.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    Scalar x = mode == detail::Broadcast::left_scalar ? av[0] : av[i];
    Scalar y = mode == detail::Broadcast::right_scalar ? bv[0] : bv[i];
    out[i] = x - y;
  }
  int ia = a.id(), ib = b.id();
  return record_op(t, OpKind::sub, std::move(out), {ia, ib},
                   [ia, ib, mode](const Tensor& g, Tape& tp) {
                     if (mode == detail::Broadcast::left_scalar) {
                       add_grad(tp, ia, detail::reduce_to_scalar_shape(g, tp.value(ia).shape()));
                     } else {
                       add_grad(tp, ia, g);
                     }
                     Tensor neg(g.shape());
                     for (std::int64_t i = 0; i < g.numel(); ++i) neg[i] = -g[i];
                     if (mode == detail::Broadcast::right_scalar) {
                       add_grad(tp, ib, detail::reduce_to_scalar_shape(neg, tp.value(ib).shape()));
                     } else {
                       add_grad(tp, ib, neg);
                     }
                   });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  auto mode = detail::broadcast_mode(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(mode == detail::Broadcast::left_scalar ? bv.shape() : av.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    Scalar x = mode == detail::Broadcast::left_scalar ? av[0] : av[i];
    Scalar y = mode == detail::Broadcast::right_scalar ? bv[0] : bv[i];
    out[i] = x * y;
  }
  int ia = a.id(), ib = b.id();
  return record_op(t, OpKind::mul, std::move(out), {ia, ib},
                   [ia, ib, mode](const Tensor& g, Tape& tp) {
                     const Tensor& av = tp.value(ia);
                     const Tensor& bv = tp.value(ib);
                     Tensor ga(av.shape());
                     Tensor gb(bv.shape());
                     for (std::int64_t i = 0; i < g.numel(); ++i) {
                       Scalar x = mode == detail::Broadcast::left_scalar ? av[0] : av[i];
                       Scalar y = mode == detail::Broadcast::right_scalar ? bv[0] : bv[i];
                       if (mode == detail::Broadcast::left_scalar) {
                         ga[0] += g[i] * y;
                       } else {
                         ga[i] += g[i] * y;
                       }
                       if (mode == detail::Broadcast::right_scalar) {
                         gb[0] += g[i] * x;
                       } else {
                         gb[i] += g[i] * x;
                       }
                     }
                     add_grad(tp, ia, ga);
                     add_grad(tp, ib, gb);
                   });
}

inline Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * static_cast<Scalar>(s);
  int ia = a.id();
  return record_op(t, OpKind::scale, std::move(out), {ia},
                   [ia, s](const Tensor& g, Tape& tp) {
                     Tensor ga(g.shape());
                     for (std::int64_t i = 0; i < g.numel(); ++i) {
                       ga[i] = g[i] * static_cast<Scalar>(s);
                     }
                     add_grad(tp, ia, ga);
                   });
}

// |x| with subgradient 0 at 0
inline Var abs(const Var& a) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = std::fabs(av[i]);
  int ia = a.id();
  return record_op(t, OpKind::abs_elem, std::move(out), {ia},
                   [ia](const Tensor& g, Tape& tp) {
                     const Tensor& x = tp.value(ia);
                     Tensor ga(x.shape());
                     for (std::int64_t i = 0; i < x.numel(); ++i) {
                       ga[i] = x[i] > 0 ? g[i] : (x[i] < 0 ? -g[i] : Scalar(0));
                     }
                     add_grad(tp, ia, ga);
                   });
}

inline Var relu(const Var& a) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] > 0 ? av[i] : Scalar(0);
  int ia = a.id();
  return record_op(t, OpKind::relu, std::move(out), {ia},
                   [ia](const Tensor& g, Tape& tp) {
                     const Tensor& x = tp.value(ia);
                     Tensor ga(x.shape());
                     for (std::int64_t i = 0; i < x.numel(); ++i) {
                       ga[i] = x[i] > 0 ? g[i] : Scalar(0);
                     }
                     add_grad(tp, ia, ga);
                   });
}

// elementwise square root; subgradient 0 at 0
inline Var sqrt(const Var& a) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) {
    if (av[i] < 0) throw ValueError("sqrt of negative value");
    out[i] = std::sqrt(av[i]);
  }
  int ia = a.id();
  return record_op(t, OpKind::sqrt_elem, std::move(out), {ia},
                   [ia](const Tensor& g, Tape& tp) {
                     const Tensor& x = tp.value(ia);
                     Tensor ga(x.shape());
                     for (std::int64_t i = 0; i < x.numel(); ++i) {
                       ga[i] = x[i] > 0 ? g[i] / (2 * std::sqrt(x[i])) : Scalar(0);
                     }
                     add_grad(tp, ia, ga);
                   });
}

// ---------------------------------------------------------------------------
// linear algebra

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.extent(1) != bv.extent(0)) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  }
  int m = av.extent(0), k = av.extent(1), n = bv.extent(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      Scalar x = av.at(i, kk);
      for (int j = 0; j < n; ++j) out.at(i, j) += x * bv.at(kk, j);
    }
  }
  int ia = a.id(), ib = b.id();
  return record_op(t, OpKind::matmul, std::move(out), {ia, ib},
                   [ia, ib, m, k, n](const Tensor& g, Tape& tp) {
                     const Tensor& av = tp.value(ia);
                     const Tensor& bv = tp.value(ib);
                     Tensor ga({m, k});
                     Tensor gb({k, n});
                     for (int i = 0; i < m; ++i) {
                       for (int j = 0; j < n; ++j) {
                         Scalar go = g.at(i, j);
                         for (int kk = 0; kk < k; ++kk) {
                           ga.at(i, kk) += go * bv.at(kk, j);
                           gb.at(kk, j) += av.at(i, kk) * go;
                         }
                       }
                     }
                     add_grad(tp, ia, ga);
                     add_grad(tp, ib, gb);
                   });
}

inline Var transpose(const Var& a) {
  Tape& t = *a.tape();
  detail::require_rank(a, 2, "transpose");
  const Tensor& av = a.value();
  int m = av.extent(0), n = av.extent(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  }
  int ia = a.id();
  return record_op(t, OpKind::transpose, std::move(out), {ia},
                   [ia, m, n](const Tensor& g, Tape& tp) {
                     Tensor ga({m, n});
                     for (int i = 0; i < m; ++i) {
                       for (int j = 0; j < n; ++j) ga.at(i, j) = g.at(j, i);
                     }
                     add_grad(tp, ia, ga);
                   });
}

// Softmax over each row, stabilized by subtracting the row max.
inline Var row_softmax(const Var& a) {
  Tape& t = *a.tape();
  detail::require_rank(a, 2, "row_softmax");
  const Tensor& av = a.value();
  int m = av.extent(0), n = av.extent(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    Scalar mx = av.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, av.at(i, j));
    Scalar denom = 0;
    for (int j = 0; j < n; ++j) {
      Scalar e = std::exp(av.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= denom;
  }
  int ia = a.id();
  return record_op(t, OpKind::row_softmax, std::move(out), {ia},
                   [ia, m, n](const Tensor& g, Tape& tp) {
                     // row i: dx = y .* (g - <g, y>), recomputing y from the input
                     Tensor ga({m, n});
                     const Tensor& x = tp.value(ia);
                     for (int i = 0; i < m; ++i) {
                       Scalar mx = x.at(i, 0);
                       for (int j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
                       std::vector<Scalar> row(static_cast<std::size_t>(n));
                       Scalar denom = 0;
                       for (int j = 0; j < n; ++j) {
                         row[static_cast<std::size_t>(j)] = std::exp(x.at(i, j) - mx);
                         denom += row[static_cast<std::size_t>(j)];
                       }
                       Scalar dot = 0;
                       for (int j = 0; j < n; ++j) {
                         row[static_cast<std::size_t>(j)] /= denom;
                         dot += g.at(i, j) * row[static_cast<std::size_t>(j)];
                       }
                       for (int j = 0; j < n; ++j) {
                         ga.at(i, j) = row[static_cast<std::size_t>(j)] * (g.at(i, j) - dot);
                       }
                     }
                     add_grad(tp, ia, ga);
                   });
}

// ---------------------------------------------------------------------------
// convolution and pooling (tensors are [rows, cols, channels])

// 3x3 cross-correlation, zero padding 1, stride 1; spatial shape preserved.
// Accumulation order per output scalar: bias first, then (dr, dq, ci)
// ascending — the loop oracle mirrors this order.
inline Var conv2d_3x3(const Var& x, const Var& kernel, const Var& bias) {
  Tape& t = detail::same_tape(x, kernel);
  detail::same_tape(x, bias);
  detail::require_rank(x, 3, "conv2d_3x3");
  detail::require_rank(kernel, 4, "conv2d_3x3 kernel");
  detail::require_rank(bias, 1, "conv2d_3x3 bias");
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  int h = xv.extent(0), w = xv.extent(1), cin = xv.extent(2);
  if (kv.extent(0) != 3 || kv.extent(1) != 3 || kv.extent(2) != cin) {
    throw ShapeError("conv2d_3x3: kernel " + shape_str(kv.shape()) +
                     " incompatible with input " + shape_str(xv.shape()));
  }
  int cout = kv.extent(3);
  if (bias.value().extent(0) != cout) {
    throw ShapeError("conv2d_3x3: bias " + shape_str(bias.shape()) +
                     " incompatible with kernel " + shape_str(kv.shape()));
  }
  Tensor out({h, w, cout});
  {
    const Scalar* __restrict xp = xv.data();
    const Scalar* __restrict kp = kv.data();
    const Scalar* __restrict bp = bias.value().data();
    Scalar* __restrict op = out.data();
    for (int r = 0; r < h; ++r) {
      for (int q = 0; q < w; ++q) {
        Scalar* orow = op + (static_cast<std::size_t>(r) * w + q) * cout;
        for (int co = 0; co < cout; ++co) orow[co] = bp[co];
        for (int dr = 0; dr < 3; ++dr) {
          int rr = r + dr - 1;
          if (rr < 0 || rr >= h) continue;
          for (int dq = 0; dq < 3; ++dq) {
            int qq = q + dq - 1;
            if (qq < 0 || qq >= w) continue;
            const Scalar* xrow = xp + (static_cast<std::size_t>(rr) * w + qq) * cin;
            const Scalar* krow = kp + (static_cast<std::size_t>(dr) * 3 + dq) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
              Scalar xval = xrow[ci];
              const Scalar* kc = krow + static_cast<std::size_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) orow[co] += xval * kc[co];
            }
          }
        }
      }
    }
  }
  int ix = x.id(), ik = kernel.id(), ib = bias.id();
  return record_op(
      t, OpKind::conv2d_3x3, std::move(out), {ix, ik, ib},
      [ix, ik, ib, h, w, cin, cout](const Tensor& g, Tape& tp) {
        const Scalar* __restrict xp = tp.value(ix).data();
        const Scalar* __restrict kp = tp.value(ik).data();
        const Scalar* __restrict gp = g.data();
        Tensor gx({h, w, cin});
        Tensor gk({3, 3, cin, cout});
        Tensor gb({cout});
        Scalar* __restrict gxp = gx.data();
        Scalar* __restrict gkp = gk.data();
        Scalar* __restrict gbp = gb.data();
        for (int r = 0; r < h; ++r) {
          for (int q = 0; q < w; ++q) {
            const Scalar* grow = gp + (static_cast<std::size_t>(r) * w + q) * cout;
            for (int co = 0; co < cout; ++co) gbp[co] += grow[co];
            for (int dr = 0; dr < 3; ++dr) {
              int rr = r + dr - 1;
              if (rr < 0 || rr >= h) continue;
              for (int dq = 0; dq < 3; ++dq) {
                int qq = q + dq - 1;
                if (qq < 0 || qq >= w) continue;
                const Scalar* xrow = xp + (static_cast<std::size_t>(rr) * w + qq) * cin;
                Scalar* gxrow = gxp + (static_cast<std::size_t>(rr) * w + qq) * cin;
                const Scalar* kbase = kp + (static_cast<std::size_t>(dr) * 3 + dq) * cin * cout;
                Scalar* gkbase = gkp + (static_cast<std::size_t>(dr) * 3 + dq) * cin * cout;
                for (int ci = 0; ci < cin; ++ci) {
                  Scalar xval = xrow[ci];
                  const Scalar* kc = kbase + static_cast<std::size_t>(ci) * cout;
                  Scalar* gkc = gkbase + static_cast<std::size_t>(ci) * cout;
                  Scalar acc = 0;
                  for (int co = 0; co < cout; ++co) {
                    Scalar go = grow[co];
                    gkc[co] += xval * go;
                    acc += kc[co] * go;
                  }
                  gxrow[ci] += acc;
                }
              }
            }
          }
        }
        add_grad(tp, ix, gx);
        add_grad(tp, ik, gk);
        add_grad(tp, ib, gb);
      });
}

// 2x2 mean pooling with stride 2; even spatial extents required.
inline Var pool_mean_2x2(const Var& x) {
  Tape& t = *x.tape();
  detail::require_rank(x, 3, "pool_mean_2x2");
  const Tensor& xv = x.value();
  int h = xv.extent(0), w = xv.extent(1), c = xv.extent(2);
  if (h % 2 || w % 2) {
    throw ShapeError("pool_mean_2x2 requires even spatial extents, got " +
                     shape_str(xv.shape()));
  }
  Tensor out({h / 2, w / 2, c});
  for (int r = 0; r < h / 2; ++r) {
    for (int q = 0; q < w / 2; ++q) {
      for (int ch = 0; ch < c; ++ch) {
        out.at(r, q, ch) = (xv.at(2 * r, 2 * q, ch) + xv.at(2 * r, 2 * q + 1, ch) +
                            xv.at(2 * r + 1, 2 * q, ch) + xv.at(2 * r + 1, 2 * q + 1, ch)) /
                           Scalar(4);
      }
    }
  }
  int ix = x.id();
  return record_op(t, OpKind::pool_mean_2x2, std::move(out), {ix},
                   [ix, h, w, c](const Tensor& g, Tape& tp) {
                     Tensor gx({h, w, c});
                     for (int r = 0; r < h / 2; ++r) {
                       for (int q = 0; q < w / 2; ++q) {
                         for (int ch = 0; ch < c; ++ch) {
                           Scalar v = g.at(r, q, ch) / Scalar(4);
                           gx.at(2 * r, 2 * q, ch) += v;
                           gx.at(2 * r, 2 * q + 1, ch) += v;
                           gx.at(2 * r + 1, 2 * q, ch) += v;
                           gx.at(2 * r + 1, 2 * q + 1, ch) += v;
                         }
                       }
                     }
                     add_grad(tp, ix, gx);
                   });
}

// per-channel mean over all spatial positions: [h,w,c] -> [c]
inline Var pool_spatial_mean(const Var& x) {
  Tape& t = *x.tape();
  detail::require_rank(x, 3, "pool_spatial_mean");
  const Tensor& xv = x.value();
  int h = xv.extent(0), w = xv.extent(1), c = xv.extent(2);
  Tensor out({c});
  for (int r = 0; r < h; ++r) {
    for (int q = 0; q < w; ++q) {
      for (int ch = 0; ch < c; ++ch) out.at(ch) += xv.at(r, q, ch);
    }
  }
  for (int ch = 0; ch < c; ++ch) out.at(ch) /= static_cast<Scalar>(h * w);
  int ix = x.id();
  return record_op(t, OpKind::pool_spatial_mean, std::move(out), {ix},
                   [ix, h, w, c](const Tensor& g, Tape& tp) {
                     Tensor gx({h, w, c});
                     Scalar inv = Scalar(1) / static_cast<Scalar>(h * w);
                     for (int r = 0; r < h; ++r) {
                       for (int q = 0; q < w; ++q) {
                         for (int ch = 0; ch < c; ++ch) gx.at(r, q, ch) = g.at(ch) * inv;
                       }
                     }
                     add_grad(tp, ix, gx);
                   });
}

// affine map: out[i] = bias[i] + sum_j weight[i][j] * x[j]
inline Var fully_connected(const Var& x, const Var& weight, const Var& bias) {
  Tape& t = detail::same_tape(x, weight);
  detail::same_tape(x, bias);
  detail::require_rank(x, 1, "fully_connected");
  detail::require_rank(weight, 2, "fully_connected weight");
  detail::require_rank(bias, 1, "fully_connected bias");
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  int dout = wv.extent(0), din = wv.extent(1);
  if (xv.extent(0) != din || bias.value().extent(0) != dout) {
    throw ShapeError("fully_connected: x " + shape_str(xv.shape()) + ", weight " +
                     shape_str(wv.shape()) + ", bias " + shape_str(bias.shape()) +
                     " are inconsistent");
  }
  Tensor out({dout});
  const Tensor& bv = bias.value();
  for (int i = 0; i < dout; ++i) {
    Scalar acc = bv.at(i);
    for (int j = 0; j < din; ++j) acc += wv.at(i, j) * xv.at(j);
    out.at(i) = acc;
  }
  int ix = x.id(), iw = weight.id(), ib = bias.id();
  return record_op(t, OpKind::fully_connected, std::move(out), {ix, iw, ib},
                   [ix, iw, ib, dout, din](const Tensor& g, Tape& tp) {
                     const Tensor& xv = tp.value(ix);
                     const Tensor& wv = tp.value(iw);
                     Tensor gx({din});
                     Tensor gw({dout, din});
                     for (int i = 0; i < dout; ++i) {
                       Scalar go = g.at(i);
                       for (int j = 0; j < din; ++j) {
                         gx.at(j) += wv.at(i, j) * go;
                         gw.at(i, j) += xv.at(j) * go;
                       }
                     }
                     add_grad(tp, ix, gx);
                     add_grad(tp, iw, gw);
                     add_grad(tp, ib, g);
                   });
}

// ---------------------------------------------------------------------------
// reductions and reshapes

inline Var sum_all(const Var& a) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  Scalar acc = 0;
  for (std::int64_t i = 0; i < av.numel(); ++i) acc += av[i];
  int ia = a.id();
  return record_op(t, OpKind::sum_all, Tensor::scalar(acc), {ia},
                   [ia](const Tensor& g, Tape& tp) {
                     const Tensor& x = tp.value(ia);
                     add_grad(tp, ia, Tensor::full(x.shape(), g[0]));
                   });
}

inline Var concat(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_rank(a, 1, "concat");
  detail::require_rank(b, 1, "concat");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  int p = av.extent(0), q = bv.extent(0);
  Tensor out({p + q});
  for (int i = 0; i < p; ++i) out.at(i) = av.at(i);
  for (int i = 0; i < q; ++i) out.at(p + i) = bv.at(i);
  int ia = a.id(), ib = b.id();
  return record_op(t, OpKind::concat_vec, std::move(out), {ia, ib},
                   [ia, ib, p, q](const Tensor& g, Tape& tp) {
                     Tensor ga({p});
                     Tensor gb({q});
                     for (int i = 0; i < p; ++i) ga.at(i) = g.at(i);
                     for (int i = 0; i < q; ++i) gb.at(i) = g.at(p + i);
                     add_grad(tp, ia, ga);
                     add_grad(tp, ib, gb);
                   });
}

inline Var reshape(const Var& a, Shape shape) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  if (shape_numel(shape) != av.numel()) {
    throw ShapeError("reshape from " + shape_str(av.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  }
  Tensor out(shape);
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i];
  int ia = a.id();
  return record_op(t, OpKind::reshape, std::move(out), {ia},
                   [ia](const Tensor& g, Tape& tp) {
                     const Tensor& x = tp.value(ia);
                     Tensor ga(x.shape());
                     for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i];
                     add_grad(tp, ia, ga);
                   });
}

// [h,w,c] -> [c, h*w]; column r*w + q holds spatial position (r, q).
inline Var flatten_channels(const Var& x) {
  Tape& t = *x.tape();
  detail::require_rank(x, 3, "flatten_channels");
  const Tensor& xv = x.value();
  int h = xv.extent(0), w = xv.extent(1), c = xv.extent(2);
  Tensor out({c, h * w});
  for (int r = 0; r < h; ++r) {
    for (int q = 0; q < w; ++q) {
      for (int ch = 0; ch < c; ++ch) out.at(ch, r * w + q) = xv.at(r, q, ch);
    }
  }
  int ix = x.id();
  return record_op(t, OpKind::flatten_channels, std::move(out), {ix},
                   [ix, h, w, c](const Tensor& g, Tape& tp) {
                     Tensor gx({h, w, c});
                     for (int r = 0; r < h; ++r) {
                       for (int q = 0; q < w; ++q) {
                         for (int ch = 0; ch < c; ++ch) gx.at(r, q, ch) = g.at(ch, r * w + q);
                       }
                     }
                     add_grad(tp, ix, gx);
                   });
}

// inverse of flatten_channels
inline Var unflatten_channels(const Var& x, int h, int w) {
  Tape& t = *x.tape();
  detail::require_rank(x, 2, "unflatten_channels");
  const Tensor& xv = x.value();
  int c = xv.extent(0);
  if (xv.extent(1) != h * w) {
    throw ShapeError("unflatten_channels: " + shape_str(xv.shape()) + " does not match " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor out({h, w, c});
  for (int r = 0; r < h; ++r) {
    for (int q = 0; q < w; ++q) {
      for (int ch = 0; ch < c; ++ch) out.at(r, q, ch) = xv.at(ch, r * w + q);
    }
  }
  int ix = x.id();
  return record_op(t, OpKind::unflatten_channels, std::move(out), {ix},
                   [ix, h, w, c](const Tensor& g, Tape& tp) {
                     Tensor gx({c, h * w});
                     for (int r = 0; r < h; ++r) {
                       for (int q = 0; q < w; ++q) {
                         for (int ch = 0; ch < c; ++ch) gx.at(ch, r * w + q) = g.at(r, q, ch);
                       }
                     }
                     add_grad(tp, ix, gx);
                   });
}

// Softmax cross-entropy against one label, fused for numeric stability.
inline Var cross_entropy_logits(const Var& logits, int label) {
  Tape& t = *logits.tape();
  detail::require_rank(logits, 1, "cross_entropy");
  const Tensor& lv = logits.value();
  int k = lv.extent(0);
  if (label < 0 || label >= k) {
    throw IndexError("cross_entropy label " + std::to_string(label) + " out of range [0," +
                     std::to_string(k) + ")");
  }
  Scalar mx = lv.at(0);
  for (int i = 1; i < k; ++i) mx = std::max(mx, lv.at(i));
  Scalar denom = 0;
  for (int i = 0; i < k; ++i) denom += std::exp(lv.at(i) - mx);
  Scalar loss = mx + std::log(denom) - lv.at(label);
  int il = logits.id();
  return record_op(t, OpKind::cross_entropy, Tensor::scalar(loss), {il},
                   [il, label, k](const Tensor& g, Tape& tp) {
                     const Tensor& lv = tp.value(il);
                     Scalar mx = lv.at(0);
                     for (int i = 1; i < k; ++i) mx = std::max(mx, lv.at(i));
                     Scalar denom = 0;
                     for (int i = 0; i < k; ++i) denom += std::exp(lv.at(i) - mx);
                     Tensor gl({k});
                     for (int i = 0; i < k; ++i) {
                       Scalar p = std::exp(lv.at(i) - mx) / denom;
                       gl.at(i) = g[0] * (p - (i == label ? Scalar(1) : Scalar(0)));
                     }
                     add_grad(tp, il, gl);
                   });
}

}  // namespace cinet
