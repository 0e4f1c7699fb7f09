#pragma once

// Slow reference implementations used by the test suites and the gradcheck
// command. Everything here is written as explicit scalar loops over raw
// double buffers on purpose: these functions must not share arithmetic code
// with the tensor ops they are used to check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cinet/error.hpp"
#include "cinet/tensor.hpp"

namespace cinet::oracle {

using Buf = std::vector<double>;

inline Buf loop_matmul(const Buf& a, int m, int k, const Buf& b, int n) {
  Buf out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) {
        acc += a[static_cast<std::size_t>(i) * k + kk] * b[static_cast<std::size_t>(kk) * n + j];
      }
      out[static_cast<std::size_t>(i) * n + j] = acc;
    }
  }
  return out;
}

inline Buf loop_transpose(const Buf& a, int m, int n) {
  Buf out(a.size());
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out[static_cast<std::size_t>(j) * m + i] = a[static_cast<std::size_t>(i) * n + j];
    }
  }
  return out;
}

// plain exponent ratio, no stabilization
inline Buf loop_row_softmax(const Buf& x, int m, int n) {
  Buf out(x.size());
  for (int i = 0; i < m; ++i) {
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(x[static_cast<std::size_t>(i) * n + j]);
    for (int j = 0; j < n; ++j) {
      out[static_cast<std::size_t>(i) * n + j] =
          std::exp(x[static_cast<std::size_t>(i) * n + j]) / denom;
    }
  }
  return out;
}

// x: [h][w][cin], kernel: [3][3][cin][cout], zero pad 1, stride 1.
inline Buf loop_conv3x3(const Buf& x, int h, int w, int cin, const Buf& kernel, int cout,
                        const Buf& bias) {
  Buf out(static_cast<std::size_t>(h) * w * cout, 0.0);
  auto xat = [&](int r, int q, int c) {
    return x[(static_cast<std::size_t>(r) * w + q) * cin + c];
  };
  auto kat = [&](int dr, int dq, int ci, int co) {
    return kernel[((static_cast<std::size_t>(dr) * 3 + dq) * cin + ci) * cout + co];
  };
  for (int r = 0; r < h; ++r) {
    for (int q = 0; q < w; ++q) {
      for (int co = 0; co < cout; ++co) {
        double acc = bias[static_cast<std::size_t>(co)];
        for (int dr = 0; dr < 3; ++dr) {
          int rr = r + dr - 1;
          if (rr < 0 || rr >= h) continue;
          for (int dq = 0; dq < 3; ++dq) {
            int qq = q + dq - 1;
            if (qq < 0 || qq >= w) continue;
            for (int ci = 0; ci < cin; ++ci) acc += xat(rr, qq, ci) * kat(dr, dq, ci, co);
          }
        }
        out[(static_cast<std::size_t>(r) * w + q) * cout + co] = acc;
      }
    }
  }
  return out;
}

inline Buf loop_fully_connected(const Buf& x, const Buf& weight, int dout, int din,
                                const Buf& bias) {
  Buf out(static_cast<std::size_t>(dout));
  for (int i = 0; i < dout; ++i) {
    double acc = bias[static_cast<std::size_t>(i)];
    for (int j = 0; j < din; ++j) {
      acc += weight[static_cast<std::size_t>(i) * din + j] * x[static_cast<std::size_t>(j)];
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

// [c][l] channel rows -> [h][w][c] spatial, column r*w+q <-> position (r,q)
inline Buf loop_unflatten(const Buf& flat, int c, int h, int w) {
  Buf out(static_cast<std::size_t>(h) * w * c);
  for (int r = 0; r < h; ++r) {
    for (int q = 0; q < w; ++q) {
      for (int ch = 0; ch < c; ++ch) {
        out[(static_cast<std::size_t>(r) * w + q) * c + ch] =
            flat[static_cast<std::size_t>(ch) * (h * w) + r * w + q];
      }
    }
  }
  return out;
}

struct SciRef {
  Buf weights;     // [c][c]
  Buf interacted;  // [c][l]
};

// Channel interaction weights and mixed features from first principles:
// gram matrix, optional sign flip, exponent-ratio softmax, then the mix.
inline SciRef sci(const Buf& x, int c, int l, bool positive = false) {
  Buf gram(static_cast<std::size_t>(c) * c, 0.0);
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int k = 0; k < l; ++k) {
        acc += x[static_cast<std::size_t>(i) * l + k] * x[static_cast<std::size_t>(j) * l + k];
      }
      gram[static_cast<std::size_t>(i) * c + j] = positive ? acc : -acc;
    }
  }
  SciRef ref;
  ref.weights = loop_row_softmax(gram, c, c);
  ref.interacted = loop_matmul(ref.weights, c, c, x, l);
  return ref;
}

struct CciRef {
  Buf weights_ab;     // [c][c]
  Buf weights_ba;     // [c][c]
  Buf interacted_a;   // [c][l]
  Buf interacted_b;   // [c][l]
};

// Contrastive weight matrices and cross-weighted features for given gate
// values. Both input feature matrices are [c][l].
inline CciRef cci(const Buf& xa, const Buf& xb, int c, int l, double eta, double gamma) {
  SciRef sa = sci(xa, c, l);
  SciRef sb = sci(xb, c, l);
  CciRef ref;
  ref.weights_ab.resize(static_cast<std::size_t>(c) * c);
  ref.weights_ba.resize(static_cast<std::size_t>(c) * c);
  for (std::size_t i = 0; i < ref.weights_ab.size(); ++i) {
    ref.weights_ab[i] = std::fabs(sa.weights[i] - eta * sb.weights[i]);
    ref.weights_ba[i] = std::fabs(sb.weights[i] - gamma * sa.weights[i]);
  }
  ref.interacted_a = loop_matmul(ref.weights_ab, c, c, xa, l);
  ref.interacted_b = loop_matmul(ref.weights_ba, c, c, xb, l);
  return ref;
}

// ---------------------------------------------------------------------------
// finite differences

using NamedTensors = std::map<std::string, Tensor>;

// Central finite differences of a scalar function over every entry of every
// named tensor. The function must be deterministic.
inline NamedTensors finite_diff_grad(const std::function<double(const NamedTensors&)>& f,
                                     const NamedTensors& params, double step = 1e-5) {
  NamedTensors grads;
  NamedTensors probe = params;
  for (auto& [name, tensor] : probe) {
    Tensor g(tensor.shape());
    for (std::int64_t i = 0; i < tensor.numel(); ++i) {
      Scalar saved = tensor[i];
      tensor[i] = saved + static_cast<Scalar>(step);
      double up = f(probe);
      tensor[i] = saved - static_cast<Scalar>(step);
      double down = f(probe);
      tensor[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw ValueError("non-finite probe while differencing parameter '" + name + "'");
      }
      g[i] = static_cast<Scalar>((up - down) / (2.0 * step));
    }
    grads.emplace(name, std::move(g));
  }
  return grads;
}

// Error of an analytic gradient against a reference, as max |a-f| over a
// denominator of max(|a|,|f|); entries where both sides are below the noise
// floor are treated as matching zeros.
struct GradCompare {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
};

inline GradCompare compare_grads(const NamedTensors& analytic, const NamedTensors& reference,
                                 double noise_floor = 1e-9) {
  GradCompare cmp;
  for (const auto& [name, a] : analytic) {
    auto it = reference.find(name);
    if (it == reference.end()) throw ContractError("missing reference gradient for " + name);
    const Tensor& r = it->second;
    if (!a.same_shape(r)) throw ShapeError("gradient shape mismatch for " + name);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      double av = a[i], rv = r[i];
      double abs_err = std::fabs(av - rv);
      double denom = std::max(std::fabs(av), std::fabs(rv));
      cmp.max_abs_err = std::max(cmp.max_abs_err, abs_err);
      if (abs_err > noise_floor && denom > 0.0) {
        cmp.max_rel_err = std::max(cmp.max_rel_err, abs_err / denom);
      }
    }
  }
  return cmp;
}

struct OracleReport {
  std::string op;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

}  // namespace cinet::oracle
