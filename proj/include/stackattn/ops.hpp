// Copyright 2026 The stackattn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stackattn/errors.hpp"
#include "stackattn/logspace.hpp"
#include "stackattn/tensor.hpp"

namespace stackattn {

enum class Mode { kTrain, kEval };

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b));
  }
}

// outer x axis x inner decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("axis out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (int i = axis + 1; i < rank; ++i) s.inner *= shape[i];
  return s;
}

inline std::size_t last_extent(const Shape& shape, const char* op) {
  if (shape.empty()) throw DimensionError(std::string(op) + ": scalar input");
  return shape.back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// out[n, m] = a[n, k] * b[k, m], every element summed over k in order with
// the same vector code, so an output row depends only on its input row and
// not on how many rows are computed. General GEMM blocking lacks this, and
// then appending a position could perturb earlier logits in the last bit.
template <typename T, int NV, int R>
void gemm_row_tile(const T* a, const T* bp, T* out, std::size_t i0, std::size_t k, std::size_t mp,
                   std::size_t c0, std::size_t m, std::size_t ncols) {
  constexpr std::size_t W = 64 / sizeof(T);
  using V = Eigen::Array<T, W, 1>;
  V s[R][NV];
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < NV; ++v) s[r][v].setZero();
  for (std::size_t j = 0; j < k; ++j) {
    const T* br = bp + j * mp + c0;
    for (int v = 0; v < NV; ++v) {
      const Eigen::Map<const V, Eigen::Aligned64> bv(br + v * W);
      for (int r = 0; r < R; ++r) s[r][v] += a[(i0 + r) * k + j] * bv;
    }
  }
  for (int r = 0; r < R; ++r) {
    T* row = out + (i0 + r) * m + c0;
    for (int v = 0; v < NV; ++v) {
      const std::size_t cnt = std::min<std::size_t>(W, ncols - v * W);
      for (std::size_t c = 0; c < cnt; ++c) row[v * W + c] = s[r][v][c];
    }
  }
}

template <typename T, int NV>
void gemm_row_block(const T* a, const T* bp, T* out, std::size_t n, std::size_t k, std::size_t mp,
                    std::size_t c0, std::size_t m, std::size_t ncols) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) gemm_row_tile<T, NV, 2>(a, bp, out, i, k, mp, c0, m, ncols);
  for (; i < n; ++i) gemm_row_tile<T, NV, 1>(a, bp, out, i, k, mp, c0, m, ncols);
}

template <typename T>
void gemm_rows(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
  constexpr std::size_t W = 64 / sizeof(T);
  const std::size_t mp = (m + W - 1) / W * W;
  // b with its rows zero-padded to whole vectors.
  static thread_local std::vector<T, Eigen::aligned_allocator<T>> padded;
  padded.assign(k * mp, T(0));
  for (std::size_t j = 0; j < k; ++j) std::copy(b + j * m, b + (j + 1) * m, padded.data() + j * mp);
  for (std::size_t c0 = 0; c0 < m; c0 += 4 * W) {
    const std::size_t ncols = std::min(m - c0, 4 * W), nv = (ncols + W - 1) / W;
    switch (nv) {
      case 1:
        gemm_row_block<T, 1>(a, padded.data(), out, n, k, mp, c0, m, ncols);
        break;
      case 2:
        gemm_row_block<T, 2>(a, padded.data(), out, n, k, mp, c0, m, ncols);
        break;
      case 3:
        gemm_row_block<T, 3>(a, padded.data(), out, n, k, mp, c0, m, ncols);
        break;
      default:
        gemm_row_block<T, 4>(a, padded.data(), out, n, k, mp, c0, m, ncols);
        break;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_rank(2);
  b.require_rank(2);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  std::vector<T> out(n * m);
  detail::gemm_rows(a.data().data(), b.data().data(), out.data(), n, k, m);
  return detail::make_result<T>(
      {n, m}, std::move(out), detail::any_requires_grad<T>({&a, &b}), [=] {
        auto an = a.node(), bn = b.node();
        return [an, bn, n, k, m](detail::Node<T>& self) {
          detail::ConstMap<T> g(self.grad.data(), n, m);
          if (an->requires_grad) {
            detail::MutMap<T>(an->grad_buffer(), n, k).noalias() +=
                g * detail::ConstMap<T>(bn->value.data(), k, m).transpose();
          }
          if (bn->requires_grad) {
            detail::MutMap<T>(bn->grad_buffer(), k, m).noalias() +=
                detail::ConstMap<T>(an->value.data(), n, k).transpose() * g;
          }
        };
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  a.require_rank(2);
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<T> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a.data()[i * m + j];
  return detail::make_result<T>({m, n}, std::move(out), a.requires_grad(), [=] {
    auto an = a.node();
    return [an, n, m](detail::Node<T>& self) {
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += self.grad[j * n + i];
    };
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(
      a.shape(), std::move(out), detail::any_requires_grad<T>({&a, &b}), [=] {
        auto an = a.node(), bn = b.node();
        return [an, bn](detail::Node<T>& self) {
          for (auto* n : {an.get(), bn.get()}) {
            if (!n->requires_grad) continue;
            T* g = n->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
          }
        };
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(
      a.shape(), std::move(out), detail::any_requires_grad<T>({&a, &b}), [=] {
        auto an = a.node(), bn = b.node();
        return [an, bn](detail::Node<T>& self) {
          if (an->requires_grad) {
            T* g = an->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
          }
          if (bn->requires_grad) {
            T* g = bn->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
          }
        };
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(
      a.shape(), std::move(out), detail::any_requires_grad<T>({&a, &b}), [=] {
        auto an = a.node(), bn = b.node();
        return [an, bn](detail::Node<T>& self) {
          if (an->requires_grad) {
            T* g = an->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
              g[i] += self.grad[i] * bn->value[i];
          }
          if (bn->requires_grad) {
            T* g = bn->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
              g[i] += self.grad[i] * an->value[i];
          }
        };
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result<T>(a.shape(), std::move(out), a.requires_grad(), [=] {
    auto an = a.node();
    return [an, s](detail::Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    };
  });
}

/// x[N, M] + bias[M], broadcast over rows.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t m = detail::last_extent(x.shape(), "add_rowwise");
  if (bias.size() != m) {
    throw DimensionError("add_rowwise: bias " + shape_str(bias.shape()) +
                         " vs input " + shape_str(x.shape()));
  }
  const std::size_t n = x.size() / m;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x[i * m + j] + bias[j];
  return detail::make_result<T>(
      x.shape(), std::move(out), detail::any_requires_grad<T>({&x, &bias}), [=] {
        auto xn = x.node(), bn = bias.node();
        return [xn, bn, n, m](detail::Node<T>& self) {
          if (xn->requires_grad) {
            T* g = xn->grad_buffer();
            for (std::size_t i = 0; i < n * m; ++i) g[i] += self.grad[i];
          }
          if (bn->requires_grad) {
            T* g = bn->grad_buffer();
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
          }
        };
      });
}

namespace detail {

// Shared body for unary elementwise ops whose derivative is a function of
// the input and output value.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i]);
  return make_result<T>(a.shape(), std::move(out), a.requires_grad(), [=] {
    auto an = a.node();
    return [an, deriv](Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * deriv(an->value[i], self.value[i]);
    };
  });
}

template <typename T>
T logistic_value(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
Tensor<T> logistic(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return detail::logistic_value(x); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

// ---------------------------------------------------------------------------
// Reductions and normalizers

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return detail::make_result<T>({}, {s}, a.requires_grad(), [=] {
    auto an = a.node();
    return [an](detail::Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < an->value.size(); ++i) g[i] += self.grad[0];
    };
  });
}

/// Shift-stable softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
  const auto s = detail::split_axis(a.shape(), axis);
  if (s.extent == 0) throw DimensionError("softmax: empty axis");
  std::vector<T> out(a.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T hi = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) hi = std::max(hi, a[base + k * s.inner]);
      T z = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const T e = std::exp(a[base + k * s.inner] - hi);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= z;
    }
  }
  return detail::make_result<T>(a.shape(), std::move(out), a.requires_grad(), [=] {
    auto an = a.node();
    return [an, s](detail::Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          T dot = 0;
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t idx = base + k * s.inner;
            dot += self.grad[idx] * self.value[idx];
          }
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t idx = base + k * s.inner;
            g[idx] += self.value[idx] * (self.grad[idx] - dot);
          }
        }
      }
    };
  });
}

/// Softmax of each row of a square score matrix restricted to columns j <= i.
/// Masked entries are exactly zero.
template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& scores) {
  scores.require_rank(2);
  const std::size_t n = scores.rows();
  if (scores.cols() != n) throw DimensionError("causal_softmax: scores must be square");
  std::vector<T> out(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    T hi = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j <= i; ++j) hi = std::max(hi, scores[i * n + j]);
    T z = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      out[i * n + j] = std::exp(scores[i * n + j] - hi);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j <= i; ++j) out[i * n + j] /= z;
  }
  return detail::make_result<T>({n, n}, std::move(out), scores.requires_grad(), [=] {
    auto sn = scores.node();
    return [sn, n](detail::Node<T>& self) {
      T* g = sn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j <= i; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
        for (std::size_t j = 0; j <= i; ++j)
          g[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
      }
    };
  });
}

/// Log-softmax along the last axis.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const std::size_t m = detail::last_extent(a.shape(), "log_softmax");
  if (m == 0) throw DimensionError("log_softmax: empty axis");
  const std::size_t n = a.size() / m;
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < n; ++i) {
    const T lse = log_sum_exp<T>(a.data().subspan(i * m, m));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a[i * m + j] - lse;
  }
  return detail::make_result<T>(a.shape(), std::move(out), a.requires_grad(), [=] {
    auto an = a.node();
    return [an, n, m](detail::Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T gs = 0;
        for (std::size_t j = 0; j < m; ++j) gs += self.grad[i * m + j];
        for (std::size_t j = 0; j < m; ++j)
          g[i * m + j] += self.grad[i * m + j] - std::exp(self.value[i * m + j]) * gs;
      }
    };
  });
}

/// log(sum(exp)) along `axis`, removing that axis. -inf entries carry zero
/// mass; an all -inf slice reduces to -inf and passes back zero gradient.
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& a, int axis = -1) {
  const auto s = detail::split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + (axis < 0 ? axis + static_cast<int>(a.rank()) : axis));
  std::vector<T> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T hi = log_zero<T>();
      for (std::size_t k = 0; k < s.extent; ++k) hi = std::max(hi, a[base + k * s.inner]);
      T r = hi;
      if (!is_log_zero(hi)) {
        T z = 0;
        for (std::size_t k = 0; k < s.extent; ++k) z += std::exp(a[base + k * s.inner] - hi);
        r = hi + std::log(z);
      }
      out[o * s.inner + in] = r;
    }
  }
  return detail::make_result<T>(out_shape, std::move(out), a.requires_grad(), [=] {
    auto an = a.node();
    return [an, s](detail::Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const T y = self.value[o * s.inner + in];
          if (is_log_zero(y)) continue;
          const T gy = self.grad[o * s.inner + in];
          const std::size_t base = o * s.extent * s.inner + in;
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t idx = base + k * s.inner;
            g[idx] += gy * std::exp(an->value[idx] - y);
          }
        }
      }
    };
  });
}

/// Layer normalization over the last axis: population variance with eps
/// inside the square root, then gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const std::size_t d = detail::last_extent(x.shape(), "layer_norm");
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias extent differs from " +
                         shape_str(x.shape()));
  }
  const std::size_t n = x.size() / d;
  std::vector<T> out(x.size()), xhat(x.size()), rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data().data() + i * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * rstd[i];
      out[i * d + j] = xhat[i * d + j] * gain[j] + bias[j];
    }
  }
  const bool needs = detail::any_requires_grad<T>({&x, &gain, &bias});
  return detail::make_result<T>(x.shape(), std::move(out), needs, [&] {
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return [xn, gn, bn, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](
               detail::Node<T>& self) {
      const T* gy = self.grad.data();
      if (gn->requires_grad) {
        T* gg = gn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gg[j] += gy[i * d + j] * xhat[i * d + j];
      }
      if (bn->requires_grad) {
        T* gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += gy[i * d + j];
      }
      if (xn->requires_grad) {
        T* gx = xn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          T mean_g = 0, mean_gx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = gy[i * d + j] * gn->value[j];
            mean_g += gh;
            mean_gx += gh * xhat[i * d + j];
          }
          mean_g /= T(d);
          mean_gx /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = gy[i * d + j] * gn->value[j];
            gx[i * d + j] += rstd[i] * (gh - mean_g - xhat[i * d + j] * mean_gx);
          }
        }
      }
    };
  });
}

/// Inverted dropout: eval mode (or p = 0) is the identity.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout probability must be in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::kEval || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const T s = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = keep(rng) ? s : T(0);
    out[i] = x[i] * mask[i];
  }
  return detail::make_result<T>(x.shape(), std::move(out), x.requires_grad(), [&] {
    auto xn = x.node();
    return [xn, mask = std::move(mask)](detail::Node<T>& self) {
      T* g = xn->grad_buffer();
      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
    };
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return detail::make_result<T>(std::move(shape), a.values(), a.requires_grad(), [=] {
    auto an = a.node();
    return [an](detail::Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
  a.require_rank(2);
  const std::size_t m = a.cols();
  if (start + count > a.rows()) throw DimensionError("slice_rows out of range");
  std::vector<T> out(a.values().begin() + start * m,
                     a.values().begin() + (start + count) * m);
  return detail::make_result<T>({count, m}, std::move(out), a.requires_grad(), [=] {
    auto an = a.node();
    return [an, start, m](detail::Node<T>& self) {
      T* g = an->grad_buffer() + start * m;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
  a.require_rank(2);
  const std::size_t n = a.rows(), m = a.cols();
  if (start + count > m) throw DimensionError("slice_cols out of range");
  std::vector<T> out(n * count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a[i * m + start + j];
  return detail::make_result<T>({n, count}, std::move(out), a.requires_grad(), [=] {
    auto an = a.node();
    return [an, start, n, m, count](detail::Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count; ++j)
          g[i * m + start + j] += self.grad[i * count + j];
    };
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t m = parts[0].cols();
  std::size_t n = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.cols() != m) throw DimensionError("concat_rows: column extents differ");
    n += p.rows();
    needs = needs || p.requires_grad();
  }
  std::vector<T> out;
  out.reserve(n * m);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_result<T>({n, m}, std::move(out), needs, [&] {
    std::vector<std::shared_ptr<detail::Node<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return [nodes = std::move(nodes)](detail::Node<T>& self) {
      std::size_t off = 0;
      for (const auto& node : nodes) {
        const std::size_t len = node->value.size();
        if (node->requires_grad) {
          T* g = node->grad_buffer();
          for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
        }
        off += len;
      }
    };
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t m = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != n) throw DimensionError("concat_cols: row extents differ");
    m += p.cols();
    needs = needs || p.requires_grad();
  }
  std::vector<T> out(n * m);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * m + off + j] = p[i * c + j];
    off += c;
  }
  return detail::make_result<T>({n, m}, std::move(out), needs, [&] {
    std::vector<std::shared_ptr<detail::Node<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return [nodes = std::move(nodes), n, m](detail::Node<T>& self) {
      std::size_t off = 0;
      for (const auto& node : nodes) {
        const std::size_t c = node->shape[1];
        if (node->requires_grad) {
          T* g = node->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * m + off + j];
        }
        off += c;
      }
    };
  });
}

/// Gathers rows of table[V, d] by index.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& indices) {
  table.require_rank(2);
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<T> out(indices.size() * d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= vocab) {
      throw InputError("embedding index " + std::to_string(indices[i]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + indices[i] * d, d, out.begin() + i * d);
  }
  return detail::make_result<T>({indices.size(), d}, std::move(out), table.requires_grad(),
                                [&] {
                                  auto tn = table.node();
                                  return [tn, indices, d](detail::Node<T>& self) {
                                    T* g = tn->grad_buffer();
                                    for (std::size_t i = 0; i < indices.size(); ++i)
                                      for (std::size_t j = 0; j < d; ++j)
                                        g[indices[i] * d + j] += self.grad[i * d + j];
                                  };
                                });
}

/// Sum over rows of log_softmax(logits)[row, target[row]].
template <typename T>
Tensor<T> target_log_likelihood(const Tensor<T>& logits, const std::vector<int>& targets) {
  logits.require_rank(2);
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) throw DimensionError("target_log_likelihood: row/target count");
  std::vector<T> probs(n * v);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw InputError("target index outside output vocabulary");
    }
    const T lse = log_sum_exp<T>(logits.data().subspan(i * v, v));
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] = std::exp(logits[i * v + j] - lse);
    total += logits[i * v + targets[i]] - lse;
  }
  return detail::make_result<T>({}, {total}, logits.requires_grad(), [&] {
    auto ln = logits.node();
    return [ln, targets, probs = std::move(probs), n, v](detail::Node<T>& self) {
      T* g = ln->grad_buffer();
      const T gy = self.grad[0];
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < v; ++j) g[i * v + j] -= gy * probs[i * v + j];
        g[i * v + targets[i]] += gy;
      }
    };
  });
}

}  // namespace stackattn
