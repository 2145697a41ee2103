#pragma once
// Differentiable operations over Tensor<S>. Free functions; every op checks
// shapes up front and throws ShapeError naming both shapes on mismatch.
//
// Dense products and elementwise maps ride on Eigen. conv1d is written with a
// pinned accumulation order (bias, then taps, then input channels) so that it
// is arithmetic-identical to the reference triple loop on any input.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "deeppseudo/rng.hpp"
#include "deeppseudo/tensor.hpp"

namespace deeppseudo {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<MatRM<S>> vmap2(Tensor<S>& t) {
  return {t.data(), t.rows(), t.cols()};
}
template <typename S>
Eigen::Map<const MatRM<S>> vmap2(const Tensor<S>& t) {
  return {t.data(), t.rows(), t.cols()};
}
// Gradient map; allocates the buffer on first use.
template <typename S>
Eigen::Map<MatRM<S>> gmap2(Tensor<S>& t) {
  const auto r = t.rows(), c = t.cols();
  return {t.grad().data(), r, c};
}
// Read-only gradient map, or nullopt-like empty when never touched.
template <typename S>
const S* gdata_if(const Tensor<S>& t) {
  const auto* g = t.grad_if();
  return g ? g->data() : nullptr;
}

template <typename S>
inline S stable_sigmoid(S x) {
  if (x >= S(0)) {
    const S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                     shape_str(b) + " are incompatible");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
  a.require_rank(2, "matmul lhs");
  b.require_rank(2, "matmul rhs");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros({a.rows(), b.cols()});
  detail::vmap2(out).noalias() = detail::vmap2(a) * detail::vmap2(b);
  if (detail::tracing<S>({&a, &b})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([a, b, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      Eigen::Map<const detail::MatRM<S>> dC(g, out.rows(), out.cols());
      if (a.requires_grad()) detail::gmap2(a).noalias() += dC * detail::vmap2(b).transpose();
      if (b.requires_grad()) detail::gmap2(b).noalias() += detail::vmap2(a).transpose() * dC;
    });
  }
  return out;
}

// a * b^T without materializing the transpose.
template <typename S>
Tensor<S> matmul_nt(Tensor<S> a, Tensor<S> b) {
  a.require_rank(2, "matmul_nt lhs");
  b.require_rank(2, "matmul_nt rhs");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros({a.rows(), b.rows()});
  detail::vmap2(out).noalias() = detail::vmap2(a) * detail::vmap2(b).transpose();
  if (detail::tracing<S>({&a, &b})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([a, b, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      Eigen::Map<const detail::MatRM<S>> dC(g, out.rows(), out.cols());
      if (a.requires_grad()) detail::gmap2(a).noalias() += dC * detail::vmap2(b);
      if (b.requires_grad()) detail::gmap2(b).noalias() += dC.transpose() * detail::vmap2(a);
    });
  }
  return out;
}

// a^T * b without materializing the transpose.
template <typename S>
Tensor<S> matmul_tn(Tensor<S> a, Tensor<S> b) {
  a.require_rank(2, "matmul_tn lhs");
  b.require_rank(2, "matmul_tn rhs");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dimensions differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros({a.cols(), b.cols()});
  detail::vmap2(out).noalias() = detail::vmap2(a).transpose() * detail::vmap2(b);
  if (detail::tracing<S>({&a, &b})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([a, b, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      Eigen::Map<const detail::MatRM<S>> dC(g, out.rows(), out.cols());
      if (a.requires_grad()) detail::gmap2(a).noalias() += detail::vmap2(b) * dC.transpose();
      if (b.requires_grad()) detail::gmap2(b).noalias() += detail::vmap2(a) * dC;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops (full-shape or scalar broadcast only)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  const bool same = a.shape() == b.shape();
  const bool b_scalar = !same && b.numel() == 1;
  const bool a_scalar = !same && !b_scalar && a.numel() == 1;
  if (!same && !a_scalar && !b_scalar) detail::require_same_shape(a.shape(), b.shape(), "add");

  const Tensor<S>& big = a_scalar ? b : a;
  Tensor<S> out = Tensor<S>::zeros(big.shape());
  if (a_scalar || b_scalar) {
    const S s = (a_scalar ? a : b).at(0);
    for (std::int64_t i = 0; i < big.numel(); ++i) out.at(i) = big.at(i) + s;
  } else {
    for (std::int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) + b.at(i);
  }
  if (detail::tracing<S>({&a, &b})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([a, b, out, a_scalar, b_scalar]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      auto accum = [&](Tensor<S>& t, bool scalar) {
        if (!t.requires_grad()) return;
        auto& gt = t.grad();
        if (scalar) {
          S total = S(0);
          for (std::int64_t i = 0; i < out.numel(); ++i) total += g[i];
          gt[0] += total;
        } else {
          for (std::int64_t i = 0; i < out.numel(); ++i) gt[static_cast<std::size_t>(i)] += g[i];
        }
      };
      accum(a, a_scalar);
      accum(b, b_scalar);
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
  const bool same = a.shape() == b.shape();
  const bool b_scalar = !same && b.numel() == 1;
  const bool a_scalar = !same && !b_scalar && a.numel() == 1;
  if (!same && !a_scalar && !b_scalar) detail::require_same_shape(a.shape(), b.shape(), "mul");

  const Tensor<S>& big = a_scalar ? b : a;
  Tensor<S> out = Tensor<S>::zeros(big.shape());
  if (a_scalar || b_scalar) {
    const S s = (a_scalar ? a : b).at(0);
    for (std::int64_t i = 0; i < big.numel(); ++i) out.at(i) = big.at(i) * s;
  } else {
    for (std::int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * b.at(i);
  }
  if (detail::tracing<S>({&a, &b})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([a, b, out, a_scalar, b_scalar]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      const Tensor<S>& big_in = a_scalar ? b : a;
      const Tensor<S>& small_in = a_scalar ? a : b;
      if (a_scalar || b_scalar) {
        const S s = small_in.at(0);
        Tensor<S>& big_mut = a_scalar ? b : a;
        Tensor<S>& small_mut = a_scalar ? a : b;
        if (big_mut.requires_grad()) {
          auto& gt = big_mut.grad();
          for (std::int64_t i = 0; i < out.numel(); ++i) gt[static_cast<std::size_t>(i)] += g[i] * s;
        }
        if (small_mut.requires_grad()) {
          S total = S(0);
          for (std::int64_t i = 0; i < out.numel(); ++i) total += g[i] * big_in.at(i);
          small_mut.grad()[0] += total;
        }
      } else {
        if (a.requires_grad()) {
          auto& gt = a.grad();
          for (std::int64_t i = 0; i < out.numel(); ++i) gt[static_cast<std::size_t>(i)] += g[i] * b.at(i);
        }
        if (b.requires_grad()) {
          auto& gt = b.grad();
          for (std::int64_t i = 0; i < out.numel(); ++i) gt[static_cast<std::size_t>(i)] += g[i] * a.at(i);
        }
      }
    });
  }
  return out;
}

// Multiply by a compile-time-known constant.
template <typename S>
Tensor<S> scale(Tensor<S> x, S factor) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out.at(i) = x.at(i) * factor;
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out, factor]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      if (x.requires_grad()) {
        auto& gt = x.grad();
        for (std::int64_t i = 0; i < out.numel(); ++i) gt[static_cast<std::size_t>(i)] += g[i] * factor;
      }
    });
  }
  return out;
}

// x[r x c] + row vector b[c], broadcast over rows (the linear-layer bias).
template <typename S>
Tensor<S> add_rowvec(Tensor<S> x, Tensor<S> b) {
  x.require_rank(2, "add_rowvec lhs");
  b.require_rank(1, "add_rowvec rhs");
  if (b.dim(0) != x.cols()) {
    throw ShapeError("add_rowvec: shapes " + shape_str(x.shape()) + " and " +
                     shape_str(b.shape()) + " are incompatible");
  }
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto r = x.rows(), c = x.cols();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + b.at(j);
  if (detail::tracing<S>({&x, &b})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, b, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      const auto r2 = out.rows(), c2 = out.cols();
      if (x.requires_grad()) {
        auto& gt = x.grad();
        for (std::int64_t i = 0; i < r2 * c2; ++i) gt[static_cast<std::size_t>(i)] += g[i];
      }
      if (b.requires_grad()) {
        auto& gt = b.grad();
        for (std::int64_t i = 0; i < r2; ++i)
          for (std::int64_t j = 0; j < c2; ++j) gt[static_cast<std::size_t>(j)] += g[i * c2 + j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(Tensor<S> x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out.at(i) = detail::stable_sigmoid(x.at(i));
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < out.numel(); ++i) {
        const S y = out.at(i);
        gt[static_cast<std::size_t>(i)] += g[i] * y * (S(1) - y);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(Tensor<S> x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out.at(i) = x.at(i) > S(0) ? x.at(i) : S(0);
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < out.numel(); ++i)
        if (x.at(i) > S(0)) gt[static_cast<std::size_t>(i)] += g[i];
    });
  }
  return out;
}

// Natural log; defined for strictly positive inputs.
template <typename S>
Tensor<S> log(Tensor<S> x) {
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    if (!(x.at(i) > S(0))) throw DataError("log: input must be strictly positive");
  }
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out.at(i) = std::log(x.at(i));
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < out.numel(); ++i) gt[static_cast<std::size_t>(i)] += g[i] / x.at(i);
    });
  }
  return out;
}

// Inverted dropout: keep-probability scaling during training makes eval an
// exact identity (the input handle is returned unchanged).
template <typename S>
Tensor<S> dropout(Tensor<S> x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  if (!training || p == 0.0) return x;
  auto mask = std::make_shared<std::vector<S>>(static_cast<std::size_t>(x.numel()));
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (auto& m : *mask) m = rng.bernoulli(1.0 - p) ? keep_scale : S(0);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out.at(i) = x.at(i) * (*mask)[static_cast<std::size_t>(i)];
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out, mask]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < out.numel(); ++i)
        gt[static_cast<std::size_t>(i)] += g[i] * (*mask)[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization & reductions
// ---------------------------------------------------------------------------

// Max-shifted softmax along `axis` (rank-1: axis 0; rank-2: 0 = down columns,
// 1 = across rows; negative axes count from the back).
template <typename S>
Tensor<S> softmax(Tensor<S> x, int axis = -1) {
  const auto rk = x.rank();
  if (rk != 1 && rk != 2) throw ShapeError("softmax: expected rank 1 or 2, got " + shape_str(x.shape()));
  if (axis < 0) axis += static_cast<int>(rk);
  if (axis < 0 || axis >= rk) throw ShapeError("softmax: axis invalid for shape " + shape_str(x.shape()));

  const std::int64_t rows = rk == 1 ? 1 : x.dim(0);
  const std::int64_t cols = rk == 1 ? x.dim(0) : x.dim(1);
  const bool by_row = rk == 1 || axis == 1;
  const std::int64_t slices = by_row ? rows : cols;
  const std::int64_t width = by_row ? cols : rows;

  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto idx = [&](std::int64_t s, std::int64_t w) { return by_row ? s * cols + w : w * cols + s; };
  for (std::int64_t s = 0; s < slices; ++s) {
    S m = x.at(idx(s, 0));
    for (std::int64_t w = 1; w < width; ++w) m = std::max(m, x.at(idx(s, w)));
    S total = S(0);
    for (std::int64_t w = 0; w < width; ++w) {
      const S e = std::exp(x.at(idx(s, w)) - m);
      out.at(idx(s, w)) = e;
      total += e;
    }
    for (std::int64_t w = 0; w < width; ++w) out.at(idx(s, w)) /= total;
  }
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out, by_row, slices, width, cols]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      auto idx2 = [&](std::int64_t s, std::int64_t w) { return by_row ? s * cols + w : w * cols + s; };
      auto& gt = x.grad();
      for (std::int64_t s = 0; s < slices; ++s) {
        S dot = S(0);
        for (std::int64_t w = 0; w < width; ++w) dot += g[idx2(s, w)] * out.at(idx2(s, w));
        for (std::int64_t w = 0; w < width; ++w) {
          const auto i = idx2(s, w);
          gt[static_cast<std::size_t>(i)] += out.at(i) * (g[i] - dot);
        }
      }
    });
  }
  return out;
}

// Row-wise log-softmax via log-sum-exp.
template <typename S>
Tensor<S> log_softmax_rows(Tensor<S> x) {
  x.require_rank(2, "log_softmax_rows");
  const auto r = x.rows(), c = x.cols();
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::int64_t i = 0; i < r; ++i) {
    S m = x.at(i, 0);
    for (std::int64_t j = 1; j < c; ++j) m = std::max(m, x.at(i, j));
    S total = S(0);
    for (std::int64_t j = 0; j < c; ++j) total += std::exp(x.at(i, j) - m);
    const S lse = m + std::log(total);
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) - lse;
  }
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      const auto r2 = out.rows(), c2 = out.cols();
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < r2; ++i) {
        S gsum = S(0);
        for (std::int64_t j = 0; j < c2; ++j) gsum += g[i * c2 + j];
        for (std::int64_t j = 0; j < c2; ++j) {
          gt[static_cast<std::size_t>(i * c2 + j)] +=
              g[i * c2 + j] - std::exp(out.at(i, j)) * gsum;
        }
      }
    });
  }
  return out;
}

// Row-wise layer normalization with learnable gain/bias over the last axis.
template <typename S>
Tensor<S> layer_norm(Tensor<S> x, Tensor<S> gain, Tensor<S> bias,
                     S eps = S(1e-5)) {
  x.require_rank(2, "layer_norm input");
  gain.require_rank(1, "layer_norm gain");
  bias.require_rank(1, "layer_norm bias");
  const auto r = x.rows(), c = x.cols();
  if (gain.dim(0) != c || bias.dim(0) != c) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " must match last dimension of " +
                     shape_str(x.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(static_cast<std::size_t>(r * c));
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    S mean = S(0);
    for (std::int64_t j = 0; j < c; ++j) mean += x.at(i, j);
    mean /= static_cast<S>(c);
    S var = S(0);
    for (std::int64_t j = 0; j < c; ++j) {
      const S d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<S>(c);
    const S inv = S(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = inv;
    for (std::int64_t j = 0; j < c; ++j) {
      const S h = (x.at(i, j) - mean) * inv;
      (*xhat)[static_cast<std::size_t>(i * c + j)] = h;
      out.at(i, j) = gain.at(j) * h + bias.at(j);
    }
  }
  if (detail::tracing<S>({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, gain, bias, out, xhat, inv_std]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      const auto r2 = out.rows(), c2 = out.cols();
      for (std::int64_t i = 0; i < r2; ++i) {
        if (x.requires_grad()) {
          // dx = inv * (gh - mean(gh) - xhat * mean(gh .* xhat)), gh = dy .* gain
          S mean_gh = S(0), mean_ghx = S(0);
          for (std::int64_t j = 0; j < c2; ++j) {
            const S gh = g[i * c2 + j] * gain.at(j);
            mean_gh += gh;
            mean_ghx += gh * (*xhat)[static_cast<std::size_t>(i * c2 + j)];
          }
          mean_gh /= static_cast<S>(c2);
          mean_ghx /= static_cast<S>(c2);
          auto& gt = x.grad();
          const S inv = (*inv_std)[static_cast<std::size_t>(i)];
          for (std::int64_t j = 0; j < c2; ++j) {
            const S gh = g[i * c2 + j] * gain.at(j);
            const S h = (*xhat)[static_cast<std::size_t>(i * c2 + j)];
            gt[static_cast<std::size_t>(i * c2 + j)] += inv * (gh - mean_gh - h * mean_ghx);
          }
        }
      }
      if (gain.requires_grad()) {
        auto& gt = gain.grad();
        for (std::int64_t i = 0; i < r2; ++i)
          for (std::int64_t j = 0; j < c2; ++j)
            gt[static_cast<std::size_t>(j)] +=
                g[i * c2 + j] * (*xhat)[static_cast<std::size_t>(i * c2 + j)];
      }
      if (bias.requires_grad()) {
        auto& gt = bias.grad();
        for (std::int64_t i = 0; i < r2; ++i)
          for (std::int64_t j = 0; j < c2; ++j) gt[static_cast<std::size_t>(j)] += g[i * c2 + j];
      }
    });
  }
  return out;
}

// Rows scaled to unit l2 norm with an epsilon guard: row / (|row| + eps).
template <typename S>
Tensor<S> l2_normalize_rows(Tensor<S> x, S eps = S(1e-8)) {
  x.require_rank(2, "l2_normalize_rows");
  const auto r = x.rows(), c = x.cols();
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto norms = std::make_shared<std::vector<S>>(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    S sq = S(0);
    for (std::int64_t j = 0; j < c; ++j) sq += x.at(i, j) * x.at(i, j);
    const S n = std::sqrt(sq);
    (*norms)[static_cast<std::size_t>(i)] = n;
    const S s = n + eps;
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) / s;
  }
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out, norms, eps]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      const auto r2 = out.rows(), c2 = out.cols();
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < r2; ++i) {
        const S n = (*norms)[static_cast<std::size_t>(i)];
        const S s = n + eps;
        S dot = S(0);
        for (std::int64_t j = 0; j < c2; ++j) dot += g[i * c2 + j] * x.at(i, j);
        for (std::int64_t j = 0; j < c2; ++j) {
          S dx = g[i * c2 + j] / s;
          if (n > S(0)) dx -= x.at(i, j) * dot / (n * s * s);
          gt[static_cast<std::size_t>(i * c2 + j)] += dx;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(Tensor<S> x) {
  S total = S(0);
  for (std::int64_t i = 0; i < x.numel(); ++i) total += x.at(i);
  Tensor<S> out = Tensor<S>::scalar(total);
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      auto& gt = x.grad();
      for (auto& v : gt) v += g[0];
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean(Tensor<S> x) {
  Tensor<S> s = sum(x);
  return scale(s, S(1) / static_cast<S>(x.numel()));
}

// ---------------------------------------------------------------------------
// Convolution & gating
// ---------------------------------------------------------------------------

// 1-D cross-correlation over the sequence axis. x is [len x d_in], kernels are
// [kernel_size x d_in x d_out], bias is [d_out]; same-padding keeps the output
// length equal to the input length. Accumulation order per output element is
// bias, then taps, then input channels — identical to the naive triple loop.
template <typename S>
Tensor<S> conv1d(Tensor<S> x, Tensor<S> kernels, Tensor<S> bias,
                 std::int64_t padding) {
  x.require_rank(2, "conv1d input");
  kernels.require_rank(3, "conv1d kernels");
  bias.require_rank(1, "conv1d bias");
  const auto len = x.rows(), d_in = x.cols();
  const auto k = kernels.dim(0), kd_in = kernels.dim(1), d_out = kernels.dim(2);
  if (k % 2 == 0) throw ConfigError("conv1d: kernel_size must be odd, got " + std::to_string(k));
  if (padding != (k - 1) / 2) {
    throw ConfigError("conv1d: padding must be (kernel_size-1)/2 = " + std::to_string((k - 1) / 2) +
                      ", got " + std::to_string(padding));
  }
  if (kd_in != d_in || bias.dim(0) != d_out) {
    throw ShapeError("conv1d: kernels " + shape_str(kernels.shape()) + " / bias " +
                     shape_str(bias.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros({len, d_out});
  for (std::int64_t i = 0; i < len; ++i) {
    S* orow = out.data() + i * d_out;
    for (std::int64_t o = 0; o < d_out; ++o) orow[o] = bias.at(o);
    for (std::int64_t t = 0; t < k; ++t) {
      const std::int64_t j = i + t - padding;
      if (j < 0 || j >= len) continue;
      const S* xrow = x.data() + j * d_in;
      const S* kslab = kernels.data() + t * d_in * d_out;
      for (std::int64_t c = 0; c < d_in; ++c) {
        const S xv = xrow[c];
        const S* kv = kslab + c * d_out;
        for (std::int64_t o = 0; o < d_out; ++o) orow[o] += xv * kv[o];
      }
    }
  }
  if (detail::tracing<S>({&x, &kernels, &bias})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, kernels, bias, out, padding]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      const auto len2 = x.rows(), d_in2 = x.cols();
      const auto k2 = kernels.dim(0), d_out2 = kernels.dim(2);
      if (bias.requires_grad()) {
        auto& gb = bias.grad();
        for (std::int64_t i = 0; i < len2; ++i)
          for (std::int64_t o = 0; o < d_out2; ++o) gb[static_cast<std::size_t>(o)] += g[i * d_out2 + o];
      }
      for (std::int64_t i = 0; i < len2; ++i) {
        const S* grow = g + i * d_out2;
        for (std::int64_t t = 0; t < k2; ++t) {
          const std::int64_t j = i + t - padding;
          if (j < 0 || j >= len2) continue;
          const S* kslab = kernels.data() + t * d_in2 * d_out2;
          if (x.requires_grad()) {
            auto& gx = x.grad();
            for (std::int64_t c = 0; c < d_in2; ++c) {
              const S* kv = kslab + c * d_out2;
              S acc = S(0);
              for (std::int64_t o = 0; o < d_out2; ++o) acc += grow[o] * kv[o];
              gx[static_cast<std::size_t>(j * d_in2 + c)] += acc;
            }
          }
          if (kernels.requires_grad()) {
            auto& gk = kernels.grad();
            const S* xrow = x.data() + j * d_in2;
            for (std::int64_t c = 0; c < d_in2; ++c) {
              const S xv = xrow[c];
              S* gkv = gk.data() + t * d_in2 * d_out2 + c * d_out2;
              for (std::int64_t o = 0; o < d_out2; ++o) gkv[o] += xv * grow[o];
            }
          }
        }
      }
    });
  }
  return out;
}

// Gated linear unit: left half gated by the sigmoid of the right half.
template <typename S>
Tensor<S> glu(Tensor<S> x) {
  x.require_rank(2, "glu");
  if (x.cols() % 2 != 0) {
    throw ShapeError("glu: last dimension must be even, got " + shape_str(x.shape()));
  }
  const auto r = x.rows(), d = x.cols() / 2;
  Tensor<S> out = Tensor<S>::zeros({r, d});
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < d; ++j)
      out.at(i, j) = x.at(i, j) * detail::stable_sigmoid(x.at(i, d + j));
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      const auto r2 = out.rows(), d2 = out.cols();
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < r2; ++i) {
        for (std::int64_t j = 0; j < d2; ++j) {
          const S sg = detail::stable_sigmoid(x.at(i, d2 + j));
          const S go = g[i * d2 + j];
          gt[static_cast<std::size_t>(i * 2 * d2 + j)] += go * sg;
          gt[static_cast<std::size_t>(i * 2 * d2 + d2 + j)] +=
              go * x.at(i, j) * sg * (S(1) - sg);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lookup, loss, slicing
// ---------------------------------------------------------------------------

// Row gather; the backward pass scatter-adds into the table so repeated ids
// accumulate.
template <typename S>
Tensor<S> embedding_lookup(Tensor<S> table, std::vector<int> ids) {
  table.require_rank(2, "embedding_lookup table");
  const auto v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) +
                       " out of range for table " + shape_str(table.shape()));
    }
  }
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  const auto len = static_cast<std::int64_t>(ids.size());
  Tensor<S> out = Tensor<S>::zeros({len, d});
  for (std::int64_t i = 0; i < len; ++i) {
    const S* src = table.data() + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)]) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  if (detail::tracing<S>({&table})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([table, out, ids]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !table.requires_grad()) return;
      const auto d2 = table.cols();
      auto& gt = table.grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        S* dst = gt.data() + static_cast<std::int64_t>(ids[i]) * d2;
        const S* src = g + static_cast<std::int64_t>(i) * d2;
        for (std::int64_t j = 0; j < d2; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Mean negative log-likelihood over non-pad positions, log-sum-exp stabilized.
template <typename S>
Tensor<S> cross_entropy(Tensor<S> logits, std::vector<int> targets, int pad_id) {
  logits.require_rank(2, "cross_entropy logits");
  const auto len = logits.rows(), v = logits.cols();
  if (static_cast<std::int64_t>(targets.size()) != len) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(logits.shape()) + " logits");
  }
  std::int64_t live = 0;
  for (int t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || t >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(t) +
                       " out of range for vocab " + std::to_string(v));
    }
    ++live;
  }
  if (live == 0) throw DataError("cross_entropy: all positions padded (degenerate batch)");

  auto lse = std::make_shared<std::vector<S>>(static_cast<std::size_t>(len));
  S total = S(0);
  for (std::int64_t i = 0; i < len; ++i) {
    if (targets[static_cast<std::size_t>(i)] == pad_id) continue;
    S m = logits.at(i, 0);
    for (std::int64_t j = 1; j < v; ++j) m = std::max(m, logits.at(i, j));
    S acc = S(0);
    for (std::int64_t j = 0; j < v; ++j) acc += std::exp(logits.at(i, j) - m);
    const S l = m + std::log(acc);
    (*lse)[static_cast<std::size_t>(i)] = l;
    total += l - logits.at(i, targets[static_cast<std::size_t>(i)]);
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(live));
  if (detail::tracing<S>({&logits})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([logits, out, targets, pad_id, lse, live]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !logits.requires_grad()) return;
      const S go = g[0] / static_cast<S>(live);
      const auto len2 = logits.rows(), v2 = logits.cols();
      auto& gt = logits.grad();
      for (std::int64_t i = 0; i < len2; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t == pad_id) continue;
        const S l = (*lse)[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < v2; ++j) {
          S p = std::exp(logits.at(i, j) - l);
          if (j == t) p -= S(1);
          gt[static_cast<std::size_t>(i * v2 + j)] += go * p;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice_rows(Tensor<S> x, std::int64_t start, std::int64_t n) {
  x.require_rank(2, "slice_rows");
  if (start < 0 || n <= 0 || start + n > x.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + n) + ") out of range for " + shape_str(x.shape()));
  }
  const auto c = x.cols();
  Tensor<S> out = Tensor<S>::zeros({n, c});
  std::copy(x.data() + start * c, x.data() + (start + n) * c, out.data());
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out, start]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      const auto c2 = x.cols();
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < out.rows() * c2; ++i)
        gt[static_cast<std::size_t>(start * c2 + i)] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice_cols(Tensor<S> x, std::int64_t start, std::int64_t n) {
  x.require_rank(2, "slice_cols");
  if (start < 0 || n <= 0 || start + n > x.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " +
                     std::to_string(start + n) + ") out of range for " + shape_str(x.shape()));
  }
  const auto r = x.rows(), c = x.cols();
  Tensor<S> out = Tensor<S>::zeros({r, n});
  for (std::int64_t i = 0; i < r; ++i)
    std::copy(x.data() + i * c + start, x.data() + i * c + start + n, out.data() + i * n);
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out, start]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      const auto r2 = x.rows(), c2 = x.cols(), n2 = out.cols();
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < r2; ++i)
        for (std::int64_t j = 0; j < n2; ++j)
          gt[static_cast<std::size_t>(i * c2 + start + j)] += g[i * n2 + j];
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_cols(std::vector<Tensor<S>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const auto r = parts.front().rows();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    p.require_rank(2, "concat_cols part");
    if (p.rows() != r) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().shape()) +
                       " vs " + shape_str(p.shape()));
    }
    total += p.cols();
  }
  Tensor<S> out = Tensor<S>::zeros({r, total});
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const auto c = p.cols();
    for (std::int64_t i = 0; i < r; ++i)
      std::copy(p.data() + i * c, p.data() + (i + 1) * c, out.data() + i * total + off);
    off += c;
  }
  bool trace = false;
  for (const auto& p : parts) {
    const Tensor<S>* pp = &p;
    if (detail::tracing<S>({pp})) trace = true;
  }
  if (trace) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([parts, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      const auto r2 = out.rows(), total2 = out.cols();
      std::int64_t off2 = 0;
      for (auto p : parts) {
        const auto c = p.cols();
        if (p.requires_grad()) {
          auto& gt = p.grad();
          for (std::int64_t i = 0; i < r2; ++i)
            for (std::int64_t j = 0; j < c; ++j)
              gt[static_cast<std::size_t>(i * c + j)] += g[i * total2 + off2 + j];
        }
        off2 += c;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_rows(std::vector<Tensor<S>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const auto c = parts.front().cols();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    p.require_rank(2, "concat_rows part");
    if (p.cols() != c) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts.front().shape()) +
                       " vs " + shape_str(p.shape()));
    }
    total += p.rows();
  }
  Tensor<S> out = Tensor<S>::zeros({total, c});
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), out.data() + off * c);
    off += p.rows();
  }
  bool trace = false;
  for (const auto& p : parts) {
    const Tensor<S>* pp = &p;
    if (detail::tracing<S>({pp})) trace = true;
  }
  if (trace) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([parts, out]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g) return;
      const auto c2 = out.cols();
      std::int64_t off2 = 0;
      for (auto p : parts) {
        if (p.requires_grad()) {
          auto& gt = p.grad();
          for (std::int64_t i = 0; i < p.numel(); ++i)
            gt[static_cast<std::size_t>(i)] += g[off2 * c2 + i];
        }
        off2 += p.rows();
      }
    });
  }
  return out;
}

// Entries where keep==0 are replaced by `fill`; their gradient is cut.
template <typename S>
Tensor<S> masked_fill(Tensor<S> x, std::shared_ptr<const std::vector<std::uint8_t>> keep,
                      S fill) {
  if (static_cast<std::int64_t>(keep->size()) != x.numel()) {
    throw ShapeError("masked_fill: mask size " + std::to_string(keep->size()) +
                     " does not match " + shape_str(x.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out.at(i) = (*keep)[static_cast<std::size_t>(i)] ? x.at(i) : fill;
  if (detail::tracing<S>({&x})) {
    out.set_requires_grad(true);
    GradientTape<S>::active()->record([x, out, keep]() mutable {
      const S* g = detail::gdata_if(out);
      if (!g || !x.requires_grad()) return;
      auto& gt = x.grad();
      for (std::int64_t i = 0; i < out.numel(); ++i)
        if ((*keep)[static_cast<std::size_t>(i)]) gt[static_cast<std::size_t>(i)] += g[i];
    });
  }
  return out;
}

}  // namespace deeppseudo
