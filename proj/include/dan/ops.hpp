#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dan/tensor.hpp"

namespace dan {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapRM = Eigen::Map<const MatRM<S>>;

namespace detail {

template <typename S>
inline void check_finite(Tensor<S> t, const char* op) {
#ifndef NDEBUG
  for (std::int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t.data()[i]))
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
#else
  (void)t;
  (void)op;
#endif
}

template <typename S>
inline bool record_wanted(Tape<S>* tape, bool any_grad) {
  return tape != nullptr && any_grad;
}

// Wraps a pull closure so the node's output gradient is cleared once it has
// been propagated. Leaf gradients then accumulate across backward calls while
// intermediates stay clean.
template <typename S, typename F>
void record_op(Tape<S>* tape, Tensor<S> out, F&& pull) {
  tape->record([out, pull = std::forward<F>(pull)]() mutable {
    pull();
    out.zero_grad();
  });
}

template <typename S>
inline void check_same_shape(Tensor<S> a, Tensor<S> b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "add");
  bool g = a.requires_grad() || b.requires_grad();
  bool rec = detail::record_wanted(tape, g);
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::check_finite(out, "add");
  if (rec)
    detail::record_op(tape, out, [a, b, out]() mutable {
      const S* go = out.grad();
      if (a.requires_grad())
        for (std::int64_t i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
      if (b.requires_grad())
        for (std::int64_t i = 0; i < b.size(); ++i) b.grad()[i] += go[i];
    });
  return out;
}

template <typename S>
Tensor<S> sub(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "sub");
  bool g = a.requires_grad() || b.requires_grad();
  bool rec = detail::record_wanted(tape, g);
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  detail::check_finite(out, "sub");
  if (rec)
    detail::record_op(tape, out, [a, b, out]() mutable {
      const S* go = out.grad();
      if (a.requires_grad())
        for (std::int64_t i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
      if (b.requires_grad())
        for (std::int64_t i = 0; i < b.size(); ++i) b.grad()[i] -= go[i];
    });
  return out;
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "mul");
  bool g = a.requires_grad() || b.requires_grad();
  bool rec = detail::record_wanted(tape, g);
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::check_finite(out, "mul");
  if (rec)
    detail::record_op(tape, out, [a, b, out]() mutable {
      const S* go = out.grad();
      if (a.requires_grad())
        for (std::int64_t i = 0; i < a.size(); ++i) a.grad()[i] += go[i] * b.data()[i];
      if (b.requires_grad())
        for (std::int64_t i = 0; i < b.size(); ++i) b.grad()[i] += go[i] * a.data()[i];
    });
  return out;
}

template <typename S>
Tensor<S> div(Tape<S>* tape, Tensor<S> a, Tensor<S> b) {
  detail::check_same_shape(a, b, "div");
  bool g = a.requires_grad() || b.requires_grad();
  bool rec = detail::record_wanted(tape, g);
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
  detail::check_finite(out, "div");
  if (rec)
    detail::record_op(tape, out, [a, b, out]() mutable {
      const S* go = out.grad();
      if (a.requires_grad())
        for (std::int64_t i = 0; i < a.size(); ++i) a.grad()[i] += go[i] / b.data()[i];
      if (b.requires_grad())
        for (std::int64_t i = 0; i < b.size(); ++i)
          b.grad()[i] -= go[i] * a.data()[i] / (b.data()[i] * b.data()[i]);
    });
  return out;
}

template <typename S>
Tensor<S> scale(Tape<S>* tape, Tensor<S> a, S c) {
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  detail::check_finite(out, "scale");
  if (rec)
    detail::record_op(tape, out, [a, out, c]() mutable {
      const S* go = out.grad();
      for (std::int64_t i = 0; i < a.size(); ++i) a.grad()[i] += go[i] * c;
    });
  return out;
}

template <typename S>
Tensor<S> add_scalar(Tape<S>* tape, Tensor<S> a, S c) {
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + c;
  detail::check_finite(out, "add_scalar");
  if (rec)
    detail::record_op(tape, out, [a, out]() mutable {
      const S* go = out.grad();
      for (std::int64_t i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
    });
  return out;
}

template <typename S>
Tensor<S> square(Tape<S>* tape, Tensor<S> a) {
  return mul(tape, a, a);
}

// y = x^p for x >= 0 (p need not be integral)
template <typename S>
Tensor<S> pow_scalar(Tape<S>* tape, Tensor<S> a, S p) {
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = std::pow(a.data()[i], p);
  detail::check_finite(out, "pow_scalar");
  if (rec)
    detail::record_op(tape, out, [a, out, p]() mutable {
      const S* go = out.grad();
      for (std::int64_t i = 0; i < a.size(); ++i) {
        S x = a.data()[i];
        S d = (x == S(0) && p < S(1)) ? S(0) : p * std::pow(x, p - S(1));
        a.grad()[i] += go[i] * d;
      }
    });
  return out;
}

// log(max(x, floor)); gradient is zero on the clamped region
template <typename S>
Tensor<S> log_clamped(Tape<S>* tape, Tensor<S> a, S floor = S(1e-12)) {
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i)
    out.data()[i] = std::log(std::max(a.data()[i], floor));
  detail::check_finite(out, "log_clamped");
  if (rec)
    detail::record_op(tape, out, [a, out, floor]() mutable {
      const S* go = out.grad();
      for (std::int64_t i = 0; i < a.size(); ++i)
        if (a.data()[i] > floor) a.grad()[i] += go[i] / a.data()[i];
    });
  return out;
}

// y = 1 / (1 + x)
template <typename S>
Tensor<S> recip_one_plus(Tape<S>* tape, Tensor<S> a) {
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = S(1) / (S(1) + a.data()[i]);
  detail::check_finite(out, "recip_one_plus");
  if (rec)
    detail::record_op(tape, out, [a, out]() mutable {
      const S* go = out.grad();
      for (std::int64_t i = 0; i < a.size(); ++i) {
        S y = out.data()[i];
        a.grad()[i] -= go[i] * y * y;
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> relu(Tape<S>* tape, Tensor<S> a) {
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
  if (rec)
    detail::record_op(tape, out, [a, out]() mutable {
      const S* go = out.grad();
      for (std::int64_t i = 0; i < a.size(); ++i)
        if (a.data()[i] > S(0)) a.grad()[i] += go[i];
    });
  return out;
}

template <typename S>
Tensor<S> sigmoid(Tape<S>* tape, Tensor<S> a) {
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) {
    S x = a.data()[i];
    out.data()[i] = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                              : std::exp(x) / (S(1) + std::exp(x));
  }
  detail::check_finite(out, "sigmoid");
  if (rec)
    detail::record_op(tape, out, [a, out]() mutable {
      const S* go = out.grad();
      for (std::int64_t i = 0; i < a.size(); ++i) {
        S y = out.data()[i];
        a.grad()[i] += go[i] * y * (S(1) - y);
      }
    });
  return out;
}

template <typename S>
Tensor<S> tanh_op(Tape<S>* tape, Tensor<S> a) {
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = std::tanh(a.data()[i]);
  detail::check_finite(out, "tanh_op");
  if (rec)
    detail::record_op(tape, out, [a, out]() mutable {
      const S* go = out.grad();
      for (std::int64_t i = 0; i < a.size(); ++i) {
        S y = out.data()[i];
        a.grad()[i] += go[i] * (S(1) - y * y);
      }
    });
  return out;
}

// Max-shifted softmax over one axis; each slice along that axis sums to 1.
template <typename S>
Tensor<S> softmax(Tape<S>* tape, Tensor<S> a, int axis) {
  if (axis < 0 || axis >= a.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(a.rank()));
  std::int64_t outer = 1, inner = 1;
  int n = a.extent(axis);
  for (int i = 0; i < axis; ++i) outer *= a.extent(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.extent(i);

  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(a.shape(), rec);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      std::int64_t base = o * n * inner + in;
      S mx = -std::numeric_limits<S>::infinity();
      for (int k = 0; k < n; ++k) mx = std::max(mx, a.data()[base + k * inner]);
      S sum = S(0);
      for (int k = 0; k < n; ++k) {
        S e = std::exp(a.data()[base + k * inner] - mx);
        out.data()[base + k * inner] = e;
        sum += e;
      }
      for (int k = 0; k < n; ++k) out.data()[base + k * inner] /= sum;
    }
  detail::check_finite(out, "softmax");
  if (rec)
    detail::record_op(tape, out, [a, out, outer, inner, n]() mutable {
      const S* go = out.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
          std::int64_t base = o * n * inner + in;
          S dot = S(0);
          for (int k = 0; k < n; ++k) dot += go[base + k * inner] * out.data()[base + k * inner];
          for (int k = 0; k < n; ++k) {
            std::int64_t idx = base + k * inner;
            a.grad()[idx] += out.data()[idx] * (go[idx] - dot);
          }
        }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and reshaping
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(Tape<S>* tape, Tensor<S> a) {
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(Shape{1}, rec);
  S acc = S(0);
  for (std::int64_t i = 0; i < a.size(); ++i) acc += a.data()[i];
  out.data()[0] = acc;
  detail::check_finite(out, "sum");
  if (rec)
    detail::record_op(tape, out, [a, out]() mutable {
      S go = out.grad()[0];
      for (std::int64_t i = 0; i < a.size(); ++i) a.grad()[i] += go;
    });
  return out;
}

template <typename S>
Tensor<S> mean(Tape<S>* tape, Tensor<S> a) {
  return scale(tape, sum(tape, a), S(1) / static_cast<S>(a.size()));
}

// Sum over one axis; result rank drops by one.
template <typename S>
Tensor<S> sum_axis(Tape<S>* tape, Tensor<S> a, int axis) {
  if (axis < 0 || axis >= a.rank())
    throw DimensionError("sum_axis: axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(a.rank()));
  std::int64_t outer = 1, inner = 1;
  int n = a.extent(axis);
  for (int i = 0; i < axis; ++i) outer *= a.extent(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.extent(i);
  Shape oshape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis) oshape.push_back(a.extent(i));
  if (oshape.empty()) oshape.push_back(1);

  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(oshape, rec);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      S acc = S(0);
      for (int k = 0; k < n; ++k) acc += a.data()[o * n * inner + k * inner + in];
      out.data()[o * inner + in] = acc;
    }
  detail::check_finite(out, "sum_axis");
  if (rec)
    detail::record_op(tape, out, [a, out, outer, inner, n]() mutable {
      const S* go = out.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
          S g = go[o * inner + in];
          for (int k = 0; k < n; ++k) a.grad()[o * n * inner + k * inner + in] += g;
        }
    });
  return out;
}

// Stack equal-shape tensors along a new trailing axis.
template <typename S>
Tensor<S> stack_last(Tape<S>* tape, const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ConfigError("stack_last: empty tensor list");
  const Shape& base = parts[0].shape();
  bool g = false;
  for (const auto& p : parts) {
    detail::check_same_shape(parts[0], p, "stack_last");
    g = g || p.requires_grad();
  }
  int h = static_cast<int>(parts.size());
  Shape oshape = base;
  oshape.push_back(h);
  bool rec = detail::record_wanted(tape, g);
  Tensor<S> out(oshape, rec);
  std::int64_t m = parts[0].size();
  for (std::int64_t i = 0; i < m; ++i)
    for (int k = 0; k < h; ++k) out.data()[i * h + k] = parts[static_cast<std::size_t>(k)].data()[i];
  if (rec)
    detail::record_op(tape, out, [parts, out, m, h]() mutable {
      const S* go = out.grad();
      for (int k = 0; k < h; ++k) {
        Tensor<S> p = parts[static_cast<std::size_t>(k)];
        if (!p.requires_grad()) continue;
        for (std::int64_t i = 0; i < m; ++i) p.grad()[i] += go[i * h + k];
      }
    });
  return out;
}

// Pick out[i] = a[i, labels[i]] from a row-major [N,C] matrix.
template <typename S>
Tensor<S> gather_rows(Tape<S>* tape, Tensor<S> a, const std::vector<int>& labels) {
  if (a.rank() != 2) throw DimensionError("gather_rows: expected rank-2, got " + shape_str(a.shape()));
  int n = a.extent(0), c = a.extent(1);
  if (static_cast<int>(labels.size()) != n)
    throw DimensionError("gather_rows: label count mismatch");
  for (int i = 0; i < n; ++i)
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= c)
      throw LabelError("gather_rows: label " + std::to_string(labels[static_cast<std::size_t>(i)]) +
                       " out of range [0," + std::to_string(c) + ") at row " + std::to_string(i));
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(Shape{n}, rec);
  for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i * c + labels[static_cast<std::size_t>(i)]];
  if (rec)
    detail::record_op(tape, out, [a, out, labels, c]() mutable {
      const S* go = out.grad();
      for (int i = 0; i < out.extent(0); ++i)
        a.grad()[i * c + labels[static_cast<std::size_t>(i)]] += go[i];
    });
  return out;
}

// Column slice of a rank-2 tensor: out[i] = a[i, j].
template <typename S>
Tensor<S> select_col(Tape<S>* tape, Tensor<S> a, int j) {
  if (a.rank() != 2) throw DimensionError("select_col: expected rank-2, got " + shape_str(a.shape()));
  int n = a.extent(0), c = a.extent(1);
  if (j < 0 || j >= c) throw DimensionError("select_col: column " + std::to_string(j) + " out of range");
  bool rec = detail::record_wanted(tape, a.requires_grad());
  Tensor<S> out(Shape{n}, rec);
  for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i * c + j];
  if (rec)
    detail::record_op(tape, out, [a, out, j, c]() mutable {
      const S* go = out.grad();
      for (int i = 0; i < out.extent(0); ++i) a.grad()[i * c + j] += go[i];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast products used by the attention heads
// ---------------------------------------------------------------------------

// feature_map [N,C,H,W] * map [N,1,H,W]
template <typename S>
Tensor<S> mul_spatial(Tape<S>* tape, Tensor<S> fm, Tensor<S> map) {
  if (fm.rank() != 4 || map.rank() != 4 || map.extent(1) != 1 || fm.extent(0) != map.extent(0) ||
      fm.extent(2) != map.extent(2) || fm.extent(3) != map.extent(3))
    throw DimensionError("mul_spatial: incompatible shapes " + shape_str(fm.shape()) + " and " +
                         shape_str(map.shape()));
  int n = fm.extent(0), c = fm.extent(1);
  std::int64_t hw = static_cast<std::int64_t>(fm.extent(2)) * fm.extent(3);
  bool g = fm.requires_grad() || map.requires_grad();
  bool rec = detail::record_wanted(tape, g);
  Tensor<S> out(fm.shape(), rec);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (std::int64_t p = 0; p < hw; ++p)
        out.data()[(i * c + ch) * hw + p] = fm.data()[(i * c + ch) * hw + p] * map.data()[i * hw + p];
  detail::check_finite(out, "mul_spatial");
  if (rec)
    detail::record_op(tape, out, [fm, map, out, n, c, hw]() mutable {
      const S* go = out.grad();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (std::int64_t p = 0; p < hw; ++p) {
            std::int64_t idx = (i * c + ch) * hw + p;
            if (fm.requires_grad()) fm.grad()[idx] += go[idx] * map.data()[i * hw + p];
            if (map.requires_grad()) map.grad()[i * hw + p] += go[idx] * fm.data()[idx];
          }
    });
  return out;
}

// feature_map [N,C,H,W] * gate [N,C]
template <typename S>
Tensor<S> mul_channel(Tape<S>* tape, Tensor<S> fm, Tensor<S> gate) {
  if (fm.rank() != 4 || gate.rank() != 2 || fm.extent(0) != gate.extent(0) ||
      fm.extent(1) != gate.extent(1))
    throw DimensionError("mul_channel: incompatible shapes " + shape_str(fm.shape()) + " and " +
                         shape_str(gate.shape()));
  int n = fm.extent(0), c = fm.extent(1);
  std::int64_t hw = static_cast<std::int64_t>(fm.extent(2)) * fm.extent(3);
  bool g = fm.requires_grad() || gate.requires_grad();
  bool rec = detail::record_wanted(tape, g);
  Tensor<S> out(fm.shape(), rec);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      S w = gate.data()[i * c + ch];
      for (std::int64_t p = 0; p < hw; ++p)
        out.data()[(i * c + ch) * hw + p] = fm.data()[(i * c + ch) * hw + p] * w;
    }
  detail::check_finite(out, "mul_channel");
  if (rec)
    detail::record_op(tape, out, [fm, gate, out, n, c, hw]() mutable {
      const S* go = out.grad();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          S w = gate.data()[i * c + ch];
          S acc = S(0);
          for (std::int64_t p = 0; p < hw; ++p) {
            std::int64_t idx = (i * c + ch) * hw + p;
            if (fm.requires_grad()) fm.grad()[idx] += go[idx] * w;
            acc += go[idx] * fm.data()[idx];
          }
          if (gate.requires_grad()) gate.grad()[i * c + ch] += acc;
        }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Dense / convolution / normalization / pooling
// ---------------------------------------------------------------------------

// y = x W + b with x [N,F], W [F,G], b [G]
template <typename S>
Tensor<S> dense(Tape<S>* tape, Tensor<S> x, Tensor<S> w, Tensor<S> b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw DimensionError("dense: expected ranks 2,2,1");
  int n = x.extent(0), f = x.extent(1), g = w.extent(1);
  if (w.extent(0) != f)
    throw DimensionError("dense: inner dimension mismatch, input has " + std::to_string(f) +
                         " features but weight expects " + std::to_string(w.extent(0)));
  if (b.extent(0) != g) throw DimensionError("dense: bias extent mismatch");
  bool grad = x.requires_grad() || w.requires_grad() || b.requires_grad();
  bool rec = detail::record_wanted(tape, grad);
  Tensor<S> out(Shape{n, g}, rec);
  CMapRM<S> X(x.data(), n, f), W(w.data(), f, g);
  MapRM<S> Y(out.data(), n, g);
  Y.noalias() = X * W;
  Y.rowwise() += Eigen::Map<const Eigen::RowVector<S, Eigen::Dynamic>>(b.data(), g);
  detail::check_finite(out, "dense");
  if (rec)
    detail::record_op(tape, out, [x, w, b, out, n, f, g]() mutable {
      CMapRM<S> X(x.data(), n, f), W(w.data(), f, g), dY(out.grad(), n, g);
      if (x.requires_grad()) {
        MapRM<S> dX(x.grad(), n, f);
        dX.noalias() += dY * W.transpose();
      }
      if (w.requires_grad()) {
        MapRM<S> dW(w.grad(), f, g);
        dW.noalias() += X.transpose() * dY;
      }
      if (b.requires_grad())
        Eigen::Map<Eigen::RowVector<S, Eigen::Dynamic>>(b.grad(), g) += dY.colwise().sum();
    });
  return out;
}

namespace detail {

// im2col over the whole batch: out is [Cin*kH*kW, N*Hout*Wout], row-major.
template <typename S>
void im2col(const S* in, int n, int cin, int h, int w, int kh, int kw, int stride, int pad,
            int hout, int wout, S* col) {
  std::int64_t cols = static_cast<std::int64_t>(n) * hout * wout;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        std::int64_t row = (static_cast<std::int64_t>(c) * kh + ky) * kw + kx;
        S* dst = col + row * cols;
        for (int ni = 0; ni < n; ++ni) {
          const S* src = in + (static_cast<std::int64_t>(ni) * cin + c) * h * w;
          for (int oy = 0; oy < hout; ++oy) {
            int iy = oy * stride + ky - pad;
            for (int ox = 0; ox < wout; ++ox) {
              int ix = ox * stride + kx - pad;
              *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                           ? src[static_cast<std::int64_t>(iy) * w + ix]
                           : S(0);
            }
          }
        }
      }
}

// scatter-add transpose of im2col
template <typename S>
void col2im(const S* col, int n, int cin, int h, int w, int kh, int kw, int stride, int pad,
            int hout, int wout, S* din) {
  std::int64_t cols = static_cast<std::int64_t>(n) * hout * wout;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        std::int64_t row = (static_cast<std::int64_t>(c) * kh + ky) * kw + kx;
        const S* src = col + row * cols;
        for (int ni = 0; ni < n; ++ni) {
          S* dst = din + (static_cast<std::int64_t>(ni) * cin + c) * h * w;
          for (int oy = 0; oy < hout; ++oy) {
            int iy = oy * stride + ky - pad;
            for (int ox = 0; ox < wout; ++ox) {
              int ix = ox * stride + kx - pad;
              if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                dst[static_cast<std::int64_t>(iy) * w + ix] += *src;
              ++src;
            }
          }
        }
      }
}

}  // namespace detail

// Cross-correlation of input [N,Cin,H,W] with kernel [Cout,Cin,kH,kW].
template <typename S>
Tensor<S> conv2d(Tape<S>* tape, Tensor<S> input, Tensor<S> kernel,
                 Tensor<S> bias, int stride = 1, int padding = 0) {
  if (input.rank() != 4) throw DimensionError("conv2d: input must be rank-4, got " + shape_str(input.shape()));
  if (kernel.rank() != 4) throw DimensionError("conv2d: kernel must be rank-4, got " + shape_str(kernel.shape()));
  if (bias.rank() != 1) throw DimensionError("conv2d: bias must be rank-1");
  if (stride < 1) throw GeometryError("conv2d: stride must be positive");
  if (padding < 0) throw GeometryError("conv2d: padding must be nonnegative");
  int n = input.extent(0), cin = input.extent(1), h = input.extent(2), w = input.extent(3);
  int cout = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
  if (kernel.extent(1) != cin)
    throw DimensionError("conv2d: kernel input-channel axis is " + std::to_string(kernel.extent(1)) +
                         " but input has " + std::to_string(cin) + " channels");
  if (bias.extent(0) != cout) throw DimensionError("conv2d: bias extent mismatch on output-channel axis");
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw GeometryError("conv2d: kernel exceeds padded input extent");
  // floor division: trailing rows/columns that do not fit a full stride are dropped
  int hout = (h + 2 * padding - kh) / stride + 1;
  int wout = (w + 2 * padding - kw) / stride + 1;

  std::int64_t ckk = static_cast<std::int64_t>(cin) * kh * kw;
  std::int64_t cols = static_cast<std::int64_t>(n) * hout * wout;
  std::vector<S> col(static_cast<std::size_t>(ckk * cols));
  detail::im2col(input.data(), n, cin, h, w, kh, kw, stride, padding, hout, wout, col.data());

  bool grad = input.requires_grad() || kernel.requires_grad() || bias.requires_grad();
  bool rec = detail::record_wanted(tape, grad);
  Tensor<S> out(Shape{n, cout, hout, wout}, rec);

  // [Cout, CKK] x [CKK, N*HW] -> rows are output channels, columns batch*space
  MatRM<S> y(cout, cols);
  {
    CMapRM<S> K(kernel.data(), cout, ckk), C(col.data(), ckk, cols);
    y.noalias() = K * C;
  }
  std::int64_t hwo = static_cast<std::int64_t>(hout) * wout;
  for (int co = 0; co < cout; ++co) {
    S bv = bias.data()[co];
    for (int ni = 0; ni < n; ++ni) {
      const S* src = y.data() + co * cols + ni * hwo;
      S* dst = out.data() + (static_cast<std::int64_t>(ni) * cout + co) * hwo;
      for (std::int64_t p = 0; p < hwo; ++p) dst[p] = src[p] + bv;
    }
  }
  detail::check_finite(out, "conv2d");

  if (rec)
    detail::record_op(tape, out, [input, kernel, bias, out, n, cin, h, w, cout, kh, kw, stride, padding, hout,
                  wout]() mutable {
      std::int64_t ckk = static_cast<std::int64_t>(cin) * kh * kw;
      std::int64_t cols = static_cast<std::int64_t>(n) * hout * wout;
      std::int64_t hwo = static_cast<std::int64_t>(hout) * wout;
      // regroup dY from [N,Cout,H',W'] into [Cout, N*H'*W']
      MatRM<S> dy(cout, cols);
      for (int co = 0; co < cout; ++co)
        for (int ni = 0; ni < n; ++ni) {
          const S* src = out.grad() + (static_cast<std::int64_t>(ni) * cout + co) * hwo;
          S* dst = dy.data() + co * cols + ni * hwo;
          for (std::int64_t p = 0; p < hwo; ++p) dst[p] = src[p];
        }
      if (bias.requires_grad())
        for (int co = 0; co < cout; ++co) {
          S acc = S(0);
          const S* row = dy.data() + co * cols;
          for (std::int64_t p = 0; p < cols; ++p) acc += row[p];
          bias.grad()[co] += acc;
        }
      if (kernel.requires_grad()) {
        std::vector<S> col(static_cast<std::size_t>(ckk * cols));
        detail::im2col(input.data(), n, cin, h, w, kh, kw, stride, padding, hout, wout, col.data());
        CMapRM<S> C(col.data(), ckk, cols);
        MapRM<S> dK(kernel.grad(), cout, ckk);
        dK.noalias() += dy * C.transpose();
      }
      if (input.requires_grad()) {
        MatRM<S> dcol(ckk, cols);
        CMapRM<S> K(kernel.data(), cout, ckk);
        dcol.noalias() = K.transpose() * dy;
        detail::col2im(dcol.data(), n, cin, h, w, kh, kw, stride, padding, hout, wout, input.grad());
      }
    });
  return out;
}

// Running statistics for one batchnorm layer, per feature/channel.
template <typename S>
struct RunningStats {
  std::vector<S> mean;
  std::vector<S> var;
  explicit RunningStats(int channels = 0)
      : mean(static_cast<std::size_t>(channels), S(0)), var(static_cast<std::size_t>(channels), S(1)) {}
};

// Batch normalization for [N,F] (per feature) or [N,C,H,W] (per channel).
// Train mode uses batch statistics and moves the running pair by EMA;
// eval mode uses the running pair. Gradients flow through the batch moments.
template <typename S>
Tensor<S> batchnorm(Tape<S>* tape, Tensor<S> x, Tensor<S> gamma, Tensor<S> beta,
                    bool train, RunningStats<S>& stats, S momentum = S(0.1), S epsilon = S(1e-5)) {
  if (x.rank() != 2 && x.rank() != 4)
    throw DimensionError("batchnorm: expected rank 2 or 4, got " + shape_str(x.shape()));
  if (epsilon <= S(0)) throw ConfigError("batchnorm: epsilon must be positive");
  int n = x.extent(0);
  int c = x.extent(1);
  std::int64_t l = x.rank() == 4 ? static_cast<std::int64_t>(x.extent(2)) * x.extent(3) : 1;
  if (gamma.size() != c || beta.size() != c)
    throw DimensionError("batchnorm: gamma/beta extent must equal channel count " + std::to_string(c));
  if (static_cast<int>(stats.mean.size()) != c)
    throw DimensionError("batchnorm: running stats extent mismatch");
  if (train && n < 2) throw BatchSizeError("batchnorm: train mode needs batch size >= 2, got " + std::to_string(n));

  std::int64_t m = static_cast<std::int64_t>(n) * l;
  std::vector<S> mu(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
  if (train) {
    for (int ch = 0; ch < c; ++ch) {
      S s = S(0);
      for (int ni = 0; ni < n; ++ni) {
        const S* p = x.data() + (static_cast<std::int64_t>(ni) * c + ch) * l;
        for (std::int64_t i = 0; i < l; ++i) s += p[i];
      }
      S mean_c = s / static_cast<S>(m);
      S v = S(0);
      for (int ni = 0; ni < n; ++ni) {
        const S* p = x.data() + (static_cast<std::int64_t>(ni) * c + ch) * l;
        for (std::int64_t i = 0; i < l; ++i) v += (p[i] - mean_c) * (p[i] - mean_c);
      }
      mu[static_cast<std::size_t>(ch)] = mean_c;
      var[static_cast<std::size_t>(ch)] = v / static_cast<S>(m);
      stats.mean[static_cast<std::size_t>(ch)] =
          (S(1) - momentum) * stats.mean[static_cast<std::size_t>(ch)] + momentum * mean_c;
      stats.var[static_cast<std::size_t>(ch)] =
          (S(1) - momentum) * stats.var[static_cast<std::size_t>(ch)] + momentum * var[static_cast<std::size_t>(ch)];
    }
  } else {
    mu = stats.mean;
    var = stats.var;
  }

  bool grad = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  bool rec = detail::record_wanted(tape, grad);
  Tensor<S> out(x.shape(), rec);
  std::vector<S> inv_std(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch)
    inv_std[static_cast<std::size_t>(ch)] = S(1) / std::sqrt(var[static_cast<std::size_t>(ch)] + epsilon);
  for (int ni = 0; ni < n; ++ni)
    for (int ch = 0; ch < c; ++ch) {
      const S* px = x.data() + (static_cast<std::int64_t>(ni) * c + ch) * l;
      S* py = out.data() + (static_cast<std::int64_t>(ni) * c + ch) * l;
      S g = gamma.data()[ch], b = beta.data()[ch];
      S mc = mu[static_cast<std::size_t>(ch)], is = inv_std[static_cast<std::size_t>(ch)];
      for (std::int64_t i = 0; i < l; ++i) py[i] = g * (px[i] - mc) * is + b;
    }
  detail::check_finite(out, "batchnorm");

  if (rec)
    detail::record_op(tape, out, [x, gamma, beta, out, mu, inv_std, train, n, c, l, m]() mutable {
      const S* go = out.grad();
      for (int ch = 0; ch < c; ++ch) {
        S mc = mu[static_cast<std::size_t>(ch)], is = inv_std[static_cast<std::size_t>(ch)];
        S g = gamma.data()[ch];
        // per-channel sums of dy and dy*xhat
        S sum_dy = S(0), sum_dy_xh = S(0);
        for (int ni = 0; ni < n; ++ni) {
          const S* px = x.data() + (static_cast<std::int64_t>(ni) * c + ch) * l;
          const S* pg = go + (static_cast<std::int64_t>(ni) * c + ch) * l;
          for (std::int64_t i = 0; i < l; ++i) {
            sum_dy += pg[i];
            sum_dy_xh += pg[i] * (px[i] - mc) * is;
          }
        }
        if (gamma.requires_grad()) gamma.grad()[ch] += sum_dy_xh;
        if (beta.requires_grad()) beta.grad()[ch] += sum_dy;
        if (x.requires_grad()) {
          S inv_m = S(1) / static_cast<S>(m);
          for (int ni = 0; ni < n; ++ni) {
            const S* px = x.data() + (static_cast<std::int64_t>(ni) * c + ch) * l;
            const S* pg = go + (static_cast<std::int64_t>(ni) * c + ch) * l;
            S* pd = x.grad() + (static_cast<std::int64_t>(ni) * c + ch) * l;
            for (std::int64_t i = 0; i < l; ++i) {
              S xh = (px[i] - mc) * is;
              if (train)
                pd[i] += g * is * (pg[i] - inv_m * sum_dy - xh * inv_m * sum_dy_xh);
              else
                pd[i] += g * is * pg[i];
            }
          }
        }
      }
    });
  return out;
}

// Max pooling; ties route the gradient to the first maximum in row-major scan.
template <typename S>
Tensor<S> max_pool(Tape<S>* tape, Tensor<S> x, int window, int stride) {
  if (x.rank() != 4) throw DimensionError("max_pool: expected rank-4 input, got " + shape_str(x.shape()));
  if (window < 1 || stride < 1) throw GeometryError("max_pool: window and stride must be positive");
  int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (window > h || window > w) throw GeometryError("max_pool: window larger than input extent");
  int hout = (h - window) / stride + 1;
  int wout = (w - window) / stride + 1;
  bool rec = detail::record_wanted(tape, x.requires_grad());
  Tensor<S> out(Shape{n, c, hout, wout}, rec);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  for (int ni = 0; ni < n; ++ni)
    for (int ch = 0; ch < c; ++ch) {
      const S* plane = x.data() + (static_cast<std::int64_t>(ni) * c + ch) * h * w;
      for (int oy = 0; oy < hout; ++oy)
        for (int ox = 0; ox < wout; ++ox) {
          S best = -std::numeric_limits<S>::infinity();
          std::int64_t best_idx = 0;
          for (int ky = 0; ky < window; ++ky)
            for (int kx = 0; kx < window; ++kx) {
              std::int64_t idx = static_cast<std::int64_t>(oy * stride + ky) * w + (ox * stride + kx);
              if (plane[idx] > best) {
                best = plane[idx];
                best_idx = idx;
              }
            }
          std::int64_t o = ((static_cast<std::int64_t>(ni) * c + ch) * hout + oy) * wout + ox;
          out.data()[o] = best;
          (*argmax)[static_cast<std::size_t>(o)] =
              (static_cast<std::int64_t>(ni) * c + ch) * h * w + best_idx;
        }
    }
  if (rec)
    detail::record_op(tape, out, [x, out, argmax]() mutable {
      const S* go = out.grad();
      for (std::int64_t o = 0; o < out.size(); ++o)
        x.grad()[(*argmax)[static_cast<std::size_t>(o)]] += go[o];
    });
  return out;
}

// [N,C,H,W] -> [N,C], mean over the spatial plane.
template <typename S>
Tensor<S> global_avg_pool(Tape<S>* tape, Tensor<S> x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool: expected rank-4 input, got " + shape_str(x.shape()));
  int n = x.extent(0), c = x.extent(1);
  std::int64_t hw = static_cast<std::int64_t>(x.extent(2)) * x.extent(3);
  bool rec = detail::record_wanted(tape, x.requires_grad());
  Tensor<S> out(Shape{n, c}, rec);
  for (int ni = 0; ni < n; ++ni)
    for (int ch = 0; ch < c; ++ch) {
      const S* p = x.data() + (static_cast<std::int64_t>(ni) * c + ch) * hw;
      S acc = S(0);
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      out.data()[ni * c + ch] = acc / static_cast<S>(hw);
    }
  detail::check_finite(out, "global_avg_pool");
  if (rec)
    detail::record_op(tape, out, [x, out, n, c, hw]() mutable {
      const S* go = out.grad();
      for (int ni = 0; ni < n; ++ni)
        for (int ch = 0; ch < c; ++ch) {
          S g = go[ni * c + ch] / static_cast<S>(hw);
          S* p = x.grad() + (static_cast<std::int64_t>(ni) * c + ch) * hw;
          for (std::int64_t i = 0; i < hw; ++i) p[i] += g;
        }
    });
  return out;
}

}  // namespace dan
