// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "lrnn/errors.hpp"
#include "lrnn/tape.hpp"
#include "lrnn/tensor.hpp"

namespace lrnn {

/// Token id marking an unsupervised target position.
inline constexpr std::int32_t kIgnoreTarget = -1;

namespace detail {

/// 64-bit results must stay finite; 32-bit results saturate with a one-time warning.
template <typename T>
inline T finite_or_saturate(T value, const char* op) {
  if (std::isfinite(value)) return value;
  if constexpr (std::is_same_v<T, double>) {
    throw NumericError(std::string(op) + ": non-finite result");
  } else {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) std::cerr << "warning: " << op << " saturated a non-finite value\n";
    if (std::isnan(value)) return T{0};
    return value > 0 ? std::numeric_limits<T>::max() : std::numeric_limits<T>::lowest();
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (+)= op(A) * op(B) on row-major buffers; op(A) is p x q and op(B) is q x r.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t p, std::size_t q, std::size_t r, bool trans_a,
          bool trans_b, bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  Eigen::Map<RowMat<T>> cm(c, static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(r));
  const auto P = static_cast<Eigen::Index>(p), Q = static_cast<Eigen::Index>(q), R = static_cast<Eigen::Index>(r);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += Map(a, P, Q) * Map(b, Q, R);
  } else if (trans_a && !trans_b) {
    cm.noalias() += Map(a, Q, P).transpose() * Map(b, Q, R);
  } else if (!trans_a && trans_b) {
    cm.noalias() += Map(a, P, Q) * Map(b, R, Q).transpose();
  } else {
    cm.noalias() += Map(a, Q, P).transpose() * Map(b, R, Q).transpose();
  }
}

/// Trailing-aligned broadcast of two shapes.
inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

/// Element strides of `in` inside `out` coordinates (0 along broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t oi = i + (out.size() - in.size());
    strides[oi] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

/// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, Fn&& fn) {
  const std::size_t n = shape_numel(out);
  const std::size_t na = shape_numel(sa), nb = shape_numel(sb);
  if (sa == out && sb == out) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  auto is_suffix = [&](const Shape& s) {
    if (s.size() > out.size()) return false;
    return std::equal(s.begin(), s.end(), out.end() - static_cast<std::ptrdiff_t>(s.size()));
  };
  if (is_suffix(sa) && is_suffix(sb) && na > 0 && nb > 0) {
    std::size_t ja = 0, jb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      fn(i, ja, jb);
      if (++ja == na) ja = 0;
      if (++jb == nb) jb = 0;
    }
    return;
  }
  const auto st_a = broadcast_strides(sa, out);
  const auto st_b = broadcast_strides(sb, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      ia += st_a[d];
      ib += st_b[d];
      if (idx[d] < out[d]) break;
      ia -= st_a[d] * out[d];
      ib -= st_b[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <typename T>
inline T sigmoid(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
inline T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x * static_cast<T>(0.70710678118654752440)));
}

template <typename T>
inline T gelu_grad(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x * static_cast<T>(0.70710678118654752440)));
  const T pdf = std::exp(T{-0.5} * x * x) * T{0.5} * static_cast<T>(std::numbers::inv_sqrtpi) * static_cast<T>(std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

/// Batched matrix product a[..,p,q] x b[..,q,r] -> [..,p,r]; batch dims broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t p = a.shape()[a.rank() - 2], q = a.shape().back();
  const std::size_t q2 = b.shape()[b.rank() - 2], r = b.shape().back();
  if (q != q2) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = detail::broadcast_shapes(batch_a, batch_b, "matmul");
  Shape out_shape = batch;
  out_shape.push_back(p);
  out_shape.push_back(r);

  std::vector<T> out(shape_numel(out_shape));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const bool flat = batch_b.empty();
  if (flat) {
    // b is a single matrix: fold every batch dim of a into the row count
    detail::gemm(pa, pb, out.data(), a.numel() / q, q, r, false, false, false);
  } else {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    detail::for_each_broadcast(batch, batch_a, batch_b,
                               [&](std::size_t, std::size_t ia, std::size_t ib) { pairs.emplace_back(ia, ib); });
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      detail::gemm(pa + pairs[i].first * p * q, pb + pairs[i].second * q * r, out.data() + i * p * r, p, q, r,
                   false, false, false);
    }
  }
  Tensor<T> result(out_shape, std::move(out));
  if (!tape || !tape->tracks_any(a, b)) return result;
  return tape->record("matmul", std::move(result), {&a, &b},
                      [a, b, p, q, r, flat, batch, batch_a, batch_b](std::span<const T> g, auto& grads) {
                        const T* pa = a.data().data();
                        const T* pb = b.data().data();
                        auto ga = grads[0];
                        auto gb = grads[1];
                        if (flat) {
                          const std::size_t rows = a.numel() / q;
                          if (!ga.empty()) detail::gemm(g.data(), pb, ga.data(), rows, r, q, false, true, true);
                          if (!gb.empty()) detail::gemm(pa, g.data(), gb.data(), q, rows, r, true, false, true);
                          return;
                        }
                        std::size_t i = 0;
                        detail::for_each_broadcast(batch, batch_a, batch_b,
                                                   [&](std::size_t, std::size_t ia, std::size_t ib) {
                                                     const T* gi = g.data() + i * p * r;
                                                     if (!ga.empty())
                                                       detail::gemm(gi, pb + ib * q * r, ga.data() + ia * p * q, p,
                                                                    r, q, false, true, true);
                                                     if (!gb.empty())
                                                       detail::gemm(pa + ia * p * q, gi, gb.data() + ib * q * r, q,
                                                                    p, r, true, false, true);
                                                     ++i;
                                                   });
                      });
}

// ---------------------------------------------------------------------------
// elementwise

enum class Elementwise { add, sub, mul, exp, sigmoid, relu, neg, gelu };

inline const char* to_string(Elementwise k) {
  switch (k) {
    case Elementwise::add: return "add";
    case Elementwise::sub: return "sub";
    case Elementwise::mul: return "mul";
    case Elementwise::exp: return "exp";
    case Elementwise::sigmoid: return "sigmoid";
    case Elementwise::relu: return "relu";
    case Elementwise::neg: return "neg";
    case Elementwise::gelu: return "gelu";
  }
  return "?";
}

inline bool is_binary(Elementwise k) {
  return k == Elementwise::add || k == Elementwise::sub || k == Elementwise::mul;
}

template <typename T>
Tensor<T> unary(Elementwise kind, const Tensor<T>& x, Tape<T>* tape = nullptr) {
  if (is_binary(kind)) throw ContractError(std::string("unary: ") + to_string(kind) + " takes two operands");
  const auto in = x.data();
  std::vector<T> out(in.size());
  const char* name = to_string(kind);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    T y{};
    switch (kind) {
      case Elementwise::exp: y = detail::finite_or_saturate(std::exp(v), name); break;
      case Elementwise::sigmoid: y = detail::sigmoid(v); break;
      case Elementwise::relu: y = v > 0 ? v : T{0}; break;
      case Elementwise::neg: y = -v; break;
      case Elementwise::gelu: y = detail::gelu(v); break;
      default: break;
    }
    out[i] = y;
  }
  Tensor<T> result(x.shape(), std::move(out));
  if (!tape || !tape->tracks(x)) return result;
  return tape->record(name, result, {&x}, [kind, x, result](std::span<const T> g, auto& grads) {
    auto gx = grads[0];
    const auto xv = x.data();
    const auto yv = result.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      T d{};
      switch (kind) {
        case Elementwise::exp: d = yv[i]; break;
        case Elementwise::sigmoid: d = yv[i] * (T{1} - yv[i]); break;
        case Elementwise::relu: d = xv[i] > 0 ? T{1} : T{0}; break;
        case Elementwise::neg: d = T{-1}; break;
        case Elementwise::gelu: d = detail::gelu_grad(xv[i]); break;
        default: break;
      }
      gx[i] += g[i] * d;
    }
  });
}

template <typename T>
Tensor<T> binary(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (!is_binary(kind)) throw ContractError(std::string("binary: ") + to_string(kind) + " takes one operand");
  const Shape out_shape = detail::broadcast_shapes(a.shape(), b.shape(), to_string(kind));
  std::vector<T> out(shape_numel(out_shape));
  const auto av = a.data();
  const auto bv = b.data();
  detail::for_each_broadcast(out_shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
    switch (kind) {
      case Elementwise::add: out[i] = av[ia] + bv[ib]; break;
      case Elementwise::sub: out[i] = av[ia] - bv[ib]; break;
      default: out[i] = av[ia] * bv[ib]; break;
    }
  });
  Tensor<T> result(out_shape, std::move(out));
  if (!tape || !tape->tracks_any(a, b)) return result;
  return tape->record(to_string(kind), std::move(result), {&a, &b},
                      [kind, a, b, out_shape](std::span<const T> g, auto& grads) {
                        auto ga = grads[0];
                        auto gb = grads[1];
                        const auto av = a.data();
                        const auto bv = b.data();
                        detail::for_each_broadcast(
                            out_shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
                              switch (kind) {
                                case Elementwise::add:
                                  if (!ga.empty()) ga[ia] += g[i];
                                  if (!gb.empty()) gb[ib] += g[i];
                                  break;
                                case Elementwise::sub:
                                  if (!ga.empty()) ga[ia] += g[i];
                                  if (!gb.empty()) gb[ib] -= g[i];
                                  break;
                                default:
                                  if (!ga.empty()) ga[ia] += g[i] * bv[ib];
                                  if (!gb.empty()) gb[ib] += g[i] * av[ia];
                                  break;
                              }
                            });
                      });
}

/// Single entry point mirroring the op table: binary kinds need `b`, unary kinds ignore it.
template <typename T>
Tensor<T> elementwise(Elementwise kind, const Tensor<T>& a, const Tensor<T>* b = nullptr, Tape<T>* tape = nullptr) {
  if (is_binary(kind)) {
    if (!b) throw ContractError(std::string("elementwise: ") + to_string(kind) + " needs two operands");
    return binary(kind, a, *b, tape);
  }
  return unary(kind, a, tape);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return binary(Elementwise::add, a, b, tape);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return binary(Elementwise::sub, a, b, tape);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  return binary(Elementwise::mul, a, b, tape);
}
template <typename T>
Tensor<T> exp(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return unary(Elementwise::exp, x, tape);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return unary(Elementwise::sigmoid, x, tape);
}
template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return unary(Elementwise::relu, x, tape);
}
template <typename T>
Tensor<T> neg(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return unary(Elementwise::neg, x, tape);
}
template <typename T>
Tensor<T> gelu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  return unary(Elementwise::gelu, x, tape);
}

// ---------------------------------------------------------------------------
// shape and reductions

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape, Tape<T>* tape = nullptr) {
  Tensor<T> result = x.view(std::move(shape));
  if (!tape || !tape->tracks(x)) return result;
  return tape->record("reshape", std::move(result), {&x}, [](std::span<const T> g, auto& grads) {
    auto gx = grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Sum of all elements, optionally scaled.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, Tape<T>* tape = nullptr, T scale = T{1}) {
  T acc{0};
  for (T v : x.data()) acc += v;
  Tensor<T> result = Tensor<T>::scalar(acc * scale);
  if (!tape || !tape->tracks(x)) return result;
  return tape->record("sum", std::move(result), {&x}, [scale](std::span<const T> g, auto& grads) {
    auto gx = grads[0];
    const T s = g[0] * scale;
    for (auto& v : gx) v += s;
  });
}

// ---------------------------------------------------------------------------
// model ops

/// Row lookup: table[V,d], tokens (any shape) -> tokens.shape + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> tokens, const Shape& token_shape,
                    Tape<T>* tape = nullptr) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be [V,d], got " + shape_str(table.shape()));
  if (shape_numel(token_shape) != tokens.size()) throw DimensionError("embedding: token shape mismatch");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(tokens.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto tok = tokens[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
      throw DimensionError("embedding: token " + std::to_string(tok) + " outside vocab " + std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(tok) * d, d, out.data() + i * d);
  }
  Shape shape = token_shape;
  shape.push_back(d);
  Tensor<T> result(shape, std::move(out));
  if (!tape || !tape->tracks(table)) return result;
  std::vector<std::int32_t> saved(tokens.begin(), tokens.end());
  return tape->record("embedding", std::move(result), {&table},
                      [saved = std::move(saved), d](std::span<const T> g, auto& grads) {
                        auto gt = grads[0];
                        for (std::size_t i = 0; i < saved.size(); ++i) {
                          T* row = gt.data() + static_cast<std::size_t>(saved[i]) * d;
                          for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                        }
                      });
}

/// x[B,T,N] -> x[:, t, :] as [B,N].
template <typename T>
Tensor<T> select_time(const Tensor<T>& x, std::size_t t, Tape<T>* tape = nullptr) {
  if (x.rank() != 3 || t >= x.dim(1)) throw DimensionError("select_time: bad index for " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), Tn = x.dim(1), N = x.dim(2);
  std::vector<T> out(B * N);
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(x.data().data() + (b * Tn + t) * N, N, out.data() + b * N);
  Tensor<T> result({B, N}, std::move(out));
  if (!tape || !tape->tracks(x)) return result;
  return tape->record("select_time", std::move(result), {&x}, [B, Tn, N, t](std::span<const T> g, auto& grads) {
    auto gx = grads[0];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < N; ++j) gx[(b * Tn + t) * N + j] += g[b * N + j];
  });
}

/// Rows idx[i] of x[R,N] stacked into [idx.size(), N].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> idx, Tape<T>* tape = nullptr) {
  if (x.rank() != 2) throw DimensionError("gather_rows: x must be [R,N], got " + shape_str(x.shape()));
  const std::size_t R = x.dim(0), N = x.dim(1);
  std::vector<T> out(idx.size() * N);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= R) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(x.data().data() + idx[i] * N, N, out.data() + i * N);
  }
  Tensor<T> result({idx.size(), N}, std::move(out));
  if (!tape || !tape->tracks(x)) return result;
  return tape->record("gather_rows", std::move(result), {&x}, [idx = std::move(idx), N](std::span<const T> g, auto& grads) {
    auto gx = grads[0];
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < N; ++j) gx[idx[i] * N + j] += g[i * N + j];
  });
}

/// Softmax cross-entropy summed over rows whose target is not kIgnoreTarget,
/// divided by `normalizer`. logits: [..., V]; targets: one id per row.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets, T normalizer,
                        Tape<T>* tape = nullptr) {
  const std::size_t V = logits.shape().back();
  const std::size_t rows = logits.numel() / V;
  if (targets.size() != rows) throw DimensionError("cross_entropy: one target per logit row required");
  if (!(normalizer > 0)) throw ContractError("cross_entropy: normalizer must be positive");
  const auto lv = logits.data();
  std::vector<T> probs(logits.numel(), T{0});
  T loss{0};
  for (std::size_t r = 0; r < rows; ++r) {
    const auto tgt = targets[r];
    if (tgt == kIgnoreTarget) continue;
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= V) throw DimensionError("cross_entropy: target outside vocab");
    const T* row = lv.data() + r * V;
    const T mx = *std::max_element(row, row + V);
    T z{0};
    for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    const T logz = mx + std::log(z);
    loss += logz - row[tgt];
    for (std::size_t j = 0; j < V; ++j) probs[r * V + j] = std::exp(row[j] - logz);
  }
  Tensor<T> result = Tensor<T>::scalar(loss / normalizer);
  if (!tape || !tape->tracks(logits)) return result;
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return tape->record("cross_entropy", std::move(result), {&logits},
                      [probs = std::move(probs), saved = std::move(saved), V, normalizer](std::span<const T> g,
                                                                                           auto& grads) {
                        auto gl = grads[0];
                        const T s = g[0] / normalizer;
                        for (std::size_t r = 0; r < saved.size(); ++r) {
                          if (saved[r] == kIgnoreTarget) continue;
                          for (std::size_t j = 0; j < V; ++j) gl[r * V + j] += s * probs[r * V + j];
                          gl[r * V + static_cast<std::size_t>(saved[r])] -= s;
                        }
                      });
}

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate of x.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, T step) {
  if (!(step > 0)) throw ContractError("finite_diff_grad: step must be positive");
  std::vector<T> base = x.to_vector();
  std::vector<T> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const T orig = base[i];
    base[i] = orig + step;
    const T fp = static_cast<T>(f(Tensor<T>(x.shape(), base)));
    base[i] = orig - step;
    const T fm = static_cast<T>(f(Tensor<T>(x.shape(), base)));
    base[i] = orig;
    grad[i] = (fp - fm) / (T{2} * step);
  }
  return Tensor<T>(x.shape(), std::move(grad));
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
template <typename T>
T relative_error(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: size mismatch");
  T diff{0}, na{0}, nb{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const T denom = std::sqrt(std::max(na, nb));
  return denom == T{0} ? T{0} : std::sqrt(diff) / denom;
}

}  // namespace lrnn
