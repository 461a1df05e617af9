// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lrnn/errors.hpp"
#include "lrnn/ops.hpp"
#include "lrnn/rng.hpp"
#include "lrnn/tape.hpp"
#include "lrnn/tensor.hpp"

namespace lrnn {

enum class Arch { hlru, bdlru };

/// Gate parametrization f applied before L1 normalization.
enum class NormFn { softmax, sigmoid_l1, relu_l1, none };

inline std::string to_string(Arch a) { return a == Arch::hlru ? "hlru" : "bdlru"; }

inline std::string to_string(NormFn f) {
  switch (f) {
    case NormFn::softmax: return "softmax";
    case NormFn::sigmoid_l1: return "sigmoid_l1";
    case NormFn::relu_l1: return "relu_l1";
    case NormFn::none: return "none";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "hlru" || s == "H-LRU") return Arch::hlru;
  if (s == "bdlru" || s == "BD-LRU") return Arch::bdlru;
  throw SpecError("arch: unknown architecture '" + s + "' (expected hlru|bdlru)");
}

inline NormFn parse_norm(const std::string& s) {
  if (s == "softmax" || s == "exp") return NormFn::softmax;
  if (s == "sigmoid_l1" || s == "sigmoid") return NormFn::sigmoid_l1;
  if (s == "relu_l1" || s == "relu") return NormFn::relu_l1;
  if (s == "none") return NormFn::none;
  throw SpecError("norm_fn: unknown normalization '" + s + "' (expected softmax|sigmoid_l1|relu_l1|none)");
}

/// Structural hyperparameters of one recurrent layer. The hidden width is N = H*m.
///
/// Gate layout: the last axis of every gate group has length m+1; index 0 is the
/// input gate and indices 1..m are state gates. An H-LRU block has one group per
/// step, a BD-LRU block has one group per row.
struct LayerConfig {
  Arch kind = Arch::bdlru;
  std::size_t m = 1;
  std::size_t H = 1;
  NormFn norm = NormFn::softmax;
  bool selective = true;
  std::size_t input_dim = 1;

  std::size_t hidden() const { return H * m; }
  std::size_t groups_per_block() const { return kind == Arch::hlru ? 1 : m; }
  std::size_t gates_per_block() const { return groups_per_block() * (m + 1); }
  std::size_t gate_count() const { return H * gates_per_block(); }
  /// Width of v_t: one scalar per H-LRU channel, one m-vector per BD-LRU block.
  std::size_t value_dim() const { return kind == Arch::hlru ? H : H * m; }

  Shape gate_shape(std::size_t batch, std::size_t steps) const {
    if (kind == Arch::hlru) return {batch, steps, H, m + 1};
    return {batch, steps, H, m, m + 1};
  }

  void validate() const {
    if (m < 1) throw SpecError("layer: m must be >= 1");
    if (H < 1) throw SpecError("layer: H must be >= 1");
    if (input_dim < 1) throw SpecError("layer: input_dim must be >= 1");
  }
};

/// Trainable tensors of one layer. Selective layers use gate_weight/gate_bias,
/// non-selective layers use gate_const; value_weight (no bias) maps d -> value_dim.
template <typename T>
struct GateParams {
  Tensor<T> gate_weight;   // [d, gate_count]
  Tensor<T> gate_bias;     // [gate_count]
  Tensor<T> gate_const;    // [gate_count]
  Tensor<T> value_weight;  // [d, value_dim]

  /// Weights uniform in +-1/sqrt(d), gate biases and constants zero.
  static GateParams init(const LayerConfig& cfg, Rng& rng) {
    cfg.validate();
    GateParams p;
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.input_dim));
    auto uniform = [&](Shape shape) {
      std::vector<T> v(shape_numel(shape));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      return Tensor<T>(std::move(shape), std::move(v));
    };
    if (cfg.selective) {
      p.gate_weight = uniform({cfg.input_dim, cfg.gate_count()});
      p.gate_bias = Tensor<T>::zeros({cfg.gate_count()});
    } else {
      p.gate_const = Tensor<T>::zeros({cfg.gate_count()});
    }
    p.value_weight = uniform({cfg.input_dim, cfg.value_dim()});
    return p;
  }

  void check(const LayerConfig& cfg) const {
    auto expect = [](const Tensor<T>& t, const Shape& s, const char* name) {
      if (t.shape() != s) {
        throw DimensionError(std::string("layer params: ") + name + " has shape " + shape_str(t.shape()) +
                             ", expected " + shape_str(s));
      }
    };
    if (cfg.selective) {
      expect(gate_weight, {cfg.input_dim, cfg.gate_count()}, "gate_weight");
      expect(gate_bias, {cfg.gate_count()}, "gate_bias");
    } else {
      expect(gate_const, {cfg.gate_count()}, "gate_const");
    }
    expect(value_weight, {cfg.input_dim, cfg.value_dim()}, "value_weight");
  }
};

/// Normalized gates with the same layout as the raw gates.
template <typename T>
struct NormalizedGates {
  Tensor<T> values;
  Arch kind = Arch::bdlru;
  std::size_t m = 1;
  std::size_t H = 1;

  std::size_t batch() const { return values.dim(0); }
  std::size_t steps() const { return values.dim(1); }
  std::size_t group_len() const { return m + 1; }

  /// Offset of gate group (b, t, k, row) in `values`.
  std::size_t offset(std::size_t b, std::size_t t, std::size_t k, std::size_t row = 0) const {
    const std::size_t rows = kind == Arch::hlru ? 1 : m;
    return (((b * steps() + t) * H + k) * rows + row) * (m + 1);
  }
  T input_gate(std::size_t b, std::size_t t, std::size_t k, std::size_t row = 0) const {
    return values[offset(b, t, k, row)];
  }
  /// State gate l in 1..m of the given group.
  T state_gate(std::size_t b, std::size_t t, std::size_t k, std::size_t row, std::size_t l) const {
    return values[offset(b, t, k, row) + l];
  }
};

// ---------------------------------------------------------------------------
// gates

/// Affine map x[B,T,d] -> raw gates [B,T,H,m+1] (H-LRU) or [B,T,H,m,m+1] (BD-LRU).
template <typename T>
Tensor<T> compute_raw_gates(const Tensor<T>& x, const GateParams<T>& params, const LayerConfig& cfg,
                            Tape<T>* tape = nullptr) {
  if (!cfg.selective) throw ContractError("compute_raw_gates: layer is non-selective, use nonselective_gates");
  if (x.rank() != 3 || x.dim(2) != cfg.input_dim) {
    throw DimensionError("compute_raw_gates: x must be [B,T," + std::to_string(cfg.input_dim) + "], got " +
                         shape_str(x.shape()));
  }
  params.check(cfg);
  const Tensor<T> affine = add(matmul(x, params.gate_weight, tape), params.gate_bias, tape);
  return reshape(affine, cfg.gate_shape(x.dim(0), x.dim(1)), tape);
}

/// Learned constants broadcast over batch and time.
template <typename T>
Tensor<T> nonselective_gates(const GateParams<T>& params, const LayerConfig& cfg, std::size_t batch,
                             std::size_t steps, Tape<T>* tape = nullptr) {
  if (cfg.selective) throw ContractError("nonselective_gates: layer is selective, use compute_raw_gates");
  params.check(cfg);
  const Tensor<T> zeros = Tensor<T>::zeros({batch, steps, cfg.gate_count()});
  return reshape(add(zeros, params.gate_const, tape), cfg.gate_shape(batch, steps), tape);
}

/// a_j = f(a'_j) / sum_l f(a'_l) over the last axis; identity for NormFn::none.
/// A relu_l1 group with no positive mass maps to all zeros.
template <typename T>
Tensor<T> normalize_gates(const Tensor<T>& raw, NormFn norm, Tape<T>* tape = nullptr) {
  if (raw.rank() == 0) throw DimensionError("normalize_gates: raw gates need a group axis");
  if (norm == NormFn::none) return raw;
  const std::size_t len = raw.shape().back();
  const std::size_t groups = raw.numel() / len;
  const auto in = raw.data();
  std::vector<T> out(raw.numel());
  // f(a') per element, reused by the backward pass for sigmoid/relu
  std::vector<T> fvals(norm == NormFn::softmax ? 0 : raw.numel());
  std::vector<T> mass(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const T* x = in.data() + g * len;
    T* y = out.data() + g * len;
    T total{0};
    if (norm == NormFn::softmax) {
      const T mx = *std::max_element(x, x + len);
      for (std::size_t j = 0; j < len; ++j) total += (y[j] = std::exp(x[j] - mx));
    } else {
      T* f = fvals.data() + g * len;
      for (std::size_t j = 0; j < len; ++j) {
        f[j] = norm == NormFn::sigmoid_l1 ? detail::sigmoid(x[j]) : (x[j] > 0 ? x[j] : T{0});
        total += f[j];
        y[j] = f[j];
      }
    }
    mass[g] = total;
    if (total > T{0}) {
      const T inv = T{1} / total;
      for (std::size_t j = 0; j < len; ++j) y[j] *= inv;
    } else {
      std::fill(y, y + len, T{0});
    }
  }
  Tensor<T> result(raw.shape(), std::move(out));
  if (!tape || !tape->tracks(raw)) return result;
  return tape->record(
      "normalize_gates", result, {&raw},
      [norm, len, groups, raw, result, fvals = std::move(fvals), mass = std::move(mass)](std::span<const T> g,
                                                                                       auto& grads) {
        auto gx = grads[0];
        const auto a = result.data();
        const auto x = raw.data();
        for (std::size_t k = 0; k < groups; ++k) {
          const std::size_t o = k * len;
          if (mass[k] <= T{0}) continue;
          T dot{0};
          for (std::size_t j = 0; j < len; ++j) dot += a[o + j] * g[o + j];
          for (std::size_t j = 0; j < len; ++j) {
            const T centered = g[o + j] - dot;
            if (norm == NormFn::softmax) {
              gx[o + j] += a[o + j] * centered;
            } else if (norm == NormFn::sigmoid_l1) {
              const T s = fvals[o + j];
              gx[o + j] += s * (T{1} - s) / mass[k] * centered;
            } else if (x[o + j] > 0) {
              gx[o + j] += centered / mass[k];
            }
          }
        }
      });
}

template <typename T>
NormalizedGates<T> make_gates(Tensor<T> values, const LayerConfig& cfg) {
  const Shape expect = cfg.gate_shape(values.rank() > 0 ? values.dim(0) : 0, values.rank() > 1 ? values.dim(1) : 0);
  if (values.shape() != expect) {
    throw DimensionError("gates: shape " + shape_str(values.shape()) + " does not match layer " + shape_str(expect));
  }
  return NormalizedGates<T>{std::move(values), cfg.kind, cfg.m, cfg.H};
}

// ---------------------------------------------------------------------------
// sequential recurrences

/// h_t = sum_{i=1..m} a_{i,t} h_{t-i} + a_{0,t} v_t per channel, h_{<=0} = 0.
/// v: [B,T,H], gates [B,T,H,m+1]. Output [B,T,H,m] holds the shift register
/// (h_t, h_{t-1}, ..., h_{t-m+1}) of every channel.
template <typename T>
Tensor<T> hlru_forward(const Tensor<T>& v, const NormalizedGates<T>& gates, Tape<T>* tape = nullptr) {
  if (gates.kind != Arch::hlru) throw ContractError("hlru_forward: gates are not H-LRU gates");
  const std::size_t B = gates.batch(), Tn = gates.steps(), H = gates.H, m = gates.m;
  if (v.shape() != Shape{B, Tn, H}) {
    throw DimensionError("hlru_forward: v must be " + shape_str({B, Tn, H}) + ", got " + shape_str(v.shape()));
  }
  const auto a = gates.values.data();
  const auto vv = v.data();
  std::vector<T> out(B * Tn * H * m, T{0});
  std::vector<T> reg(m);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < H; ++k) {
      std::fill(reg.begin(), reg.end(), T{0});
      for (std::size_t t = 0; t < Tn; ++t) {
        const T* g = a.data() + ((b * Tn + t) * H + k) * (m + 1);
        T acc = g[0] * vv[(b * Tn + t) * H + k];
        for (std::size_t i = 0; i < m && i < t; ++i) acc += g[i + 1] * reg[i];
        for (std::size_t i = m - 1; i > 0; --i) reg[i] = reg[i - 1];
        reg[0] = acc;
        std::copy(reg.begin(), reg.end(), out.begin() + static_cast<std::ptrdiff_t>(((b * Tn + t) * H + k) * m));
      }
    }
  }
  Tensor<T> result({B, Tn, H, m}, std::move(out));
  if (!tape || !tape->tracks_any(v, gates.values)) return result;
  return tape->record(
      "hlru_forward", result, {&v, &gates.values},
      [v, a_t = gates.values, result, B, Tn, H, m](std::span<const T> gout, auto& grads) {
        auto gv = grads[0];
        auto ga = grads[1];
        const auto a = a_t.data();
        const auto vv = v.data();
        const auto st = result.data();
        auto h = [&](std::size_t b, std::size_t t, std::size_t k) { return st[((b * Tn + t) * H + k) * m]; };
        std::vector<T> adj(Tn);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t k = 0; k < H; ++k) {
            // direct gradient of h_s: lane j at step s+j stores h_s
            for (std::size_t s = 0; s < Tn; ++s) {
              T d{0};
              for (std::size_t j = 0; j < m && s + j < Tn; ++j) d += gout[((b * Tn + s + j) * H + k) * m + j];
              adj[s] = d;
            }
            for (std::size_t s = Tn; s-- > 0;) {
              T gs = adj[s];
              for (std::size_t i = 1; i <= m && s + i < Tn; ++i)
                gs += a[((b * Tn + s + i) * H + k) * (m + 1) + i] * adj[s + i];
              adj[s] = gs;
            }
            for (std::size_t s = 0; s < Tn; ++s) {
              const std::size_t go = ((b * Tn + s) * H + k) * (m + 1);
              const std::size_t vo = (b * Tn + s) * H + k;
              if (!ga.empty()) {
                ga[go] += adj[s] * vv[vo];
                for (std::size_t i = 1; i <= m && i <= s; ++i) ga[go + i] += adj[s] * h(b, s - i, k);
              }
              if (!gv.empty()) gv[vo] += adj[s] * a[go];
            }
          }
        }
      });
}

/// h_t^k = A_t^k h_{t-1}^k + a_{0,t}^k * v_t^k per block with dense m x m A_t^k.
/// v: [B,T,H,m], gates [B,T,H,m,m+1] (row i: input gate then A row i). Output [B,T,H,m].
template <typename T>
Tensor<T> bdlru_forward(const Tensor<T>& v, const NormalizedGates<T>& gates, Tape<T>* tape = nullptr) {
  if (gates.kind != Arch::bdlru) throw ContractError("bdlru_forward: gates are not BD-LRU gates");
  const std::size_t B = gates.batch(), Tn = gates.steps(), H = gates.H, m = gates.m;
  if (v.shape() != Shape{B, Tn, H, m}) {
    throw DimensionError("bdlru_forward: v must be " + shape_str({B, Tn, H, m}) + ", got " + shape_str(v.shape()));
  }
  const auto a = gates.values.data();
  const auto vv = v.data();
  std::vector<T> out(B * Tn * H * m, T{0});
  const std::size_t row = m + 1;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < Tn; ++t) {
      for (std::size_t k = 0; k < H; ++k) {
        const std::size_t so = ((b * Tn + t) * H + k) * m;
        const T* prev = t > 0 ? out.data() + ((b * Tn + t - 1) * H + k) * m : nullptr;
        const T* g = a.data() + ((b * Tn + t) * H + k) * m * row;
        for (std::size_t i = 0; i < m; ++i) {
          T acc = g[i * row] * vv[so + i];
          if (prev)
            for (std::size_t j = 0; j < m; ++j) acc += g[i * row + 1 + j] * prev[j];
          out[so + i] = acc;
        }
      }
    }
  }
  Tensor<T> result({B, Tn, H, m}, std::move(out));
  if (!tape || !tape->tracks_any(v, gates.values)) return result;
  return tape->record(
      "bdlru_forward", result, {&v, &gates.values},
      [v, a_t = gates.values, result, B, Tn, H, m](std::span<const T> gout, auto& grads) {
        auto gv = grads[0];
        auto ga = grads[1];
        const auto a = a_t.data();
        const auto vv = v.data();
        const auto st = result.data();
        const std::size_t row = m + 1;
        std::vector<T> adj(m), next(m);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t k = 0; k < H; ++k) {
            std::fill(next.begin(), next.end(), T{0});  // A_{t+1}^T g_{t+1}
            for (std::size_t t = Tn; t-- > 0;) {
              const std::size_t so = ((b * Tn + t) * H + k) * m;
              const std::size_t go = so * row;
              for (std::size_t i = 0; i < m; ++i) adj[i] = gout[so + i] + next[i];
              const T* prev = t > 0 ? st.data() + ((b * Tn + t - 1) * H + k) * m : nullptr;
              for (std::size_t i = 0; i < m; ++i) {
                if (!ga.empty()) {
                  ga[go + i * row] += adj[i] * vv[so + i];
                  if (prev)
                    for (std::size_t j = 0; j < m; ++j) ga[go + i * row + 1 + j] += adj[i] * prev[j];
                }
                if (!gv.empty()) gv[so + i] += adj[i] * a[go + i * row];
              }
              std::fill(next.begin(), next.end(), T{0});
              for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j) next[j] += a[go + i * row + 1 + j] * adj[i];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// companion form

/// One block-step as a first-order system: h <- A h + b, A row-major m x m.
template <typename T>
struct BlockStep {
  std::size_t m = 0;
  std::vector<T> A;
  std::vector<T> b;
};

/// H-LRU gate group (a_0, a_1..a_m) and input v -> companion matrix with first
/// row (a_1..a_m), ones on the subdiagonal, and input (a_0 v, 0, ..., 0).
template <typename T>
BlockStep<T> hlru_to_blockdiag(std::span<const T> group, T v) {
  if (group.size() < 2) throw DimensionError("hlru_to_blockdiag: gate group needs m+1 >= 2 entries");
  const std::size_t m = group.size() - 1;
  BlockStep<T> s{m, std::vector<T>(m * m, T{0}), std::vector<T>(m, T{0})};
  for (std::size_t j = 0; j < m; ++j) s.A[j] = group[j + 1];
  for (std::size_t i = 1; i < m; ++i) s.A[i * m + (i - 1)] = T{1};
  s.b[0] = group[0] * v;
  return s;
}

/// BD-LRU gate block (m rows of m+1) and input vector -> (A, a_0 * v).
template <typename T>
BlockStep<T> bdlru_to_blockstep(std::span<const T> rows, std::span<const T> v) {
  const std::size_t m = v.size();
  if (rows.size() != m * (m + 1)) throw DimensionError("bdlru_to_blockstep: expected m*(m+1) gates");
  BlockStep<T> s{m, std::vector<T>(m * m), std::vector<T>(m)};
  for (std::size_t i = 0; i < m; ++i) {
    s.b[i] = rows[i * (m + 1)] * v[i];
    for (std::size_t j = 0; j < m; ++j) s.A[i * m + j] = rows[i * (m + 1) + 1 + j];
  }
  return s;
}

/// Block-step of (batch b, step t, block k), whichever architecture `gates` holds.
/// `v` has the layer's value layout ([B,T,H] or [B,T,H,m]).
template <typename T>
BlockStep<T> block_step(const NormalizedGates<T>& gates, const Tensor<T>& v, std::size_t b, std::size_t t,
                        std::size_t k) {
  const std::size_t m = gates.m;
  const auto a = gates.values.data();
  if (gates.kind == Arch::hlru) {
    const T vin = v[(b * gates.steps() + t) * gates.H + k];
    return hlru_to_blockdiag<T>(a.subspan(gates.offset(b, t, k), m + 1), vin);
  }
  const std::size_t vo = ((b * gates.steps() + t) * gates.H + k) * m;
  return bdlru_to_blockstep<T>(a.subspan(gates.offset(b, t, k), m * (m + 1)), v.data().subspan(vo, m));
}

// ---------------------------------------------------------------------------
// layer

template <typename T>
struct LayerOutput {
  Tensor<T> y;       // [B,T,N]
  Tensor<T> v;       // [B,T,H] or [B,T,H,m]
  NormalizedGates<T> gates;
};

/// v = x W_v, gates from x (or constants), normalized, recurrence, y = flattened states.
template <typename T>
LayerOutput<T> layer_forward(const Tensor<T>& x, const GateParams<T>& params, const LayerConfig& cfg,
                             Tape<T>* tape = nullptr) {
  cfg.validate();
  if (x.rank() != 3 || x.dim(2) != cfg.input_dim) {
    throw DimensionError("layer_forward: x must be [B,T," + std::to_string(cfg.input_dim) + "], got " +
                         shape_str(x.shape()));
  }
  params.check(cfg);
  const std::size_t B = x.dim(0), Tn = x.dim(1);
  const Tensor<T> raw =
      cfg.selective ? compute_raw_gates(x, params, cfg, tape) : nonselective_gates(params, cfg, B, Tn, tape);
  NormalizedGates<T> gates = make_gates(normalize_gates(raw, cfg.norm, tape), cfg);
  const Tensor<T> vflat = matmul(x, params.value_weight, tape);
  Tensor<T> states;
  Tensor<T> v;
  if (cfg.kind == Arch::hlru) {
    v = reshape(vflat, {B, Tn, cfg.H}, tape);
    states = hlru_forward(v, gates, tape);
  } else {
    v = reshape(vflat, {B, Tn, cfg.H, cfg.m}, tape);
    states = bdlru_forward(v, gates, tape);
  }
  return {reshape(states, {B, Tn, cfg.hidden()}, tape), v, std::move(gates)};
}

}  // namespace lrnn
