// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "lrnn/errors.hpp"
#include "lrnn/recurrence.hpp"
#include "lrnn/rng.hpp"
#include "lrnn/tensor.hpp"

namespace lrnn {

/// Transition/contribution pair [A, b] for one step of a block-diagonal system,
/// stored as H dense m x m blocks (row-major) and H m-vectors. Column-vector
/// convention: applying the element maps h to A h + b.
template <typename T>
struct ScanElement {
  std::size_t H = 0;
  std::size_t m = 0;
  std::vector<T> A;  // [H, m, m]
  std::vector<T> b;  // [H, m]
};

namespace scan_kernels {

/// out = x * y for m x m row-major blocks (out must not alias).
template <typename T, std::size_t M>
inline void matmul_fixed(const T* x, const T* y, T* out) {
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < M; ++j) {
      T acc = x[i * M] * y[j];
      for (std::size_t l = 1; l < M; ++l) acc += x[i * M + l] * y[l * M + j];
      out[i * M + j] = acc;
    }
  }
}

template <typename T>
inline void matmul_dyn(const T* x, const T* y, T* out, std::size_t m) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      T acc = x[i * m] * y[j];
      for (std::size_t l = 1; l < m; ++l) acc += x[i * m + l] * y[l * m + j];
      out[i * m + j] = acc;
    }
  }
}

/// out = A x + c (out must not alias x).
template <typename T, std::size_t M>
inline void affine_fixed(const T* a, const T* x, const T* c, T* out) {
  for (std::size_t i = 0; i < M; ++i) {
    T acc = c[i];
    for (std::size_t j = 0; j < M; ++j) acc += a[i * M + j] * x[j];
    out[i] = acc;
  }
}

template <typename T>
inline void affine_dyn(const T* a, const T* x, const T* c, T* out, std::size_t m) {
  for (std::size_t i = 0; i < m; ++i) {
    T acc = c[i];
    for (std::size_t j = 0; j < m; ++j) acc += a[i * m + j] * x[j];
    out[i] = acc;
  }
}

template <typename T>
inline void matmul(const T* x, const T* y, T* out, std::size_t m) {
  switch (m) {
    case 1: out[0] = x[0] * y[0]; return;
    case 2: matmul_fixed<T, 2>(x, y, out); return;
    case 4: matmul_fixed<T, 4>(x, y, out); return;
    case 8: matmul_fixed<T, 8>(x, y, out); return;
    default: matmul_dyn(x, y, out, m);
  }
}

template <typename T>
inline void affine(const T* a, const T* x, const T* c, T* out, std::size_t m) {
  switch (m) {
    case 1: out[0] = c[0] + a[0] * x[0]; return;
    case 2: affine_fixed<T, 2>(a, x, c, out); return;
    case 4: affine_fixed<T, 4>(a, x, c, out); return;
    case 8: affine_fixed<T, 8>(a, x, c, out); return;
    default: affine_dyn(a, x, c, out, m);
  }
}

}  // namespace scan_kernels

/// c_i . c_j: apply c_i first, then c_j. Blockwise A = A_j A_i, b = A_j b_i + b_j.
template <typename T>
ScanElement<T> hop_combine(const ScanElement<T>& ci, const ScanElement<T>& cj) {
  if (ci.H != cj.H || ci.m != cj.m || ci.A.size() != ci.H * ci.m * ci.m || cj.A.size() != cj.H * cj.m * cj.m ||
      ci.b.size() != ci.H * ci.m || cj.b.size() != cj.H * cj.m) {
    throw DimensionError("hop_combine: elements differ in (H, m) or are malformed");
  }
  const std::size_t m = ci.m, mm = m * m;
  ScanElement<T> out{ci.H, m, std::vector<T>(ci.A.size()), std::vector<T>(ci.b.size())};
  for (std::size_t k = 0; k < ci.H; ++k) {
    scan_kernels::matmul(cj.A.data() + k * mm, ci.A.data() + k * mm, out.A.data() + k * mm, m);
    scan_kernels::affine(cj.A.data() + k * mm, ci.b.data() + k * m, cj.b.data() + k * m, out.b.data() + k * m, m);
  }
  return out;
}

/// Per-block identity transition with zero contribution.
template <typename T>
ScanElement<T> scan_identity(std::size_t H, std::size_t m) {
  ScanElement<T> e{H, m, std::vector<T>(H * m * m, T{0}), std::vector<T>(H * m, T{0})};
  for (std::size_t k = 0; k < H; ++k)
    for (std::size_t i = 0; i < m; ++i) e.A[k * m * m + i * m + i] = T{1};
  return e;
}

/// T steps of `lanes` = batch * H independent blocks, laid out [t][lane].
template <typename T>
struct ScanSequence {
  std::size_t steps = 0;
  std::size_t batch = 0;
  std::size_t H = 0;
  std::size_t m = 0;
  std::vector<T> A;  // [steps, batch, H, m, m]
  std::vector<T> b;  // [steps, batch, H, m]

  std::size_t lanes() const { return batch * H; }

  static ScanSequence zeros(std::size_t steps, std::size_t batch, std::size_t H, std::size_t m) {
    return {steps, batch, H, m, std::vector<T>(steps * batch * H * m * m, T{0}),
            std::vector<T>(steps * batch * H * m, T{0})};
  }

  ScanElement<T> element(std::size_t t, std::size_t batch_index) const {
    const std::size_t mm = m * m;
    const std::size_t lane0 = t * lanes() + batch_index * H;
    ScanElement<T> e{H, m, {}, {}};
    e.A.assign(A.begin() + static_cast<std::ptrdiff_t>(lane0 * mm),
               A.begin() + static_cast<std::ptrdiff_t>((lane0 + H) * mm));
    e.b.assign(b.begin() + static_cast<std::ptrdiff_t>(lane0 * m),
               b.begin() + static_cast<std::ptrdiff_t>((lane0 + H) * m));
    return e;
  }

  void set_element(std::size_t t, std::size_t batch_index, const ScanElement<T>& e) {
    if (e.H != H || e.m != m) throw DimensionError("ScanSequence: element shape mismatch");
    const std::size_t mm = m * m;
    const std::size_t lane0 = t * lanes() + batch_index * H;
    std::copy(e.A.begin(), e.A.end(), A.begin() + static_cast<std::ptrdiff_t>(lane0 * mm));
    std::copy(e.b.begin(), e.b.end(), b.begin() + static_cast<std::ptrdiff_t>(lane0 * m));
  }
};

/// Elements from normalized gates and values: companion blocks for H-LRU,
/// dense blocks for BD-LRU.
template <typename T>
ScanSequence<T> build_scan_elements(const NormalizedGates<T>& gates, const Tensor<T>& v) {
  const std::size_t B = gates.batch(), Tn = gates.steps(), H = gates.H, m = gates.m;
  const Shape vshape = gates.kind == Arch::hlru ? Shape{B, Tn, H} : Shape{B, Tn, H, m};
  if (v.shape() != vshape) throw DimensionError("build_scan_elements: v has shape " + shape_str(v.shape()));
  auto seq = ScanSequence<T>::zeros(Tn, B, H, m);
  const std::size_t mm = m * m;
  for (std::size_t t = 0; t < Tn; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t k = 0; k < H; ++k) {
        const BlockStep<T> s = block_step(gates, v, b, t, k);
        const std::size_t lane = t * B * H + b * H + k;
        std::copy(s.A.begin(), s.A.end(), seq.A.begin() + static_cast<std::ptrdiff_t>(lane * mm));
        std::copy(s.b.begin(), s.b.end(), seq.b.begin() + static_cast<std::ptrdiff_t>(lane * m));
      }
    }
  }
  return seq;
}

/// h_t = A_t h_{t-1} + b_t from h_0 = 0, one step at a time. Returns [B,T,H,m].
template <typename T>
Tensor<T> sequential_scan(const ScanSequence<T>& seq) {
  const std::size_t L = seq.lanes(), m = seq.m, mm = m * m, Tn = seq.steps;
  std::vector<T> out(Tn * L * m);
  std::vector<T> h(L * m, T{0});
  for (std::size_t t = 0; t < Tn; ++t) {
    const T* A = seq.A.data() + t * L * mm;
    const T* b = seq.b.data() + t * L * m;
    T* ht = out.data() + t * L * m;
    for (std::size_t l = 0; l < L; ++l) scan_kernels::affine(A + l * mm, h.data() + l * m, b + l * m, ht + l * m, m);
    std::copy(ht, ht + L * m, h.begin());
  }
  // [t][b][k][i] -> [b][t][k][i]
  std::vector<T> res(out.size());
  const std::size_t row = seq.H * m;
  for (std::size_t t = 0; t < Tn; ++t)
    for (std::size_t b = 0; b < seq.batch; ++b)
      std::copy_n(out.data() + (t * seq.batch + b) * row, row, res.data() + (b * Tn + t) * row);
  return Tensor<T>({seq.batch, Tn, seq.H, m}, std::move(res));
}

/// Instrumentation for blelloch_scan.
struct ScanStats {
  std::size_t padded_steps = 0;
  /// m x m block matrix-matrix products per lane (block).
  std::size_t block_matmuls_per_lane = 0;
  /// Matrix-vector products per lane.
  std::size_t block_matvecs_per_lane = 0;
};

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

namespace detail {

/// Runs fn(begin, end) over [0, n) split into `threads` contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n < 2) {
    fn(std::size_t{0}, n);
    return;
  }
  threads = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t w = 1; w < threads; ++w) {
    const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Work-efficient prefix scan (up-sweep, then down-sweep producing exclusive
/// prefixes, then one combine per position for the inclusive state).
/// Steps are padded with identities to a power of two (at least `min_padded`).
/// Work at one tree level is split across `threads` workers; results do not
/// depend on the thread count.
template <typename T>
Tensor<T> blelloch_scan(const ScanSequence<T>& seq, ScanStats* stats = nullptr, std::size_t threads = 1,
                        std::size_t min_padded = 0) {
  const std::size_t L = seq.lanes(), m = seq.m, mm = m * m, Tn = seq.steps;
  if (Tn == 0) return Tensor<T>({seq.batch, 0, seq.H, m}, {});
  const std::size_t P = next_pow2(std::max(Tn, min_padded));
  // subtree totals; padding slots hold identities
  std::vector<T> A(P * L * mm, T{0});
  std::vector<T> b(P * L * m, T{0});
  std::copy(seq.A.begin(), seq.A.end(), A.begin());
  std::copy(seq.b.begin(), seq.b.end(), b.begin());
  for (std::size_t t = Tn; t < P; ++t)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t i = 0; i < m; ++i) A[(t * L + l) * mm + i * m + i] = T{1};

  std::size_t matmuls = 0, matvecs = 0;
  // up-sweep; the root total is never consumed, so the last level is skipped
  for (std::size_t d = 1; d < P / 2; d <<= 1) {
    const std::size_t pairs = P / (2 * d);
    detail::parallel_for(pairs * L, threads, [&](std::size_t lo, std::size_t hi) {
      T tmpA[64];
      std::vector<T> big(mm > 64 ? mm : 0);
      T* scratch = mm > 64 ? big.data() : tmpA;
      T tmpb[64];
      std::vector<T> bigb(m > 64 ? m : 0);
      T* scratch_b = m > 64 ? bigb.data() : tmpb;
      for (std::size_t w = lo; w < hi; ++w) {
        const std::size_t pair = w / L, l = w % L;
        const std::size_t left = pair * 2 * d + d - 1, right = pair * 2 * d + 2 * d - 1;
        T* Ar = A.data() + (right * L + l) * mm;
        const T* Al = A.data() + (left * L + l) * mm;
        T* br = b.data() + (right * L + l) * m;
        const T* bl = b.data() + (left * L + l) * m;
        scan_kernels::affine(Ar, bl, br, scratch_b, m);
        std::copy(scratch_b, scratch_b + m, br);
        scan_kernels::matmul(Ar, Al, scratch, m);
        std::copy(scratch, scratch + mm, Ar);
      }
    });
    matmuls += pairs;
    matvecs += pairs;
  }
  // down-sweep over prefix states only: pre[t] = state before step t
  std::vector<T> pre(P * L * m, T{0});
  for (std::size_t d = P / 2; d >= 1; d >>= 1) {
    const std::size_t pairs = P / (2 * d);
    detail::parallel_for(pairs * L, threads, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t w = lo; w < hi; ++w) {
        const std::size_t pair = w / L, l = w % L;
        const std::size_t left = pair * 2 * d + d - 1, right = pair * 2 * d + 2 * d - 1;
        T* pl = pre.data() + (left * L + l) * m;
        T* pr = pre.data() + (right * L + l) * m;
        std::copy(pr, pr + m, pl);
        scan_kernels::affine(A.data() + (left * L + l) * mm, pl, b.data() + (left * L + l) * m, pr, m);
      }
    });
    matvecs += pairs;
    if (d == 1) break;
  }
  // inclusive: h_t = A_t pre[t] + b_t with the original elements
  std::vector<T> res(seq.batch * Tn * seq.H * m);
  const std::size_t row = seq.H * m;
  detail::parallel_for(Tn * L, threads, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t w = lo; w < hi; ++w) {
      const std::size_t t = w / L, l = w % L;
      const std::size_t bi = l / seq.H, k = l % seq.H;
      scan_kernels::affine(seq.A.data() + (t * L + l) * mm, pre.data() + (t * L + l) * m,
                           seq.b.data() + (t * L + l) * m, res.data() + (bi * Tn + t) * row + k * m, m);
    }
  });
  matvecs += Tn;
  if (stats) {
    stats->padded_steps = P;
    stats->block_matmuls_per_lane = matmuls;
    stats->block_matvecs_per_lane = matvecs;
  }
  return Tensor<T>({seq.batch, Tn, seq.H, m}, std::move(res));
}

// ---------------------------------------------------------------------------
// benchmark

struct ScanBenchRecord {
  std::string executor;  // "sequential" or "blelloch"
  Arch arch = Arch::bdlru;
  std::size_t H = 0, m = 0, steps = 0, batch = 0, repeats = 0, threads = 1;
  double median_ns_per_token = 0;
};

inline const char* scan_bench_csv_header() {
  return "executor,arch,H,m,N,T,batch,repeats,threads,median_ns_per_token";
}

inline void write_scan_bench_csv(std::ostream& os, const std::vector<ScanBenchRecord>& rows, bool header = true) {
  if (header) os << scan_bench_csv_header() << '\n';
  for (const auto& r : rows) {
    os << r.executor << ',' << to_string(r.arch) << ',' << r.H << ',' << r.m << ',' << r.H * r.m << ',' << r.steps
       << ',' << r.batch << ',' << r.repeats << ',' << r.threads << ',' << r.median_ns_per_token << '\n';
  }
}

/// Random softmax-normalized scan elements for `cfg`.
template <typename T>
ScanSequence<T> random_scan_sequence(const LayerConfig& cfg, std::size_t steps, std::size_t batch, Rng& rng) {
  std::vector<T> raw(shape_numel(cfg.gate_shape(batch, steps)));
  for (auto& x : raw) x = static_cast<T>(rng.normal());
  const auto gates = make_gates(normalize_gates(Tensor<T>(cfg.gate_shape(batch, steps), std::move(raw)), NormFn::softmax), cfg);
  const Shape vshape = cfg.kind == Arch::hlru ? Shape{batch, steps, cfg.H} : Shape{batch, steps, cfg.H, cfg.m};
  std::vector<T> v(shape_numel(vshape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return build_scan_elements(gates, Tensor<T>(vshape, std::move(v)));
}

/// Median wall-clock per token of both executors on random elements. Warmup
/// runs are excluded; repeats == 0 yields no records.
template <typename T>
std::vector<ScanBenchRecord> bench_scan(const LayerConfig& cfg, std::size_t steps, std::size_t batch,
                                        std::size_t repeats, std::size_t threads = 1, std::size_t warmup = 1,
                                        std::uint64_t seed = 0) {
  if (repeats == 0) return {};
  Rng rng(seed);
  const auto seq = random_scan_sequence<T>(cfg, steps, batch, rng);
  auto median_of = [&](auto&& run) {
    for (std::size_t i = 0; i < warmup; ++i) run();
    std::vector<double> ns;
    for (std::size_t i = 0; i < repeats; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      run();
      const auto t1 = std::chrono::steady_clock::now();
      ns.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    }
    std::sort(ns.begin(), ns.end());
    const double med = ns.size() % 2 ? ns[ns.size() / 2] : 0.5 * (ns[ns.size() / 2 - 1] + ns[ns.size() / 2]);
    return med / static_cast<double>(steps * batch);
  };
  volatile T sink{};
  const double seq_ns = median_of([&] { sink = sequential_scan(seq)[0]; });
  const double par_ns = median_of([&] { sink = blelloch_scan(seq, nullptr, threads)[0]; });
  (void)sink;
  ScanBenchRecord base{"", cfg.kind, cfg.H, cfg.m, steps, batch, repeats, threads, 0};
  ScanBenchRecord s = base, p = base;
  s.executor = "sequential";
  s.threads = 1;
  s.median_ns_per_token = seq_ns;
  p.executor = "blelloch";
  p.median_ns_per_token = par_ns;
  return {s, p};
}

}  // namespace lrnn
