// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lrnn/errors.hpp"
#include "lrnn/recurrence.hpp"
#include "lrnn/scan.hpp"
#include "lrnn/training.hpp"

namespace lrnn {

// ---------------------------------------------------------------------------
// eigenvalues

struct EigenResult {
  std::vector<std::complex<double>> values;
  std::vector<double> residuals;  // ||A x - lambda x|| with ||x|| = 1, per eigenvalue
};

inline std::string matrix_dump(const std::vector<double>& a, std::size_t m) {
  std::ostringstream s;
  s.precision(17);
  for (std::size_t i = 0; i < m; ++i) {
    s << (i ? "\n  [" : "[[");
    for (std::size_t j = 0; j < m; ++j) s << (j ? ", " : "") << a[i * m + j];
    s << "]";
  }
  s << "]";
  return s.str();
}

/// Residual of an eigenvalue estimate: min over unit x of ||A x - lambda x||,
/// i.e. the smallest singular value of A - lambda I, with x its right singular
/// vector. Plain inverse iteration converges to the exact eigenvector instead,
/// which overstates the residual of defective eigenvalues.
inline double eigen_residual(const Eigen::MatrixXd& A, std::complex<double> lambda) {
  using CMat = Eigen::MatrixXcd;
  const auto m = A.rows();
  const CMat shifted = A.cast<std::complex<double>>() - lambda * CMat::Identity(m, m);
  const Eigen::JacobiSVD<CMat> svd(shifted, Eigen::ComputeFullV);
  const Eigen::VectorXcd x = svd.matrixV().col(m - 1);
  return (shifted * x).norm();
}

/// All eigenvalues of an m x m real matrix (Hessenberg reduction, then
/// double-shift QR), sorted by (re, im). Each pair is checked for a residual
/// below `tol`; NumericError carries the matrix otherwise.
inline EigenResult eigen_spectrum(const std::vector<double>& a, std::size_t m, double tol = 1e-8) {
  if (m < 1 || m > 32) throw SpecError("eigen_spectrum: block size must be in [1, 32], got " + std::to_string(m));
  if (a.size() != m * m) throw DimensionError("eigen_spectrum: expected " + std::to_string(m * m) + " entries");
  for (double x : a)
    if (!std::isfinite(x)) throw NumericError("eigen_spectrum: non-finite entry in\n" + matrix_dump(a, m));
  const Eigen::MatrixXd A = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      a.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  EigenResult r;
  if (m == 1) {
    r.values = {a[0]};
    r.residuals = {0.0};
    return r;
  }
  Eigen::EigenSolver<Eigen::MatrixXd> solver(A, false);
  if (solver.info() != Eigen::Success)
    throw NumericError("eigen_spectrum: QR iteration did not converge for\n" + matrix_dump(a, m));
  const auto ev = solver.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) r.values.push_back(ev[i]);
  std::sort(r.values.begin(), r.values.end(), [](auto x, auto y) {
    return x.real() != y.real() ? x.real() < y.real() : x.imag() < y.imag();
  });
  for (const auto& l : r.values) {
    const double res = eigen_residual(A, l);
    if (!(res < tol)) {
      std::ostringstream s;
      s.precision(17);
      s << "eigen_spectrum: residual " << res << " for eigenvalue " << l << " of\n" << matrix_dump(a, m);
      throw NumericError(s.str());
    }
    r.residuals.push_back(res);
  }
  return r;
}

/// max_i sum_j |A_ij|: bounds the spectral radius (induced infinity norm).
inline double row_mass_bound(const std::vector<double>& a, std::size_t m) {
  double best = 0;
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < m; ++j) s += std::abs(a[i * m + j]);
    best = std::max(best, s);
  }
  return best;
}

// ---------------------------------------------------------------------------
// spectra of trained models

struct SpectrumPoint {
  double re = 0, im = 0;
  std::size_t sequence = 0, step = 0, block = 0;
};

struct SpectrumReport {
  std::size_t m = 0;
  Arch arch = Arch::bdlru;
  std::vector<std::size_t> steps;
  std::vector<SpectrumPoint> points;
  double frac_negative_real = 0;
  double frac_complex = 0;  // |im| > 1e-6
  double max_modulus = 0;
  double max_residual = 0;
};

inline constexpr double kComplexTol = 1e-6;

/// `count` indices spread evenly over [0, n).
inline std::vector<std::size_t> evenly_spaced(std::size_t n, std::size_t count) {
  std::vector<std::size_t> out;
  if (n == 0 || count == 0) return out;
  count = std::min(count, n);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(count == 1 ? n - 1 : (i * (n - 1) + (count - 1) / 2) / (count - 1));
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Transition spectra of every block at `sample_steps` evenly spaced steps of
/// the first `probes` rows of `data`.
template <typename T>
SpectrumReport spectrum_report(const Model<T>& model, const Dataset& data, std::size_t probes = 64,
                               std::size_t sample_steps = 8) {
  if (model.cfg.vocab != data.spec.vocab())
    throw SpecError("spectrum_report: checkpoint vocab " + std::to_string(model.cfg.vocab) + " does not match task vocab " +
                    std::to_string(data.spec.vocab()));
  const std::size_t B = std::min(probes, data.rows), L = data.row_len, m = model.cfg.layer.m, H = model.cfg.layer.H;
  if (B == 0) throw SpecError("spectrum_report: empty probe set");
  const auto gates =
      model_gates(model, std::span<const std::int32_t>(data.inputs.data(), B * L), B, L);
  const Shape vshape = gates.kind == Arch::hlru ? Shape{B, L, H} : Shape{B, L, H, m};
  const Tensor<T> zero_v = Tensor<T>::zeros(vshape);
  SpectrumReport r;
  r.m = m;
  r.arch = model.cfg.layer.kind;
  r.steps = evenly_spaced(L, sample_steps);
  std::size_t neg = 0, cplx = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t : r.steps)
      for (std::size_t k = 0; k < H; ++k) {
        const auto s = block_step(gates, zero_v, b, t, k);
        const std::vector<double> a(s.A.begin(), s.A.end());
        const auto e = eigen_spectrum(a, m);
        for (std::size_t i = 0; i < e.values.size(); ++i) {
          const auto l = e.values[i];
          r.points.push_back({l.real(), l.imag(), b, t, k});
          neg += l.real() < 0;
          cplx += std::abs(l.imag()) > kComplexTol;
          r.max_modulus = std::max(r.max_modulus, std::abs(l));
          r.max_residual = std::max(r.max_residual, e.residuals[i]);
        }
      }
  const double n = static_cast<double>(r.points.size());
  r.frac_negative_real = static_cast<double>(neg) / n;
  r.frac_complex = static_cast<double>(cplx) / n;
  return r;
}

inline nlohmann::json to_json(const SpectrumReport& r) {
  nlohmann::json j;
  j["arch"] = to_string(r.arch);
  j["m"] = r.m;
  j["steps"] = r.steps;
  j["eigenvalues"] = r.points.size();
  j["frac_negative_real"] = r.frac_negative_real;
  j["frac_complex"] = r.frac_complex;
  j["complex_tol"] = kComplexTol;
  j["max_modulus"] = r.max_modulus;
  j["max_residual"] = r.max_residual;
  return j;
}

inline void write_spectrum_csv(std::ostream& os, const SpectrumReport& r) {
  os << "re,im,block,step,sequence\n";
  os.precision(17);
  for (const auto& p : r.points) os << p.re << ',' << p.im << ',' << p.block << ',' << p.step << ',' << p.sequence << '\n';
}

// ---------------------------------------------------------------------------
// FLOPs per state update

enum class FlopArch { hlru, bdlru, lstm, mamba2, deltanet, deltaproduct4 };

inline std::string to_string(FlopArch a) {
  switch (a) {
    case FlopArch::hlru: return "hlru";
    case FlopArch::bdlru: return "bdlru";
    case FlopArch::lstm: return "lstm";
    case FlopArch::mamba2: return "mamba2";
    case FlopArch::deltanet: return "deltanet";
    case FlopArch::deltaproduct4: return "deltaproduct4";
  }
  return "?";
}

inline FlopArch parse_flop_arch(const std::string& s) {
  for (auto a : {FlopArch::hlru, FlopArch::bdlru, FlopArch::lstm, FlopArch::mamba2, FlopArch::deltanet,
                 FlopArch::deltaproduct4})
    if (to_string(a) == s) return a;
  throw SpecError("flops: unknown architecture '" + s + "'");
}

/// Symbols used by the per-step cost formulas. H is the block count for the
/// LRU variants and the hidden width for LSTM.
struct FlopDescriptor {
  FlopArch arch = FlopArch::bdlru;
  std::optional<std::uint64_t> H, m, N, S, N_h, r, H_n;
};

namespace detail {

inline std::uint64_t need(const std::optional<std::uint64_t>& v, const char* sym, FlopArch a) {
  if (!v) throw SpecError("flops: " + to_string(a) + " needs symbol " + sym);
  return *v;
}

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out;
  if (__builtin_mul_overflow(a, b, &out)) throw NumericError("flops: integer overflow");
  return out;
}

inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out;
  if (__builtin_add_overflow(a, b, &out)) throw NumericError("flops: integer overflow");
  return out;
}

}  // namespace detail

/// FLOPs of one hidden-state update (a multiply-add counts 2).
///   hlru 2Hm + 2H, bdlru 2Hm^2 + 2H, lstm 8H^2 + 25H, mamba2 2NS,
///   deltanet N_h(4Nr + 4N), deltaproduct4 H_n N_h(4Nr + 4N).
inline std::uint64_t flops_per_step(const FlopDescriptor& d) {
  using detail::checked_add;
  using detail::checked_mul;
  using detail::need;
  const FlopArch a = d.arch;
  switch (a) {
    case FlopArch::hlru: {
      const auto H = need(d.H, "H", a), m = need(d.m, "m", a);
      return checked_add(checked_mul(2 * H, m), 2 * H);
    }
    case FlopArch::bdlru: {
      const auto H = need(d.H, "H", a), m = need(d.m, "m", a);
      return checked_add(checked_mul(checked_mul(2 * H, m), m), 2 * H);
    }
    case FlopArch::lstm: {
      const auto H = need(d.H, "H", a);
      return checked_add(checked_mul(8 * H, H), checked_mul(25, H));
    }
    case FlopArch::mamba2: return checked_mul(checked_mul(2, need(d.N, "N", a)), need(d.S, "S", a));
    case FlopArch::deltanet:
    case FlopArch::deltaproduct4: {
      const auto Nh = need(d.N_h, "N_h", a), N = need(d.N, "N", a), r = need(d.r, "r", a);
      const auto per_head = checked_add(checked_mul(checked_mul(4, N), r), checked_mul(4, N));
      const auto base = checked_mul(Nh, per_head);
      return a == FlopArch::deltanet ? base : checked_mul(need(d.H_n, "H_n", a), base);
    }
  }
  throw SpecError("flops: unknown architecture");
}

inline nlohmann::json to_json(const FlopDescriptor& d) {
  nlohmann::json j;
  j["arch"] = to_string(d.arch);
  auto put = [&](const char* k, const std::optional<std::uint64_t>& v) {
    if (v) j[k] = *v;
  };
  put("H", d.H);
  put("m", d.m);
  put("N", d.N);
  put("S", d.S);
  put("N_h", d.N_h);
  put("r", d.r);
  put("H_n", d.H_n);
  j["flops_per_step"] = flops_per_step(d);
  return j;
}

// ---------------------------------------------------------------------------
// dense block operator

inline constexpr std::size_t kMaxMaterializeSteps = 64;

/// y_t = sum_{s<=t} (A_t ... A_{s+1}) b_s, built as an explicit lower
/// block-triangular (T m) x (T m) operator per lane. Returns [B,T,H,m].
template <typename T>
Tensor<T> materialize_attention(const ScanSequence<T>& seq) {
  const std::size_t Tn = seq.steps, m = seq.m, mm = m * m, L = seq.lanes();
  if (Tn > kMaxMaterializeSteps)
    throw SpecError("materialize_attention: T=" + std::to_string(Tn) + " exceeds " +
                    std::to_string(kMaxMaterializeSteps));
  const std::size_t D = Tn * m;
  std::vector<T> res(seq.batch * Tn * seq.H * m, T{0});
  std::vector<T> op(D * D);
  for (std::size_t l = 0; l < L; ++l) {
    std::fill(op.begin(), op.end(), T{0});
    auto blk = [&](std::size_t t, std::size_t s) { return op.data() + (t * m) * D + s * m; };
    for (std::size_t t = 0; t < Tn; ++t) {
      T* diag = blk(t, t);
      for (std::size_t i = 0; i < m; ++i) diag[i * D + i] = T{1};
      const T* A = seq.A.data() + (t * L + l) * mm;
      for (std::size_t s = 0; s < t; ++s) {
        // (t, s) = A_t (t-1, s)
        const T* prev = blk(t - 1, s);
        T* cur = blk(t, s);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            T acc{0};
            for (std::size_t q = 0; q < m; ++q) acc += A[i * m + q] * prev[q * D + j];
            cur[i * D + j] = acc;
          }
      }
    }
    const std::size_t bi = l / seq.H, k = l % seq.H;
    for (std::size_t t = 0; t < Tn; ++t)
      for (std::size_t i = 0; i < m; ++i) {
        T acc{0};
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t j = 0; j < m; ++j) acc += blk(t, s)[i * D + j] * seq.b[(s * L + l) * m + j];
        res[((bi * Tn + t) * seq.H + k) * m + i] = acc;
      }
  }
  return Tensor<T>({seq.batch, Tn, seq.H, m}, std::move(res));
}

template <typename T>
Tensor<T> materialize_attention(const NormalizedGates<T>& gates, const Tensor<T>& v) {
  if (gates.steps() > kMaxMaterializeSteps)
    throw SpecError("materialize_attention: T=" + std::to_string(gates.steps()) + " exceeds " +
                    std::to_string(kMaxMaterializeSteps));
  return materialize_attention(build_scan_elements(gates, v));
}

}  // namespace lrnn
