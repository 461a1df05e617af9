// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "lrnn/scan.hpp"

using namespace lrnn;
using T64 = Tensor<double>;

namespace {

ScanElement<double> random_element(std::size_t H, std::size_t m, Rng& rng) {
  ScanElement<double> e{H, m, std::vector<double>(H * m * m), std::vector<double>(H * m)};
  for (auto& x : e.A) x = rng.uniform(-1, 1);
  for (auto& x : e.b) x = rng.uniform(-1, 1);
  return e;
}

LayerConfig cfg_of(Arch kind, std::size_t m, std::size_t H) {
  LayerConfig c;
  c.kind = kind;
  c.m = m;
  c.H = H;
  return c;
}

double max_abs_diff(const T64& a, const T64& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST(HopCombine, ScalarTwoStep) {
  const ScanElement<double> c1{1, 1, {2}, {1}}, c2{1, 1, {3}, {1}};
  const auto c = hop_combine(c1, c2);
  EXPECT_EQ(c.A[0], 6.0);
  EXPECT_EQ(c.b[0], 4.0);
}

TEST(HopCombine, IdentityIsTwoSided) {
  Rng rng(1);
  for (std::size_t m : {1u, 2u, 3u, 4u, 5u, 8u}) {
    const auto c = random_element(3, m, rng);
    const auto id = scan_identity<double>(3, m);
    const auto l = hop_combine(id, c), r = hop_combine(c, id);
    EXPECT_EQ(l.A, c.A);
    EXPECT_EQ(l.b, c.b);
    EXPECT_EQ(r.A, c.A);
    EXPECT_EQ(r.b, c.b);
  }
}

TEST(HopCombine, Associative) {
  Rng rng(2);
  for (std::size_t m : {1u, 2u, 3u, 4u, 5u, 8u}) {
    const auto c1 = random_element(2, m, rng), c2 = random_element(2, m, rng), c3 = random_element(2, m, rng);
    const auto l = hop_combine(hop_combine(c1, c2), c3), r = hop_combine(c1, hop_combine(c2, c3));
    for (std::size_t i = 0; i < l.A.size(); ++i) EXPECT_NEAR(l.A[i], r.A[i], 1e-12);
    for (std::size_t i = 0; i < l.b.size(); ++i) EXPECT_NEAR(l.b[i], r.b[i], 1e-12);
  }
  EXPECT_THROW(hop_combine(random_element(2, 2, rng), random_element(2, 3, rng)), DimensionError);
}

TEST(Scan, SingleStepAndMemoryless) {
  Rng rng(3);
  auto seq = ScanSequence<double>::zeros(1, 1, 2, 3);
  for (auto& x : seq.A) x = rng.uniform(-1, 1);
  for (auto& x : seq.b) x = rng.uniform(-1, 1);
  EXPECT_EQ(blelloch_scan(seq).to_vector(), seq.b);
  auto zeroA = ScanSequence<double>::zeros(7, 2, 2, 2);
  for (auto& x : zeroA.b) x = rng.uniform(-1, 1);
  const auto h = blelloch_scan(zeroA);
  const auto hs = sequential_scan(zeroA);
  EXPECT_EQ(h.to_vector(), hs.to_vector());
  // [t][b] vs [b][t] layouts
  EXPECT_EQ(h[(1 * 7 + 3) * 4 + 1], zeroA.b[(3 * 2 + 1) * 4 + 1]);
}

TEST(Scan, IdentitySequenceGivesZeros) {
  auto seq = ScanSequence<double>::zeros(5, 1, 2, 2);
  for (std::size_t t = 0; t < 5; ++t) seq.set_element(t, 0, scan_identity<double>(2, 2));
  const auto hs = sequential_scan(seq), hb = blelloch_scan(seq);
  for (double v : hs.data()) EXPECT_EQ(v, 0.0);
  for (double v : hb.data()) EXPECT_EQ(v, 0.0);
}

TEST(Scan, ScalarClosedForm) {
  // h_t = sum_s (prod_{j=s+1..t} a_j) a0_s v_s
  const std::vector<double> a{0.9, 0.5, -0.4, 0.7}, a0{0.1, 0.5, 0.6, 0.3}, v{1.0, -2.0, 0.5, 3.0};
  auto seq = ScanSequence<double>::zeros(4, 1, 1, 1);
  for (std::size_t t = 0; t < 4; ++t) {
    seq.A[t] = a[t];
    seq.b[t] = a0[t] * v[t];
  }
  const auto h = sequential_scan(seq);
  for (std::size_t t = 0; t < 4; ++t) {
    double expect = 0;
    for (std::size_t s = 0; s <= t; ++s) {
      double prod = 1;
      for (std::size_t j = s + 1; j <= t; ++j) prod *= a[j];
      expect += prod * a0[s] * v[s];
    }
    EXPECT_NEAR(h[t], expect, 1e-15);
  }
}

TEST(Scan, MatchesRecurrenceModule) {
  for (Arch kind : {Arch::hlru, Arch::bdlru})
    for (std::size_t m : {1u, 2u, 3u}) {
      const auto cfg = cfg_of(kind, m, 3);
      Rng rng(m);
      const auto seq_raw = random_scan_sequence<double>(cfg, 1, 1, rng);  // exercise helper
      (void)seq_raw;
      std::vector<double> raw(shape_numel(cfg.gate_shape(2, 11)));
      for (auto& x : raw) x = rng.normal();
      const auto gates = make_gates(normalize_gates(T64(cfg.gate_shape(2, 11), raw), NormFn::softmax), cfg);
      const Shape vs = kind == Arch::hlru ? Shape{2, 11, 3} : Shape{2, 11, 3, m};
      std::vector<double> v(shape_numel(vs));
      for (auto& x : v) x = rng.uniform(-1, 1);
      const T64 vt(vs, v);
      const auto ref = kind == Arch::hlru ? hlru_forward(vt, gates) : bdlru_forward(vt, gates);
      const auto seq = build_scan_elements(gates, vt);
      EXPECT_EQ(sequential_scan(seq).to_vector(), ref.to_vector()) << to_string(kind) << m;
      EXPECT_LT(max_abs_diff(blelloch_scan(seq), ref), 1e-12);
    }
}

TEST(Scan, BlellochMatchesSequentialGrid) {
  for (Arch kind : {Arch::hlru, Arch::bdlru})
    for (std::size_t m : {1u, 2u, 3u, 5u, 8u})
      for (std::size_t T : {1u, 5u, 256u}) {
        Rng rng(m * 1000 + T);
        const auto seq = random_scan_sequence<double>(cfg_of(kind, m, 8), T, 4, rng);
        EXPECT_LT(max_abs_diff(blelloch_scan(seq), sequential_scan(seq)), 1e-9);
      }
}

TEST(Scan, SinglePrecisionTolerance) {
  Rng rng(5);
  const auto seq = random_scan_sequence<float>(cfg_of(Arch::bdlru, 4, 4), 300, 2, rng);
  const auto a = blelloch_scan(seq), b = sequential_scan(seq);
  float d = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  EXPECT_LT(d, 1e-4f);
}

TEST(Scan, PaddingNeutralityIsExact) {
  Rng rng(6);
  for (std::size_t T : {5u, 8u, 13u}) {
    const auto seq = random_scan_sequence<double>(cfg_of(Arch::bdlru, 3, 2), T, 2, rng);
    const auto base = blelloch_scan(seq);
    for (std::size_t pad : {16u, 64u}) EXPECT_EQ(blelloch_scan(seq, nullptr, 1, pad).to_vector(), base.to_vector());
  }
  const auto seq = random_scan_sequence<double>(cfg_of(Arch::hlru, 2, 2), 5, 1, rng);
  ScanStats st;
  EXPECT_LT(max_abs_diff(blelloch_scan(seq, &st), sequential_scan(seq)), 1e-12);
  EXPECT_EQ(st.padded_steps, 8u);
}

TEST(Scan, WorkBound) {
  Rng rng(7);
  for (std::size_t T : {1u, 2u, 3u, 5u, 64u, 100u, 512u}) {
    const auto seq = random_scan_sequence<double>(cfg_of(Arch::bdlru, 2, 2), T, 1, rng);
    ScanStats st;
    blelloch_scan(seq, &st);
    EXPECT_GE(st.padded_steps, T);
    EXPECT_LE(st.block_matmuls_per_lane, 2 * st.padded_steps);
  }
}

TEST(Scan, ThreadedIsBitIdentical) {
  Rng rng(8);
  for (std::size_t m : {1u, 2u, 3u, 4u}) {
    const auto seq = random_scan_sequence<double>(cfg_of(Arch::bdlru, m, 8), 200, 3, rng);
    const auto one = blelloch_scan(seq, nullptr, 1);
    EXPECT_EQ(blelloch_scan(seq, nullptr, 4).to_vector(), one.to_vector());
    EXPECT_EQ(blelloch_scan(seq, nullptr, 7).to_vector(), one.to_vector());
  }
}

TEST(Bench, ZeroRepeatsGivesHeaderOnly) {
  const auto rows = bench_scan<double>(cfg_of(Arch::bdlru, 2, 4), 16, 2, 0);
  EXPECT_TRUE(rows.empty());
  std::ostringstream os;
  write_scan_bench_csv(os, rows);
  EXPECT_EQ(os.str(), std::string(scan_bench_csv_header()) + "\n");
}

TEST(Bench, ProducesBothExecutors) {
  const auto rows = bench_scan<float>(cfg_of(Arch::bdlru, 2, 4), 64, 2, 3);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].executor, "sequential");
  EXPECT_EQ(rows[1].executor, "blelloch");
  EXPECT_GT(rows[0].median_ns_per_token, 0.0);
}
