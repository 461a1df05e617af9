// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "lrnn/recurrence.hpp"

using namespace lrnn;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T64(std::move(shape), std::move(v));
}

LayerConfig cfg_of(Arch kind, std::size_t m, std::size_t H, std::size_t d = 4, NormFn norm = NormFn::softmax) {
  LayerConfig c;
  c.kind = kind;
  c.m = m;
  c.H = H;
  c.input_dim = d;
  c.norm = norm;
  return c;
}

NormalizedGates<double> random_gates(const LayerConfig& cfg, std::size_t B, std::size_t T, Rng& rng,
                                     NormFn norm = NormFn::softmax, double lo = -2, double hi = 2) {
  return make_gates(normalize_gates(random_tensor(cfg.gate_shape(B, T), rng, lo, hi), norm), cfg);
}

}  // namespace

TEST(RawGates, ZeroWeightsAndBias) {
  const auto cfg = cfg_of(Arch::bdlru, 2, 3);
  Rng rng(0);
  auto p = GateParams<double>::init(cfg, rng);
  p.gate_weight = T64::zeros(p.gate_weight.shape());
  const auto x = random_tensor({2, 5, 4}, rng);
  const auto raw = compute_raw_gates(x, p, cfg);
  EXPECT_EQ(raw.shape(), (Shape{2, 5, 3, 2, 3}));
  for (double v : raw.data()) EXPECT_EQ(v, 0.0);
  std::vector<double> b(cfg.gate_count());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.1 * static_cast<double>(i);
  p.gate_bias = T64({cfg.gate_count()}, b);
  const auto raw2 = compute_raw_gates(x, p, cfg);
  for (std::size_t i = 0; i < raw2.numel(); ++i) EXPECT_EQ(raw2[i], b[i % b.size()]);
  EXPECT_THROW(compute_raw_gates(random_tensor({2, 5, 3}, rng), p, cfg), DimensionError);
}

TEST(RawGates, MatchesPerStepOracle) {
  for (Arch kind : {Arch::hlru, Arch::bdlru}) {
    const auto cfg = cfg_of(kind, 3, 2, 5);
    Rng rng(4);
    auto p = GateParams<double>::init(cfg, rng);
    p.gate_bias = random_tensor(p.gate_bias.shape(), rng);
    const auto x = random_tensor({2, 4, 5}, rng);
    const auto raw = compute_raw_gates(x, p, cfg);
    const std::size_t G = cfg.gate_count();
    for (std::size_t bt = 0; bt < 8; ++bt)
      for (std::size_t g = 0; g < G; ++g) {
        double acc = p.gate_bias[g];
        for (std::size_t j = 0; j < 5; ++j) acc += x[bt * 5 + j] * p.gate_weight[j * G + g];
        EXPECT_NEAR(raw[bt * G + g], acc, 1e-12);
      }
  }
}

TEST(RawGates, NonselectiveMatchesSelectiveWithZeroWeights) {
  auto cfg = cfg_of(Arch::hlru, 2, 3);
  Rng rng(1);
  auto sel = GateParams<double>::init(cfg, rng);
  const auto c = random_tensor({cfg.gate_count()}, rng);
  sel.gate_weight = T64::zeros(sel.gate_weight.shape());
  sel.gate_bias = c;
  auto ns_cfg = cfg;
  ns_cfg.selective = false;
  GateParams<double> ns;
  ns.gate_const = c;
  ns.value_weight = sel.value_weight;
  const auto x = random_tensor({2, 6, 4}, rng);
  EXPECT_EQ(compute_raw_gates(x, sel, cfg).to_vector(), nonselective_gates(ns, ns_cfg, 2, 6).to_vector());
  EXPECT_THROW(nonselective_gates(sel, cfg, 2, 6), ContractError);

  Tape<double> tape;
  ns.gate_const = tape.leaf(c);
  tape.backward(sum(nonselective_gates(ns, ns_cfg, 2, 6, &tape), &tape));
  const auto gc = tape.grad(ns.gate_const);
  for (double g : gc.data()) EXPECT_EQ(g, 12.0);
}

TEST(Normalize, KnownGroups) {
  auto soft = normalize_gates(T64({2}, {0, 0}), NormFn::softmax);
  EXPECT_EQ(soft.to_vector(), (std::vector<double>{0.5, 0.5}));
  auto soft3 = normalize_gates(T64({3}, {0, 0, 0}), NormFn::softmax);
  for (double v : soft3.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(normalize_gates(T64({2}, {0, 0}), NormFn::sigmoid_l1).to_vector(), (std::vector<double>{0.5, 0.5}));
  const auto s = normalize_gates(T64({3}, {1, 2, 3}), NormFn::softmax);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(s[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(s[2], std::exp(3.0) / z, 1e-15);
  EXPECT_LT(s[0], s[1]);
  EXPECT_LT(s[1], s[2]);
  EXPECT_NEAR(s[0] + s[1] + s[2], 1.0, 1e-15);
  EXPECT_EQ(normalize_gates(T64({3}, {-1, -2, 0}), NormFn::relu_l1).to_vector(), (std::vector<double>{0, 0, 0}));
  const T64 raw({2, 3}, {-1.5, 0.2, 3.0, 7, -8, 9});
  EXPECT_EQ(normalize_gates(raw, NormFn::none).to_vector(), raw.to_vector());
  const auto big = normalize_gates(T64({2}, {1000, 0}), NormFn::softmax);
  EXPECT_DOUBLE_EQ(big[0], 1.0);
}

TEST(Normalize, RowMassProperty) {
  Rng rng(8);
  for (NormFn f : {NormFn::softmax, NormFn::sigmoid_l1, NormFn::relu_l1}) {
    for (std::size_t m = 1; m <= 8; ++m) {
      const auto a = normalize_gates(random_tensor({50, m + 1}, rng, -10, 10), f);
      for (std::size_t g = 0; g < 50; ++g) {
        double mass = 0;
        for (std::size_t j = 0; j <= m; ++j) {
          EXPECT_GE(a[g * (m + 1) + j], 0.0);
          mass += std::abs(a[g * (m + 1) + j]);
        }
        EXPECT_LE(mass, 1 + 1e-6);
        if (f != NormFn::relu_l1) EXPECT_NEAR(mass, 1.0, 1e-6);
      }
    }
  }
}

TEST(Normalize, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  for (NormFn f : {NormFn::softmax, NormFn::sigmoid_l1, NormFn::relu_l1, NormFn::none}) {
    const auto raw0 = random_tensor({4, 3}, rng, -2, 2);
    const auto w = random_tensor({4, 3}, rng);
    auto loss = [&](const T64& r, Tape<double>* tape) { return sum(mul(normalize_gates(r, f, tape), w, tape), tape); };
    Tape<double> tape;
    const auto raw = tape.leaf(raw0);
    tape.backward(loss(raw, &tape));
    const auto fd = finite_diff_grad([&](const T64& r) { return loss(r, nullptr).item(); }, raw0, 1e-6);
    EXPECT_LT(relative_error(tape.grad(raw).data(), fd.data()), 1e-7) << to_string(f);
  }
}

TEST(Hlru, HalfGatesConvergeToOne) {
  const auto cfg = cfg_of(Arch::hlru, 1, 1);
  const auto gates = make_gates(T64({1, 6, 1, 2}, std::vector<double>(12, 0.5)), cfg);
  const auto h = hlru_forward(T64({1, 6, 1}, std::vector<double>(6, 1.0)), gates);
  for (std::size_t t = 0; t < 6; ++t) EXPECT_DOUBLE_EQ(h[t], 1.0 - std::pow(2.0, -static_cast<double>(t + 1)));
}

TEST(Hlru, ZeroInputGateGivesZeroStates) {
  const auto cfg = cfg_of(Arch::hlru, 3, 2);
  Rng rng(2);
  auto raw = random_tensor(cfg.gate_shape(2, 7), rng, 0, 1).to_vector();
  for (std::size_t i = 0; i < raw.size(); i += 4) raw[i] = 0;
  const auto gates = make_gates(T64(cfg.gate_shape(2, 7), raw), cfg);
  const auto h = hlru_forward(random_tensor({2, 7, 2}, rng), gates);
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(Hlru, ShiftRegisterLayout) {
  const auto cfg = cfg_of(Arch::hlru, 3, 1);
  Rng rng(6);
  const auto gates = random_gates(cfg, 1, 6, rng);
  const auto h = hlru_forward(random_tensor({1, 6, 1}, rng), gates);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t i = 1; i < 3; ++i) EXPECT_EQ(h[t * 3 + i], t >= i ? h[(t - i) * 3] : 0.0);
}

TEST(Hlru, NormBoundHolds) {
  const auto cfg = cfg_of(Arch::hlru, 2, 4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto gates = random_gates(cfg, 2, 30, rng);
    const auto v = random_tensor({2, 30, 4}, rng);
    double vmax = 0, hmax = 0;
    for (double x : v.data()) vmax = std::max(vmax, std::abs(x));
    const auto h = hlru_forward(v, gates);
    for (double x : h.data()) hmax = std::max(hmax, std::abs(x));
    EXPECT_LE(hmax, vmax + 1e-12);
  }
}

TEST(Bdlru, PassthroughAndSwap) {
  const auto cfg = cfg_of(Arch::bdlru, 2, 1);
  // A = 0, a0 = 1
  std::vector<double> g(4 * 6, 0.0);
  for (std::size_t i = 0; i < g.size(); i += 3) g[i] = 1.0;
  Rng rng(3);
  const auto v = random_tensor({1, 4, 1, 2}, rng);
  EXPECT_EQ(bdlru_forward(v, make_gates(T64(cfg.gate_shape(1, 4), g), cfg)).to_vector(), v.to_vector());

  // A = [[0, .5], [.5, 0]], a0 = .5, v = (1, 0)
  std::vector<double> s;
  for (int t = 0; t < 4; ++t) s.insert(s.end(), {0.5, 0.0, 0.5, 0.5, 0.5, 0.0});
  std::vector<double> vv;
  for (int t = 0; t < 4; ++t) vv.insert(vv.end(), {1.0, 0.0});
  const auto h = bdlru_forward(T64({1, 4, 1, 2}, vv), make_gates(T64(cfg.gate_shape(1, 4), s), cfg));
  const std::vector<double> expect{0.5, 0.0, 0.5, 0.25, 0.625, 0.25, 0.625, 0.3125};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(h[i], expect[i]) << i;
}

TEST(Collapse, M1ArchitecturesBitIdentical) {
  Rng rng(9);
  const auto gates_h = random_gates(cfg_of(Arch::hlru, 1, 5), 3, 20, rng);
  const auto gates_b = make_gates(gates_h.values.view({3, 20, 5, 1, 2}), cfg_of(Arch::bdlru, 1, 5));
  const auto v = random_tensor({3, 20, 5}, rng);
  const auto hh = hlru_forward(v, gates_h);
  const auto hb = bdlru_forward(v.view({3, 20, 5, 1}), gates_b);
  EXPECT_EQ(hh.to_vector(), hb.to_vector());

  auto ch = cfg_of(Arch::hlru, 1, 5, 4), cb = cfg_of(Arch::bdlru, 1, 5, 4);
  Rng r1(1), r2(1);
  const auto ph = GateParams<double>::init(ch, r1), pb = GateParams<double>::init(cb, r2);
  EXPECT_EQ(ph.gate_weight.to_vector(), pb.gate_weight.to_vector());
  const auto x = random_tensor({2, 9, 4}, rng);
  EXPECT_EQ(layer_forward(x, ph, ch).y.to_vector(), layer_forward(x, pb, cb).y.to_vector());
}

TEST(Companion, StructureAndEquivalence) {
  const std::vector<double> g1{0.3, 0.7};
  const auto s1 = hlru_to_blockdiag<double>(g1, 2.0);
  EXPECT_EQ(s1.A, (std::vector<double>{0.7}));
  EXPECT_EQ(s1.b, (std::vector<double>{0.6}));
  const std::vector<double> g3{0.4, 0.2, 0.3, 0.1};
  const auto s3 = hlru_to_blockdiag<double>(g3, 1.0);
  EXPECT_EQ(s3.A, (std::vector<double>{0.2, 0.3, 0.1, 1, 0, 0, 0, 1, 0}));
  EXPECT_EQ(s3.b, (std::vector<double>{0.4, 0, 0}));

  for (std::size_t m : {1u, 2u, 3u, 5u}) {
    const auto cfg = cfg_of(Arch::hlru, m, 3);
    Rng rng(m);
    const auto gates = random_gates(cfg, 2, 15, rng);
    const auto v = random_tensor({2, 15, 3}, rng);
    const auto ref = hlru_forward(v, gates);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t k = 0; k < 3; ++k) {
        std::vector<double> h(m, 0.0), nh(m);
        for (std::size_t t = 0; t < 15; ++t) {
          const auto s = block_step(gates, v, b, t, k);
          for (std::size_t i = 0; i < m; ++i) {
            nh[i] = s.b[i];
            for (std::size_t j = 0; j < m; ++j) nh[i] += s.A[i * m + j] * h[j];
          }
          h = nh;
          for (std::size_t i = 0; i < m; ++i) EXPECT_NEAR(h[i], ref[((b * 15 + t) * 3 + k) * m + i], 1e-12);
        }
      }
  }
}

TEST(Layer, ZeroInputGivesZeroOutput) {
  for (Arch kind : {Arch::hlru, Arch::bdlru}) {
    const auto cfg = cfg_of(kind, 3, 2);
    Rng rng(0);
    const auto p = GateParams<double>::init(cfg, rng);
    const auto out = layer_forward(T64::zeros({2, 5, 4}), p, cfg);
    EXPECT_EQ(out.y.shape(), (Shape{2, 5, 6}));
    for (double v : out.y.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Layer, BackwardMatchesFiniteDifferences) {
  for (Arch kind : {Arch::hlru, Arch::bdlru})
    for (NormFn f : {NormFn::softmax, NormFn::sigmoid_l1, NormFn::none})
      for (bool selective : {true, false}) {
        auto cfg = cfg_of(kind, 2, 2, 3, f);
        cfg.selective = selective;
        Rng rng(17);
        auto p0 = GateParams<double>::init(cfg, rng);
        if (!selective) p0.gate_const = random_tensor(p0.gate_const.shape(), rng);
        else p0.gate_bias = random_tensor(p0.gate_bias.shape(), rng, -0.5, 0.5);
        const auto x = random_tensor({2, 6, 3}, rng);
        const auto wout = random_tensor({2, 6, 4}, rng);
        auto loss = [&](const GateParams<double>& p, Tape<double>* tape) {
          return sum(mul(layer_forward(x, p, cfg, tape).y, wout, tape), tape);
        };
        // check W_v and whichever gate tensor is active
        for (int which = 0; which < 2; ++which) {
          Tape<double> tape;
          GateParams<double> p = p0;
          T64* target = which == 0 ? &p.value_weight : (selective ? &p.gate_weight : &p.gate_const);
          const T64 base = *target;
          *target = tape.leaf(base);
          const T64 leaf = *target;
          tape.backward(loss(p, &tape));
          const auto fd = finite_diff_grad(
              [&](const T64& w) {
                GateParams<double> q = p0;
                (which == 0 ? q.value_weight : (selective ? q.gate_weight : q.gate_const)) = w;
                return loss(q, nullptr).item();
              },
              base, 1e-6);
          EXPECT_LT(relative_error(tape.grad(leaf).data(), fd.data()), 1e-7)
              << to_string(kind) << " " << to_string(f) << " sel=" << selective << " which=" << which;
        }
      }
}
