// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lrnn/errors.hpp"
#include "lrnn/ops.hpp"
#include "lrnn/recurrence.hpp"
#include "lrnn/rng.hpp"
#include "lrnn/tape.hpp"
#include "lrnn/tasks.hpp"

namespace lrnn {

enum class HeadKind { decoder_mlp, encoder_decoder_mlp };

inline std::string to_string(HeadKind h) { return h == HeadKind::decoder_mlp ? "decoder_mlp" : "encoder_decoder_mlp"; }

inline HeadKind parse_head(const std::string& s) {
  if (s == "decoder_mlp") return HeadKind::decoder_mlp;
  if (s == "encoder_decoder_mlp") return HeadKind::encoder_decoder_mlp;
  throw SpecError("model.head: unknown head '" + s + "'");
}

/// Embedding -> one recurrent layer -> MLP head(s).
/// decoder_mlp:         logits_t = W2 gelu(W1 y_t + b1) + b2
/// encoder_decoder_mlp: z = E2 gelu(E1 y_T + c1) + c2, logits_j = decoder(z + pos_j)
struct ModelConfig {
  LayerConfig layer;
  std::size_t embed_dim = 64;
  HeadKind head = HeadKind::decoder_mlp;
  std::size_t mlp_hidden = 0;  // 0: 2 * embed_dim
  std::size_t vocab = 2;
  std::size_t out_slots = 0;  // encoder-decoder output positions

  std::size_t hidden() const { return mlp_hidden ? mlp_hidden : 2 * embed_dim; }

  void validate() const {
    layer.validate();
    if (embed_dim < 1) throw SpecError("model.embed_dim must be >= 1");
    if (vocab < 1) throw SpecError("model.vocab must be >= 1");
    if (layer.input_dim != embed_dim) throw SpecError("model: layer input_dim must equal embed_dim");
    if (head == HeadKind::encoder_decoder_mlp && out_slots < 1)
      throw SpecError("model.out_slots must be >= 1 for the encoder-decoder head");
  }

  /// Closed-form parameter count:
  ///   V d + [d G + G | G] + d W + head, with G = H * gates_per_block, W = value width,
  ///   decoder head N h + h + h V + V,
  ///   encoder-decoder N h + h + h d + d + S d + d h + h + h V + V (S = out_slots).
  std::size_t param_count() const {
    const std::size_t d = embed_dim, V = vocab, N = layer.hidden(), h = hidden(), G = layer.gate_count();
    std::size_t n = V * d + (layer.selective ? d * G + G : G) + d * layer.value_dim();
    if (head == HeadKind::decoder_mlp) return n + N * h + h + h * V + V;
    return n + N * h + h + h * d + d + out_slots * d + d * h + h + h * V + V;
  }
};

/// Model config with vocab/head/slots taken from the task.
inline ModelConfig model_for_task(ModelConfig m, const TaskSpec& task) {
  m.vocab = task.vocab();
  m.layer.input_dim = m.embed_dim;
  if (task.kind == TaskKind::compression) {
    m.head = HeadKind::encoder_decoder_mlp;
    m.out_slots = task.seq_len;
  } else {
    m.head = HeadKind::decoder_mlp;
    m.out_slots = 0;
  }
  return m;
}

inline std::string model_config_text(const ModelConfig& m) {
  std::ostringstream s;
  s << "arch=" << to_string(m.layer.kind) << "\nm=" << m.layer.m << "\nH=" << m.layer.H
    << "\nnorm_fn=" << to_string(m.layer.norm) << "\nselective=" << (m.layer.selective ? 1 : 0)
    << "\nembed_dim=" << m.embed_dim << "\nhead=" << to_string(m.head) << "\nmlp_hidden=" << m.hidden()
    << "\nvocab=" << m.vocab << "\nout_slots=" << m.out_slots << "\n";
  return s.str();
}

inline ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(std::string("model config lacks '") + k + "'");
    return it->second;
  };
  ModelConfig m;
  m.layer.kind = parse_arch(get("arch"));
  m.layer.m = std::stoull(get("m"));
  m.layer.H = std::stoull(get("H"));
  m.layer.norm = parse_norm(get("norm_fn"));
  m.layer.selective = get("selective") == "1";
  m.embed_dim = std::stoull(get("embed_dim"));
  m.layer.input_dim = m.embed_dim;
  m.head = parse_head(get("head"));
  m.mlp_hidden = std::stoull(get("mlp_hidden"));
  m.vocab = std::stoull(get("vocab"));
  m.out_slots = std::stoull(get("out_slots"));
  return m;
}

// ---------------------------------------------------------------------------
// parameters

template <typename T>
struct Model {
  ModelConfig cfg;
  std::vector<std::string> names;
  std::vector<Tensor<T>> params;

  std::size_t index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw ContractError("model has no parameter '" + name + "'");
  }
  const Tensor<T>& operator[](const std::string& name) const { return params[index(name)]; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
  }
};

namespace detail {

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> normal_init(Shape shape, double scale, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(scale * rng.normal());
  return Tensor<T>(std::move(shape), std::move(v));
}

inline double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace detail

/// Embeddings ~ N(0,1); linear weights uniform in +-1/sqrt(fan_in); biases zero.
template <typename T>
Model<T> build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  auto add = [&](std::string name, Tensor<T> t) {
    m.names.push_back(std::move(name));
    m.params.push_back(std::move(t));
  };
  const std::size_t d = cfg.embed_dim, V = cfg.vocab, N = cfg.layer.hidden(), h = cfg.hidden();
  add("embed", detail::normal_init<T>({V, d}, 1.0, rng));
  auto gp = GateParams<T>::init(cfg.layer, rng);
  if (cfg.layer.selective) {
    add("gate_weight", gp.gate_weight);
    add("gate_bias", gp.gate_bias);
  } else {
    add("gate_const", gp.gate_const);
  }
  add("value_weight", gp.value_weight);
  auto linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
    add(prefix + ".w", detail::uniform_init<T>({in, out}, detail::fan_in_bound(in), rng));
    add(prefix + ".b", Tensor<T>::zeros({out}));
  };
  if (cfg.head == HeadKind::decoder_mlp) {
    linear("dec1", N, h);
    linear("dec2", h, V);
  } else {
    linear("enc1", N, h);
    linear("enc2", h, d);
    add("pos", detail::normal_init<T>({cfg.out_slots, d}, 1.0, rng));
    linear("dec1", d, h);
    linear("dec2", h, V);
  }
  return m;
}

template <typename T>
GateParams<T> layer_params(const Model<T>& m, const std::vector<Tensor<T>>& p) {
  GateParams<T> g;
  if (m.cfg.layer.selective) {
    g.gate_weight = p[m.index("gate_weight")];
    g.gate_bias = p[m.index("gate_bias")];
  } else {
    g.gate_const = p[m.index("gate_const")];
  }
  g.value_weight = p[m.index("value_weight")];
  return g;
}

/// Logits at supervised positions of a token batch.
template <typename T>
struct ForwardOut {
  Tensor<T> logits;                   // [R, V]
  std::vector<std::int32_t> targets;  // R
  std::vector<std::size_t> row_of;    // example index within the batch, per logit row
  Tensor<T> hidden;                   // layer output [B, T, N]
};

/// tokens/targets: B rows of row_len. Uses `p` (same order as m.params) so a
/// tape can substitute tracked leaves.
template <typename T>
ForwardOut<T> model_forward(const Model<T>& m, const std::vector<Tensor<T>>& p, std::span<const std::int32_t> tokens,
                            std::span<const std::int32_t> targets, std::size_t batch, std::size_t row_len,
                            Tape<T>* tape = nullptr) {
  const ModelConfig& c = m.cfg;
  if (tokens.size() != batch * row_len || targets.size() != batch * row_len)
    throw DimensionError("model_forward: token matrix does not match batch x row_len");
  const Tensor<T> x = embedding(p[m.index("embed")], tokens, {batch, row_len}, tape);
  const auto out = layer_forward(x, layer_params(m, p), c.layer, tape);
  auto mlp = [&](const Tensor<T>& in, const std::string& a, const std::string& b) {
    const Tensor<T> hid = gelu(add(matmul(in, p[m.index(a + ".w")], tape), p[m.index(a + ".b")], tape), tape);
    return add(matmul(hid, p[m.index(b + ".w")], tape), p[m.index(b + ".b")], tape);
  };
  ForwardOut<T> f;
  f.hidden = out.y;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == kIgnoreTarget) continue;
    rows.push_back(i);
    f.targets.push_back(targets[i]);
    f.row_of.push_back(i / row_len);
  }
  const std::size_t N = c.layer.hidden();
  if (c.head == HeadKind::decoder_mlp) {
    const Tensor<T> flat = reshape(out.y, {batch * row_len, N}, tape);
    f.logits = mlp(gather_rows(flat, rows, tape), "dec1", "dec2");
    return f;
  }
  if (row_len < 1) throw DimensionError("model_forward: empty rows");
  const Tensor<T> z = mlp(select_time(out.y, row_len - 1, tape), "enc1", "enc2");  // [B, d]
  std::vector<std::size_t> which(rows.size());
  std::vector<std::int32_t> slot(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    which[i] = rows[i] / row_len;
    const std::size_t j = rows[i] % row_len;
    if (j >= c.out_slots) throw DimensionError("model_forward: supervised slot beyond out_slots");
    slot[i] = static_cast<std::int32_t>(j);
  }
  const Tensor<T> zr = gather_rows(z, which, tape);
  const Tensor<T> pos = embedding(p[m.index("pos")], slot, {slot.size()}, tape);
  f.logits = mlp(add(zr, pos, tape), "dec1", "dec2");
  return f;
}

/// Normalized gates of the model's layer on a token batch (no tape).
template <typename T>
NormalizedGates<T> model_gates(const Model<T>& m, std::span<const std::int32_t> tokens, std::size_t batch,
                               std::size_t row_len) {
  const Tensor<T> x = embedding(m["embed"], tokens, {batch, row_len});
  const auto gp = layer_params(m, m.params);
  const Tensor<T> raw = m.cfg.layer.selective ? compute_raw_gates(x, gp, m.cfg.layer)
                                              : nonselective_gates(gp, m.cfg.layer, batch, row_len);
  return make_gates(normalize_gates(raw, m.cfg.layer.norm), m.cfg.layer);
}

// ---------------------------------------------------------------------------
// evaluation

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t r) {
  const std::size_t V = logits.dim(1);
  const T* row = logits.data().data() + r * V;
  return static_cast<std::size_t>(std::max_element(row, row + V) - row);
}

/// Per-token accuracy over supervised slots (MAD tasks) or sequence accuracy
/// (every supervised slot of a row correct) otherwise. Rows without supervision
/// are skipped.
template <typename T>
double evaluate(const Model<T>& m, const Dataset& d, std::size_t batch = 256) {
  const bool per_token = per_token_metric(d.spec.kind);
  std::size_t hits = 0, total = 0;
  for (std::size_t start = 0; start < d.rows; start += batch) {
    const std::size_t B = std::min(batch, d.rows - start);
    const std::span<const std::int32_t> in(d.inputs.data() + start * d.row_len, B * d.row_len);
    const std::span<const std::int32_t> tg(d.targets.data() + start * d.row_len, B * d.row_len);
    const auto f = model_forward(m, m.params, in, tg, B, d.row_len);
    std::vector<int> row_ok(B, -1);  // -1 unsupervised, 1 all correct, 0 some wrong
    for (std::size_t r = 0; r < f.targets.size(); ++r) {
      const bool ok = argmax_row(f.logits, r) == static_cast<std::size_t>(f.targets[r]);
      if (per_token) {
        hits += ok;
        ++total;
      } else {
        auto& s = row_ok[f.row_of[r]];
        s = (s != 0 && ok) ? 1 : 0;
      }
    }
    if (!per_token)
      for (int s : row_ok)
        if (s >= 0) {
          hits += static_cast<std::size_t>(s);
          ++total;
        }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// optimizer

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
};

/// One decoupled-weight-decay Adam update at step t >= 1:
///   p <- p - lr wd p - lr mhat / (sqrt(vhat) + eps).
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
                std::size_t t, double lr, const AdamWConfig& hp = {}) {
  if (t < 1) throw ContractError("adamw_step: step t must be >= 1");
  if (grads.size() != params.size()) throw DimensionError("adamw_step: one gradient per parameter required");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T{0});
      state.v.emplace_back(p.numel(), T{0});
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) throw DimensionError("adamw_step: gradient shape mismatch");
    for (T g : grads[i].data())
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("adamw_step: non-finite gradient for parameter " + std::to_string(i));
  }
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<T> p = params[i].to_vector();
    const auto g = grads[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = static_cast<T>(hp.beta1 * static_cast<double>(m[j]) + (1 - hp.beta1) * gj);
      v[j] = static_cast<T>(hp.beta2 * static_cast<double>(v[j]) + (1 - hp.beta2) * gj * gj);
      const double mhat = static_cast<double>(m[j]) / c1, vhat = static_cast<double>(v[j]) / c2;
      const double pj = static_cast<double>(p[j]);
      p[j] = static_cast<T>(pj - lr * hp.weight_decay * pj - lr * mhat / (std::sqrt(vhat) + hp.eps));
    }
    params[i] = Tensor<T>(params[i].shape(), std::move(p));
  }
}

/// Cosine decay from lr_max at step 0 to lr_min at step `total`.
inline double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min = 1e-5) {
  if (total == 0) return lr_max;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  double lr = 1e-3;
  std::vector<double> lr_grid{1e-3, 5e-4, 1e-4};
  std::size_t seeds = 5;
  std::uint64_t seed = 0;
  std::size_t batch = 128;
  std::size_t epochs = 200;
  AdamWConfig adamw;
  double lr_min = 1e-5;
  bool early_stop = true;  // stop a run at test accuracy 1.0
  std::size_t jobs = 1;    // batch shards per step
  double grad_clip = 0;    // 0: off
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before training
  double train_loss = 0;
  double test_acc = 0;
};

struct RunReport {
  std::string task;
  std::string model;
  std::uint64_t seed = 0;
  double lr = 0;
  double weight_decay = 0;
  std::size_t batch = 0;
  std::size_t epochs_budget = 0;
  std::size_t params = 0;
  std::vector<EpochRecord> epochs;
  double best_test_acc = 0;
  std::size_t best_epoch = 0;
  bool failed = false;
  std::string failure;
  double wall_seconds = 0;
  std::string precision;
};

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json j;
  j["task"] = r.task;
  j["model"] = r.model;
  j["seed"] = r.seed;
  j["lr"] = r.lr;
  j["weight_decay"] = r.weight_decay;
  j["batch"] = r.batch;
  j["epochs_budget"] = r.epochs_budget;
  j["params"] = r.params;
  j["precision"] = r.precision;
  auto& e = j["epochs"] = nlohmann::json::array();
  for (const auto& ep : r.epochs) e.push_back({{"epoch", ep.epoch}, {"train_loss", ep.train_loss}, {"test_acc", ep.test_acc}});
  j["best_test_acc"] = r.best_test_acc;
  j["best_epoch"] = r.best_epoch;
  j["failed"] = r.failed;
  j["failure"] = r.failure;
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

template <typename T>
struct RunResult {
  RunReport report;
  Model<T> best;  // parameters at the best epoch
};

template <typename T>
constexpr const char* precision_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

namespace detail {

/// Loss and gradients of one batch, split into `jobs` shards with one tape each;
/// shard gradients are summed in shard order.
template <typename T>
T batch_gradients(const Model<T>& m, std::span<const std::int32_t> in, std::span<const std::int32_t> tg,
                  std::size_t B, std::size_t L, std::size_t jobs, std::vector<Tensor<T>>& grads) {
  std::size_t supervised = 0;
  for (auto t : tg) supervised += t != kIgnoreTarget;
  grads.assign(m.params.size(), Tensor<T>());
  if (supervised == 0) {
    for (std::size_t i = 0; i < m.params.size(); ++i) grads[i] = Tensor<T>::zeros(m.params[i].shape());
    return T{0};
  }
  jobs = std::max<std::size_t>(1, std::min(jobs, B));
  const std::size_t chunk = (B + jobs - 1) / jobs;
  std::vector<std::vector<Tensor<T>>> shard_grads(jobs);
  std::vector<T> shard_loss(jobs, T{0});
  std::vector<std::string> errors(jobs);
  auto work = [&](std::size_t s) {
    try {
      const std::size_t lo = s * chunk, hi = std::min(B, lo + chunk);
      if (lo >= hi) return;
      Tape<T> tape;
      std::vector<Tensor<T>> leaves;
      for (const auto& p : m.params) leaves.push_back(tape.leaf(p));
      const auto sub_in = in.subspan(lo * L, (hi - lo) * L);
      const auto sub_tg = tg.subspan(lo * L, (hi - lo) * L);
      bool any = false;
      for (auto t : sub_tg) any |= t != kIgnoreTarget;
      if (!any) return;
      const auto f = model_forward(m, leaves, sub_in, sub_tg, hi - lo, L, &tape);
      const Tensor<T> loss = cross_entropy(f.logits, f.targets, static_cast<T>(supervised), &tape);
      tape.backward(loss);
      shard_loss[s] = loss.item();
      for (const auto& l : leaves) shard_grads[s].push_back(tape.grad(l));
    } catch (const std::exception& e) {
      errors[s] = e.what();
    }
  };
  if (jobs == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t s = 1; s < jobs; ++s) pool.emplace_back(work, s);
    work(0);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (!e.empty()) throw NumericError(e);
  T loss{0};
  std::vector<std::vector<T>> acc;
  for (const auto& p : m.params) acc.emplace_back(p.numel(), T{0});
  for (std::size_t s = 0; s < jobs; ++s) {
    if (shard_grads[s].empty()) continue;
    loss += shard_loss[s];
    for (std::size_t i = 0; i < acc.size(); ++i) {
      const auto g = shard_grads[s][i].data();
      for (std::size_t j = 0; j < g.size(); ++j) acc[i][j] += g[j];
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) grads[i] = Tensor<T>(m.params[i].shape(), std::move(acc[i]));
  return loss;
}

}  // namespace detail

/// Trains from `tcfg.seed`: init from substream 1, batch order per epoch from
/// substream (2, epoch). Test accuracy is logged before training (epoch 0) and
/// after every epoch; a non-finite loss or gradient marks the run failed.
template <typename T>
RunResult<T> train_run(const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& train, const Dataset& test) {
  if (train.spec.kind != test.spec.kind || train.row_len != test.row_len)
    throw SpecError("train_run: train and test splits come from different tasks");
  const ModelConfig cfg = model_for_task(mcfg, train.spec);
  const auto t0 = std::chrono::steady_clock::now();
  const Rng root(tcfg.seed);
  Rng init = root.substream(1);
  RunResult<T> res{{}, build_model<T>(cfg, init)};
  Model<T> model = res.best;
  RunReport& rep = res.report;
  rep.task = to_string(train.spec.kind);
  rep.model = model_config_text(cfg);
  rep.seed = tcfg.seed;
  rep.lr = tcfg.lr;
  rep.weight_decay = tcfg.adamw.weight_decay;
  rep.batch = tcfg.batch;
  rep.epochs_budget = tcfg.epochs;
  rep.params = model.numel();
  rep.precision = precision_name<T>();
  rep.best_test_acc = evaluate(model, test);
  rep.epochs.push_back({0, std::numeric_limits<double>::quiet_NaN(), rep.best_test_acc});

  const std::size_t B = std::max<std::size_t>(1, tcfg.batch), L = train.row_len;
  const std::size_t steps_per_epoch = (train.rows + B - 1) / B;
  const std::size_t total_steps = steps_per_epoch * tcfg.epochs;
  AdamState<T> state;
  std::size_t step = 0;
  std::vector<std::int32_t> bin, btg;
  std::vector<Tensor<T>> grads;
  for (std::size_t epoch = 1; epoch <= tcfg.epochs && !(tcfg.early_stop && rep.best_test_acc >= 1.0); ++epoch) {
    std::vector<std::size_t> order(train.rows);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuf = root.substream(2, epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuf.below(i)]);
    double loss_sum = 0;
    std::size_t loss_n = 0;
    try {
      for (std::size_t s = 0; s < steps_per_epoch; ++s) {
        const std::size_t lo = s * B, n = std::min(B, train.rows - lo);
        bin.resize(n * L);
        btg.resize(n * L);
        for (std::size_t i = 0; i < n; ++i) {
          const auto r = order[lo + i];
          std::copy_n(train.inputs.data() + r * L, L, bin.data() + i * L);
          std::copy_n(train.targets.data() + r * L, L, btg.data() + i * L);
        }
        const T loss = detail::batch_gradients(model, bin, btg, n, L, tcfg.jobs, grads);
        if (!std::isfinite(static_cast<double>(loss))) throw NumericError("non-finite training loss");
        if (tcfg.grad_clip > 0) {
          double norm2 = 0;
          for (const auto& g : grads)
            for (T v : g.data()) norm2 += static_cast<double>(v) * static_cast<double>(v);
          const double norm = std::sqrt(norm2);
          if (norm > tcfg.grad_clip) {
            const T scale = static_cast<T>(tcfg.grad_clip / norm);
            for (auto& g : grads) {
              std::vector<T> v = g.to_vector();
              for (auto& x : v) x *= scale;
              g = Tensor<T>(g.shape(), std::move(v));
            }
          }
        }
        const double lr = cosine_lr(step, total_steps, tcfg.lr, tcfg.lr_min);
        adamw_step(model.params, grads, state, ++step, lr, tcfg.adamw);
        loss_sum += static_cast<double>(loss);
        ++loss_n;
      }
    } catch (const NumericError& e) {
      rep.failed = true;
      rep.failure = std::string("epoch ") + std::to_string(epoch) + ": " + e.what();
      break;
    }
    const double acc = evaluate(model, test);
    rep.epochs.push_back({epoch, loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0, acc});
    if (acc > rep.best_test_acc) {
      rep.best_test_acc = acc;
      rep.best_epoch = epoch;
      res.best = model;
    }
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepRow {
  std::size_t config_index = 0;
  std::string task;
  double lr = 0;
  std::uint64_t seed = 0;
  double best_test_acc = 0;
  std::size_t epochs_run = 0;
  bool failed = false;
  double wall_seconds = 0;
};

struct SweepSummary {
  std::vector<SweepRow> rows;
  std::vector<double> best_per_config;  // NaN when every run of a config failed
  double mean_best = 0;
  std::vector<RunReport> reports;
};

inline const char* sweep_csv_header() { return "config,task,lr,seed,best_test_acc,epochs_run,failed,wall_seconds"; }

inline void write_sweep_csv(std::ostream& os, const SweepSummary& s) {
  os << sweep_csv_header() << '\n';
  for (const auto& r : s.rows)
    os << r.config_index << ',' << r.task << ',' << r.lr << ',' << r.seed << ',' << r.best_test_acc << ','
       << r.epochs_run << ',' << (r.failed ? 1 : 0) << ',' << r.wall_seconds << '\n';
}

struct SweepOptions {
  /// Skip the remaining runs of a config once one reaches accuracy 1.0; the
  /// per-config maximum cannot change after that.
  bool stop_at_perfect = false;
  /// Called after each run (progress reporting).
  std::function<void(const SweepRow&)> on_run;
};

/// lr_grid x seeds runs per dataset; per-config max (failed runs excluded unless
/// all failed) and their mean. Run seeds are tcfg.seed + k for k < tcfg.seeds.
/// `best_models`, when given, receives the best parameters of each config.
template <typename T>
SweepSummary sweep(const ModelConfig& mcfg, const TrainConfig& tcfg, const std::vector<DatasetPair>& datasets,
                   const SweepOptions& opt = {}, std::vector<Model<T>>* best_models = nullptr) {
  SweepSummary out;
  if (best_models) best_models->clear();
  double sum = 0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < datasets.size(); ++c) {
    double best = -1;
    bool any_ok = false;
    bool done = false;
    double kept = -1;
    bool kept_ok = false;
    for (double lr : tcfg.lr_grid) {
      for (std::size_t k = 0; k < tcfg.seeds && !done; ++k) {
        TrainConfig run = tcfg;
        run.lr = lr;
        run.seed = tcfg.seed + k;
        const auto r = train_run<T>(mcfg, run, datasets[c].train, datasets[c].test);
        SweepRow row{c, r.report.task, lr, run.seed, r.report.best_test_acc, r.report.epochs.size() - 1,
                     r.report.failed, r.report.wall_seconds};
        out.rows.push_back(row);
        out.reports.push_back(r.report);
        if (opt.on_run) opt.on_run(row);
        if (best_models) {
          const bool ok = !r.report.failed;
          if ((ok && !kept_ok) || (ok == kept_ok && r.report.best_test_acc > kept)) {
            if (best_models->size() == c) best_models->push_back(r.best);
            else best_models->back() = r.best;
            kept = r.report.best_test_acc;
            kept_ok = ok;
          }
        }
        if (!r.report.failed) any_ok = true;
        if (!r.report.failed || !any_ok) best = std::max(best, r.report.best_test_acc);
        if (opt.stop_at_perfect && !r.report.failed && r.report.best_test_acc >= 1.0) done = true;
      }
      if (done) break;
    }
    // failed runs only count when nothing succeeded
    if (any_ok) {
      best = -1;
      for (const auto& row : out.rows)
        if (row.config_index == c && !row.failed) best = std::max(best, row.best_test_acc);
    }
    out.best_per_config.push_back(best < 0 ? std::numeric_limits<double>::quiet_NaN() : best);
    if (best >= 0) {
      sum += best;
      ++counted;
    }
  }
  out.mean_best = counted ? sum / static_cast<double>(counted) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints
//
//   "BDLRU1\0\0"  8 bytes
//   u32 version (1), u32 config_len, config text (key=value lines)
//   u32 arrays; per array: u32 name_len, name, u32 ndim, u64 dims[ndim], f32 data
// All little-endian.

template <typename T>
std::string serialize_checkpoint(const Model<T>& m, const std::string& extra = "") {
  std::string out("BDLRU1\0\0", 8);
  io::put_le<std::uint32_t>(out, 1);
  const std::string cfg = model_config_text(m.cfg) + extra;
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.params.size()));
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.names[i].size()));
    out += m.names[i];
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.params[i].rank()));
    for (auto d : m.params[i].shape()) io::put_le<std::uint64_t>(out, d);
    for (T v : m.params[i].data()) {
      std::uint32_t bits;
      const float f = static_cast<float>(v);
      std::memcpy(&bits, &f, 4);
      io::put_le<std::uint32_t>(out, bits);
    }
  }
  return out;
}

template <typename T>
Model<T> deserialize_checkpoint(const std::string& bytes, std::map<std::string, std::string>* header = nullptr) {
  if (bytes.size() < 8 || bytes.compare(0, 8, std::string("BDLRU1\0\0", 8)) != 0)
    throw FormatError("not a BDLRU1 checkpoint");
  std::size_t pos = 8;
  if (io::get_le<std::uint32_t>(bytes, pos) != 1) throw FormatError("unsupported checkpoint version");
  const auto clen = io::get_le<std::uint32_t>(bytes, pos);
  if (pos + clen > bytes.size()) throw FormatError("truncated checkpoint config");
  const auto kv = io::parse_kv(bytes.substr(pos, clen));
  pos += clen;
  if (header) *header = kv;
  Model<T> m;
  m.cfg = model_config_from_kv(kv);
  const auto n = io::get_le<std::uint32_t>(bytes, pos);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = io::get_le<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw FormatError("truncated checkpoint array name");
    m.names.push_back(bytes.substr(pos, len));
    pos += len;
    Shape shape(io::get_le<std::uint32_t>(bytes, pos));
    for (auto& d : shape) d = io::get_le<std::uint64_t>(bytes, pos);
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) {
      const auto bits = io::get_le<std::uint32_t>(bytes, pos);
      float f;
      std::memcpy(&f, &bits, 4);
      v = static_cast<T>(f);
    }
    m.params.emplace_back(std::move(shape), std::move(data));
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes in checkpoint");
  // shapes must match a freshly built model of the same config
  Rng rng(0);
  const Model<T> ref = build_model<T>(m.cfg, rng);
  if (ref.names != m.names) throw FormatError("checkpoint parameter names do not match its config");
  for (std::size_t i = 0; i < ref.params.size(); ++i)
    if (ref.params[i].shape() != m.params[i].shape())
      throw FormatError("checkpoint array '" + m.names[i] + "' has shape " + shape_str(m.params[i].shape()));
  return m;
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& m, const std::string& extra = "") {
  io::write_file(path, serialize_checkpoint(m, extra));
}

template <typename T>
Model<T> load_checkpoint(const std::string& path, std::map<std::string, std::string>* header = nullptr) {
  return deserialize_checkpoint<T>(io::read_file(path), header);
}

}  // namespace lrnn
