// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "lrnn/errors.hpp"
#include "lrnn/ops.hpp"
#include "lrnn/rng.hpp"

namespace lrnn {

enum class TaskKind { compression, selective_copy, recall, sn_composition, parity, cycle_nav, mod_arith, mod_arith_brackets };

inline const std::vector<std::pair<TaskKind, std::string>>& task_names() {
  static const std::vector<std::pair<TaskKind, std::string>> names{
      {TaskKind::compression, "compression"},       {TaskKind::selective_copy, "selective_copy"},
      {TaskKind::recall, "recall"},                 {TaskKind::sn_composition, "sn_composition"},
      {TaskKind::parity, "parity"},                 {TaskKind::cycle_nav, "cycle_nav"},
      {TaskKind::mod_arith, "mod_arith"},           {TaskKind::mod_arith_brackets, "mod_arith_brackets"}};
  return names;
}

inline std::string to_string(TaskKind k) {
  for (const auto& [kind, name] : task_names())
    if (kind == k) return name;
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  for (const auto& [kind, name] : task_names())
    if (name == s) return kind;
  throw SpecError("task.kind: unknown task '" + s + "'");
}

/// MAD-style tasks are scored per token, state-tracking tasks per sequence.
inline bool per_token_metric(TaskKind k) {
  return k == TaskKind::compression || k == TaskKind::selective_copy || k == TaskKind::recall;
}

// Token layout per task (V = vocab_size):
//   compression        content 0..V-2, aggregation token V-1 appended; input row seq_len+1
//   selective_copy     noise 0, content 1..V-2, trigger V-1 (fills the answer slots)
//   recall             keys 0..V/2-1, values V/2..V-1
//   sn_composition     lexicographic rank of the permutation, identity = 0
//   parity             bits 0/1
//   cycle_nav          0 stay, 1 +1, 2 -1; targets 0..4
//   mod_arith(_brackets) operands 0..4, '+' 5, '-' 6, '*' 7, '(' 8, ')' 9, pad 10 (left)
namespace tok {
inline constexpr std::int32_t kPlus = 5, kMinus = 6, kTimes = 7, kOpen = 8, kClose = 9, kPad = 10;
inline constexpr std::size_t kArithVocab = 11;
inline constexpr std::size_t kCycleVocab = 5;
}  // namespace tok

struct TaskSpec {
  TaskKind kind = TaskKind::parity;
  std::size_t vocab_size = 0;  // 0: default for the kind
  std::size_t seq_len = 16;
  std::size_t num_train = 1000;
  std::size_t num_test = 200;
  std::size_t group_n = 3;
  std::size_t num_content = 16;  // selective_copy
  std::uint64_t seed = 0;

  static std::size_t factorial(std::size_t n) {
    std::size_t f = 1;
    for (std::size_t i = 2; i <= n; ++i) f *= i;
    return f;
  }

  std::size_t default_vocab() const {
    switch (kind) {
      case TaskKind::compression:
      case TaskKind::selective_copy:
      case TaskKind::recall: return 16;
      case TaskKind::sn_composition: return factorial(group_n);
      case TaskKind::parity: return 2;
      case TaskKind::cycle_nav: return tok::kCycleVocab;
      case TaskKind::mod_arith:
      case TaskKind::mod_arith_brackets: return tok::kArithVocab;
    }
    return 0;
  }

  std::size_t vocab() const { return vocab_size ? vocab_size : default_vocab(); }
  std::size_t row_len() const { return kind == TaskKind::compression ? seq_len + 1 : seq_len; }

  void validate() const {
    if (seq_len < 1) throw SpecError("task.seq_len must be >= 1");
    const std::size_t V = vocab();
    switch (kind) {
      case TaskKind::compression:
        if (V < 2) throw SpecError("task.vocab_size must be >= 2 for compression");
        break;
      case TaskKind::selective_copy:
        if (V < 3) throw SpecError("task.vocab_size must be >= 3 for selective_copy");
        if (num_content < 1 || 2 * num_content > seq_len)
          throw SpecError("task.num_content: " + std::to_string(num_content) + " content tokens do not fit seq_len " +
                          std::to_string(seq_len));
        break;
      case TaskKind::recall:
        if (V < 2 || V % 2) throw SpecError("task.vocab_size must be even for recall");
        if (seq_len % 2) throw SpecError("task.seq_len must be even for recall (key-value pairs)");
        if (seq_len < 4) throw SpecError("task.seq_len must be >= 4 for recall");
        break;
      case TaskKind::sn_composition:
        if (group_n < 2 || group_n > 5) throw SpecError("task.group_n must be in 2..5");
        if (V != factorial(group_n)) throw SpecError("task.vocab_size must equal group_n! for sn_composition");
        break;
      case TaskKind::parity:
        if (V != 2) throw SpecError("task.vocab_size must be 2 for parity");
        break;
      case TaskKind::cycle_nav:
        if (V != tok::kCycleVocab) throw SpecError("task.vocab_size must be 5 for cycle_nav");
        break;
      case TaskKind::mod_arith:
      case TaskKind::mod_arith_brackets:
        if (V != tok::kArithVocab) throw SpecError("task.vocab_size must be 11 for mod_arith");
        break;
    }
  }
};

/// Token matrix for one split; targets hold kIgnoreTarget at unsupervised slots.
struct Dataset {
  TaskSpec spec;
  std::string split = "train";
  std::size_t rows = 0;
  std::size_t row_len = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;

  std::span<const std::int32_t> input_row(std::size_t r) const { return {inputs.data() + r * row_len, row_len}; }
  std::span<const std::int32_t> target_row(std::size_t r) const { return {targets.data() + r * row_len, row_len}; }
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// ---------------------------------------------------------------------------
// permutations

/// All permutations of 0..n-1 in lexicographic order; index = token id.
inline std::vector<std::vector<int>> permutations_lex(std::size_t n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::vector<std::vector<int>> out;
  do out.push_back(p);
  while (std::next_permutation(p.begin(), p.end()));
  return out;
}

/// (p . g)(i) = p(g(i)).
inline std::vector<int> compose(const std::vector<int>& p, const std::vector<int>& g) {
  std::vector<int> r(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) r[i] = p[static_cast<std::size_t>(g[i])];
  return r;
}

/// Cayley table: table[a * n! + b] = rank(perm_a . perm_b).
inline std::vector<std::int32_t> composition_table(std::size_t n) {
  const auto perms = permutations_lex(n);
  std::map<std::vector<int>, std::int32_t> rank;
  for (std::size_t i = 0; i < perms.size(); ++i) rank[perms[i]] = static_cast<std::int32_t>(i);
  std::vector<std::int32_t> table(perms.size() * perms.size());
  for (std::size_t a = 0; a < perms.size(); ++a)
    for (std::size_t b = 0; b < perms.size(); ++b) table[a * perms.size() + b] = rank.at(compose(perms[a], perms[b]));
  return table;
}

// ---------------------------------------------------------------------------
// arithmetic expressions

namespace arith {

/// Recursive-descent evaluator mod 5: expr := term (('+'|'-') term)*, term := factor ('*' factor)*,
/// factor := digit | '(' expr ')'. Leading pad tokens are skipped. Throws FormatError if malformed.
inline int evaluate(std::span<const std::int32_t> tokens) {
  std::size_t pos = 0;
  while (pos < tokens.size() && tokens[pos] == tok::kPad) ++pos;
  std::function<int()> expr, term, factor;
  auto peek = [&]() -> std::int32_t { return pos < tokens.size() ? tokens[pos] : -1; };
  factor = [&]() -> int {
    const auto t = peek();
    if (t >= 0 && t <= 4) {
      ++pos;
      return t;
    }
    if (t == tok::kOpen) {
      ++pos;
      const int v = expr();
      if (peek() != tok::kClose) throw FormatError("arith: missing ')'");
      ++pos;
      return v;
    }
    throw FormatError("arith: unexpected token " + std::to_string(t));
  };
  term = [&]() -> int {
    int v = factor();
    while (peek() == tok::kTimes) {
      ++pos;
      v = (v * factor()) % 5;
    }
    return v;
  };
  expr = [&]() -> int {
    int v = term();
    while (peek() == tok::kPlus || peek() == tok::kMinus) {
      const bool plus = tokens[pos++] == tok::kPlus;
      const int r = term();
      v = ((plus ? v + r : v - r) % 5 + 5) % 5;
    }
    return v;
  };
  const int v = expr();
  if (pos != tokens.size()) throw FormatError("arith: trailing tokens");
  return v;
}

struct Node {
  int value = 0;  // leaf digit
  std::int32_t op = -1;
  int left = -1, right = -1;
};

/// Random binary tree over `leaves` digits, rendered with brackets around every
/// non-root operator node. Returns tokens and the tree value.
inline std::pair<std::vector<std::int32_t>, int> random_tree(std::size_t leaves, Rng& rng) {
  std::vector<Node> nodes;
  std::function<int(std::size_t)> build = [&](std::size_t n) -> int {
    if (n == 1) {
      nodes.push_back({static_cast<int>(rng.below(5)), -1, -1, -1});
      return static_cast<int>(nodes.size() - 1);
    }
    const std::size_t left_n = 1 + rng.below(n - 1);
    const auto op = static_cast<std::int32_t>(tok::kPlus + static_cast<std::int32_t>(rng.below(3)));
    const int l = build(left_n);
    const int r = build(n - left_n);
    nodes.push_back({0, op, l, r});
    return static_cast<int>(nodes.size() - 1);
  };
  const int root = build(leaves);
  std::vector<std::int32_t> out;
  std::function<int(int, bool)> render = [&](int i, bool is_root) -> int {
    const Node& nd = nodes[static_cast<std::size_t>(i)];
    if (nd.op < 0) {
      out.push_back(nd.value);
      return nd.value;
    }
    if (!is_root) out.push_back(tok::kOpen);
    const int a = render(nd.left, false);
    out.push_back(nd.op);
    const int b = render(nd.right, false);
    if (!is_root) out.push_back(tok::kClose);
    if (nd.op == tok::kPlus) return (a + b) % 5;
    if (nd.op == tok::kMinus) return ((a - b) % 5 + 5) % 5;
    return (a * b) % 5;
  };
  const int v = render(root, true);
  return {out, v};
}

/// Flat expression with standard precedence, valued by a sum-of-products pass.
inline std::pair<std::vector<std::int32_t>, int> random_flat(std::size_t operands, Rng& rng) {
  std::vector<std::int32_t> out;
  int total = 0, product = 0, sign = 1;
  for (std::size_t i = 0; i < operands; ++i) {
    const int d = static_cast<int>(rng.below(5));
    if (i == 0) {
      product = d;
    } else {
      const auto op = static_cast<std::int32_t>(tok::kPlus + static_cast<std::int32_t>(rng.below(3)));
      out.push_back(op);
      if (op == tok::kTimes) {
        product = product * d % 5;
      } else {
        total += sign * product;
        sign = op == tok::kPlus ? 1 : -1;
        product = d;
      }
    }
    out.push_back(d);
  }
  total += sign * product;
  return {out, ((total % 5) + 5) % 5};
}

}  // namespace arith

// ---------------------------------------------------------------------------
// generators

namespace detail {

struct RowPair {
  std::vector<std::int32_t> in;
  std::vector<std::int32_t> tgt;
};

inline RowPair make_row(const TaskSpec& s, Rng& rng) {
  const std::size_t L = s.seq_len, V = s.vocab();
  RowPair r{std::vector<std::int32_t>(s.row_len()), std::vector<std::int32_t>(s.row_len(), kIgnoreTarget)};
  auto draw = [&](std::size_t n) { return static_cast<std::int32_t>(rng.below(n)); };
  switch (s.kind) {
    case TaskKind::compression: {
      for (std::size_t t = 0; t < L; ++t) r.in[t] = r.tgt[t] = draw(V - 1);
      r.in[L] = static_cast<std::int32_t>(V - 1);
      break;
    }
    case TaskKind::selective_copy: {
      const std::size_t k = s.num_content, region = L - k;
      std::fill(r.in.begin(), r.in.end(), 0);
      // choose k of `region` slots, in order
      std::vector<std::size_t> slots(region);
      std::iota(slots.begin(), slots.end(), 0);
      for (std::size_t i = 0; i < k; ++i) std::swap(slots[i], slots[i + rng.below(region - i)]);
      std::sort(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(k));
      for (std::size_t i = 0; i < k; ++i) {
        const auto c = static_cast<std::int32_t>(1 + rng.below(V - 2));
        r.in[slots[i]] = c;
        r.in[region + i] = static_cast<std::int32_t>(V - 1);
        r.tgt[region + i] = c;
      }
      break;
    }
    case TaskKind::recall: {
      const std::size_t keys = V / 2, pairs = L / 2, context = (pairs + 1) / 2;
      std::vector<std::int32_t> binding(keys, -1);
      std::vector<std::int32_t> seen;
      for (std::size_t p = 0; p < context; ++p) {
        const auto k = draw(keys), v = static_cast<std::int32_t>(keys + rng.below(keys));
        r.in[2 * p] = k;
        r.in[2 * p + 1] = v;
        if (binding[static_cast<std::size_t>(k)] < 0) seen.push_back(k);
        binding[static_cast<std::size_t>(k)] = v;
      }
      for (std::size_t p = context; p < pairs; ++p) {
        const auto k = seen[rng.below(seen.size())];
        r.in[2 * p] = k;
        r.in[2 * p + 1] = binding[static_cast<std::size_t>(k)];
        r.tgt[2 * p] = binding[static_cast<std::size_t>(k)];
      }
      break;
    }
    case TaskKind::sn_composition: {
      struct Group {
        std::vector<std::vector<int>> perms;
        std::map<std::vector<int>, std::int32_t> rank;
      };
      static thread_local std::map<std::size_t, Group> cache;
      Group& grp = cache[s.group_n];
      if (grp.perms.empty()) {
        grp.perms = permutations_lex(s.group_n);
        for (std::size_t i = 0; i < grp.perms.size(); ++i) grp.rank[grp.perms[i]] = static_cast<std::int32_t>(i);
      }
      const auto& perms = grp.perms;
      const auto& rank = grp.rank;
      std::vector<int> p = perms[0];
      for (std::size_t t = 0; t < L; ++t) {
        const auto g = draw(V);
        p = compose(p, perms[static_cast<std::size_t>(g)]);
        r.in[t] = g;
        r.tgt[t] = rank.at(p);
      }
      break;
    }
    case TaskKind::parity: {
      std::int32_t acc = 0;
      for (std::size_t t = 0; t < L; ++t) {
        r.in[t] = draw(2);
        acc ^= r.in[t];
        r.tgt[t] = acc;
      }
      break;
    }
    case TaskKind::cycle_nav: {
      int pos = 0;
      for (std::size_t t = 0; t < L; ++t) {
        r.in[t] = draw(3);
        pos = r.in[t] == 1 ? (pos + 1) % 5 : r.in[t] == 2 ? (pos + 4) % 5 : pos;
      }
      r.tgt[L - 1] = pos;
      break;
    }
    case TaskKind::mod_arith:
    case TaskKind::mod_arith_brackets: {
      std::vector<std::int32_t> expr;
      int value = 0;
      if (s.kind == TaskKind::mod_arith) {
        const std::size_t max_ops = (L + 1) / 2;
        std::tie(expr, value) = arith::random_flat(1 + rng.below(max_ops), rng);
      } else {
        // n leaves render to 4n - 5 tokens (n >= 2)
        const std::size_t max_leaves = L >= 3 ? (L + 5) / 4 : 1;
        std::tie(expr, value) = arith::random_tree(1 + rng.below(max_leaves), rng);
      }
      if (expr.size() > L) throw ContractError("mod_arith: generated expression longer than seq_len");
      std::fill(r.in.begin(), r.in.end(), tok::kPad);
      std::copy(expr.begin(), expr.end(), r.in.end() - static_cast<std::ptrdiff_t>(expr.size()));
      r.tgt[L - 1] = value;
      break;
    }
  }
  return r;
}

/// log2 of the number of distinct input rows, capped; used to decide whether
/// disjoint splits are attainable.
inline double log2_space(const TaskSpec& s) {
  const double L = static_cast<double>(s.seq_len), V = static_cast<double>(s.vocab());
  switch (s.kind) {
    case TaskKind::compression: return L * std::log2(V - 1);
    case TaskKind::selective_copy: return static_cast<double>(s.num_content) * std::log2(V - 2);
    case TaskKind::recall: return L / 2 * std::log2(V / 2);  // context pairs alone
    case TaskKind::sn_composition: return L * std::log2(V);
    case TaskKind::parity: return L;
    case TaskKind::cycle_nav: return L * std::log2(3.0);
    case TaskKind::mod_arith:
    case TaskKind::mod_arith_brackets: return L / 2;  // loose lower estimate
  }
  return 0;
}

struct RowHash {
  std::size_t operator()(const std::vector<std::int32_t>& v) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (auto x : v) h = (h ^ static_cast<std::uint32_t>(x)) * 1099511628211ULL;
    return static_cast<std::size_t>(h);
  }
};

}  // namespace detail

/// Generates both splits. Example i of split s draws from the substream
/// (s, i, attempt); test rows colliding with train inputs are redrawn when the
/// input space is large enough for disjointness to be attainable.
inline DatasetPair generate(const TaskSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  const bool disjoint =
      detail::log2_space(spec) >= std::log2(4.0 * static_cast<double>(spec.num_train + spec.num_test) + 1.0);
  std::unordered_set<std::vector<std::int32_t>, detail::RowHash> train_rows;
  auto fill = [&](std::size_t split_id, std::size_t count, const char* name) {
    Dataset d{spec, name, count, spec.row_len(), {}, {}};
    d.inputs.reserve(count * d.row_len);
    d.targets.reserve(count * d.row_len);
    for (std::size_t i = 0; i < count; ++i) {
      detail::RowPair row;
      for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng = root.substream((static_cast<std::uint64_t>(split_id) << 40) | i, attempt);
        row = detail::make_row(spec, rng);
        if (split_id == 0 || !disjoint || !train_rows.count(row.in)) break;
        if (attempt > 10000) throw ContractError("generate: could not draw a test row disjoint from train");
      }
      if (split_id == 0 && disjoint) train_rows.insert(row.in);
      d.inputs.insert(d.inputs.end(), row.in.begin(), row.in.end());
      d.targets.insert(d.targets.end(), row.tgt.begin(), row.tgt.end());
    }
    return d;
  };
  DatasetPair out;
  out.train = fill(0, spec.num_train, "train");
  out.test = fill(1, spec.num_test, "test");
  return out;
}

// ---------------------------------------------------------------------------
// verifiers

/// Independent check of one row against the task contract. Returns an empty
/// string when the row is valid, otherwise a description of the violation.
inline std::string verify_row(const TaskSpec& s, std::span<const std::int32_t> in, std::span<const std::int32_t> tgt) {
  const std::size_t L = s.seq_len, V = s.vocab();
  if (in.size() != s.row_len() || tgt.size() != s.row_len()) return "row length";
  for (auto x : in)
    if (x < 0 || static_cast<std::size_t>(x) >= V) return "input token outside vocab";
  switch (s.kind) {
    case TaskKind::compression:
      if (in[L] != static_cast<std::int32_t>(V - 1) || tgt[L] != kIgnoreTarget) return "aggregation slot";
      for (std::size_t t = 0; t < L; ++t)
        if (tgt[t] != in[t] || in[t] == static_cast<std::int32_t>(V - 1)) return "reconstruction target";
      return "";
    case TaskKind::selective_copy: {
      // stripping noise and triggers from the input must give the supervised targets in order
      std::vector<std::int32_t> content, answers;
      for (auto x : in)
        if (x != 0 && x != static_cast<std::int32_t>(V - 1)) content.push_back(x);
      for (std::size_t t = 0; t < L; ++t) {
        if (tgt[t] != kIgnoreTarget) {
          if (in[t] != static_cast<std::int32_t>(V - 1)) return "answer slot without trigger";
          answers.push_back(tgt[t]);
        }
      }
      if (answers.size() != s.num_content || content != answers) return "noise-stripped input differs from targets";
      for (std::size_t t = L - s.num_content; t < L; ++t)
        if (tgt[t] == kIgnoreTarget) return "answer slot unsupervised";
      return "";
    }
    case TaskKind::recall: {
      const auto keys = static_cast<std::int32_t>(V / 2);
      std::map<std::int32_t, std::int32_t> bound;
      std::size_t supervised = 0;
      for (std::size_t t = 0; t + 1 < L; t += 2) {
        if (in[t] >= keys || in[t + 1] < keys) return "key/value halves";
        if (tgt[t + 1] != kIgnoreTarget) return "value slot supervised";
        if (tgt[t] != kIgnoreTarget) {
          ++supervised;
          const auto it = bound.find(in[t]);
          if (it == bound.end()) return "query of unseen key";
          if (tgt[t] != it->second) return "target is not the latest binding";
        }
        bound[in[t]] = in[t + 1];
      }
      if (supervised != L / 2 - (L / 2 + 1) / 2) return "query count";
      return "";
    }
    case TaskKind::sn_composition: {
      static thread_local std::map<std::size_t, std::vector<std::int32_t>> tables;
      auto& table = tables[s.group_n];
      if (table.empty()) table = composition_table(s.group_n);
      std::int32_t p = 0;
      for (std::size_t t = 0; t < L; ++t) {
        p = table[static_cast<std::size_t>(p) * V + static_cast<std::size_t>(in[t])];
        if (tgt[t] != p) return "composition mismatch at " + std::to_string(t);
      }
      return "";
    }
    case TaskKind::parity: {
      int count = 0;
      for (std::size_t t = 0; t < L; ++t) {
        count += in[t];
        if (tgt[t] != count % 2) return "parity mismatch";
      }
      return "";
    }
    case TaskKind::cycle_nav: {
      int sum = 0;
      for (std::size_t t = 0; t < L; ++t) {
        if (in[t] > 2) return "move token";
        sum += in[t] == 1 ? 1 : in[t] == 2 ? -1 : 0;
        if (t + 1 < L && tgt[t] != kIgnoreTarget) return "non-final slot supervised";
      }
      return tgt[L - 1] == ((sum % 5) + 5) % 5 ? "" : "final position mismatch";
    }
    case TaskKind::mod_arith:
    case TaskKind::mod_arith_brackets: {
      for (std::size_t t = 0; t + 1 < L; ++t)
        if (tgt[t] != kIgnoreTarget) return "non-final slot supervised";
      if (s.kind == TaskKind::mod_arith)
        for (auto x : in)
          if (x == tok::kOpen || x == tok::kClose) return "bracket in flat expression";
      try {
        return arith::evaluate(in) == tgt[L - 1] ? "" : "expression value mismatch";
      } catch (const FormatError& e) {
        return std::string("malformed expression: ") + e.what();
      }
    }
  }
  return "unknown kind";
}

/// Index of the first invalid row and its reason, or rows == dataset.rows if all pass.
inline std::pair<std::size_t, std::string> verify_dataset(const Dataset& d) {
  for (std::size_t r = 0; r < d.rows; ++r) {
    auto why = verify_row(d.spec, d.input_row(r), d.target_row(r));
    if (!why.empty()) return {r, why};
  }
  return {d.rows, ""};
}

// ---------------------------------------------------------------------------
// LRNNDS1 files
//
//   "LRNNDS1\0"          8 bytes
//   u32 version          (1)
//   u32 header_len       bytes of the key=value text block that follows
//   header               "key=value\n" lines
//   u64 rows, u32 row_len
//   u16[rows*row_len]    inputs
//   u16[rows*row_len]    targets, 0xFFFF = ignore
// All integers little-endian.

inline constexpr std::uint16_t kIgnoreMarker = 0xFFFF;

namespace io {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("unexpected end of file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return static_cast<U>(v);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for '" + path + "'");
}

inline std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("header line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
  return h;
}

}  // namespace io

inline std::string task_header(const TaskSpec& s) {
  std::ostringstream h;
  h << "kind=" << to_string(s.kind) << "\nvocab_size=" << s.vocab() << "\nseq_len=" << s.seq_len
    << "\nnum_train=" << s.num_train << "\nnum_test=" << s.num_test << "\ngroup_n=" << s.group_n
    << "\nnum_content=" << s.num_content << "\nseed=" << s.seed << "\n";
  return h.str();
}

inline TaskSpec task_from_header(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(std::string("dataset header lacks '") + k + "'");
    return it->second;
  };
  TaskSpec s;
  s.kind = parse_task_kind(get("kind"));
  s.vocab_size = std::stoull(get("vocab_size"));
  s.seq_len = std::stoull(get("seq_len"));
  s.num_train = std::stoull(get("num_train"));
  s.num_test = std::stoull(get("num_test"));
  s.group_n = std::stoull(get("group_n"));
  s.num_content = std::stoull(get("num_content"));
  s.seed = std::stoull(get("seed"));
  return s;
}

inline std::string serialize_dataset(const Dataset& d) {
  std::string out("LRNNDS1", 7);
  out.push_back('\0');
  io::put_le<std::uint32_t>(out, 1);
  const std::string header = task_header(d.spec) + "split=" + d.split + "\n";
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  io::put_le<std::uint64_t>(out, d.rows);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d.row_len));
  for (auto x : d.inputs) io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(x));
  for (auto x : d.targets)
    io::put_le<std::uint16_t>(out, x == kIgnoreTarget ? kIgnoreMarker : static_cast<std::uint16_t>(x));
  return out;
}

inline Dataset deserialize_dataset(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 8, std::string("LRNNDS1\0", 8)) != 0)
    throw FormatError("not an LRNNDS1 dataset");
  std::size_t pos = 8;
  const auto version = io::get_le<std::uint32_t>(bytes, pos);
  if (version != 1) throw FormatError("unsupported dataset version " + std::to_string(version));
  const auto hlen = io::get_le<std::uint32_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw FormatError("truncated dataset header");
  const auto kv = io::parse_kv(bytes.substr(pos, hlen));
  pos += hlen;
  Dataset d;
  d.spec = task_from_header(kv);
  d.split = kv.count("split") ? kv.at("split") : "";
  d.rows = io::get_le<std::uint64_t>(bytes, pos);
  d.row_len = io::get_le<std::uint32_t>(bytes, pos);
  if (d.row_len != d.spec.row_len()) throw FormatError("dataset row_len disagrees with its header");
  const std::size_t n = d.rows * d.row_len;
  if (bytes.size() - pos != 4 * n) throw FormatError("dataset payload size mismatch");
  d.inputs.resize(n);
  d.targets.resize(n);
  for (auto& x : d.inputs) x = io::get_le<std::uint16_t>(bytes, pos);
  for (auto& x : d.targets) {
    const auto v = io::get_le<std::uint16_t>(bytes, pos);
    x = v == kIgnoreMarker ? kIgnoreTarget : v;
  }
  return d;
}

inline void save_dataset(const std::string& path, const Dataset& d) { io::write_file(path, serialize_dataset(d)); }
inline Dataset load_dataset(const std::string& path) { return deserialize_dataset(io::read_file(path)); }

}  // namespace lrnn
