// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lrnn/analysis.hpp"
#include "lrnn/errors.hpp"
#include "lrnn/tasks.hpp"
#include "lrnn/training.hpp"

namespace lrnn {

/// Flat `key = value` file with one level of `[section]` headers. `#` and `;`
/// start comments. Keys are addressed as "section.key".
class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<config>") {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto where = origin + ":" + std::to_string(lineno);
      if (const auto h = line.find_first_of("#;"); h != std::string::npos) line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw FormatError(where + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (!schema().count(section)) throw SpecError(where + ": unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError(where + ": expected key = value");
      if (section.empty()) throw FormatError(where + ": key outside of a section");
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (!schema().at(section).count(key)) throw SpecError(where + ": unknown key '" + section + "." + key + "'");
      const std::string full = section + "." + key;
      if (c.values_.count(full)) throw SpecError(where + ": duplicate key '" + full + "'");
      c.values_[full] = value;
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw SpecError("cannot read config '" + path + "'");
    std::ostringstream s;
    s << f.rdbuf();
    return parse(s.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string str(const std::string& key, const std::string& def) const {
    const auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }

  std::string str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw SpecError("config: missing required key '" + key + "'");
    return it->second;
  }

  std::uint64_t uint(const std::string& key, std::uint64_t def) const { return has(key) ? uint(key) : def; }
  std::uint64_t uint(const std::string& key) const {
    const auto s = str(key);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
      v = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw SpecError("config: '" + key + "' must be a non-negative integer, got '" + s + "'");
    return v;
  }

  double real(const std::string& key, double def) const { return has(key) ? real(key) : def; }
  double real(const std::string& key) const {
    const auto s = str(key);
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw SpecError("config: '" + key + "' must be a number, got '" + s + "'");
    return v;
  }

  bool flag(const std::string& key, bool def) const {
    if (!has(key)) return def;
    const auto s = str(key);
    if (s == "1" || s == "true" || s == "yes") return true;
    if (s == "0" || s == "false" || s == "no") return false;
    throw SpecError("config: '" + key + "' must be a boolean, got '" + s + "'");
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream in(str(key));
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (item.empty()) throw SpecError("config: empty entry in list '" + key + "'");
      out.push_back(item);
    }
    return out;
  }

  std::vector<std::uint64_t> uint_list(const std::string& key, std::vector<std::uint64_t> def) const {
    if (!has(key)) return def;
    std::vector<std::uint64_t> out;
    for (const auto& s : list(key)) {
      Config tmp;
      tmp.values_[key] = s;
      out.push_back(tmp.uint(key));
    }
    return out;
  }

  std::vector<double> real_list(const std::string& key, std::vector<double> def) const {
    if (!has(key)) return def;
    std::vector<double> out;
    for (const auto& s : list(key)) {
      Config tmp;
      tmp.values_[key] = s;
      out.push_back(tmp.real(key));
    }
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Canonical text (sorted, sectioned); parses back to the same values.
  std::string text() const {
    std::ostringstream s;
    std::string section;
    for (const auto& [k, v] : values_) {
      const auto dot = k.find('.');
      const auto sec = k.substr(0, dot);
      if (sec != section) {
        s << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
        section = sec;
      }
      s << k.substr(dot + 1) << " = " << v << '\n';
    }
    return s.str();
  }

  static const std::map<std::string, std::set<std::string>>& schema() {
    static const std::map<std::string, std::set<std::string>> s{
        {"run", {"seed", "precision", "jobs"}},
        {"task",
         {"kind", "vocab_size", "seq_len", "num_train", "num_test", "group_n", "num_content", "seed"}},
        {"model", {"arch", "m", "H", "norm_fn", "selective", "embed_dim", "mlp_hidden"}},
        {"train",
         {"lr", "lr_grid", "seeds", "seed", "batch", "epochs", "beta1", "beta2", "eps", "weight_decay", "lr_min",
          "early_stop", "grad_clip"}},
        {"sweep", {"grid", "stop_at_perfect"}},
        {"bench", {"arch", "H", "m", "steps", "batch", "repeats", "threads", "warmup"}},
        {"spectrum", {"checkpoint", "probes", "sample_steps"}},
        {"eval", {"checkpoint"}},
        {"flops", {"arch", "H", "m", "N", "S", "N_h", "r", "H_n"}},
    };
    return s;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

/// Root seed; task and train seeds default to it.
inline std::uint64_t root_seed(const Config& c) { return c.uint("run.seed", 0); }

inline TaskSpec task_from_config(const Config& c) {
  TaskSpec s;
  s.kind = parse_task_kind(c.str("task.kind"));
  s.vocab_size = c.uint("task.vocab_size", 0);
  s.seq_len = c.uint("task.seq_len", s.seq_len);
  s.num_train = c.uint("task.num_train", s.num_train);
  s.num_test = c.uint("task.num_test", s.num_test);
  s.group_n = c.uint("task.group_n", s.group_n);
  s.num_content = c.uint("task.num_content", s.num_content);
  s.seed = c.uint("task.seed", root_seed(c));
  s.validate();
  return s;
}

inline ModelConfig model_from_config(const Config& c) {
  ModelConfig m;
  m.layer.kind = parse_arch(c.str("model.arch", "bdlru"));
  m.layer.m = c.uint("model.m", 2);
  m.layer.H = c.uint("model.H", 64);
  m.layer.norm = parse_norm(c.str("model.norm_fn", "softmax"));
  m.layer.selective = c.flag("model.selective", true);
  m.embed_dim = c.uint("model.embed_dim", 64);
  m.layer.input_dim = m.embed_dim;
  m.mlp_hidden = c.uint("model.mlp_hidden", 0);
  return m;
}

inline TrainConfig train_from_config(const Config& c) {
  TrainConfig t;
  t.lr = c.real("train.lr", t.lr);
  t.lr_grid = c.real_list("train.lr_grid", t.lr_grid);
  t.seeds = c.uint("train.seeds", t.seeds);
  t.seed = c.uint("train.seed", root_seed(c));
  t.batch = c.uint("train.batch", t.batch);
  // 100 epochs for MAD tasks, 200 for state tracking
  const bool mad = c.has("task.kind") && per_token_metric(parse_task_kind(c.str("task.kind")));
  t.epochs = c.uint("train.epochs", mad ? 100 : t.epochs);
  t.adamw.beta1 = c.real("train.beta1", t.adamw.beta1);
  t.adamw.beta2 = c.real("train.beta2", t.adamw.beta2);
  t.adamw.eps = c.real("train.eps", t.adamw.eps);
  t.adamw.weight_decay = c.real("train.weight_decay", t.adamw.weight_decay);
  t.lr_min = c.real("train.lr_min", t.lr_min);
  t.early_stop = c.flag("train.early_stop", t.early_stop);
  t.grad_clip = c.real("train.grad_clip", t.grad_clip);
  t.jobs = c.uint("run.jobs", 1);
  if (t.batch == 0) throw SpecError("train.batch must be >= 1");
  if (t.seeds == 0) throw SpecError("train.seeds must be >= 1");
  if (t.lr_grid.empty()) throw SpecError("train.lr_grid must not be empty");
  return t;
}

/// Task grid for a sweep. "single" is the [task] spec alone; "mad" is the base
/// spec plus its three variations (vocab doubled, length doubled, 10k train rows).
inline std::vector<TaskSpec> sweep_grid(const Config& c) {
  const TaskSpec base = task_from_config(c);
  const std::string grid = c.str("sweep.grid", "single");
  if (grid == "single") return {base};
  if (grid != "mad") throw SpecError("sweep.grid must be 'single' or 'mad', got '" + grid + "'");
  TaskSpec v = base, l = base, n = base;
  v.vocab_size = base.vocab() * 2;
  l.seq_len = base.seq_len * 2;
  n.num_train = 10000;
  for (auto* s : {&v, &l, &n}) s->validate();
  return {base, v, l, n};
}

inline FlopDescriptor flops_from_config(const Config& c) {
  FlopDescriptor d;
  d.arch = parse_flop_arch(c.str("flops.arch"));
  auto opt = [&](const char* k) -> std::optional<std::uint64_t> {
    const std::string key = std::string("flops.") + k;
    if (!c.has(key)) return std::nullopt;
    return c.uint(key);
  };
  d.H = opt("H");
  d.m = opt("m");
  d.N = opt("N");
  d.S = opt("S");
  d.N_h = opt("N_h");
  d.r = opt("r");
  d.H_n = opt("H_n");
  return d;
}

}  // namespace lrnn
