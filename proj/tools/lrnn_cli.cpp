// SPDX-License-Identifier: Apache-2.0
// Command-line driver: dataset generation, training, sweeps, evaluation,
// scan benchmarks, spectra and FLOP counts.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "lrnn/lrnn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lrnn;

namespace {

struct Options {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  std::optional<std::uint64_t> jobs;
  bool force = false;
};

/// User-facing failure: exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Config load_config(const Options& o, bool required = true) {
  Config c;
  if (!o.config.empty())
    c = Config::load(o.config);
  else if (required)
    throw UsageError("--config is required for this command");
  if (o.seed) c.set("run.seed", std::to_string(*o.seed));
  if (o.precision) c.set("run.precision", *o.precision);
  if (o.jobs) c.set("run.jobs", std::to_string(*o.jobs));
  return c;
}

bool use_f64(const Config& c) {
  const auto p = c.str("run.precision", "f32");
  if (p != "f32" && p != "f64") throw SpecError("run.precision must be f32 or f64, got '" + p + "'");
  return p == "f64";
}

fs::path out_dir(const Options& o) {
  fs::path d(o.out);
  fs::create_directories(d);
  return d;
}

void refuse_overwrite(const std::vector<fs::path>& paths, bool force) {
  if (force) return;
  for (const auto& p : paths)
    if (fs::exists(p)) throw UsageError("refusing to overwrite " + p.string() + " (use --force)");
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

json task_json(const TaskSpec& s) {
  return {{"kind", to_string(s.kind)}, {"vocab_size", s.vocab()},   {"seq_len", s.seq_len},
          {"num_train", s.num_train},  {"num_test", s.num_test},    {"group_n", s.group_n},
          {"num_content", s.num_content}, {"seed", s.seed}};
}

// ---------------------------------------------------------------------------

int cmd_gen(const Options& o) {
  const Config c = load_config(o);
  const TaskSpec spec = task_from_config(c);
  const auto dir = out_dir(o);
  const fs::path train = dir / "train.lrnnds", test = dir / "test.lrnnds", manifest = dir / "manifest.json";
  refuse_overwrite({train, test, manifest}, o.force);
  const auto data = generate(spec);
  const auto tb = serialize_dataset(data.train), sb = serialize_dataset(data.test);
  io::write_file(train.string(), tb);
  io::write_file(test.string(), sb);
  json m;
  m["root_seed"] = root_seed(c);
  m["task"] = task_json(spec);
  m["config"] = c.text();
  m["files"] = json::array({
      {{"split", "train"}, {"path", "train.lrnnds"}, {"rows", data.train.rows}, {"row_len", data.train.row_len},
       {"bytes", tb.size()}, {"fnv1a64", hex64(io::fnv1a(tb))}},
      {{"split", "test"}, {"path", "test.lrnnds"}, {"rows", data.test.rows}, {"row_len", data.test.row_len},
       {"bytes", sb.size()}, {"fnv1a64", hex64(io::fnv1a(sb))}},
  });
  write_text(manifest, m.dump(2) + "\n");
  std::cout << "wrote " << data.train.rows << " train and " << data.test.rows << " test rows to " << dir.string()
            << "\n";
  return 0;
}

template <typename T>
int train_impl(const Options& o, const Config& c) {
  const TaskSpec spec = task_from_config(c);
  const ModelConfig mcfg = model_from_config(c);
  const TrainConfig tcfg = train_from_config(c);
  const auto dir = out_dir(o);
  const fs::path report = dir / "report.json", curve = dir / "epochs.csv", ckpt = dir / "checkpoint.bdlru";
  refuse_overwrite({report, curve, ckpt}, o.force);
  const auto data = generate(spec);
  auto run = train_run<T>(mcfg, tcfg, data.train, data.test);
  json j = to_json(run.report);
  j["root_seed"] = root_seed(c);
  j["task_spec"] = task_json(spec);
  j["config"] = c.text();
  write_text(report, j.dump(2) + "\n");
  std::ostringstream csv;
  csv << "epoch,train_loss,test_acc\n";
  for (const auto& e : run.report.epochs) csv << e.epoch << ',' << e.train_loss << ',' << e.test_acc << '\n';
  write_text(curve, csv.str());
  if (run.report.epochs.size() > 1) {
    std::ostringstream extra;
    extra << task_header(spec) << "best_test_acc=" << std::setprecision(17) << run.report.best_test_acc
          << "\nbest_epoch=" << run.report.best_epoch << "\nprecision=" << precision_name<T>() << "\n";
    save_checkpoint(ckpt.string(), run.best, extra.str());
  } else if (fs::exists(ckpt)) {
    fs::remove(ckpt);
  }
  std::cout << "best_test_acc " << run.report.best_test_acc << " at epoch " << run.report.best_epoch
            << (run.report.failed ? " (run failed: " + run.report.failure + ")" : "") << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const Config c = load_config(o);
  return use_f64(c) ? train_impl<double>(o, c) : train_impl<float>(o, c);
}

template <typename T>
int sweep_impl(const Options& o, const Config& c) {
  const auto grid = sweep_grid(c);
  const ModelConfig mcfg = model_from_config(c);
  const TrainConfig tcfg = train_from_config(c);
  const auto dir = out_dir(o);
  const fs::path rows = dir / "sweep.csv", summary = dir / "sweep_summary.json", reports = dir / "reports.jsonl";
  refuse_overwrite({rows, summary, reports}, o.force);
  std::vector<DatasetPair> data;
  for (const auto& s : grid) data.push_back(generate(s));
  SweepOptions opt;
  opt.stop_at_perfect = c.flag("sweep.stop_at_perfect", false);
  opt.on_run = [](const SweepRow& r) {
    std::cerr << "config " << r.config_index << " lr " << r.lr << " seed " << r.seed << " best " << r.best_test_acc
              << (r.failed ? " FAILED" : "") << "\n";
  };
  const auto s = sweep<T>(mcfg, tcfg, data, opt);
  std::ostringstream csv;
  write_sweep_csv(csv, s);
  write_text(rows, csv.str());
  std::ostringstream jl;
  for (const auto& r : s.reports) jl << to_json(r).dump() << '\n';
  write_text(reports, jl.str());
  json j;
  j["root_seed"] = root_seed(c);
  j["config"] = c.text();
  j["tasks"] = json::array();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double b = s.best_per_config[i];
    j["tasks"].push_back({{"task", task_json(grid[i])}, {"best_test_acc", std::isnan(b) ? json(nullptr) : json(b)}});
  }
  j["mean_best_test_acc"] = std::isnan(s.mean_best) ? json(nullptr) : json(s.mean_best);
  write_text(summary, j.dump(2) + "\n");
  std::cout << "mean best test accuracy " << s.mean_best << " over " << grid.size() << " config(s)\n";
  return 0;
}

int cmd_sweep(const Options& o) {
  const Config c = load_config(o);
  return use_f64(c) ? sweep_impl<double>(o, c) : sweep_impl<float>(o, c);
}

template <typename T>
int eval_impl(const std::string& path, const Config& c, bool have_task) {
  std::map<std::string, std::string> header;
  const auto model = load_checkpoint<T>(path, &header);
  const TaskSpec spec = have_task ? task_from_config(c) : task_from_header(header);
  const auto data = generate(spec);
  if (model.cfg.vocab != spec.vocab()) throw UsageError("checkpoint vocab does not match the task");
  const double acc = evaluate(model, data.test);
  json j{{"checkpoint", path}, {"task", task_json(spec)}, {"test_acc", acc}};
  if (header.count("best_test_acc")) j["logged_test_acc"] = std::stod(header.at("best_test_acc"));
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_eval(const Options& o, const std::string& ckpt_flag) {
  const Config c = load_config(o, false);
  const std::string path = !ckpt_flag.empty() ? ckpt_flag : c.str("eval.checkpoint", "");
  if (path.empty()) throw UsageError("eval needs --checkpoint or eval.checkpoint");
  return use_f64(c) ? eval_impl<double>(path, c, c.has("task.kind")) : eval_impl<float>(path, c, c.has("task.kind"));
}

int cmd_scan_bench(const Options& o) {
  const Config c = load_config(o);
  const auto dir = out_dir(o);
  const fs::path csv = dir / "scan_bench.csv";
  refuse_overwrite({csv}, o.force);
  LayerConfig cfg;
  cfg.kind = parse_arch(c.str("bench.arch", "bdlru"));
  const auto Hs = c.uint_list("bench.H", {128});
  const auto ms = c.uint_list("bench.m", {1, 2, 4});
  const auto steps = c.uint("bench.steps", 2048), batch = c.uint("bench.batch", 8);
  const auto repeats = c.uint("bench.repeats", 20), warmup = c.uint("bench.warmup", 1);
  const auto threads = c.uint("bench.threads", std::max(1u, std::thread::hardware_concurrency()));
  const bool f64 = use_f64(c);
  std::vector<ScanBenchRecord> rows;
  for (auto H : Hs)
    for (auto m : ms) {
      cfg.H = H;
      cfg.m = m;
      const auto r = f64 ? bench_scan<double>(cfg, steps, batch, repeats, threads, warmup, root_seed(c))
                         : bench_scan<float>(cfg, steps, batch, repeats, threads, warmup, root_seed(c));
      rows.insert(rows.end(), r.begin(), r.end());
    }
  std::ostringstream s;
  write_scan_bench_csv(s, rows);
  write_text(csv, s.str());
  std::cout << s.str();
  return 0;
}

template <typename T>
int spectrum_impl(const Options& o, const Config& c, const std::string& path) {
  std::map<std::string, std::string> header;
  const auto model = load_checkpoint<T>(path, &header);
  const TaskSpec spec = c.has("task.kind") ? task_from_config(c) : task_from_header(header);
  const auto data = generate(spec);
  const auto r = spectrum_report(model, data.test, c.uint("spectrum.probes", 64), c.uint("spectrum.sample_steps", 8));
  const auto dir = out_dir(o);
  const fs::path js = dir / "spectrum.json", csv = dir / "spectrum.csv";
  refuse_overwrite({js, csv}, o.force);
  json j = to_json(r);
  j["checkpoint"] = path;
  j["task"] = task_json(spec);
  write_text(js, j.dump(2) + "\n");
  std::ostringstream s;
  write_spectrum_csv(s, r);
  write_text(csv, s.str());
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_spectrum(const Options& o, const std::string& ckpt_flag) {
  const Config c = load_config(o, false);
  const std::string path = !ckpt_flag.empty() ? ckpt_flag : c.str("spectrum.checkpoint", "");
  if (path.empty()) throw UsageError("spectrum needs --checkpoint or spectrum.checkpoint");
  return use_f64(c) ? spectrum_impl<double>(o, c, path) : spectrum_impl<float>(o, c, path);
}

int cmd_flops(const Options& o, const std::map<std::string, std::string>& inline_symbols) {
  Config c = load_config(o, false);
  for (const auto& [k, v] : inline_symbols) c.set("flops." + k, v);
  const auto d = flops_from_config(c);
  const auto n = flops_per_step(d);
  std::cout << n << "\n";
  if (o.out != ".") {
    const auto dir = out_dir(o);
    const fs::path js = dir / "flops.json";
    refuse_overwrite({js}, o.force);
    write_text(js, to_json(d).dump(2) + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-diagonal and higher-order linear recurrent units: data, training and analysis"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Config file (sections: run, task, model, train, sweep, bench, ...)");
    sub->add_option("--out", o.out, "Output directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "Root seed override");
    sub->add_option("--precision", o.precision, "Floating point precision")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--jobs", o.jobs, "Batch shards per training step")->check(CLI::PositiveNumber);
    sub->add_flag("--force", o.force, "Overwrite existing outputs");
  };
  auto* gen = app.add_subcommand("gen", "Generate train/test dataset files and a manifest");
  auto* train = app.add_subcommand("train", "Train one model; writes report, curve and best checkpoint");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its task's test split");
  auto* sweep = app.add_subcommand("sweep", "Learning-rate x seed sweep over a task grid");
  auto* bench = app.add_subcommand("scan-bench", "Time sequential vs parallel scan");
  auto* spectrum = app.add_subcommand("spectrum", "Eigenvalue spectra of a checkpoint's transition blocks");
  auto* flops = app.add_subcommand("flops", "FLOPs per recurrent state update");
  for (auto* s : {gen, train, eval, sweep, bench, spectrum, flops}) common(s);
  std::string ckpt;
  eval->add_option("--checkpoint", ckpt, "Checkpoint file");
  spectrum->add_option("--checkpoint", ckpt, "Checkpoint file");
  std::string f_arch;
  std::map<std::string, std::uint64_t> f_sym;
  flops->add_option("--arch", f_arch, "hlru, bdlru, lstm, mamba2, deltanet, deltaproduct4");
  for (const char* k : {"H", "m", "N", "S", "N_h", "r", "H_n"})
    flops->add_option(std::string("--") + k, f_sym[k], std::string("Symbol ") + k);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    if (*gen) return cmd_gen(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o, ckpt);
    if (*sweep) return cmd_sweep(o);
    if (*bench) return cmd_scan_bench(o);
    if (*spectrum) return cmd_spectrum(o, ckpt);
    if (*flops) {
      std::map<std::string, std::string> sym;
      if (!f_arch.empty()) sym["arch"] = f_arch;
      for (const auto& [k, v] : f_sym)
        if (flops->count(std::string("--") + k)) sym[k] = std::to_string(v);
      return cmd_flops(o, sym);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const SpecError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
