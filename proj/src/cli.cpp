#include "edit/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "edit/checkpoint.hpp"
#include "edit/config.hpp"

namespace edit::cli {

namespace {

namespace fs = std::filesystem;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw model::IoError("cannot write " + path.string());
  return os;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw model::IoError("cannot create " + dir.string() + ": " + ec.message());
}

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> checkpoint;
  std::optional<long long> n;
  std::string mode = "elastic";
  std::string corrupt_rule;
};

RunConfig effective(const Options& o) {
  RunConfig cfg = o.config_path.empty() ? parse_config("{}") : load_config(o.config_path);
  if (o.seed) cfg.seed = cfg.train.seed = *o.seed;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.checkpoint) cfg.checkpoint = *o.checkpoint;
  if (o.n) {
    if (*o.n < 1) throw ConfigError("n", "must be >= 1");
    cfg.n_samples = static_cast<std::size_t>(*o.n);
  }
  cfg.infer.tau = cfg.train.elastic.tau;
  return cfg;
}

void write_sample_row(std::ostream& os, const Tensor& x) {
  for (std::size_t i = 0; i < x.size(); ++i) os << (i ? "," : "") << num(x[i]);
  os << '\n';
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  ensure_dir(cfg.out_dir);
  const fs::path dir(cfg.out_dir);
  open_out(dir / "config.json") << dump_config(cfg);
  auto log = open_out(dir / "snapshots.ndjson");
  const auto res = train::train(cfg.train, [&](const train::TrainSnapshot& s) {
    log << train::snapshot_json(s) << '\n';
    log.flush();
  });
  if (!log) throw model::IoError("failed writing snapshot log");
  model::save_checkpoint(cfg.checkpoint_path(), res.params, cfg.train.model);
  const auto& last = res.log.back();
  out << "trained " << cfg.train.steps << " steps: perf " << last.perf << ", p_bar " << last.p_bar << ", r_bar "
      << last.r_bar << "\ncheckpoint " << cfg.checkpoint_path().string() << '\n';
  return kOk;
}

int cmd_sample(const RunConfig& cfg, const std::string& mode, std::ostream& out) {
  if (mode != "dense" && mode != "elastic") throw ConfigError("mode", "must be dense or elastic");
  const auto ck = model::load_checkpoint(cfg.checkpoint_path());
  ensure_dir(cfg.out_dir);
  const fs::path dir(cfg.out_dir);
  auto samples = open_out(dir / "samples.csv");
  const infer::ModelBackend backend(ck.params, ck.config);
  const auto fm = metrics::FlopModel::from(ck.config);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    const std::uint64_t seed = infer::trajectory_seed(cfg.seed, i);
    if (mode == "dense") {
      const Tensor x = flow::euler_sample(
          [&](const Tensor& x, double t) { return model::model_forward_dense(x, t, ck.params, ck.config); },
          ck.config.tokens, ck.config.dim, cfg.infer.steps, seed);
      write_sample_row(samples, x);
    } else {
      const auto d = infer::denoise_full(seed, cfg.infer, backend, fm);
      write_sample_row(samples, d.sample);
      auto trace = open_out(dir / ("trace_" + std::to_string(i) + ".csv"));
      metrics::write_trace_csv(trace, d.trace);
    }
  }
  if (!samples) throw model::IoError("failed writing samples.csv");
  out << "wrote " << cfg.n_samples << ' ' << mode << " samples to " << (dir / "samples.csv").string() << '\n';
  return kOk;
}

struct BenchRow {
  std::string name;
  infer::InferenceConfig infer;
  double flop_ratio = 0.0, energy_distance = 0.0, skip_rate = 0.0, reuse_rate = 0.0;
};

int cmd_bench(const RunConfig& cfg, std::ostream& out) {
  const auto ck = model::load_checkpoint(cfg.checkpoint_path());
  std::vector<BenchRow> rows;
  auto add = [&](std::string name, infer::InferenceConfig ic) { rows.push_back({std::move(name), ic}); };
  infer::InferenceConfig base = cfg.infer;
  base.dense_override = false;
  infer::InferenceConfig c = base;
  c.dense_override = true;
  add("dense", c);
  c = base;
  c.adaptive_width = false;
  c.delta_margin = 0.0;
  c.max_reuse = 0;
  add("skip", c);
  c.adaptive_width = true;
  add("skip+width", c);
  add("skip+width+cache", base);
  for (double d : cfg.bench_deltas)
    for (int k : cfg.bench_max_reuse) {
      c = base;
      c.delta_margin = d;
      c.max_reuse = k;
      std::ostringstream name;
      name << "delta=" << d << ";K=" << k;
      add(name.str(), c);
    }

  train::EvalConfig ec;
  ec.n_samples = cfg.n_samples;
  ec.data_samples = cfg.eval_samples;
  ec.seed = cfg.seed;
  for (auto& r : rows) {
    ec.infer = r.infer;
    const auto rep = train::evaluate(ck.params, ck.config, cfg.train.data, ec);
    r.flop_ratio = rep.flop_ratio;
    r.energy_distance = rep.energy_distance;
    r.skip_rate = rep.rates.skip;
    r.reuse_rate = rep.rates.reuse;
  }

  ensure_dir(cfg.out_dir);
  const fs::path dir(cfg.out_dir);
  auto bench = open_out(dir / "bench.csv");
  auto detail = open_out(dir / "bench_detail.csv");
  bench << "config,flop_ratio,energy_distance\n";
  detail << "config,delta_margin,max_reuse,adaptive_width,dense_override,skip_rate,reuse_rate,flop_ratio,energy_distance\n";
  for (const auto& r : rows) {
    bench << r.name << ',' << num(r.flop_ratio) << ',' << num(r.energy_distance) << '\n';
    detail << r.name << ',' << num(r.infer.delta_margin) << ',' << r.infer.max_reuse << ',' << r.infer.adaptive_width
           << ',' << r.infer.dense_override << ',' << num(r.skip_rate) << ',' << num(r.reuse_rate) << ','
           << num(r.flop_ratio) << ',' << num(r.energy_distance) << '\n';
  }
  if (!bench || !detail) throw model::IoError("failed writing bench output");
  out << "wrote " << rows.size() << " bench rows to " << (dir / "bench.csv").string() << '\n';
  return kOk;
}

int cmd_trace(const RunConfig& cfg, std::ostream& out) {
  const auto ck = model::load_checkpoint(cfg.checkpoint_path());
  ensure_dir(cfg.out_dir);
  const fs::path dir(cfg.out_dir);
  const infer::ModelBackend backend(ck.params, ck.config);
  const auto fm = metrics::FlopModel::from(ck.config);
  std::vector<TraceRecord> all;
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    const auto d = infer::denoise_full(infer::trajectory_seed(cfg.seed, i), cfg.infer, backend, fm);
    auto grid = open_out(dir / ("prob_grid_" + std::to_string(i) + ".csv"));
    metrics::write_prob_grid_csv(grid, d.trace);
    all.insert(all.end(), d.trace.begin(), d.trace.end());
  }
  auto summary = open_out(dir / "summary.csv");
  metrics::write_summary_csv(summary, metrics::trace_summary(all));
  if (!summary) throw model::IoError("failed writing summary.csv");
  out << "wrote " << cfg.n_samples << " probability grids and summary.csv to " << dir.string() << '\n';
  return kOk;
}

int cmd_gradcheck(const RunConfig& cfg, const std::string& corrupt_rule, std::ostream& out) {
  std::optional<ad::ScopedRuleFault> fault;
  if (!corrupt_rule.empty()) fault.emplace(corrupt_rule, 1.5);
  const auto r = train::model_grad_check(cfg.train.model, cfg.train.elastic, cfg.gradcheck);
  const bool pass = r.max_rel_err < 1e-4;
  out << "max_rel_err " << r.max_rel_err << " (" << (pass ? "pass" : "FAIL") << ", limit 1e-4)\n"
      << "worst " << r.worst_param << " seed " << r.worst_seed << " analytic " << num(r.worst_analytic) << " numeric "
      << num(r.worst_numeric) << '\n'
      << "checked " << r.checked << " excluded " << r.excluded << " surrogate_affected " << r.surrogate_affected << '\n';
  return pass ? kOk : kCheckFailed;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Toy diffusion transformer with routed block skipping, caching and adaptive MLP width"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "JSON config file");
  app.add_option("--seed", o.seed, "Run seed");
  app.add_option("--out", o.out_dir, "Output directory");

  auto* train_cmd = app.add_subcommand("train", "Warm up and jointly train a model");
  auto* sample_cmd = app.add_subcommand("sample", "Draw samples from a checkpoint");
  auto* bench_cmd = app.add_subcommand("bench", "Sweep caching and width settings");
  auto* trace_cmd = app.add_subcommand("trace", "Export router probability grids");
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the training loss");
  for (auto* sc : {sample_cmd, bench_cmd, trace_cmd}) sc->add_option("--checkpoint", o.checkpoint, "Checkpoint path");
  for (auto* sc : {sample_cmd, trace_cmd}) sc->add_option("--n", o.n, "Number of trajectories");
  sample_cmd->add_option("--mode", o.mode, "dense or elastic");
  grad_cmd->add_option("--corrupt-rule", o.corrupt_rule)->group("");
  (void)train_cmd;

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    const RunConfig cfg = effective(o);
    if (app.got_subcommand(train_cmd)) return cmd_train(cfg, out);
    if (app.got_subcommand(sample_cmd)) return cmd_sample(cfg, o.mode, out);
    if (app.got_subcommand(bench_cmd)) return cmd_bench(cfg, out);
    if (app.got_subcommand(trace_cmd)) return cmd_trace(cfg, out);
    return cmd_gradcheck(cfg, o.corrupt_rule, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const train::NumericAbort& e) {
    err << "numeric abort: " << e.what() << '\n';
    return kNumericAbort;
  } catch (const model::IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  }
}

}  // namespace edit::cli
