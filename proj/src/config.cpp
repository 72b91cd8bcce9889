#include "edit/config.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <type_traits>

#include "edit/checkpoint.hpp"

namespace edit::cli {

namespace {

using nlohmann::json;

template <class C, class F>
void for_each_field(C& c, F&& f) {
  f("seed", c.seed);
  f("out_dir", c.out_dir);
  f("checkpoint", c.checkpoint);
  auto& m = c.train.model;
  f("n_blocks", m.n_blocks);
  f("dim", m.dim);
  f("width_factor", m.width_factor);
  f("router_hidden", m.router_hidden);
  f("n_heads", m.n_heads);
  f("tokens", m.tokens);
  f("t_max", m.t_max);
  f("modes", c.train.data.modes);
  f("data_scale", c.train.data.scale);
  f("data_seed", c.train.data.seed);
  f("steps", c.train.steps);
  f("warmup_fraction", c.train.warmup_fraction);
  f("batch_size", c.train.batch_size);
  f("learning_rate", c.train.adam.learning_rate);
  f("beta1", c.train.adam.beta1);
  f("beta2", c.train.adam.beta2);
  f("adam_eps", c.train.adam.eps);
  f("grad_clip", c.train.grad_clip);
  f("eval_every", c.train.eval_every);
  f("eval_batches", c.train.eval_batches);
  f("router_init", c.train.router_init);
  f("tau", c.train.elastic.tau);
  f("rho_g", c.train.elastic.rho_g);
  f("rho_w", c.train.elastic.rho_w);
  f("lambda", c.train.elastic.lambda);
  f("delta_margin", c.infer.delta_margin);
  f("max_reuse", c.infer.max_reuse);
  f("sample_steps", c.infer.steps);
  f("dense_override", c.infer.dense_override);
  f("adaptive_width", c.infer.adaptive_width);
  f("n_samples", c.n_samples);
  f("eval_samples", c.eval_samples);
  f("bench_deltas", c.bench_deltas);
  f("bench_max_reuse", c.bench_max_reuse);
  f("gradcheck_coords", c.gradcheck.coords_per_seed);
  f("gradcheck_seeds", c.gradcheck.seeds);
  f("gradcheck_batch", c.gradcheck.batch);
  f("gradcheck_h", c.gradcheck.h);
}

template <class T>
void read(const std::string& key, const json& j, T& out) {
  auto fail = [&](const char* want) { throw ConfigError(key, std::string("expected ") + want + ", got " + j.dump()); };
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) fail("a boolean");
    out = j.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) fail("a string");
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, train::RouterInit>) {
    if (j == "full")
      out = train::RouterInit::Full;
    else if (j == "random")
      out = train::RouterInit::Random;
    else
      fail("\"full\" or \"random\"");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) fail("a number");
    out = j.get<T>();
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!j.is_number_unsigned()) fail("a non-negative integer");
    out = j.get<T>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) fail("an integer");
    out = j.get<T>();
  } else {
    if (!j.is_array()) fail("an array");
    out.clear();
    for (const auto& e : j) {
      typename T::value_type v{};
      read(key, e, v);
      out.push_back(v);
    }
  }
}

template <class T>
json write(const T& v) {
  if constexpr (std::is_same_v<T, train::RouterInit>)
    return v == train::RouterInit::Full ? "full" : "random";
  else
    return v;
}

// Maps a validation message onto the config key it concerns.
void check(const std::string& key, auto&& fn) {
  try {
    fn();
  } catch (const DomainError& e) {
    throw ConfigError(key, e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  const auto& m = train.model;
  check("n_blocks", [&] { if (m.n_blocks < 1) throw DomainError("must be >= 1"); });
  check("dim", [&] { if (m.dim < 2 || m.dim % 2) throw DomainError("must be an even number >= 2"); });
  check("width_factor", [&] { if (m.hidden() % 4) throw DomainError("width_factor*dim must be divisible by 4"); });
  check("n_heads", [&] { if (m.n_heads < 1 || m.dim % m.n_heads) throw DomainError("must divide dim"); });
  check("router_hidden", [&] { if (m.router_hidden < 1 || m.router_hidden >= m.dim) throw DomainError("must lie in [1, dim)"); });
  check("tokens", [&] { if (m.tokens < 1) throw DomainError("must be >= 1"); });
  check("t_max", [&] { if (!(m.t_max > 0)) throw DomainError("must be > 0"); });
  check("modes", [&] { if (train.data.modes < 1) throw DomainError("must be >= 1"); });
  check("data_scale", [&] { if (!(train.data.scale >= 0)) throw DomainError("must be >= 0"); });
  check("steps", [&] { if (train.steps < 1) throw DomainError("must be >= 1"); });
  check("warmup_fraction", [&] { if (!(train.warmup_fraction >= 0 && train.warmup_fraction < 1)) throw DomainError("must lie in [0,1)"); });
  check("batch_size", [&] { if (train.batch_size < 1) throw DomainError("must be >= 1"); });
  check("learning_rate", [&] { if (!(train.adam.learning_rate > 0)) throw DomainError("must be > 0"); });
  check("beta1", [&] { if (!(train.adam.beta1 >= 0 && train.adam.beta1 < 1)) throw DomainError("must lie in [0,1)"); });
  check("beta2", [&] { if (!(train.adam.beta2 >= 0 && train.adam.beta2 < 1)) throw DomainError("must lie in [0,1)"); });
  check("adam_eps", [&] { if (!(train.adam.eps > 0)) throw DomainError("must be > 0"); });
  check("grad_clip", [&] { if (!(train.grad_clip > 0)) throw DomainError("must be > 0"); });
  check("eval_every", [&] { if (train.eval_every < 0) throw DomainError("must be >= 0"); });
  check("eval_batches", [&] { if (train.eval_batches < 1) throw DomainError("must be >= 1"); });
  const auto& e = train.elastic;
  check("tau", [&] { if (!(e.tau > 0 && e.tau < 1)) throw DomainError("must lie in (0,1)"); });
  check("rho_g", [&] { if (!(e.rho_g > 0 && e.rho_g < 1)) throw DomainError("must lie in (0,1)"); });
  check("rho_w", [&] { if (!(e.rho_w > 0 && e.rho_w < 1)) throw DomainError("must lie in (0,1)"); });
  check("lambda", [&] { if (!(e.lambda >= 0)) throw DomainError("must be >= 0"); });
  check("delta_margin", [&] {
    if (!(infer.delta_margin >= 0 && e.tau + infer.delta_margin < 1)) throw DomainError("need 0 <= delta_margin < 1 - tau");
  });
  check("max_reuse", [&] { if (infer.max_reuse < 0) throw DomainError("must be >= 0"); });
  check("sample_steps", [&] { if (infer.steps < 1) throw DomainError("must be >= 1"); });
  check("n_samples", [&] { if (n_samples < 1) throw DomainError("must be >= 1"); });
  check("eval_samples", [&] { if (eval_samples < 1) throw DomainError("must be >= 1"); });
  check("bench_deltas", [&] {
    if (bench_deltas.empty()) throw DomainError("must not be empty");
    for (double d : bench_deltas)
      if (!(d >= 0 && e.tau + d < 1)) throw DomainError("every entry needs 0 <= delta < 1 - tau");
  });
  check("bench_max_reuse", [&] {
    if (bench_max_reuse.empty()) throw DomainError("must not be empty");
    for (int k : bench_max_reuse)
      if (k < 0) throw DomainError("entries must be >= 0");
  });
  check("gradcheck_coords", [&] { if (gradcheck.coords_per_seed < 2) throw DomainError("must be >= 2"); });
  check("gradcheck_seeds", [&] { if (gradcheck.seeds.empty()) throw DomainError("must not be empty"); });
  check("gradcheck_batch", [&] { if (gradcheck.batch < 1) throw DomainError("must be >= 1"); });
  check("gradcheck_h", [&] { if (!(gradcheck.h >= 1e-7 && gradcheck.h <= 1e-4)) throw DomainError("must lie in [1e-7, 1e-4]"); });
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? std::filesystem::path(out_dir) / "model.ckpt" : std::filesystem::path(checkpoint);
}

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<document>", std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("<document>", "top level must be an object");
  RunConfig cfg;
  std::vector<std::string> known;
  for_each_field(cfg, [&](const char* key, auto& field) {
    known.emplace_back(key);
    if (auto it = j.find(key); it != j.end()) read(key, *it, field);
  });
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError(key, "unknown key");
  cfg.train.seed = cfg.seed;
  cfg.infer.tau = cfg.train.elastic.tau;
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw model::IoError("cannot read config: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& cfg) {
  json j = json::object();
  for_each_field(cfg, [&](const char* key, const auto& field) { j[key] = write(field); });
  return j.dump(2) + "\n";
}

}  // namespace edit::cli
