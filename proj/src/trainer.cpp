#include "edit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "edit/kernels.hpp"

namespace edit::train {

namespace {

// Independent generator for one purpose of one run.
flow::Rng stream(std::uint64_t seed, std::uint32_t purpose) {
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), purpose};
  return flow::Rng(ss);
}

enum Stream : std::uint32_t { kWarmupData = 1, kRouterInit = 2, kJointData = 3, kHeldOut = 4, kCheckData = 5,
                              kCheckCoords = 6, kReference = 7 };

struct Batch {
  Tensor xt, x0, x1;
  std::vector<double> ts;
};

Batch make_batch(const flow::GaussianMixture& mix, std::size_t size, flow::Rng& rng) {
  const auto samples = flow::gen_batch(mix, size, rng);
  std::vector<Tensor> xt, x0, x1;
  Batch b;
  for (const auto& s : samples) {
    xt.push_back(flow::trajectory_point(s));
    x0.push_back(s.x0);
    x1.push_back(s.x1);
    b.ts.push_back(s.t);
  }
  b.xt = model::stack_rows(xt);
  b.x0 = model::stack_rows(x0);
  b.x1 = model::stack_rows(x1);
  return b;
}

flow::SynthConfig data_for(const TrainConfig& cfg) {
  flow::SynthConfig d = cfg.data;
  d.tokens = cfg.model.tokens;
  d.dim = cfg.model.dim;
  return d;
}

std::vector<Batch> held_out(const TrainConfig& cfg) {
  const flow::GaussianMixture mix(data_for(cfg));
  auto rng = stream(cfg.seed, kHeldOut);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < cfg.eval_batches; ++i) out.push_back(make_batch(mix, cfg.batch_size, rng));
  return out;
}

template <class F>
auto guarded(const std::string& term, F&& f) {
  try {
    return f();
  } catch (const DomainError& e) {
    throw NumericAbort("non-finite " + term + ": " + e.what());
  }
}

std::vector<double> gather_grads(const ad::Tape& tape, const model::ParamVars& pv) {
  std::vector<double> g;
  model::for_each_param(pv, [&](const std::string&, const ad::Var& v, model::ParamGroup) {
    const Tensor t = tape.grad(v);
    g.insert(g.end(), t.data().begin(), t.data().end());
  });
  return g;
}

std::vector<bool> trainable_mask(const model::Params& params, bool backbone, bool routers) {
  std::vector<bool> m;
  model::for_each_param(params, [&](const std::string&, const Tensor& t, model::ParamGroup g) {
    m.insert(m.end(), t.size(), g == model::ParamGroup::Router ? routers : backbone);
  });
  return m;
}

void clip(std::vector<double>& g, double max_norm) {
  double s = 0.0;
  for (double v : g) s += v * v;
  const double norm = std::sqrt(s);
  if (!std::isfinite(norm)) throw NumericAbort("non-finite gradient norm of the training loss");
  if (norm > max_norm)
    for (auto& v : g) v *= max_norm / norm;
}

struct Terms {
  ad::Var perf, gating, width, total;
};

Terms elastic_terms(ad::Tape& tape, const model::ParamVars& pv, const Batch& b, const model::DiTConfig& mcfg,
                    const elastic::ElasticConfig& ecfg, const elastic::ForwardOptions& opts,
                    elastic::ElasticForward* fwd_out = nullptr) {
  const ad::Var x = tape.constant(b.xt);
  auto f = guarded("elastic forward", [&] { return elastic::elastic_forward(x, b.ts, pv, mcfg, ecfg, opts); });
  Terms t;
  t.perf = guarded("perf_loss", [&] { return flow::fm_loss(f.velocity, b.x0, b.x1); });
  t.gating = guarded("gating_loss", [&] { return elastic::gating_loss(f.gate_probs, ecfg.rho_g); });
  t.width = guarded("width_loss", [&] { return elastic::width_loss(f.soft_widths, f.active, ecfg.rho_w); });
  t.total = guarded("total_loss", [&] { return elastic::total_loss(t.perf, t.gating, t.width, ecfg.lambda); });
  if (fwd_out) *fwd_out = std::move(f);
  return t;
}

bool due(int step, int last, int every) { return step == last || (every > 0 && step % every == 0); }

}  // namespace

Adam::Adam(std::size_t size, AdamConfig cfg) : cfg_(cfg), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::vector<double>& theta, const std::vector<double>& grad, const std::vector<bool>& trainable) {
  if (theta.size() != m_.size() || grad.size() != m_.size() || trainable.size() != m_.size())
    throw DimensionError("Adam::step: size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!trainable[i]) continue;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    theta[i] -= cfg_.learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
  }
}

void TrainConfig::validate() const {
  model.validate();
  elastic.validate();
  elastic.widths.validate(model.hidden());
  data_for(*this).validate();
  if (steps < 1) throw DomainError("steps must be >= 1");
  if (batch_size < 1) throw DomainError("batch_size must be >= 1");
  if (!(adam.learning_rate > 0.0)) throw DomainError("learning_rate must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw DomainError("beta1 must lie in [0,1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw DomainError("beta2 must lie in [0,1)");
  if (!(adam.eps > 0.0)) throw DomainError("adam_eps must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw DomainError("warmup_fraction must lie in [0,1)");
  if (!(grad_clip > 0.0)) throw DomainError("grad_clip must be > 0");
  if (eval_every < 0) throw DomainError("eval_every must be >= 0");
  if (eval_batches < 1) throw DomainError("eval_batches must be >= 1");
}

int TrainConfig::warmup_steps() const {
  return static_cast<int>(std::lround(warmup_fraction * static_cast<double>(steps)));
}

std::string snapshot_json(const TrainSnapshot& s) {
  nlohmann::json j = {{"step", s.step},   {"perf", s.perf},   {"gating", s.gating},        {"width", s.width},
                      {"p_bar", s.p_bar}, {"r_bar", s.r_bar}, {"flop_ratio", s.flop_ratio}};
  return j.dump();
}

TrainSnapshot snapshot(const model::Params& params, const TrainConfig& cfg, int step) {
  const auto fm = metrics::FlopModel::from(cfg.model);
  const auto batches = held_out(cfg);
  TrainSnapshot s;
  s.step = step;
  double p_sum = 0.0, p_count = 0.0, r_sum = 0.0, r_count = 0.0, flops = 0.0, dense = 0.0;
  for (const auto& b : batches) {
    ad::Tape tape;
    const auto pv = model::bind(tape, params, false, false);
    elastic::ElasticForward f;
    const Terms t = elastic_terms(tape, pv, b, cfg.model, cfg.elastic, {}, &f);
    s.perf += t.perf.value()[0];
    s.gating += t.gating.value()[0];
    s.width += t.width.value()[0];
    const auto& d = f.decisions;
    const Tensor& r = f.soft_widths.value();
    for (std::size_t k = 0; k < d.batch * d.blocks; ++k) {
      p_sum += d.gate_prob[k];
      p_count += 1.0;
      const double ratio = cfg.elastic.widths.ratios[d.width_index[k]];
      if (d.active[k] != 0.0) {
        r_sum += r[k];
        r_count += 1.0;
        flops += fm.compute(ratio);
      } else {
        flops += fm.router;
      }
      dense += fm.compute(1.0);
    }
  }
  const double nb = static_cast<double>(batches.size());
  s.perf /= nb;
  s.gating /= nb;
  s.width /= nb;
  s.p_bar = p_sum / p_count;
  s.r_bar = r_count > 0.0 ? r_sum / r_count : 0.0;
  s.flop_ratio = dense / flops;
  return s;
}

TrainResult warmup(const TrainConfig& cfg, const SnapshotSink& sink) {
  cfg.validate();
  TrainResult res;
  res.params = model::init_params(cfg.model, cfg.seed);
  auto init_rng = stream(cfg.seed, kRouterInit);
  elastic::init_routers_full_capacity(res.params.routers, init_rng);
  const int steps = cfg.warmup_steps();
  if (steps == 0) return res;

  const flow::GaussianMixture mix(data_for(cfg));
  auto rng = stream(cfg.seed, kWarmupData);
  std::vector<double> theta = model::flatten(res.params);
  const auto trainable = trainable_mask(res.params, true, false);
  Adam adam(theta.size(), cfg.adam);
  for (int step = 1; step <= steps; ++step) {
    const Batch b = make_batch(mix, cfg.batch_size, rng);
    ad::Tape tape;
    const auto pv = model::bind(tape, res.params, true, false);
    const ad::Var x = tape.constant(b.xt);
    const ad::Var v = guarded("dense forward", [&] { return model::model_forward_dense(x, b.ts, pv, cfg.model); });
    const ad::Var loss = guarded("perf_loss", [&] { return flow::fm_loss(v, b.x0, b.x1); });
    guarded("gradient of perf_loss", [&] { tape.backward(loss); return 0; });
    auto g = gather_grads(tape, pv);
    clip(g, cfg.grad_clip);
    adam.step(theta, g, trainable);
    model::unflatten(res.params, theta);
    if (due(step, steps, cfg.eval_every)) {
      res.log.push_back(snapshot(res.params, cfg, step));
      if (sink) sink(res.log.back());
    }
  }
  return res;
}

TrainResult joint(const TrainConfig& cfg, const model::Params& warm, const SnapshotSink& sink) {
  cfg.validate();
  model::check_shapes(warm, cfg.model);
  TrainResult res;
  res.params = warm;
  auto init_rng = stream(cfg.seed, kRouterInit);
  if (cfg.router_init == RouterInit::Full)
    elastic::init_routers_full_capacity(res.params.routers, init_rng);
  else
    elastic::init_routers_random(res.params.routers, init_rng);

  const int first = cfg.warmup_steps() + 1;
  const flow::GaussianMixture mix(data_for(cfg));
  auto rng = stream(cfg.seed, kJointData);
  std::vector<double> theta = model::flatten(res.params);
  const auto trainable = trainable_mask(res.params, true, true);
  Adam adam(theta.size(), cfg.adam);
  for (int step = first; step <= cfg.steps; ++step) {
    const Batch b = make_batch(mix, cfg.batch_size, rng);
    ad::Tape tape;
    const auto pv = model::bind(tape, res.params, true, true);
    const Terms t = elastic_terms(tape, pv, b, cfg.model, cfg.elastic, {});
    guarded("gradient of total_loss", [&] { tape.backward(t.total); return 0; });
    auto g = gather_grads(tape, pv);
    clip(g, cfg.grad_clip);
    adam.step(theta, g, trainable);
    model::unflatten(res.params, theta);
    if (due(step, cfg.steps, cfg.eval_every)) {
      res.log.push_back(snapshot(res.params, cfg, step));
      if (sink) sink(res.log.back());
    }
  }
  return res;
}

TrainResult train(const TrainConfig& cfg, const SnapshotSink& sink) {
  TrainResult w = warmup(cfg, sink);
  TrainResult j = joint(cfg, w.params, sink);
  w.log.insert(w.log.end(), j.log.begin(), j.log.end());
  j.log = std::move(w.log);
  return j;
}

std::vector<Tensor> reference_samples(const flow::SynthConfig& data, std::size_t n, std::uint64_t seed) {
  const flow::GaussianMixture mix(data);
  auto rng = stream(seed, kReference);
  return mix.sample_data(n, rng);
}

EvalReport evaluate(const model::Params& params, const model::DiTConfig& mcfg, const flow::SynthConfig& data,
                    const EvalConfig& cfg) {
  if (cfg.n_samples < 1 || cfg.data_samples < 1) throw DomainError("evaluate: sample counts must be >= 1");
  flow::SynthConfig d = data;
  d.tokens = mcfg.tokens;
  d.dim = mcfg.dim;
  const infer::ModelBackend backend(params, mcfg);
  const auto fm = metrics::FlopModel::from(mcfg);
  EvalReport rep;
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    auto out = infer::denoise_full(infer::trajectory_seed(cfg.seed, i), cfg.infer, backend, fm);
    rep.samples.push_back(std::move(out.sample));
    rep.trace.insert(rep.trace.end(), out.trace.begin(), out.trace.end());
  }
  const auto ref = reference_samples(d, cfg.data_samples, cfg.seed);
  rep.energy_distance = metrics::energy_distance(rep.samples, ref);
  rep.flop_ratio = metrics::flop_reduction(rep.trace, fm);
  rep.rates = metrics::action_rates(rep.trace);
  rep.p_bar = rep.rates.mean_p;
  rep.summary = metrics::trace_summary(rep.trace);
  return rep;
}

ModelGradCheckReport model_grad_check(const model::DiTConfig& mcfg, const elastic::ElasticConfig& ecfg,
                                      const ModelGradCheckConfig& cfg) {
  mcfg.validate();
  ecfg.validate();
  if (cfg.seeds.empty() || cfg.coords_per_seed < 2 || cfg.batch < 1)
    throw DomainError("model_grad_check: need seeds, >= 2 coordinates per seed and batch >= 1");
  flow::SynthConfig data;
  data.tokens = mcfg.tokens;
  data.dim = mcfg.dim;
  const flow::GaussianMixture mix(data);

  ModelGradCheckReport rep;
  for (std::uint64_t seed : cfg.seeds) {
    model::Params params = model::init_params(mcfg, seed);
    auto init_rng = stream(seed, kRouterInit);
    elastic::init_routers_random(params.routers, init_rng);
    auto data_rng = stream(seed, kCheckData);
    const Batch b = make_batch(mix, cfg.batch, data_rng);

    std::vector<std::string> names;
    std::vector<std::size_t> router_idx, backbone_idx;
    model::for_each_param(params, [&](const std::string& name, const Tensor& t, model::ParamGroup g) {
      for (std::size_t k = 0; k < t.size(); ++k) {
        (g == model::ParamGroup::Router ? router_idx : backbone_idx).push_back(names.size());
        names.push_back(name + "[" + std::to_string(k) + "]");
      }
    });

    auto analytic = [&](elastic::GateMode mode, const elastic::Decisions* frozen, elastic::Decisions* out) {
      ad::Tape tape;
      const auto pv = model::bind(tape, params, true, true);
      elastic::ElasticForward f;
      const Terms t = elastic_terms(tape, pv, b, mcfg, ecfg, {mode, frozen}, &f);
      tape.backward(t.total);
      if (out) *out = f.decisions;
      return gather_grads(tape, pv);
    };
    elastic::Decisions base;
    const auto g_ste = analytic(elastic::GateMode::StraightThrough, nullptr, &base);
    const auto g_hard = analytic(elastic::GateMode::NoSurrogate, nullptr, nullptr);

    const ad::ScalarFn f = [&](std::span<const double> theta) {
      model::Params p = params;
      model::unflatten(p, theta);
      ad::Tape tape;
      const auto pv = model::bind(tape, p, false, false);
      return elastic_terms(tape, pv, b, mcfg, ecfg, {elastic::GateMode::FrozenSurrogate, &base}).total.value()[0];
    };

    auto coord_rng = stream(seed, kCheckCoords);
    std::vector<std::size_t> coords;
    const std::size_t half = cfg.coords_per_seed / 2;
    std::sample(router_idx.begin(), router_idx.end(), std::back_inserter(coords), half, coord_rng);
    std::sample(backbone_idx.begin(), backbone_idx.end(), std::back_inserter(coords), cfg.coords_per_seed - half,
                coord_rng);

    const auto theta = model::flatten(params);
    const auto r = ad::grad_check(f, theta, g_ste, coords, cfg.h);
    rep.checked += r.checked;
    rep.excluded += r.excluded;
    for (std::size_t c : coords)
      if (std::abs(g_ste[c] - g_hard[c]) > 1e-14 * std::max(1.0, std::abs(g_ste[c]))) rep.surrogate_affected++;
    if (r.max_rel_err >= rep.max_rel_err) {
      rep.max_rel_err = r.max_rel_err;
      rep.worst_param = names[r.worst_coord];
      rep.worst_seed = seed;
      rep.worst_analytic = r.worst_analytic;
      rep.worst_numeric = r.worst_numeric;
    }
  }
  return rep;
}

}  // namespace edit::train
