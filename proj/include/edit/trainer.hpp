#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "edit/elastic.hpp"
#include "edit/flow.hpp"
#include "edit/infer.hpp"
#include "edit/metrics.hpp"
#include "edit/model.hpp"

namespace edit::train {

// Raised when a loss term or gradient turns non-finite; what() names the term.
class NumericAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::size_t size, AdamConfig cfg);
  // In-place update of theta; coordinates with trainable[i] == false are left alone.
  void step(std::vector<double>& theta, const std::vector<double>& grad, const std::vector<bool>& trainable);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

enum class RouterInit { Full, Random };

struct TrainConfig {
  model::DiTConfig model;
  elastic::ElasticConfig elastic;
  flow::SynthConfig data;
  AdamConfig adam;
  int steps = 4300;
  double warmup_fraction = 0.3;
  std::size_t batch_size = 32;
  double grad_clip = 1.0;
  int eval_every = 100;
  std::size_t eval_batches = 2;
  RouterInit router_init = RouterInit::Full;
  std::uint64_t seed = 0;

  void validate() const;
  int warmup_steps() const;
};

struct TrainSnapshot {
  int step = 0;
  double perf = 0.0;
  double gating = 0.0;
  double width = 0.0;
  double p_bar = 0.0;
  double r_bar = 0.0;
  double flop_ratio = 1.0;  // per-block skip/width estimate without caching
};

std::string snapshot_json(const TrainSnapshot& s);

using SnapshotSink = std::function<void(const TrainSnapshot&)>;

struct TrainResult {
  model::Params params;
  std::vector<TrainSnapshot> log;
};

// Backbone init plus dense flow-matching warm-up. Routers are initialized fully
// open and left untouched.
TrainResult warmup(const TrainConfig& cfg, const SnapshotSink& sink = {});
// Router init, then joint training with the elastic objective from a warmed-up backbone.
TrainResult joint(const TrainConfig& cfg, const model::Params& warm, const SnapshotSink& sink = {});
// warmup followed by joint; the log holds both phases.
TrainResult train(const TrainConfig& cfg, const SnapshotSink& sink = {});

// Elastic-forward statistics of params on the held-out batches derived from cfg.seed.
TrainSnapshot snapshot(const model::Params& params, const TrainConfig& cfg, int step);

struct EvalConfig {
  infer::InferenceConfig infer;
  std::size_t n_samples = 64;      // denoised trajectories
  std::size_t data_samples = 256;  // reference draws from the mixture
  std::uint64_t seed = 7;
};

struct EvalReport {
  double energy_distance = 0.0;
  double flop_ratio = 1.0;
  double p_bar = 0.0;  // mean router probability over the trace
  metrics::ActionRates rates;
  std::vector<metrics::BlockSummary> summary;
  std::vector<Tensor> samples;
  std::vector<TraceRecord> trace;
};

// Reference set for evaluate(); a pure function of (data config, seed).
std::vector<Tensor> reference_samples(const flow::SynthConfig& data, std::size_t n, std::uint64_t seed);

EvalReport evaluate(const model::Params& params, const model::DiTConfig& mcfg, const flow::SynthConfig& data,
                    const EvalConfig& cfg);

struct ModelGradCheckConfig {
  std::size_t coords_per_seed = 24;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t batch = 2;
  double h = 1e-6;
};

struct ModelGradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::uint64_t worst_seed = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  // Checked coordinates whose gradient depends on the straight-through surrogate.
  std::size_t surrogate_affected = 0;
};

/// Finite-difference check of the total elastic loss over all parameters.
///
/// Routing decisions are frozen at the base point so the loss is smooth in a
/// neighbourhood; the gate enters as 1[p0 >= tau] + p - p0, whose derivative is
/// the straight-through one.
ModelGradCheckReport model_grad_check(const model::DiTConfig& mcfg, const elastic::ElasticConfig& ecfg,
                                      const ModelGradCheckConfig& cfg);

}  // namespace edit::train
