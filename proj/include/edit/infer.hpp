#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "edit/elastic.hpp"
#include "edit/metrics.hpp"
#include "edit/model.hpp"
#include "edit/trace.hpp"

namespace edit::infer {

struct InferenceConfig {
  double tau = 0.5;
  double delta_margin = 0.1;
  int max_reuse = 5;  // K: reuses allowed since the block's last compute
  int steps = 32;
  bool dense_override = false;
  bool adaptive_width = true;  // false computes every non-skipped block at full width

  void validate() const;
};

struct CacheEntry {
  Tensor delta;
  int reuse_count = 0;
};

// One optional entry per block; lives for a whole trajectory.
using FeatureBank = std::vector<std::optional<CacheEntry>>;

BlockAction decide_action(double p, const std::optional<CacheEntry>& cache, const InferenceConfig& cfg,
                          double width = 1.0);

/// What the engine needs from a denoiser. ModelBackend wraps real parameters;
/// tests substitute stubs that replay fixed probability grids.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::size_t n_blocks() const = 0;
  virtual std::size_t tokens() const = 0;
  virtual std::size_t dim() const = 0;
  virtual Tensor embed(double t) const = 0;
  virtual Tensor input(const Tensor& x) const = 0;
  virtual elastic::RouterOutput route(int step, std::size_t block, const Tensor& h, const Tensor& temb) const = 0;
  virtual Tensor compute(std::size_t block, const Tensor& h, const Tensor& temb, double width) const = 0;
  virtual Tensor head(const Tensor& h) const = 0;
};

class ModelBackend : public Backend {
 public:
  ModelBackend(const model::Params& params, const model::DiTConfig& cfg, elastic::WidthMenu menu = {});

  std::size_t n_blocks() const override { return cfg_.n_blocks; }
  std::size_t tokens() const override { return cfg_.tokens; }
  std::size_t dim() const override { return cfg_.dim; }
  Tensor embed(double t) const override;
  Tensor input(const Tensor& x) const override;
  elastic::RouterOutput route(int step, std::size_t block, const Tensor& h, const Tensor& temb) const override;
  Tensor compute(std::size_t block, const Tensor& h, const Tensor& temb, double width) const override;
  Tensor head(const Tensor& h) const override;

 private:
  const model::Params& params_;
  model::DiTConfig cfg_;
  elastic::WidthMenu menu_;
};

struct StepResult {
  Tensor x;
  TraceRecord record;
};

// Router, decision, and the chosen branch for one block. Mutates bank[block].
StepResult block_step(const Tensor& x, int step, const Tensor& temb, std::size_t block, const Backend& backend,
                      FeatureBank& bank, const InferenceConfig& cfg, const metrics::FlopModel& fm);

// Noise seed of trajectory i in a run seeded with base.
inline std::uint64_t trajectory_seed(std::uint64_t base, std::size_t i) { return base * 1000003ULL + i; }

struct Denoised {
  Tensor sample;
  std::vector<TraceRecord> trace;
};

// Euler over t_k = 1 - k/T from x ~ N(0, I) drawn from seed; one bank per call.
Denoised denoise_full(std::uint64_t seed, const InferenceConfig& cfg, const Backend& backend,
                      const metrics::FlopModel& fm);
Denoised denoise_full(std::uint64_t seed, const InferenceConfig& cfg, const model::Params& params,
                      const model::DiTConfig& mcfg);

// Scalar replay of the caching control flow over a T×n grid of probabilities.
// Width is reported as 1 for every Compute.
std::vector<std::vector<BlockAction>> oracle_schedule(const std::vector<std::vector<double>>& p_grid,
                                                      const InferenceConfig& cfg);

}  // namespace edit::infer
