#include "edit/infer.hpp"

#include "edit/flow.hpp"
#include "edit/kernels.hpp"

namespace edit::infer {

void InferenceConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("tau must lie in (0,1)");
  if (!(delta_margin >= 0.0)) throw DomainError("delta_margin must be >= 0");
  if (!(tau + delta_margin < 1.0)) throw DomainError("tau + delta_margin must be < 1");
  if (max_reuse < 0) throw DomainError("max_reuse must be >= 0");
  if (steps < 1) throw DomainError("steps must be >= 1");
}

BlockAction decide_action(double p, const std::optional<CacheEntry>& cache, const InferenceConfig& cfg,
                          double width) {
  if (p < cfg.tau) return BlockAction::skip();
  if (p <= cfg.tau + cfg.delta_margin && cache && cache->reuse_count < cfg.max_reuse) return BlockAction::reuse();
  return BlockAction::compute(width);
}

ModelBackend::ModelBackend(const model::Params& params, const model::DiTConfig& cfg, elastic::WidthMenu menu)
    : params_(params), cfg_(cfg), menu_(menu) {
  model::check_shapes(params_, cfg_);
  menu_.validate(cfg_.hidden());
}

Tensor ModelBackend::embed(double t) const { return model::timestep_embed(t, params_, cfg_); }

Tensor ModelBackend::input(const Tensor& x) const { return model::input_proj(x, params_); }

elastic::RouterOutput ModelBackend::route(int, std::size_t block, const Tensor& h, const Tensor& temb) const {
  return elastic::router_forward(h, temb, params_.routers.at(block), menu_);
}

Tensor ModelBackend::compute(std::size_t block, const Tensor& h, const Tensor& temb, double width) const {
  return model::block_forward(h, temb, params_.blocks.at(block), cfg_, menu_.channels(width, cfg_.hidden()));
}

Tensor ModelBackend::head(const Tensor& h) const { return model::output_head(h, params_); }

StepResult block_step(const Tensor& x, int step, const Tensor& temb, std::size_t block, const Backend& backend,
                      FeatureBank& bank, const InferenceConfig& cfg, const metrics::FlopModel& fm) {
  const elastic::RouterOutput r = backend.route(step, block, x, temb);
  auto& entry = bank.at(block);
  BlockAction action = cfg.dense_override
                           ? BlockAction::compute(1.0)
                           : decide_action(r.gate_prob, entry, cfg, cfg.adaptive_width ? r.width_ratio : 1.0);
  StepResult out{x, {step, block, r.gate_prob, action, metrics::flops_action(action, fm)}};
  switch (action.kind) {
    case ActionKind::Skip:
      break;
    case ActionKind::Reuse:
      if (!entry) throw ContractError("block_step: reuse with an empty cache");
      kern::add_inplace(out.x, entry->delta);
      entry->reuse_count++;
      break;
    case ActionKind::Compute:
      out.x = backend.compute(block, x, temb, action.width);
      entry = CacheEntry{kern::sub(out.x, x), 0};
      break;
  }
  return out;
}

Denoised denoise_full(std::uint64_t seed, const InferenceConfig& cfg, const Backend& backend,
                      const metrics::FlopModel& fm) {
  cfg.validate();
  Denoised out;
  out.sample = flow::gaussian_noise(backend.tokens(), backend.dim(), seed);
  out.trace.reserve(static_cast<std::size_t>(cfg.steps) * backend.n_blocks());
  FeatureBank bank(backend.n_blocks());
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  for (int k = 0; k < cfg.steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) * dt;
    const Tensor temb = backend.embed(t);
    Tensor h = backend.input(out.sample);
    for (std::size_t i = 0; i < backend.n_blocks(); ++i) {
      StepResult s = block_step(h, k, temb, i, backend, bank, cfg, fm);
      h = std::move(s.x);
      out.trace.push_back(s.record);
    }
    const Tensor v = backend.head(h);
    for (std::size_t j = 0; j < out.sample.size(); ++j) out.sample[j] -= dt * v[j];
  }
  return out;
}

Denoised denoise_full(std::uint64_t seed, const InferenceConfig& cfg, const model::Params& params,
                      const model::DiTConfig& mcfg) {
  const ModelBackend backend(params, mcfg);
  return denoise_full(seed, cfg, backend, metrics::FlopModel::from(mcfg));
}

std::vector<std::vector<BlockAction>> oracle_schedule(const std::vector<std::vector<double>>& p_grid,
                                                      const InferenceConfig& cfg) {
  std::vector<std::vector<BlockAction>> out;
  if (p_grid.empty()) return out;
  const std::size_t n = p_grid.front().size();
  std::vector<bool> has(n, false);
  std::vector<int> k(n, 0);
  for (const auto& row : p_grid) {
    if (row.size() != n) throw DimensionError("oracle_schedule: ragged probability grid");
    auto& acts = out.emplace_back();
    for (std::size_t i = 0; i < n; ++i) {
      const double p = row[i];
      if (cfg.dense_override) {
        acts.push_back(BlockAction::compute(1.0));
        has[i] = true;
        k[i] = 0;
      } else if (p < cfg.tau) {
        acts.push_back(BlockAction::skip());
      } else if (cfg.tau <= p && p <= cfg.tau + cfg.delta_margin && has[i] && k[i] < cfg.max_reuse) {
        acts.push_back(BlockAction::reuse());
        k[i] += 1;
      } else {
        acts.push_back(BlockAction::compute(1.0));
        has[i] = true;
        k[i] = 0;
      }
    }
  }
  return out;
}

}  // namespace edit::infer
