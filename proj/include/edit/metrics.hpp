#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "edit/model.hpp"
#include "edit/tensor.hpp"
#include "edit/trace.hpp"

namespace edit::metrics {

/// Analytic FLOP counts for one block application; a multiply-add counts as 2.
struct FlopModel {
  double attn = 0.0;      // 8LD² + 4L²D
  double mlp_full = 0.0;  // 4LDH at ŝ = 1
  double router = 0.0;    // 2LDH_r + 2LH_r·5
  double add = 0.0;       // LD

  static FlopModel from(const model::DiTConfig& cfg);
  double mlp(double width) const { return mlp_full * width; }
  double compute(double width) const { return router + attn + mlp(width); }
};

double flops_action(const BlockAction& action, const FlopModel& fm);

// Dense FLOPs over the same (step, block) grid divided by the trace's FLOPs.
double flop_reduction(std::span<const TraceRecord> trace, const FlopModel& fm);

// V-statistic 2E|a-b| - E|a-a'| - E|b-b'| over flattened samples.
double energy_distance(std::span<const Tensor> a, std::span<const Tensor> b);

struct BlockSummary {
  std::size_t block = 0;
  double mean_p = 0.0;
  double skip_rate = 0.0;
  double reuse_rate = 0.0;
  double mean_width = 0.0;  // over Compute actions; 0 when the block never computed
  std::size_t records = 0;
};

std::vector<BlockSummary> trace_summary(std::span<const TraceRecord> trace);

// Overall action rates across a trace.
struct ActionRates {
  double skip = 0.0;
  double reuse = 0.0;
  double compute = 0.0;
  double mean_p = 0.0;
};
ActionRates action_rates(std::span<const TraceRecord> trace);

void write_trace_csv(std::ostream& os, std::span<const TraceRecord> trace);
void write_summary_csv(std::ostream& os, std::span<const BlockSummary> summary);
void write_prob_grid_csv(std::ostream& os, std::span<const TraceRecord> trace);

}  // namespace edit::metrics
