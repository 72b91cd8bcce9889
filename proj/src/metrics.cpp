#include "edit/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>

namespace edit::metrics {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double dist(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double mean_pairwise(std::span<const Tensor> a, std::span<const Tensor> b) {
  double s = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) s += dist(x, y);
  return s / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

}  // namespace

FlopModel FlopModel::from(const model::DiTConfig& cfg) {
  cfg.validate();
  const double L = static_cast<double>(cfg.tokens), D = static_cast<double>(cfg.dim);
  const double H = static_cast<double>(cfg.hidden()), Hr = static_cast<double>(cfg.router_hidden);
  FlopModel fm;
  fm.attn = 8.0 * L * D * D + 4.0 * L * L * D;
  fm.mlp_full = 4.0 * L * D * H;
  fm.router = 2.0 * L * D * Hr + 2.0 * L * Hr * 5.0;
  fm.add = L * D;
  return fm;
}

double flops_action(const BlockAction& action, const FlopModel& fm) {
  switch (action.kind) {
    case ActionKind::Skip: return fm.router;
    case ActionKind::Reuse: return fm.router + fm.add;
    case ActionKind::Compute: return fm.compute(action.width);
  }
  return 0.0;
}

double flop_reduction(std::span<const TraceRecord> trace, const FlopModel& fm) {
  if (trace.empty()) throw ContractError("flop_reduction: empty trace");
  double measured = 0.0;
  for (const auto& r : trace) measured += r.flops;
  return static_cast<double>(trace.size()) * fm.compute(1.0) / measured;
}

double energy_distance(std::span<const Tensor> a, std::span<const Tensor> b) {
  if (a.empty() || b.empty()) throw ContractError("energy_distance: empty sample set");
  const std::size_t n = a.front().size();
  for (auto set : {a, b})
    for (const auto& x : set)
      if (x.size() != n)
        throw DimensionError("energy_distance: sample of " + std::to_string(x.size()) + " values, expected " +
                             std::to_string(n));
  return 2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b);
}

std::vector<BlockSummary> trace_summary(std::span<const TraceRecord> trace) {
  if (trace.empty()) throw ContractError("trace_summary: empty trace");
  std::size_t n = 0;
  for (const auto& r : trace) n = std::max(n, r.block + 1);
  std::vector<BlockSummary> out(n);
  std::vector<std::size_t> computes(n, 0);
  for (const auto& r : trace) {
    auto& s = out[r.block];
    s.records++;
    s.mean_p += r.p;
    if (r.action.kind == ActionKind::Skip) s.skip_rate += 1.0;
    if (r.action.kind == ActionKind::Reuse) s.reuse_rate += 1.0;
    if (r.action.kind == ActionKind::Compute) {
      s.mean_width += r.action.width;
      computes[r.block]++;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = out[i];
    s.block = i;
    if (s.records) {
      const double c = static_cast<double>(s.records);
      s.mean_p /= c;
      s.skip_rate /= c;
      s.reuse_rate /= c;
    }
    if (computes[i]) s.mean_width /= static_cast<double>(computes[i]);
  }
  return out;
}

ActionRates action_rates(std::span<const TraceRecord> trace) {
  if (trace.empty()) throw ContractError("action_rates: empty trace");
  ActionRates a;
  for (const auto& r : trace) {
    a.mean_p += r.p;
    switch (r.action.kind) {
      case ActionKind::Skip: a.skip += 1.0; break;
      case ActionKind::Reuse: a.reuse += 1.0; break;
      case ActionKind::Compute: a.compute += 1.0; break;
    }
  }
  const double c = static_cast<double>(trace.size());
  a.skip /= c;
  a.reuse /= c;
  a.compute /= c;
  a.mean_p /= c;
  return a;
}

void write_trace_csv(std::ostream& os, std::span<const TraceRecord> trace) {
  os << "step,block,p,action,width_ratio,flops\n";
  for (const auto& r : trace) {
    os << r.step << ',' << r.block << ',' << num(r.p) << ',' << action_name(r.action.kind) << ',';
    if (r.action.kind == ActionKind::Compute) os << num(r.action.width);
    os << ',' << num(r.flops) << '\n';
  }
}

void write_summary_csv(std::ostream& os, std::span<const BlockSummary> summary) {
  os << "block,mean_p,skip_rate,reuse_rate,mean_width\n";
  for (const auto& s : summary)
    os << s.block << ',' << num(s.mean_p) << ',' << num(s.skip_rate) << ',' << num(s.reuse_rate) << ','
       << num(s.mean_width) << '\n';
}

void write_prob_grid_csv(std::ostream& os, std::span<const TraceRecord> trace) {
  os << "step,block,p\n";
  for (const auto& r : trace) os << r.step << ',' << r.block << ',' << num(r.p) << '\n';
}

}  // namespace edit::metrics
