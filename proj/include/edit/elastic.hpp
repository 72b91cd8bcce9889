#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "edit/autodiff.hpp"
#include "edit/model.hpp"

namespace edit::elastic {

using model::BlockWeights;
using model::DiTConfig;
using model::RouterWeights;

/// Allowed MLP width ratios, strictly increasing and ending at 1.
struct WidthMenu {
  std::array<double, 4> ratios{0.25, 0.5, 0.75, 1.0};

  void validate(std::size_t hidden) const;
  // Index of an exact menu entry; DomainError when ratio is not in the menu.
  std::size_t index_of(double ratio) const;
  std::size_t channels(double ratio, std::size_t hidden) const;
};

struct ElasticConfig {
  double tau = 0.5;
  double rho_g = 0.6;
  double rho_w = 0.65;
  double lambda = 1.0;
  WidthMenu widths;

  void validate() const;
};

struct RouterOutput {
  double gate_logit = 0.0;
  double gate_prob = 0.5;
  std::array<double, 4> width_logits{};
  std::array<double, 4> width_probs{};
  std::size_t width_index = 3;
  double width_ratio = 1.0;
  double soft_width = 1.0;
};

struct WidthChoice {
  std::array<double, 4> probs{};
  std::size_t index = 3;
  double ratio = 1.0;
};

// softmax, then argmax with ties going to the largest index.
WidthChoice select_width(const std::array<double, 4>& logits, const WidthMenu& menu = {});

/// Router of one block on a single sample x [L×D] with timestep embedding [1×D].
RouterOutput router_forward(const Tensor& x, const Tensor& t_emb, const RouterWeights& w,
                            const WidthMenu& menu = {});

// Forward value of the straight-through gate: 1 if p >= tau else 0.
double ste_gate_value(double p, double tau);

// σ(z·W1[:, :ŝH])·W2[:ŝH, :].
Tensor mlp_sliced(const Tensor& z, double width_ratio, const BlockWeights& w, const WidthMenu& menu = {});
// (σ(z·W1) ⊙ m(ŝ))·W2, single sample.
Tensor mlp_masked(const Tensor& z, double width_ratio, const BlockWeights& w, const WidthMenu& menu = {});

double gating_loss(std::span<const double> gate_probs, double rho_g);
double width_loss(std::span<const RouterOutput> outputs, double tau, double rho_w);
double total_loss(double perf, double gating, double width, double lambda);

// logit(0.95): the gate bias that makes an all-zero router 95% open.
inline constexpr double kFullOpenGateBias = 2.9444389791664403;

// W, W_g, W_w and the modulation projection ~ N(0, 0.02²); gate bias logit(0.95);
// width bias favouring the full width.
void init_routers_full_capacity(std::vector<RouterWeights>& routers, std::mt19937_64& rng);
// Same weight init but gate and width biases ~ N(0, 1): no preference for full capacity.
void init_routers_random(std::vector<RouterWeights>& routers, std::mt19937_64& rng);

// ---- tape path --------------------------------------------------------------

struct RouterVars {
  ad::Var gate_logit;    // [B×1]
  ad::Var width_logits;  // [B×4]
};

RouterVars router_forward(ad::Var x, ad::Var t_emb, const model::RouterParams<ad::Var>& w,
                          std::size_t tokens);

/// Straight-through gate: forward value is `hard` exactly, reverse pass hands the
/// incoming gradient to p unchanged. Equivalent to hard + p - StopGrad(p).
ad::Var straight_through(ad::Var p, const Tensor& hard);

// Per-row channel mask [B·L × H]: row block b keeps its first channels[b] units.
Tensor prefix_mask(std::span<const std::size_t> channels, std::size_t tokens, std::size_t hidden);

ad::Var mlp_masked(ad::Var z, std::span<const std::size_t> channels, const model::BlockParams<ad::Var>& w,
                   std::size_t tokens);

// (mean over blocks of p - rho)², averaged over samples. p_all is [B×n].
ad::Var gating_loss(ad::Var p_all, double rho_g);
// Per sample: (Σ active·r / Σ active - rho)², 0 for samples with no active block; averaged.
ad::Var width_loss(ad::Var soft_widths, const Tensor& active, double rho_w);
ad::Var total_loss(ad::Var perf, ad::Var gating, ad::Var width, double lambda);

/// Hard routing decisions of one batched forward, [B×n] row-major.
struct Decisions {
  std::size_t batch = 0;
  std::size_t blocks = 0;
  std::vector<double> gate_prob;
  std::vector<double> active;  // 1[p >= tau]
  std::vector<std::size_t> width_index;
};

enum class GateMode {
  StraightThrough,  // training: g = 1[p>=tau] with straight-through gradient
  FrozenSurrogate,  // g = frozen 1[.] + p - frozen p; decisions taken from `frozen`
  NoSurrogate,      // g = 1[p>=tau] with no gradient into p
  ForceDense,       // g = 1, full width on every block
};

struct ForwardOptions {
  GateMode mode = GateMode::StraightThrough;
  const Decisions* frozen = nullptr;
};

struct ElasticForward {
  ad::Var velocity;     // [B·L × D]
  ad::Var gate_probs;   // [B×n]
  ad::Var soft_widths;  // [B×n]
  Tensor active;        // [B×n] constant indicator
  Decisions decisions;
};

/// Batched elastic forward: every block gated by its router and run with the
/// masked MLP at the router's width. Blocks are always evaluated.
ElasticForward elastic_forward(ad::Var x, std::span<const double> ts, const model::ParamVars& p,
                               const DiTConfig& cfg, const ElasticConfig& ecfg,
                               const ForwardOptions& opts = {});

}  // namespace edit::elastic
