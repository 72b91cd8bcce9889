#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "edit/autodiff.hpp"
#include "edit/tensor.hpp"

namespace edit::model {

struct DiTConfig {
  std::size_t n_blocks = 8;
  std::size_t dim = 32;
  std::size_t width_factor = 4;
  std::size_t router_hidden = 8;
  std::size_t n_heads = 4;
  std::size_t tokens = 16;
  double t_max = 1000.0;

  std::size_t hidden() const { return width_factor * dim; }
  void validate() const;
  friend bool operator==(const DiTConfig&, const DiTConfig&) = default;
};

// Per-block backbone weights. The modulation projection maps E(t) to six D-vectors:
// shift/scale/gate for attention, then shift/scale/gate for the MLP.
template <class T>
struct BlockParams {
  T mod_w, mod_b;
  T wq, wk, wv, wo;
  T mlp_w1, mlp_w2;
};

// Per-block router weights. mod_w/mod_b map E(t) to (gamma, shift), each of width D.
template <class T>
struct RouterParams {
  T mod_w, mod_b;
  T w;
  T w_gate, w_width;
  T gate_bias, width_bias;
};

template <class T>
struct ModelParams {
  T in_w, in_b;
  T pos;  // learned per-token position embedding [L×D]
  T temb_w, temb_b;
  T out_w, out_b;
  std::vector<BlockParams<T>> blocks;
  std::vector<RouterParams<T>> routers;
};

using BlockWeights = BlockParams<Tensor>;
using RouterWeights = RouterParams<Tensor>;
using Params = ModelParams<Tensor>;
using ParamVars = ModelParams<ad::Var>;

enum class ParamGroup { Backbone, Router };

template <class R, class F>
void for_each_router_param(R& r, const std::string& prefix, F&& f) {
  f(prefix + "mod_w", r.mod_w, ParamGroup::Router);
  f(prefix + "mod_b", r.mod_b, ParamGroup::Router);
  f(prefix + "w", r.w, ParamGroup::Router);
  f(prefix + "w_gate", r.w_gate, ParamGroup::Router);
  f(prefix + "w_width", r.w_width, ParamGroup::Router);
  f(prefix + "gate_bias", r.gate_bias, ParamGroup::Router);
  f(prefix + "width_bias", r.width_bias, ParamGroup::Router);
}

/// Visits every parameter in a fixed order with its dotted name and group.
/// The order defines flattening and the checkpoint layout.
template <class M, class F>
void for_each_param(M& m, F&& f) {
  constexpr auto B = ParamGroup::Backbone;
  f(std::string("in_w"), m.in_w, B);
  f(std::string("in_b"), m.in_b, B);
  f(std::string("pos"), m.pos, B);
  f(std::string("temb_w"), m.temb_w, B);
  f(std::string("temb_b"), m.temb_b, B);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    auto& b = m.blocks[i];
    f(p + "mod_w", b.mod_w, B);
    f(p + "mod_b", b.mod_b, B);
    f(p + "wq", b.wq, B);
    f(p + "wk", b.wk, B);
    f(p + "wv", b.wv, B);
    f(p + "wo", b.wo, B);
    f(p + "mlp_w1", b.mlp_w1, B);
    f(p + "mlp_w2", b.mlp_w2, B);
  }
  for (std::size_t i = 0; i < m.routers.size(); ++i)
    for_each_router_param(m.routers[i], "routers." + std::to_string(i) + ".", f);
  f(std::string("out_w"), m.out_w, B);
  f(std::string("out_b"), m.out_b, B);
}

// All-zero parameters of the right shapes.
Params zero_params(const DiTConfig& cfg);
// Random backbone; routers left at zero (see elastic::init_routers_full_capacity).
Params init_params(const DiTConfig& cfg, std::uint64_t seed);
void check_shapes(const Params& params, const DiTConfig& cfg);

std::size_t param_count(const Params& params);
std::vector<double> flatten(const Params& params);
void unflatten(Params& params, std::span<const double> flat);

/// Binds parameters onto a tape as leaves (trainable) or constants (frozen).
ParamVars bind(ad::Tape& tape, const Params& params, bool backbone_trainable, bool routers_trainable);
RouterParams<ad::Var> bind(ad::Tape& tape, const RouterWeights& router, bool trainable);

// ---- single-sample forward path (inference) -------------------------------

// Sinusoidal features of t·t_max at D/2 frequencies: [cos..., sin...], shape [1×D].
Tensor sinusoidal_features(double t, std::size_t dim, double t_max);
Tensor timestep_embed(double t, const Params& params, const DiTConfig& cfg);
// (1 + scale) ⊙ LN(x) + shift, with scale and shift broadcast over rows.
Tensor modulate(const Tensor& x, const Tensor& scale, const Tensor& shift);
Tensor mhsa(const Tensor& x, const BlockWeights& w, const DiTConfig& cfg);
Tensor mlp_dense(const Tensor& z, const BlockWeights& w);
// σ(z·W1[:, :channels])·W2[:channels, :]; channels == H runs the full matrices.
Tensor mlp_prefix(const Tensor& z, const BlockWeights& w, std::size_t channels);
// Block with its MLP restricted to the first `channels` hidden units.
Tensor block_forward(const Tensor& x, const Tensor& t_emb, const BlockWeights& w, const DiTConfig& cfg,
                     std::size_t channels);
Tensor block_forward_dense(const Tensor& x, const Tensor& t_emb, const BlockWeights& w,
                           const DiTConfig& cfg);
Tensor input_proj(const Tensor& x, const Params& params);
Tensor output_head(const Tensor& h, const Params& params);
Tensor model_forward_dense(const Tensor& x, double t, const Params& params, const DiTConfig& cfg);

// ---- batched tape path (training) -----------------------------------------
// Activations are [B·L × D]: B samples of L tokens stacked along rows.

ad::Var timestep_embed(ad::Tape& tape, const ParamVars& p, std::span<const double> ts,
                       const DiTConfig& cfg);
ad::Var modulate(ad::Var x, ad::Var scale, ad::Var shift, std::size_t tokens);
ad::Var mhsa(ad::Var x, const BlockParams<ad::Var>& w, const DiTConfig& cfg);
// mask, when given, is a constant [B·L × H] channel mask applied after the activation.
ad::Var mlp(ad::Var z, const BlockParams<ad::Var>& w, const Tensor* mask = nullptr);
ad::Var block_forward(ad::Var x, ad::Var t_emb, const BlockParams<ad::Var>& w, const DiTConfig& cfg,
                      const Tensor* mlp_mask = nullptr);
ad::Var input_proj(ad::Var x, const ParamVars& p);
ad::Var output_head(ad::Var h, const ParamVars& p);
ad::Var model_forward_dense(ad::Var x, std::span<const double> ts, const ParamVars& p,
                            const DiTConfig& cfg);

// Stacks per-sample [L×D] tensors into one [B·L × D] tensor and back.
Tensor stack_rows(std::span<const Tensor> parts);
std::vector<Tensor> split_rows(const Tensor& stacked, std::size_t parts);

}  // namespace edit::model
