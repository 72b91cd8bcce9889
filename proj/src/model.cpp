#include "edit/model.hpp"

#include <cmath>
#include <random>

#include "edit/kernels.hpp"

namespace edit::model {

void DiTConfig::validate() const {
  if (n_blocks < 1) throw DomainError("n_blocks must be >= 1");
  if (dim < 2 || dim % 2 != 0) throw DomainError("dim must be an even number >= 2");
  if (hidden() % 4 != 0)
    throw DomainError("hidden width " + std::to_string(hidden()) + " must be divisible by 4");
  if (n_heads < 1 || dim % n_heads != 0)
    throw DomainError("dim " + std::to_string(dim) + " not divisible by n_heads " + std::to_string(n_heads));
  if (router_hidden < 1 || router_hidden >= dim)
    throw DomainError("router_hidden must satisfy 1 <= router_hidden < dim");
  if (tokens < 1) throw DomainError("tokens must be >= 1");
  if (!(t_max > 0.0)) throw DomainError("t_max must be positive");
}

Params zero_params(const DiTConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.dim, H = cfg.hidden(), R = cfg.router_hidden;
  auto m = [](std::size_t r, std::size_t c) { return Tensor({r, c}); };
  Params p;
  p.in_w = m(D, D);
  p.in_b = m(1, D);
  p.pos = m(cfg.tokens, D);
  p.temb_w = m(D, D);
  p.temb_b = m(1, D);
  p.out_w = m(D, D);
  p.out_b = m(1, D);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    p.blocks.push_back(BlockWeights{m(D, 6 * D), m(1, 6 * D), m(D, D), m(D, D), m(D, D), m(D, D),
                                    m(D, H), m(H, D)});
    p.routers.push_back(RouterWeights{m(D, 2 * D), m(1, 2 * D), m(D, R), m(R, 1), m(R, 4), m(1, 1), m(1, 4)});
  }
  return p;
}

Params init_params(const DiTConfig& cfg, std::uint64_t seed) {
  Params p = zero_params(cfg);
  std::mt19937_64 rng(seed);
  const double D = static_cast<double>(cfg.dim), H = static_cast<double>(cfg.hidden());
  auto fill = [&rng](Tensor& t, double sd) {
    std::normal_distribution<double> nd(0.0, sd);
    for (auto& v : t.data()) v = nd(rng);
  };
  fill(p.in_w, 1.0 / std::sqrt(D));
  fill(p.pos, 0.02);
  fill(p.temb_w, 1.0 / std::sqrt(D));
  for (auto& b : p.blocks) {
    fill(b.mod_w, 0.02);
    // Residual gates start open at 1; shifts and scales at 0.
    for (std::size_t j = 0; j < cfg.dim; ++j) {
      b.mod_b[2 * cfg.dim + j] = 1.0;
      b.mod_b[5 * cfg.dim + j] = 1.0;
    }
    fill(b.wq, 1.0 / std::sqrt(D));
    fill(b.wk, 1.0 / std::sqrt(D));
    fill(b.wv, 1.0 / std::sqrt(D));
    fill(b.wo, 1.0 / std::sqrt(D));
    fill(b.mlp_w1, 1.0 / std::sqrt(D));
    fill(b.mlp_w2, 1.0 / std::sqrt(H));
  }
  fill(p.out_w, 1.0 / std::sqrt(D));
  return p;
}

void check_shapes(const Params& params, const DiTConfig& cfg) {
  const Params ref = zero_params(cfg);
  if (params.blocks.size() != cfg.n_blocks || params.routers.size() != cfg.n_blocks)
    throw DimensionError("parameter set has " + std::to_string(params.blocks.size()) +
                         " blocks, config expects " + std::to_string(cfg.n_blocks));
  std::vector<std::pair<std::string, Shape>> want;
  for_each_param(ref, [&](const std::string& n, const Tensor& t, ParamGroup) { want.emplace_back(n, t.shape()); });
  std::size_t i = 0;
  for_each_param(params, [&](const std::string& n, const Tensor& t, ParamGroup) {
    if (t.shape() != want[i].second)
      throw DimensionError("parameter " + n + " has shape " + shape_str(t.shape()) + ", expected " +
                           shape_str(want[i].second));
    ++i;
  });
}

std::size_t param_count(const Params& params) {
  std::size_t n = 0;
  for_each_param(params, [&](const std::string&, const Tensor& t, ParamGroup) { n += t.size(); });
  return n;
}

std::vector<double> flatten(const Params& params) {
  std::vector<double> flat;
  flat.reserve(param_count(params));
  for_each_param(params, [&](const std::string&, const Tensor& t, ParamGroup) {
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  });
  return flat;
}

void unflatten(Params& params, std::span<const double> flat) {
  if (flat.size() != param_count(params))
    throw DimensionError("unflatten: " + std::to_string(flat.size()) + " values for " +
                         std::to_string(param_count(params)) + " parameters");
  std::size_t off = 0;
  for_each_param(params, [&](const std::string&, Tensor& t, ParamGroup) {
    std::copy_n(flat.begin() + off, t.size(), t.data().begin());
    off += t.size();
  });
}

RouterParams<ad::Var> bind(ad::Tape& tape, const RouterWeights& router, bool trainable) {
  auto b = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  return {b(router.mod_w), b(router.mod_b), b(router.w), b(router.w_gate),
          b(router.w_width), b(router.gate_bias), b(router.width_bias)};
}

ParamVars bind(ad::Tape& tape, const Params& params, bool backbone_trainable, bool routers_trainable) {
  auto b = [&](const Tensor& t) { return backbone_trainable ? tape.leaf(t) : tape.constant(t); };
  ParamVars v;
  v.in_w = b(params.in_w);
  v.in_b = b(params.in_b);
  v.pos = b(params.pos);
  v.temb_w = b(params.temb_w);
  v.temb_b = b(params.temb_b);
  for (const auto& blk : params.blocks)
    v.blocks.push_back({b(blk.mod_w), b(blk.mod_b), b(blk.wq), b(blk.wk), b(blk.wv), b(blk.wo),
                        b(blk.mlp_w1), b(blk.mlp_w2)});
  for (const auto& r : params.routers) v.routers.push_back(bind(tape, r, routers_trainable));
  v.out_w = b(params.out_w);
  v.out_b = b(params.out_b);
  return v;
}

// ---- single-sample path ------------------------------------------------------

Tensor sinusoidal_features(double t, std::size_t dim, double t_max) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("timestep t=" + std::to_string(t) + " outside [0,1]");
  const std::size_t half = dim / 2;
  Tensor f({1, dim});
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(t_max) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = t * t_max * freq;
    f[i] = std::cos(arg);
    f[half + i] = std::sin(arg);
  }
  return f;
}

Tensor timestep_embed(double t, const Params& params, const DiTConfig& cfg) {
  Tensor f = sinusoidal_features(t, cfg.dim, cfg.t_max);
  return kern::gelu(kern::add_row(kern::matmul(f, params.temb_w), params.temb_b));
}

Tensor modulate(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  if (scale.size() != x.cols() || shift.size() != x.cols())
    throw DimensionError("modulate: x " + shape_str(x.shape()) + ", scale " + shape_str(scale.shape()) +
                         ", shift " + shape_str(shift.shape()));
  Tensor ln = kern::layer_norm(x, kern::kLayerNormEps);
  return kern::add_row(kern::mul_row(ln, kern::add_scalar(scale, 1.0)), shift);
}

Tensor mhsa(const Tensor& x, const BlockWeights& w, const DiTConfig& cfg) {
  if (x.cols() != cfg.dim) throw DimensionError("mhsa: input " + shape_str(x.shape()));
  Tensor q = kern::matmul(x, w.wq);
  Tensor k = kern::matmul(x, w.wk);
  Tensor v = kern::matmul(x, w.wv);
  return kern::matmul(kern::attention(q, k, v, x.rows(), cfg.n_heads), w.wo);
}

Tensor mlp_dense(const Tensor& z, const BlockWeights& w) {
  return kern::matmul(kern::gelu(kern::matmul(z, w.mlp_w1)), w.mlp_w2);
}

Tensor mlp_prefix(const Tensor& z, const BlockWeights& w, std::size_t channels) {
  const std::size_t H = w.mlp_w1.cols();
  if (channels == H) return mlp_dense(z, w);
  const Tensor w1 = kern::slice_cols(w.mlp_w1, channels);
  const Tensor w2 = kern::slice_rows(w.mlp_w2, channels);
  return kern::matmul(kern::gelu(kern::matmul(z, w1)), w2);
}

namespace {

Tensor chunk(const Tensor& mod, std::size_t index, std::size_t dim) {
  return kern::slice_cols(mod, index * dim, dim);
}

}  // namespace

Tensor block_forward(const Tensor& x, const Tensor& t_emb, const BlockWeights& w, const DiTConfig& cfg,
                     std::size_t channels) {
  if (x.cols() != cfg.dim || t_emb.size() != cfg.dim)
    throw DimensionError("block_forward: x " + shape_str(x.shape()) + ", t_emb " + shape_str(t_emb.shape()));
  const std::size_t D = cfg.dim;
  const Tensor mod = kern::add_row(kern::matmul(t_emb.reshaped({1, D}), w.mod_w), w.mod_b);
  Tensor h = modulate(x, chunk(mod, 1, D), chunk(mod, 0, D));
  Tensor out = kern::add(x, kern::mul_row(mhsa(h, w, cfg), chunk(mod, 2, D)));
  h = modulate(out, chunk(mod, 4, D), chunk(mod, 3, D));
  return kern::add(out, kern::mul_row(mlp_prefix(h, w, channels), chunk(mod, 5, D)));
}

Tensor block_forward_dense(const Tensor& x, const Tensor& t_emb, const BlockWeights& w,
                           const DiTConfig& cfg) {
  return block_forward(x, t_emb, w, cfg, cfg.hidden());
}

Tensor input_proj(const Tensor& x, const Params& params) {
  return kern::add_tiled(kern::add_row(kern::matmul(x, params.in_w), params.in_b), params.pos);
}

Tensor output_head(const Tensor& h, const Params& params) {
  return kern::add_row(kern::matmul(kern::layer_norm(h, kern::kLayerNormEps), params.out_w), params.out_b);
}

Tensor model_forward_dense(const Tensor& x, double t, const Params& params, const DiTConfig& cfg) {
  if (x.rows() != cfg.tokens || x.cols() != cfg.dim)
    throw DimensionError("model_forward_dense: input " + shape_str(x.shape()) + " for config [" +
                         std::to_string(cfg.tokens) + "x" + std::to_string(cfg.dim) + "]");
  const Tensor temb = timestep_embed(t, params, cfg);
  Tensor h = input_proj(x, params);
  for (const auto& b : params.blocks) h = block_forward_dense(h, temb, b, cfg);
  return output_head(h, params);
}

// ---- batched tape path -----------------------------------------------------------

ad::Var timestep_embed(ad::Tape& tape, const ParamVars& p, std::span<const double> ts,
                       const DiTConfig& cfg) {
  std::vector<Tensor> rows;
  for (double t : ts) rows.push_back(sinusoidal_features(t, cfg.dim, cfg.t_max));
  ad::Var f = tape.constant(stack_rows(rows));
  return ad::gelu(ad::add_row(ad::matmul(f, p.temb_w), p.temb_b));
}

ad::Var modulate(ad::Var x, ad::Var scale, ad::Var shift, std::size_t tokens) {
  ad::Var ln = ad::layer_norm(x, kern::kLayerNormEps);
  ad::Var s = ad::repeat_rows(ad::add_scalar(scale, 1.0), tokens);
  return ad::add(ad::mul(ln, s), ad::repeat_rows(shift, tokens));
}

ad::Var mhsa(ad::Var x, const BlockParams<ad::Var>& w, const DiTConfig& cfg) {
  ad::Var q = ad::matmul(x, w.wq);
  ad::Var k = ad::matmul(x, w.wk);
  ad::Var v = ad::matmul(x, w.wv);
  return ad::matmul(ad::attention(q, k, v, cfg.tokens, cfg.n_heads), w.wo);
}

ad::Var mlp(ad::Var z, const BlockParams<ad::Var>& w, const Tensor* mask) {
  ad::Var a = ad::gelu(ad::matmul(z, w.mlp_w1));
  if (mask) a = ad::mask(a, *mask);
  return ad::matmul(a, w.mlp_w2);
}

ad::Var block_forward(ad::Var x, ad::Var t_emb, const BlockParams<ad::Var>& w, const DiTConfig& cfg,
                      const Tensor* mlp_mask) {
  const std::size_t D = cfg.dim, L = cfg.tokens;
  ad::Var mod = ad::add_row(ad::matmul(t_emb, w.mod_w), w.mod_b);
  auto part = [&](std::size_t i) { return ad::slice_cols(mod, i * D, D); };
  ad::Var h = modulate(x, part(1), part(0), L);
  ad::Var out = ad::add(x, ad::mul(mhsa(h, w, cfg), ad::repeat_rows(part(2), L)));
  h = modulate(out, part(4), part(3), L);
  return ad::add(out, ad::mul(mlp(h, w, mlp_mask), ad::repeat_rows(part(5), L)));
}

ad::Var input_proj(ad::Var x, const ParamVars& p) {
  return ad::add_tiled(ad::add_row(ad::matmul(x, p.in_w), p.in_b), p.pos);
}

ad::Var output_head(ad::Var h, const ParamVars& p) {
  return ad::add_row(ad::matmul(ad::layer_norm(h, kern::kLayerNormEps), p.out_w), p.out_b);
}

ad::Var model_forward_dense(ad::Var x, std::span<const double> ts, const ParamVars& p,
                            const DiTConfig& cfg) {
  if (x.value().rows() != ts.size() * cfg.tokens)
    throw DimensionError("model_forward_dense: " + std::to_string(x.value().rows()) + " rows for " +
                         std::to_string(ts.size()) + " timesteps of " + std::to_string(cfg.tokens) + " tokens");
  ad::Var temb = timestep_embed(x.tape(), p, ts, cfg);
  ad::Var h = input_proj(x, p);
  for (const auto& b : p.blocks) h = block_forward(h, temb, b, cfg);
  return output_head(h, p);
}

Tensor stack_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("stack_rows: nothing to stack");
  const std::size_t cols = parts.front().cols();
  std::vector<double> values;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("stack_rows: column mismatch");
    values.insert(values.end(), p.data().begin(), p.data().end());
    rows += p.rows();
  }
  return Tensor({rows, cols}, std::move(values));
}

std::vector<Tensor> split_rows(const Tensor& stacked, std::size_t parts) {
  if (parts == 0 || stacked.rows() % parts != 0)
    throw DimensionError("split_rows: " + std::to_string(stacked.rows()) + " rows into " +
                         std::to_string(parts) + " parts");
  const std::size_t r = stacked.rows() / parts, c = stacked.cols();
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < parts; ++i)
    out.emplace_back(Shape{r, c}, std::vector<double>(stacked.data().begin() + i * r * c,
                                                      stacked.data().begin() + (i + 1) * r * c));
  return out;
}

}  // namespace edit::model
