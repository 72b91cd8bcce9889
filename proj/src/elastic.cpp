#include "edit/elastic.hpp"

#include <algorithm>
#include <cmath>

#include "edit/kernels.hpp"

namespace edit::elastic {

void WidthMenu::validate(std::size_t hidden) const {
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] > 0.0)) throw DomainError("width ratios must be positive");
    if (i && !(ratios[i] > ratios[i - 1])) throw DomainError("width ratios must be strictly increasing");
    const double ch = ratios[i] * static_cast<double>(hidden);
    if (ch != std::round(ch))
      throw DomainError("width ratio " + std::to_string(ratios[i]) + " of hidden " +
                        std::to_string(hidden) + " is not an integer channel count");
  }
  if (ratios.back() != 1.0) throw DomainError("last width ratio must be 1");
}

std::size_t WidthMenu::index_of(double ratio) const {
  for (std::size_t i = 0; i < ratios.size(); ++i)
    if (ratios[i] == ratio) return i;
  throw DomainError("width ratio " + std::to_string(ratio) + " is not in the width menu");
}

std::size_t WidthMenu::channels(double ratio, std::size_t hidden) const {
  return static_cast<std::size_t>(std::llround(ratios[index_of(ratio)] * static_cast<double>(hidden)));
}

void ElasticConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("tau must lie in (0,1)");
  if (!(rho_g > 0.0 && rho_g < 1.0)) throw DomainError("rho_g must lie in (0,1)");
  if (!(rho_w > 0.0 && rho_w < 1.0)) throw DomainError("rho_w must lie in (0,1)");
  if (!(lambda >= 0.0)) throw DomainError("lambda must be >= 0");
}

WidthChoice select_width(const std::array<double, 4>& logits, const WidthMenu& menu) {
  WidthChoice c;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t j = 0; j < 4; ++j) z += (c.probs[j] = std::exp(logits[j] - mx));
  for (auto& q : c.probs) q /= z;
  c.index = 0;
  for (std::size_t j = 1; j < 4; ++j)
    if (c.probs[j] >= c.probs[c.index]) c.index = j;
  c.ratio = menu.ratios[c.index];
  return c;
}

RouterOutput router_forward(const Tensor& x, const Tensor& t_emb, const RouterWeights& w,
                            const WidthMenu& menu) {
  const std::size_t D = x.cols();
  if (t_emb.size() != D || w.w.rows() != D)
    throw DimensionError("router_forward: x " + shape_str(x.shape()) + ", t_emb " +
                         shape_str(t_emb.shape()) + ", W " + shape_str(w.w.shape()));
  const Tensor mod = kern::add_row(kern::matmul(t_emb.reshaped({1, D}), w.mod_w), w.mod_b);
  const Tensor xt = model::modulate(x, kern::slice_cols(mod, 0, D), kern::slice_cols(mod, D, D));
  const Tensor h = kern::gelu(kern::matmul(xt, w.w));
  const Tensor hm = kern::group_mean_rows(h, h.rows());
  RouterOutput out;
  out.gate_logit = kern::add_row(kern::matmul(hm, w.w_gate), w.gate_bias)[0];
  out.gate_prob = kern::sigmoid(out.gate_logit);
  const Tensor u = kern::add_row(kern::matmul(hm, w.w_width), w.width_bias);
  std::copy_n(u.data().begin(), 4, out.width_logits.begin());
  const WidthChoice c = select_width(out.width_logits, menu);
  out.width_probs = c.probs;
  out.width_index = c.index;
  out.width_ratio = c.ratio;
  out.soft_width = 0.0;
  for (std::size_t j = 0; j < 4; ++j) out.soft_width += c.probs[j] * menu.ratios[j];
  return out;
}

double ste_gate_value(double p, double tau) { return p >= tau ? 1.0 : 0.0; }

Tensor mlp_sliced(const Tensor& z, double width_ratio, const BlockWeights& w, const WidthMenu& menu) {
  return model::mlp_prefix(z, w, menu.channels(width_ratio, w.mlp_w1.cols()));
}

Tensor mlp_masked(const Tensor& z, double width_ratio, const BlockWeights& w, const WidthMenu& menu) {
  const std::size_t H = w.mlp_w1.cols();
  const std::size_t keep = menu.channels(width_ratio, H);
  Tensor a = kern::gelu(kern::matmul(z, w.mlp_w1));
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t j = keep; j < H; ++j) a[r * H + j] = 0.0;
  return kern::matmul(a, w.mlp_w2);
}

double gating_loss(std::span<const double> gate_probs, double rho_g) {
  if (gate_probs.empty()) throw ContractError("gating_loss: empty probability list");
  double m = 0.0;
  for (double p : gate_probs) m += p;
  m /= static_cast<double>(gate_probs.size());
  return (m - rho_g) * (m - rho_g);
}

double width_loss(std::span<const RouterOutput> outputs, double tau, double rho_w) {
  double num = 0.0, den = 0.0;
  for (const auto& o : outputs) {
    if (o.gate_prob >= tau) {
      num += o.soft_width;
      den += 1.0;
    }
  }
  if (den == 0.0) return 0.0;
  const double r = num / den;
  return (r - rho_w) * (r - rho_w);
}

double total_loss(double perf, double gating, double width, double lambda) {
  return perf + lambda * (gating + width);
}

namespace {

void init_router_weights(RouterWeights& r, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 0.02);
  for (Tensor* t : {&r.mod_w, &r.w, &r.w_gate, &r.w_width})
    for (auto& v : t->data()) v = nd(rng);
  std::fill(r.mod_b.data().begin(), r.mod_b.data().end(), 0.0);
}

}  // namespace

void init_routers_full_capacity(std::vector<RouterWeights>& routers, std::mt19937_64& rng) {
  for (auto& r : routers) {
    init_router_weights(r, rng);
    r.gate_bias[0] = kFullOpenGateBias;
    const double wb[4] = {0.0, 0.0, 0.0, 4.0};
    std::copy(std::begin(wb), std::end(wb), r.width_bias.data().begin());
  }
}

void init_routers_random(std::vector<RouterWeights>& routers, std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 1.0);
  for (auto& r : routers) {
    init_router_weights(r, rng);
    r.gate_bias[0] = unit(rng);
    for (auto& v : r.width_bias.data()) v = unit(rng);
  }
}

// ---- tape path ------------------------------------------------------------------

RouterVars router_forward(ad::Var x, ad::Var t_emb, const model::RouterParams<ad::Var>& w,
                          std::size_t tokens) {
  const std::size_t D = x.value().cols();
  ad::Var mod = ad::add_row(ad::matmul(t_emb, w.mod_w), w.mod_b);
  ad::Var xt = model::modulate(x, ad::slice_cols(mod, 0, D), ad::slice_cols(mod, D, D), tokens);
  ad::Var h = ad::gelu(ad::matmul(xt, w.w));
  ad::Var hm = ad::group_mean_rows(h, tokens);
  return {ad::add_row(ad::matmul(hm, w.w_gate), w.gate_bias),
          ad::add_row(ad::matmul(hm, w.w_width), w.width_bias)};
}

ad::Var straight_through(ad::Var p, const Tensor& hard) {
  if (hard.size() != p.value().size())
    throw DimensionError("straight_through: gate " + shape_str(p.shape()) + " vs decision " +
                         shape_str(hard.shape()));
  return p.tape().record("straight_through", hard.reshaped(p.shape()), {p},
                         [p](const Tensor& g) { p.tape().accumulate(p, g); });
}

Tensor prefix_mask(std::span<const std::size_t> channels, std::size_t tokens, std::size_t hidden) {
  Tensor m({channels.size() * tokens, hidden});
  for (std::size_t b = 0; b < channels.size(); ++b) {
    if (channels[b] > hidden) throw DimensionError("prefix_mask: channel count exceeds hidden width");
    for (std::size_t t = 0; t < tokens; ++t)
      std::fill_n(m.data().begin() + (b * tokens + t) * hidden, channels[b], 1.0);
  }
  return m;
}

ad::Var mlp_masked(ad::Var z, std::span<const std::size_t> channels, const model::BlockParams<ad::Var>& w,
                   std::size_t tokens) {
  const Tensor m = prefix_mask(channels, tokens, w.mlp_w1.value().cols());
  return model::mlp(z, w, &m);
}

ad::Var gating_loss(ad::Var p_all, double rho_g) {
  ad::Var d = ad::add_scalar(ad::mean_axis(p_all, 1), -rho_g);
  return ad::mean(ad::mul(d, d));
}

ad::Var width_loss(ad::Var soft_widths, const Tensor& active, double rho_w) {
  const std::size_t B = active.rows(), n = active.cols();
  if (soft_widths.value().rows() != B || soft_widths.value().cols() != n)
    throw DimensionError("width_loss: widths " + shape_str(soft_widths.shape()) + " vs active " +
                         shape_str(active.shape()));
  Tensor weights({B, n});
  Tensor valid({B, 1});
  for (std::size_t b = 0; b < B; ++b) {
    double count = 0.0;
    for (std::size_t j = 0; j < n; ++j) count += active.at(b, j);
    if (count == 0.0) continue;
    valid[b] = 1.0;
    for (std::size_t j = 0; j < n; ++j) weights.at(b, j) = active.at(b, j) / count * static_cast<double>(n);
  }
  ad::Var r_bar = ad::mean_axis(ad::mask(soft_widths, weights), 1);
  ad::Var d = ad::mask(ad::add_scalar(r_bar, -rho_w), valid);
  return ad::mean(ad::mul(d, d));
}

ad::Var total_loss(ad::Var perf, ad::Var gating, ad::Var width, double lambda) {
  return ad::add(perf, ad::scale(ad::add(gating, width), lambda));
}

ElasticForward elastic_forward(ad::Var x, std::span<const double> ts, const model::ParamVars& p,
                               const DiTConfig& cfg, const ElasticConfig& ecfg, const ForwardOptions& opts) {
  ad::Tape& tape = x.tape();
  const std::size_t B = ts.size(), n = cfg.n_blocks, L = cfg.tokens, H = cfg.hidden();
  if (x.value().rows() != B * L)
    throw DimensionError("elastic_forward: " + std::to_string(x.value().rows()) + " rows for batch " +
                         std::to_string(B));
  if (opts.mode == GateMode::FrozenSurrogate &&
      (!opts.frozen || opts.frozen->batch != B || opts.frozen->blocks != n))
    throw ContractError("elastic_forward: frozen mode needs decisions of matching size");

  ElasticForward out;
  out.decisions.batch = B;
  out.decisions.blocks = n;
  out.decisions.gate_prob.resize(B * n);
  out.decisions.active.resize(B * n);
  out.decisions.width_index.resize(B * n);

  Tensor menu_col({4, 1}, std::vector<double>(ecfg.widths.ratios.begin(), ecfg.widths.ratios.end()));
  ad::Var menu = tape.constant(menu_col);
  ad::Var temb = model::timestep_embed(tape, p, ts, cfg);
  ad::Var h = model::input_proj(x, p);
  std::vector<ad::Var> probs, widths;
  for (std::size_t i = 0; i < n; ++i) {
    RouterVars rv = router_forward(h, temb, p.routers[i], L);
    ad::Var pv = ad::sigmoid(rv.gate_logit);
    ad::Var qv = ad::softmax(rv.width_logits);
    probs.push_back(pv);
    widths.push_back(ad::matmul(qv, menu));

    Tensor hard({B, 1});
    std::vector<std::size_t> channels(B);
    bool any_reduced = false;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t k = b * n + i;
      const double pb = pv.value()[b];
      std::size_t widx;
      double act;
      if (opts.mode == GateMode::ForceDense) {
        act = 1.0;
        widx = 3;
      } else if (opts.mode == GateMode::FrozenSurrogate) {
        act = opts.frozen->active[k];
        widx = opts.frozen->width_index[k];
      } else {
        act = ste_gate_value(pb, ecfg.tau);
        std::array<double, 4> u;
        std::copy_n(rv.width_logits.value().data().begin() + 4 * b, 4, u.begin());
        widx = select_width(u, ecfg.widths).index;
      }
      out.decisions.gate_prob[k] = pb;
      out.decisions.active[k] = act;
      out.decisions.width_index[k] = widx;
      hard[b] = act;
      channels[b] = ecfg.widths.channels(ecfg.widths.ratios[widx], H);
      any_reduced = any_reduced || channels[b] != H;
    }

    ad::Var g;
    switch (opts.mode) {
      case GateMode::StraightThrough:
        g = straight_through(pv, hard);
        break;
      case GateMode::FrozenSurrogate: {
        Tensor p0({B, 1});
        for (std::size_t b = 0; b < B; ++b) p0[b] = opts.frozen->gate_prob[b * n + i];
        g = ad::add(tape.constant(hard), ad::sub(pv, tape.constant(p0)));
        break;
      }
      case GateMode::NoSurrogate:
      case GateMode::ForceDense:
        g = tape.constant(hard);
        break;
    }

    Tensor mask;
    if (any_reduced) mask = prefix_mask(channels, L, H);
    ad::Var bx = model::block_forward(h, temb, p.blocks[i], cfg, any_reduced ? &mask : nullptr);
    h = ad::add(h, ad::scale_rows(ad::sub(bx, h), ad::repeat_rows(g, L)));
  }
  out.velocity = model::output_head(h, p);
  out.gate_probs = ad::concat_cols(probs);
  out.soft_widths = ad::concat_cols(widths);
  out.active = Tensor({B, n}, out.decisions.active);
  return out;
}

}  // namespace edit::elastic
