#include <doctest.h>

#include <cmath>

#include "edit/elastic.hpp"
#include "edit/flow.hpp"
#include "edit/kernels.hpp"
#include "support.hpp"

using namespace edit;
using elastic::WidthMenu;
using model::DiTConfig;

namespace {

DiTConfig small_config() {
  DiTConfig c;
  c.n_blocks = 3;
  c.dim = 8;
  c.width_factor = 4;
  c.router_hidden = 4;
  c.n_heads = 2;
  c.tokens = 3;
  return c;
}

model::Params random_model(const DiTConfig& cfg, std::uint64_t seed) {
  auto p = model::init_params(cfg, seed);
  std::mt19937_64 rng(seed + 100);
  elastic::init_routers_random(p.routers, rng);
  return p;
}

void force_router(model::RouterWeights& r, double gate_bias, std::size_t width_index) {
  for (Tensor* t : {&r.mod_w, &r.mod_b, &r.w, &r.w_gate, &r.w_width, &r.width_bias})
    for (auto& v : t->data()) v = 0.0;
  r.gate_bias[0] = gate_bias;
  r.width_bias[width_index] = 10.0;
}

}  // namespace

TEST_SUITE("elastic") {
  TEST_CASE("select_width") {
    CHECK(elastic::select_width({0, 0, 0, 10}).ratio == 1.0);
    const auto tie = elastic::select_width({0, 0, 0, 0});
    CHECK(tie.index == 3);
    for (double q : tie.probs) CHECK(q == 0.25);
    const auto c = elastic::select_width({2, 1, 0, -1});
    CHECK(c.index == 0);
    CHECK(c.ratio == 0.25);
    const double z = std::exp(2) + std::exp(1) + 1 + std::exp(-1);
    CHECK(std::abs(c.probs[0] - std::exp(2) / z) <= 1e-12);
    CHECK(std::abs(c.probs[3] - std::exp(-1) / z) <= 1e-12);
  }

  TEST_CASE("select_width invariances") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd(0.0, 2.0);
    std::uniform_real_distribution<double> pos(0.1, 10.0);
    for (int i = 0; i < 500; ++i) {
      std::array<double, 4> u{nd(rng), nd(rng), nd(rng), nd(rng)};
      const auto base = elastic::select_width(u);
      const double shift = nd(rng), c = pos(rng);
      std::array<double, 4> us = u, uc = u;
      for (std::size_t j = 0; j < 4; ++j) {
        us[j] += shift;
        uc[j] *= c;
      }
      const auto s = elastic::select_width(us);
      CHECK(s.index == base.index);
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(s.probs[j] - base.probs[j]) <= 1e-12);
      CHECK(elastic::select_width(uc).index == base.index);
    }
  }

  TEST_CASE("width menu") {
    WidthMenu m;
    CHECK_NOTHROW(m.validate(128));
    CHECK(m.channels(0.75, 128) == 96);
    CHECK_THROWS_AS(m.index_of(0.3), DomainError);
    CHECK_THROWS_AS(m.validate(6), DomainError);
  }

  TEST_CASE("router with all-zero weights") {
    const DiTConfig cfg = small_config();
    const auto p = model::zero_params(cfg);
    std::mt19937_64 rng(2);
    const auto out = elastic::router_forward(testing::randn({cfg.tokens, cfg.dim}, rng), Tensor({1, cfg.dim}), p.routers[0]);
    CHECK(out.gate_logit == 0.0);
    CHECK(out.gate_prob == 0.5);
    for (double q : out.width_probs) CHECK(q == 0.25);
    CHECK(out.width_ratio == 1.0);
    CHECK(elastic::ste_gate_value(out.gate_prob, 0.5) == 1.0);
  }

  TEST_CASE("router small case against a reference loop") {
    const std::size_t L = 2, D = 4, Hr = 2;
    std::mt19937_64 rng(3);
    model::RouterWeights w{testing::randn({D, 2 * D}, rng, 0.3), testing::randn({1, 2 * D}, rng, 0.3),
                           testing::randn({D, Hr}, rng),         testing::randn({Hr, 1}, rng),
                           testing::randn({Hr, 4}, rng),         testing::randn({1, 1}, rng),
                           testing::randn({1, 4}, rng)};
    const Tensor x = testing::randn({L, D}, rng), temb = testing::randn({1, D}, rng);
    const auto out = elastic::router_forward(x, temb, w);

    double gamma[D], shift[D];
    for (std::size_t j = 0; j < 2 * D; ++j) {
      double a = w.mod_b[j];
      for (std::size_t d = 0; d < D; ++d) a += temb[d] * w.mod_w.at(d, j);
      (j < D ? gamma[j] : shift[j - D]) = a;
    }
    double hm[Hr] = {0, 0};
    for (std::size_t r = 0; r < L; ++r) {
      double m = 0, v = 0, xt[D];
      for (std::size_t d = 0; d < D; ++d) m += x.at(r, d) / D;
      for (std::size_t d = 0; d < D; ++d) v += (x.at(r, d) - m) * (x.at(r, d) - m) / D;
      for (std::size_t d = 0; d < D; ++d) xt[d] = (1 + gamma[d]) * (x.at(r, d) - m) / std::sqrt(v + 1e-6) + shift[d];
      for (std::size_t k = 0; k < Hr; ++k) {
        double a = 0;
        for (std::size_t d = 0; d < D; ++d) a += xt[d] * w.w.at(d, k);
        hm[k] += kern::gelu(a) / L;
      }
    }
    double logit = w.gate_bias[0];
    for (std::size_t k = 0; k < Hr; ++k) logit += hm[k] * w.w_gate[k];
    CHECK(std::abs(out.gate_logit - logit) <= 1e-12);
    CHECK(std::abs(out.gate_prob - 1 / (1 + std::exp(-logit))) <= 1e-12);
    double qs = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      double u = w.width_bias[j];
      for (std::size_t k = 0; k < Hr; ++k) u += hm[k] * w.w_width.at(k, j);
      CHECK(std::abs(out.width_logits[j] - u) <= 1e-12);
      qs += out.width_probs[j];
    }
    CHECK(std::abs(qs - 1.0) <= 1e-12);
    CHECK(out.soft_width >= 0.25);
    CHECK(out.soft_width <= 1.0);
  }

  TEST_CASE("batched tape router equals the single-sample router") {
    const DiTConfig cfg = small_config();
    const auto p = random_model(cfg, 4);
    std::mt19937_64 rng(4);
    const std::vector<Tensor> xs{testing::randn({cfg.tokens, cfg.dim}, rng), testing::randn({cfg.tokens, cfg.dim}, rng)};
    const std::vector<Tensor> tembs{testing::randn({1, cfg.dim}, rng), testing::randn({1, cfg.dim}, rng)};
    ad::Tape tape;
    const auto rp = model::bind(tape, p.routers[1], false);
    const auto rv = elastic::router_forward(tape.constant(model::stack_rows(xs)), tape.constant(model::stack_rows(tembs)),
                                            rp, cfg.tokens);
    for (std::size_t b = 0; b < 2; ++b) {
      const auto o = elastic::router_forward(xs[b], tembs[b], p.routers[1]);
      CHECK(std::abs(rv.gate_logit.value()[b] - o.gate_logit) <= 1e-13);
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(rv.width_logits.value().at(b, j) - o.width_logits[j]) <= 1e-13);
    }
  }

  TEST_CASE("straight-through gate") {
    for (auto [p, tau, want] : {std::tuple{0.7, 0.5, 1.0}, std::tuple{0.3, 0.5, 0.0}, std::tuple{0.5, 0.5, 1.0}}) {
      ad::Tape tape;
      const ad::Var pv = tape.leaf(Tensor::scalar(p));
      const ad::Var g = elastic::straight_through(pv, Tensor::scalar(elastic::ste_gate_value(p, tau)));
      CHECK(g.value().item() == want);
      tape.backward(ad::sum(g));
      CHECK(tape.grad(pv).item() == 1.0);
    }
  }

  TEST_CASE("masked MLP") {
    const DiTConfig cfg = small_config();
    const auto p = random_model(cfg, 5);
    const auto& w = p.blocks[0];
    std::mt19937_64 rng(5);
    const Tensor z = testing::randn({cfg.tokens, cfg.dim}, rng);
    CHECK(elastic::mlp_masked(z, 1.0, w) == model::mlp_dense(z, w));
    for (double s : {0.25, 0.5, 0.75, 1.0}) {
      CHECK(elastic::mlp_masked(Tensor(z.shape()), s, w) == Tensor(z.shape()));
      CHECK(max_abs_diff(elastic::mlp_masked(z, s, w), elastic::mlp_sliced(z, s, w)) <= 1e-12);
    }
    CHECK_THROWS_AS(elastic::mlp_masked(z, 0.6, w), DomainError);
    CHECK_THROWS_AS(elastic::mlp_sliced(z, 0.6, w), DomainError);
  }

  TEST_CASE("sliced MLP ignores dropped rows") {
    const DiTConfig cfg = small_config();
    auto w = random_model(cfg, 6).blocks[0];
    std::mt19937_64 rng(6);
    const Tensor z = testing::randn({cfg.tokens, cfg.dim}, rng);
    CHECK(elastic::mlp_sliced(z, 1.0, w) == model::mlp_dense(z, w));
    for (std::size_t r = 0; r < cfg.hidden() / 4; ++r)
      for (std::size_t c = 0; c < cfg.dim; ++c) w.mlp_w2.at(r, c) = 0.0;
    CHECK(elastic::mlp_sliced(z, 0.25, w) == Tensor(z.shape()));
  }

  TEST_CASE("tape masked MLP equals the sliced MLP per sample") {
    const DiTConfig cfg = small_config();
    const auto p = random_model(cfg, 7);
    std::mt19937_64 rng(7);
    const std::vector<Tensor> zs{testing::randn({cfg.tokens, cfg.dim}, rng), testing::randn({cfg.tokens, cfg.dim}, rng)};
    const std::vector<std::size_t> channels{8, 24};
    ad::Tape tape;
    const auto pv = model::bind(tape, p, false, false);
    const auto out = model::split_rows(
        elastic::mlp_masked(tape.constant(model::stack_rows(zs)), channels, pv.blocks[2], cfg.tokens).value(), 2);
    CHECK(max_abs_diff(out[0], elastic::mlp_sliced(zs[0], 0.25, p.blocks[2])) <= 1e-12);
    CHECK(max_abs_diff(out[1], elastic::mlp_sliced(zs[1], 0.75, p.blocks[2])) <= 1e-12);
  }

  TEST_CASE("gating loss") {
    const std::vector<double> a{0.6, 0.6, 0.6}, b{0.8, 0.8}, c{0.9, 0.1, 0.9, 0.1};
    CHECK(elastic::gating_loss(a, 0.6) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(std::abs(elastic::gating_loss(b, 0.6) - 0.04) <= 1e-15);
    CHECK(std::abs(elastic::gating_loss(c, 0.5)) <= 1e-15);
    CHECK_THROWS_AS(elastic::gating_loss(std::vector<double>{}, 0.6), ContractError);
  }

  TEST_CASE("width loss") {
    elastic::RouterOutput half;
    half.gate_prob = 0.9;
    half.width_probs = {0, 1, 0, 0};
    half.soft_width = 0.5;
    const std::vector<elastic::RouterOutput> one_hot(3, half);
    CHECK(elastic::width_loss(one_hot, 0.5, 0.5) == 0.0);

    elastic::RouterOutput uni = half;
    uni.width_probs = {0.25, 0.25, 0.25, 0.25};
    uni.soft_width = 0.625;
    const std::vector<elastic::RouterOutput> uniform(4, uni);
    CHECK(std::abs(elastic::width_loss(uniform, 0.5, 0.625)) <= 1e-15);

    std::vector<elastic::RouterOutput> off(3, half);
    for (auto& o : off) o.gate_prob = 0.2;
    CHECK(elastic::width_loss(off, 0.5, 0.65) == 0.0);
  }

  TEST_CASE("total loss") {
    CHECK(elastic::total_loss(1.3, 0.2, 0.1, 0.0) == 1.3);
    CHECK(std::abs(elastic::total_loss(1.0, 0.04, 0.01, 1.0) - 1.05) <= 1e-15);
  }

  TEST_CASE("tape losses equal the scalar losses") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t B = 3, n = 4;
    Tensor p({B, n}), r({B, n}), active({B, n});
    for (std::size_t k = 0; k < B * n; ++k) {
      p[k] = u(rng);
      r[k] = 0.25 + 0.75 * u(rng);
      active[k] = p[k] >= 0.5 ? 1.0 : 0.0;
    }
    for (std::size_t j = 0; j < n; ++j) active.at(2, j) = 0.0;  // one sample with nothing active
    double g_ref = 0.0, w_ref = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<double> row(n);
      std::vector<elastic::RouterOutput> outs(n);
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = p.at(b, j);
        outs[j].gate_prob = active.at(b, j) != 0.0 ? 0.9 : 0.1;
        outs[j].soft_width = r.at(b, j);
      }
      g_ref += elastic::gating_loss(row, 0.6) / B;
      w_ref += elastic::width_loss(outs, 0.5, 0.65) / B;
    }
    ad::Tape tape;
    CHECK(std::abs(elastic::gating_loss(tape.constant(p), 0.6).value()[0] - g_ref) <= 1e-12);
    CHECK(std::abs(elastic::width_loss(tape.constant(r), active, 0.65).value()[0] - w_ref) <= 1e-12);
  }

  TEST_CASE("full-capacity init keeps every block open at full width") {
    const DiTConfig cfg;
    auto p = model::init_params(cfg, 9);
    std::mt19937_64 rng(9);
    elastic::init_routers_full_capacity(p.routers, rng);
    CHECK(std::abs(kern::sigmoid(p.routers[0].gate_bias[0]) - 0.95) < 1e-12);

    flow::SynthConfig sc;
    const flow::GaussianMixture mix(sc);
    std::vector<flow::FlowSample> batch = flow::gen_batch(mix, 100, rng);
    std::vector<Tensor> xs;
    std::vector<double> ts;
    for (const auto& s : batch) {
      xs.push_back(flow::trajectory_point(s));
      ts.push_back(s.t);
    }
    ad::Tape tape;
    const auto pv = model::bind(tape, p, false, false);
    const auto f = elastic::elastic_forward(tape.constant(model::stack_rows(xs)), ts, pv, cfg, {});
    for (std::size_t k = 0; k < 100 * cfg.n_blocks; ++k) {
      CHECK(f.decisions.active[k] == 1.0);
      CHECK(f.decisions.width_index[k] == 3);
    }
  }

  TEST_CASE("forced-dense elastic forward equals the dense model") {
    const DiTConfig cfg = small_config();
    const auto p = random_model(cfg, 10);
    std::mt19937_64 rng(10);
    const std::vector<Tensor> xs{testing::randn({cfg.tokens, cfg.dim}, rng), testing::randn({cfg.tokens, cfg.dim}, rng)};
    const std::vector<double> ts{0.1, 0.75};
    ad::Tape tape;
    const auto pv = model::bind(tape, p, false, false);
    const auto f = elastic::elastic_forward(tape.constant(model::stack_rows(xs)), ts, pv, cfg, {},
                                            {elastic::GateMode::ForceDense, nullptr});
    const auto out = model::split_rows(f.velocity.value(), 2);
    for (std::size_t b = 0; b < 2; ++b) CHECK(max_abs_diff(out[b], model::model_forward_dense(xs[b], ts[b], p, cfg)) <= 1e-12);
  }

  TEST_CASE("forced-closed gate passes the latent through while gate_bias still gets gradient") {
    DiTConfig cfg = small_config();
    cfg.n_blocks = 1;
    auto p = random_model(cfg, 11);
    force_router(p.routers[0], std::log(0.01 / 0.99), 3);
    std::mt19937_64 rng(11);
    const Tensor x = testing::randn({cfg.tokens, cfg.dim}, rng);
    const std::vector<double> ts{0.4};
    ad::Tape tape;
    const auto pv = model::bind(tape, p, true, true);
    const auto f = elastic::elastic_forward(tape.constant(x), ts, pv, cfg, {});
    CHECK(f.decisions.active[0] == 0.0);
    CHECK(max_abs_diff(f.velocity.value(), model::output_head(model::input_proj(x, p), p)) == 0.0);
    tape.backward(ad::mean(ad::mul(f.velocity, f.velocity)));
    CHECK(tape.grad(pv.routers[0].gate_bias).item() != 0.0);
  }

  TEST_CASE("forced-open gate at full width equals the dense block") {
    DiTConfig cfg = small_config();
    cfg.n_blocks = 1;
    auto p = random_model(cfg, 12);
    force_router(p.routers[0], std::log(0.99 / 0.01), 3);
    std::mt19937_64 rng(12);
    const Tensor x = testing::randn({cfg.tokens, cfg.dim}, rng);
    ad::Tape tape;
    const auto pv = model::bind(tape, p, false, false);
    const auto f = elastic::elastic_forward(tape.constant(x), std::vector<double>{0.4}, pv, cfg, {});
    CHECK(max_abs_diff(f.velocity.value(), model::model_forward_dense(x, 0.4, p, cfg)) <= 1e-12);
  }

  TEST_CASE("router gradient of the efficiency terms scales with lambda") {
    const DiTConfig cfg = small_config();
    const auto p = random_model(cfg, 13);
    std::mt19937_64 rng(13);
    const Tensor x = testing::randn({2 * cfg.tokens, cfg.dim}, rng), x0 = testing::randn({2 * cfg.tokens, cfg.dim}, rng),
                 x1 = testing::randn({2 * cfg.tokens, cfg.dim}, rng);
    const std::vector<double> ts{0.3, 0.6};
    auto router_grad = [&](double lambda) {
      elastic::ElasticConfig ec;
      ec.lambda = lambda;
      ad::Tape tape;
      const auto pv = model::bind(tape, p, true, true);
      const auto f = elastic::elastic_forward(tape.constant(x), ts, pv, cfg, ec);
      const ad::Var loss = elastic::total_loss(flow::fm_loss(f.velocity, x0, x1), elastic::gating_loss(f.gate_probs, ec.rho_g),
                                               elastic::width_loss(f.soft_widths, f.active, ec.rho_w), lambda);
      tape.backward(loss);
      return tape.grad(pv.routers[0].w_width);
    };
    const Tensor g0 = router_grad(0.0), g1 = router_grad(1.0), g2 = router_grad(2.0);
    const Tensor e1 = kern::sub(g1, g0), e2 = kern::sub(g2, g0);
    CHECK(kern::sum(kern::mul(e1, e1)) > 0.0);
    CHECK(max_abs_diff(e2, kern::scale(e1, 2.0)) <= 1e-12);
  }

  TEST_CASE("surrogate gradient through the logit is p(1-p)") {
    std::mt19937_64 rng(14);
    std::normal_distribution<double> nd(0.0, 3.0);
    for (int i = 0; i < 200; ++i) {
      ad::Tape tape;
      const ad::Var l = tape.leaf(Tensor::scalar(nd(rng)));
      const ad::Var p = ad::sigmoid(l);
      const double pv = p.value().item();
      const ad::Var g = elastic::straight_through(p, Tensor::scalar(elastic::ste_gate_value(pv, 0.5)));
      tape.backward(ad::sum(g));
      CHECK(std::abs(tape.grad(l).item() - pv * (1 - pv)) <= 1e-12);
    }
  }
}
