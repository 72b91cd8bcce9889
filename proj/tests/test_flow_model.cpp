#include <doctest.h>

#include <cmath>
#include <fstream>

#include "edit/checkpoint.hpp"
#include "edit/flow.hpp"
#include "edit/kernels.hpp"
#include "edit/model.hpp"
#include "support.hpp"

using namespace edit;
using model::DiTConfig;

namespace {

DiTConfig small_config() {
  DiTConfig c;
  c.n_blocks = 2;
  c.dim = 8;
  c.width_factor = 4;
  c.router_hidden = 4;
  c.n_heads = 2;
  c.tokens = 3;
  return c;
}

}  // namespace

TEST_SUITE("flow") {
  TEST_CASE("trajectory endpoints and midpoint") {
    std::mt19937_64 rng(1);
    flow::FlowSample s{testing::randn({2, 3}, rng), testing::randn({2, 3}, rng), 0.0};
    CHECK(flow::trajectory_point(s) == s.x0);
    s.t = 1.0;
    CHECK(flow::trajectory_point(s) == s.x1);
    CHECK(flow::trajectory_point({Tensor::row({0}), Tensor::row({2}), 0.5}) == Tensor::row({1}));
    s.t = 1.5;
    CHECK_THROWS_AS(flow::trajectory_point(s), DomainError);
  }

  TEST_CASE("fm_loss") {
    std::mt19937_64 rng(2);
    const Tensor x0 = testing::randn({3, 4}, rng), x1 = testing::randn({3, 4}, rng), pred = testing::randn({3, 4}, rng);
    CHECK(flow::fm_loss(kern::sub(x1, x0), x0, x1) == 0.0);
    CHECK(flow::fm_loss(Tensor::row({0, 0}), Tensor::row({0, 0}), Tensor::row({2, 2})) == 4.0);
    double ref = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) ref += std::pow(pred[i] - (x1[i] - x0[i]), 2);
    CHECK(std::abs(flow::fm_loss(pred, x0, x1) - ref / 12.0) <= 1e-12);
    CHECK_THROWS_AS(flow::fm_loss(Tensor::row({1}), x0, x1), DimensionError);
  }

  TEST_CASE("fm_loss on the tape matches the tensor version") {
    std::mt19937_64 rng(3);
    const Tensor x0 = testing::randn({3, 4}, rng), x1 = testing::randn({3, 4}, rng), pred = testing::randn({3, 4}, rng);
    ad::Tape tape;
    CHECK(std::abs(flow::fm_loss(tape.constant(pred), x0, x1).value()[0] - flow::fm_loss(pred, x0, x1)) < 1e-15);
  }

  TEST_CASE("Euler on a constant field recovers the data endpoint") {
    std::mt19937_64 rng(4);
    const Tensor x0 = testing::randn({2, 3}, rng), x1 = testing::randn({2, 3}, rng);
    const Tensor v = kern::sub(x1, x0);
    for (int T : {1, 3, 10}) {
      const Tensor out = flow::euler_sample([&](const Tensor&, double) { return v; }, x1, T);
      CHECK(max_abs_diff(out, x0) < 1e-12);
    }
  }

  TEST_CASE("one Euler step unrolled") {
    const auto vf = [](const Tensor& x, double t) { return kern::scale(x, t + 1.0); };
    const Tensor x1 = flow::gaussian_noise(2, 2, 9);
    const Tensor out = flow::euler_sample(vf, 2, 2, 1, 9);
    CHECK(out == kern::sub(x1, vf(x1, 1.0)));
    CHECK_THROWS_AS(flow::euler_sample(vf, 2, 2, 0, 9), DomainError);
  }

  TEST_CASE("gen_batch is deterministic under seed") {
    flow::SynthConfig cfg;
    flow::Rng a(5), b(5);
    const auto ba = flow::gen_batch(cfg, 4, a), bb = flow::gen_batch(cfg, 4, b);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(ba[i].x0 == bb[i].x0);
      CHECK(ba[i].x1 == bb[i].x1);
      CHECK(ba[i].t == bb[i].t);
      CHECK(ba[i].t >= 0.0);
      CHECK(ba[i].t <= 1.0);
    }
  }

  TEST_CASE("noise endpoint has zero mean") {
    flow::SynthConfig cfg;
    cfg.tokens = 10;
    cfg.dim = 10;
    flow::Rng rng(6);
    double s = 0.0;
    const auto batch = flow::gen_batch(cfg, 1000, rng);
    for (const auto& f : batch) s += kern::sum(f.x1);
    CHECK(std::abs(s / 1e5) < 0.02);
  }

  TEST_CASE("single-mode mixture without noise returns the pattern") {
    flow::SynthConfig cfg;
    cfg.modes = 1;
    cfg.scale = 0.0;
    const flow::GaussianMixture mix(cfg);
    flow::Rng rng(7);
    for (const auto& x : mix.sample_data(5, rng)) CHECK(x == mix.pattern(0));
  }
}

TEST_SUITE("model") {
  TEST_CASE("config validation") {
    DiTConfig c = small_config();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = small_config();
    c.router_hidden = c.dim;
    CHECK_THROWS_AS(c.validate(), DomainError);
  }

  TEST_CASE("timestep embedding") {
    const DiTConfig cfg = small_config();
    const auto p = model::init_params(cfg, 1);
    const Tensor a = model::timestep_embed(0.1, p, cfg);
    CHECK(a == model::timestep_embed(0.1, p, cfg));
    CHECK(a.size() == cfg.dim);
    CHECK(max_abs_diff(a, model::timestep_embed(0.9, p, cfg)) > 0.0);
    CHECK_THROWS_AS(model::timestep_embed(1.5, p, cfg), DomainError);
  }

  TEST_CASE("sinusoidal features separate a fine grid") {
    const DiTConfig cfg;
    Tensor prev = model::sinusoidal_features(0.0, cfg.dim, cfg.t_max);
    for (int i = 1; i <= 1000; ++i) {
      const Tensor cur = model::sinusoidal_features(i * 1e-3, cfg.dim, cfg.t_max);
      REQUIRE(max_abs_diff(cur, prev) > 1e-6);
      prev = cur;
    }
  }

  TEST_CASE("modulate") {
    std::mt19937_64 rng(2);
    const Tensor x = testing::randn({3, 4}, rng), scale = testing::randn({1, 4}, rng), shift = testing::randn({1, 4}, rng);
    CHECK(model::modulate(x, Tensor({1, 4}), Tensor({1, 4})) == kern::layer_norm(x, kern::kLayerNormEps));
    const Tensor c = model::modulate(Tensor({3, 4}, 2.0), scale, shift);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t j = 0; j < 4; ++j) CHECK(c.at(r, j) == shift[j]);

    const Tensor y = model::modulate(x, scale, shift);
    double worst = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      double m = 0.0, v = 0.0;
      for (std::size_t j = 0; j < 4; ++j) m += x.at(r, j) / 4;
      for (std::size_t j = 0; j < 4; ++j) v += (x.at(r, j) - m) * (x.at(r, j) - m) / 4;
      for (std::size_t j = 0; j < 4; ++j) {
        const double ref = (1 + scale[j]) * (x.at(r, j) - m) / std::sqrt(v + 1e-6) + shift[j];
        worst = std::max(worst, std::abs(ref - y.at(r, j)));
      }
    }
    CHECK(worst <= 1e-12);
  }

  TEST_CASE("attention with one token and zero projections") {
    DiTConfig cfg = small_config();
    cfg.tokens = 1;
    const auto p = model::init_params(cfg, 3);
    std::mt19937_64 rng(3);
    const Tensor x = testing::randn({1, cfg.dim}, rng);
    const auto& w = p.blocks[0];
    CHECK(max_abs_diff(model::mhsa(x, w, cfg), kern::matmul(kern::matmul(x, w.wv), w.wo)) < 1e-14);
    auto z = w;
    z.wv = Tensor(w.wv.shape());
    CHECK(model::mhsa(x, z, cfg) == Tensor({1, cfg.dim}));
  }

  TEST_CASE("attention two tokens one head by hand") {
    DiTConfig cfg = small_config();
    cfg.dim = 2;
    cfg.n_heads = 1;
    cfg.router_hidden = 1;
    cfg.tokens = 2;
    model::BlockWeights w;
    w.wq = Tensor::matrix({{1, 0}, {0, 1}});
    w.wk = Tensor::matrix({{0.5, 0}, {0, 2}});
    w.wv = Tensor::matrix({{1, 1}, {0, 1}});
    w.wo = Tensor::matrix({{1, 0}, {0, 1}});
    const Tensor x = Tensor::matrix({{1, 2}, {3, -1}});
    const Tensor y = model::mhsa(x, w, cfg);
    const Tensor q = kern::matmul(x, w.wq), k = kern::matmul(x, w.wk), v = kern::matmul(x, w.wv);
    for (std::size_t i = 0; i < 2; ++i) {
      double s[2], z = 0.0;
      for (std::size_t j = 0; j < 2; ++j) {
        s[j] = std::exp((q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1)) / std::sqrt(2.0));
        z += s[j];
      }
      for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(y.at(i, c) - (s[0] * v.at(0, c) + s[1] * v.at(1, c)) / z) <= 1e-10);
    }
  }

  TEST_CASE("dense MLP") {
    const DiTConfig cfg = small_config();
    const auto p = model::init_params(cfg, 4);
    const auto& w = p.blocks[0];
    CHECK(model::mlp_dense(Tensor({3, cfg.dim}), w) == Tensor({3, cfg.dim}));
    auto z2 = w;
    z2.mlp_w2 = Tensor(w.mlp_w2.shape());
    std::mt19937_64 rng(4);
    const Tensor z = testing::randn({3, cfg.dim}, rng);
    CHECK(model::mlp_dense(z, z2) == Tensor({3, cfg.dim}));
    const Tensor y = model::mlp_dense(z, w);
    double worst = 0.0;
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < cfg.dim; ++c) {
        double acc = 0.0;
        for (std::size_t h = 0; h < cfg.hidden(); ++h) {
          double a = 0.0;
          for (std::size_t d = 0; d < cfg.dim; ++d) a += z.at(r, d) * w.mlp_w1.at(d, h);
          acc += kern::gelu(a) * w.mlp_w2.at(h, c);
        }
        worst = std::max(worst, std::abs(acc - y.at(r, c)));
      }
    CHECK(worst <= 1e-10);
  }

  TEST_CASE("block is the identity when its output projections are zero") {
    const DiTConfig cfg = small_config();
    auto p = model::init_params(cfg, 5);
    p.blocks[0].wo = Tensor(p.blocks[0].wo.shape());
    p.blocks[0].mlp_w2 = Tensor(p.blocks[0].mlp_w2.shape());
    std::mt19937_64 rng(5);
    const Tensor x = testing::randn({cfg.tokens, cfg.dim}, rng);
    const Tensor temb = model::timestep_embed(0.3, p, cfg);
    const Tensor y = model::block_forward_dense(x, temb, p.blocks[0], cfg);
    CHECK(y.shape() == x.shape());
    CHECK(y == x);
  }

  TEST_CASE("zero head gives zero velocity and forwards are bitwise repeatable") {
    const DiTConfig cfg = small_config();
    auto p = model::init_params(cfg, 6);
    std::mt19937_64 rng(6);
    const Tensor x = testing::randn({cfg.tokens, cfg.dim}, rng);
    CHECK(model::model_forward_dense(x, 0.4, p, cfg) == model::model_forward_dense(x, 0.4, p, cfg));
    p.out_w = Tensor(p.out_w.shape());
    p.out_b = Tensor(p.out_b.shape());
    CHECK(model::model_forward_dense(x, 0.4, p, cfg) == Tensor({cfg.tokens, cfg.dim}));
  }

  TEST_CASE("batched tape forward equals per-sample forwards") {
    const DiTConfig cfg = small_config();
    const auto p = model::init_params(cfg, 7);
    std::mt19937_64 rng(7);
    const std::vector<Tensor> xs{testing::randn({cfg.tokens, cfg.dim}, rng), testing::randn({cfg.tokens, cfg.dim}, rng)};
    const std::vector<double> ts{0.2, 0.85};
    ad::Tape tape;
    const auto pv = model::bind(tape, p, false, false);
    const auto out = model::split_rows(model::model_forward_dense(tape.constant(model::stack_rows(xs)), ts, pv, cfg).value(), 2);
    for (std::size_t i = 0; i < 2; ++i) CHECK(max_abs_diff(out[i], model::model_forward_dense(xs[i], ts[i], p, cfg)) <= 1e-13);
  }

  TEST_CASE("block gradient w.r.t. mlp_w1 matches finite differences") {
    const DiTConfig cfg = small_config();
    const auto p = model::init_params(cfg, 8);
    std::mt19937_64 rng(8);
    const Tensor x = testing::randn({cfg.tokens, cfg.dim}, rng);
    const std::vector<double> ts{0.6};
    const double err = testing::op_grad_error(
        [&](ad::Tape& tape, const std::vector<ad::Var>& v) {
          auto pv = model::bind(tape, p, false, false);
          pv.blocks[0].mlp_w1 = v[0];
          const ad::Var temb = model::timestep_embed(tape, pv, ts, cfg);
          return ad::mean(model::block_forward(tape.constant(x), temb, pv.blocks[0], cfg));
        },
        {p.blocks[0].mlp_w1});
    CHECK(err < 1e-5);
  }

  TEST_CASE("dense model gradient on random parameters matches finite differences") {
    const DiTConfig cfg = small_config();
    const auto p = model::init_params(cfg, 9);
    std::mt19937_64 rng(9);
    const Tensor x = testing::randn({2 * cfg.tokens, cfg.dim}, rng);
    const Tensor x0 = testing::randn({2 * cfg.tokens, cfg.dim}, rng), x1 = testing::randn({2 * cfg.tokens, cfg.dim}, rng);
    const std::vector<double> ts{0.3, 0.7};
    ad::Tape tape;
    const auto pv = model::bind(tape, p, true, false);
    tape.backward(flow::fm_loss(model::model_forward_dense(tape.constant(x), ts, pv, cfg), x0, x1));
    std::vector<double> g;
    model::for_each_param(pv, [&](const std::string&, const ad::Var& v, model::ParamGroup) {
      const Tensor t = tape.grad(v);
      g.insert(g.end(), t.data().begin(), t.data().end());
    });
    const ad::ScalarFn f = [&](std::span<const double> theta) {
      model::Params q = p;
      model::unflatten(q, theta);
      ad::Tape t2;
      return flow::fm_loss(model::model_forward_dense(t2.constant(x), ts, model::bind(t2, q, false, false), cfg), x0, x1)
          .value()[0];
    };
    const auto theta = model::flatten(p);
    std::vector<std::size_t> coords;
    std::mt19937_64 pick(10);
    std::uniform_int_distribution<std::size_t> u(0, theta.size() - 1);
    while (coords.size() < 10) {
      const std::size_t c = u(pick);
      if (g[c] != 0.0 || coords.size() % 2) coords.push_back(c);
    }
    CHECK(ad::grad_check(f, theta, g, coords).max_rel_err < 1e-5);
  }

  TEST_CASE("flatten round trip and shape checks") {
    const DiTConfig cfg = small_config();
    const auto p = model::init_params(cfg, 11);
    auto q = model::zero_params(cfg);
    model::unflatten(q, model::flatten(p));
    CHECK(model::flatten(q) == model::flatten(p));
    CHECK(model::param_count(p) == model::flatten(p).size());
    const std::vector<double> short_flat(3, 0.0);
    CHECK_THROWS_AS(model::unflatten(q, short_flat), DimensionError);
    q.blocks.pop_back();
    CHECK_THROWS_AS(model::check_shapes(q, cfg), DimensionError);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("save and load round trip through f32") {
    const DiTConfig cfg = small_config();
    const auto p = model::init_params(cfg, 12);
    const auto path = std::filesystem::temp_directory_path() / "edit_ckpt_roundtrip.bin";
    model::save_checkpoint(path, p, cfg);
    const auto ck = model::load_checkpoint(path);
    CHECK(ck.config == cfg);
    CHECK(model::flatten(ck.params) == model::flatten(model::round_to_f32(p)));
    std::filesystem::remove(path);
  }

  TEST_CASE("corrupt files raise IoError") {
    const auto dir = std::filesystem::temp_directory_path();
    CHECK_THROWS_AS(model::load_checkpoint(dir / "edit_no_such_file.bin"), model::IoError);
    const auto bad = dir / "edit_ckpt_bad.bin";
    {
      std::ofstream os(bad, std::ios::binary);
      os << "NOTACKPT........";
    }
    CHECK_THROWS_AS(model::load_checkpoint(bad), model::IoError);

    const DiTConfig cfg = small_config();
    model::save_checkpoint(bad, model::init_params(cfg, 1), cfg);
    const auto full = std::filesystem::file_size(bad);
    std::filesystem::resize_file(bad, full - 8);
    CHECK_THROWS_AS(model::load_checkpoint(bad), model::IoError);
    std::filesystem::remove(bad);
  }
}
