#include "edit/flow.hpp"

#include "edit/kernels.hpp"

namespace edit::flow {

namespace {

void check_t(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("flow time t=" + std::to_string(t) + " outside [0,1]");
}

Tensor normal_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor out(std::move(shape));
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& v : out.data()) v = nd(rng);
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  if (tokens < 1) throw DomainError("synthetic data needs at least one token");
  if (dim < 2) throw DomainError("synthetic token dimension must be >= 2");
  if (modes < 1) throw DomainError("synthetic mixture needs at least one mode");
  if (!(scale >= 0.0)) throw DomainError("synthetic mixture scale must be >= 0");
}

Tensor trajectory_point(const FlowSample& s) {
  check_t(s.t);
  if (s.x0.shape() != s.x1.shape())
    throw DimensionError("trajectory_point: x0 " + shape_str(s.x0.shape()) + " vs x1 " +
                         shape_str(s.x1.shape()));
  Tensor out = s.x0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - s.t) * s.x0[i] + s.t * s.x1[i];
  return out;
}

ad::Var trajectory_point(ad::Var x0, ad::Var x1, double t) {
  check_t(t);
  return ad::add(ad::scale(x0, 1.0 - t), ad::scale(x1, t));
}

double fm_loss(const Tensor& predicted, const Tensor& x0, const Tensor& x1) {
  if (predicted.shape() != x0.shape() || x0.shape() != x1.shape())
    throw DimensionError("fm_loss: shapes " + shape_str(predicted.shape()) + ", " +
                         shape_str(x0.shape()) + ", " + shape_str(x1.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double d = predicted[i] - (x1[i] - x0[i]);
    s += d * d;
  }
  return s / static_cast<double>(predicted.size());
}

ad::Var fm_loss(ad::Var predicted, const Tensor& x0, const Tensor& x1) {
  if (predicted.shape() != x0.shape() || x0.shape() != x1.shape())
    throw DimensionError("fm_loss: shapes " + shape_str(predicted.shape()) + ", " +
                         shape_str(x0.shape()) + ", " + shape_str(x1.shape()));
  ad::Var target = predicted.tape().constant(kern::sub(x1, x0));
  ad::Var diff = ad::sub(predicted, target);
  return ad::mean(ad::mul(diff, diff));
}

Tensor gaussian_noise(std::size_t tokens, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  return normal_tensor({tokens, dim}, rng);
}

Tensor euler_sample(const VelocityFn& velocity, const Tensor& noise, int steps) {
  if (steps < 1) throw DomainError("euler_sample: step count must be >= 1");
  Tensor x = noise;
  const double dt = 1.0 / static_cast<double>(steps);
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) * dt;
    const Tensor v = velocity(x, t);
    if (v.shape() != x.shape())
      throw DimensionError("euler_sample: velocity " + shape_str(v.shape()) + " for state " +
                           shape_str(x.shape()));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= dt * v[i];
  }
  return x;
}

Tensor euler_sample(const VelocityFn& velocity, std::size_t tokens, std::size_t dim, int steps,
                    std::uint64_t seed) {
  if (steps < 1) throw DomainError("euler_sample: step count must be >= 1");
  return euler_sample(velocity, gaussian_noise(tokens, dim, seed), steps);
}

GaussianMixture::GaussianMixture(SynthConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  for (std::size_t m = 0; m < cfg_.modes; ++m) patterns_.push_back(normal_tensor({cfg_.tokens, cfg_.dim}, rng));
}

Tensor GaussianMixture::sample_data(Rng& rng) const {
  std::uniform_int_distribution<std::size_t> pick(0, cfg_.modes - 1);
  Tensor x = patterns_[pick(rng)];
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : x.data()) v += cfg_.scale * nd(rng);
  return x;
}

std::vector<Tensor> GaussianMixture::sample_data(std::size_t n, Rng& rng) const {
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_data(rng));
  return out;
}

std::vector<FlowSample> gen_batch(const GaussianMixture& mixture, std::size_t batch, Rng& rng) {
  if (batch < 1) throw DomainError("gen_batch: batch must be >= 1");
  const auto& cfg = mixture.config();
  std::uniform_real_distribution<double> ut(0.0, 1.0);
  std::vector<FlowSample> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    FlowSample s;
    s.x0 = mixture.sample_data(rng);
    s.x1 = normal_tensor({cfg.tokens, cfg.dim}, rng);
    s.t = ut(rng);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<FlowSample> gen_batch(const SynthConfig& cfg, std::size_t batch, Rng& rng) {
  return gen_batch(GaussianMixture(cfg), batch, rng);
}

}  // namespace edit::flow
