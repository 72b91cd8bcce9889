#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "edit/autodiff.hpp"
#include "edit/tensor.hpp"

namespace edit::flow {

using Rng = std::mt19937_64;

// Data endpoint at t=0, noise endpoint at t=1.
struct FlowSample {
  Tensor x0;
  Tensor x1;
  double t = 0.0;
};

struct SynthConfig {
  std::size_t tokens = 16;
  std::size_t dim = 32;
  std::size_t modes = 4;
  double scale = 0.1;
  std::uint64_t seed = 1234;

  void validate() const;
};

Tensor trajectory_point(const FlowSample& s);
ad::Var trajectory_point(ad::Var x0, ad::Var x1, double t);

// Mean squared error between the prediction and the straight-line velocity x1 - x0.
double fm_loss(const Tensor& predicted, const Tensor& x0, const Tensor& x1);
ad::Var fm_loss(ad::Var predicted, const Tensor& x0, const Tensor& x1);

// x ~ N(0, I) of shape [tokens×dim], a pure function of the seed.
Tensor gaussian_noise(std::size_t tokens, std::size_t dim, std::uint64_t seed);

using VelocityFn = std::function<Tensor(const Tensor& x, double t)>;

/// Integrates dx = v dt from t=1 to t=0 in `steps` uniform Euler steps,
/// evaluating the field at t_k = 1 - k/steps.
Tensor euler_sample(const VelocityFn& velocity, const Tensor& noise, int steps);
Tensor euler_sample(const VelocityFn& velocity, std::size_t tokens, std::size_t dim, int steps,
                    std::uint64_t seed);

/// Fixed Gaussian mixture over whole token sequences. Mode mean patterns are a
/// pure function of SynthConfig::seed; every mode shares isotropic scale.
class GaussianMixture {
 public:
  explicit GaussianMixture(SynthConfig cfg);

  const SynthConfig& config() const { return cfg_; }
  const Tensor& pattern(std::size_t mode) const { return patterns_.at(mode); }
  Tensor sample_data(Rng& rng) const;
  std::vector<Tensor> sample_data(std::size_t n, Rng& rng) const;

 private:
  SynthConfig cfg_;
  std::vector<Tensor> patterns_;
};

std::vector<FlowSample> gen_batch(const GaussianMixture& mixture, std::size_t batch, Rng& rng);
std::vector<FlowSample> gen_batch(const SynthConfig& cfg, std::size_t batch, Rng& rng);

}  // namespace edit::flow
