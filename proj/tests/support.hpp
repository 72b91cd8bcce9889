#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "edit/autodiff.hpp"
#include "edit/tensor.hpp"

namespace testing {

inline edit::Tensor randn(edit::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  edit::Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

using LossBuilder = std::function<edit::ad::Var(edit::ad::Tape&, const std::vector<edit::ad::Var>&)>;

// Max relative error between reverse-mode and central-difference gradients over every input element.
inline double op_grad_error(const LossBuilder& build, const std::vector<edit::Tensor>& inputs, double h = 1e-6) {
  edit::ad::Tape tape;
  std::vector<edit::ad::Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  const edit::ad::Var loss = build(tape, leaves);
  tape.backward(loss);

  auto eval = [&](const std::vector<edit::Tensor>& in) {
    edit::ad::Tape t2;
    std::vector<edit::ad::Var> c;
    for (const auto& x : in) c.push_back(t2.constant(x));
    return build(t2, c).value()[0];
  };
  double worst = 0.0;
  std::vector<edit::Tensor> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const edit::Tensor g = tape.grad(leaves[i]);
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double x = work[i][k];
      work[i][k] = x + h;
      const double up = eval(work);
      work[i][k] = x - h;
      const double dn = eval(work);
      work[i][k] = x;
      const double num = (up - dn) / (2 * h);
      worst = std::max(worst, std::abs(g[k] - num) / std::max({1.0, std::abs(g[k]), std::abs(num)}));
    }
  }
  return worst;
}

}  // namespace testing
