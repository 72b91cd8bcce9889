#include "edit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "edit/kernels.hpp"

namespace edit::ad {

namespace {

thread_local std::string t_fault_op;
thread_local double t_fault_factor = 1.0;

}  // namespace

ScopedRuleFault::ScopedRuleFault(std::string op, double factor)
    : prev_op_(std::move(t_fault_op)), prev_factor_(t_fault_factor) {
  t_fault_op = std::move(op);
  t_fault_factor = factor;
}

ScopedRuleFault::~ScopedRuleFault() {
  t_fault_op = std::move(prev_op_);
  t_fault_factor = prev_factor_;
}

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs, Backward backward) {
  if (!value.all_finite())
    throw DomainError(std::string(op) + " produced a non-finite value (shape " +
                      shape_str(value.shape()) + ")");
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw ContractError(std::string(op) + ": input from a different tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : Backward{}, op});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss recorded on a different tape");
  if (value(loss).size() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(value(loss).shape()));
  grads_.assign(nodes_.size(), Tensor{});
  if (!nodes_[loss.id()].requires_grad) return;
  grads_[loss.id()] = Tensor(value(loss).shape(), 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || grads_[i].empty()) continue;
    if (!t_fault_op.empty() && t_fault_op == n.op)
      n.backward(kern::scale(grads_[i], t_fault_factor));
    else
      n.backward(grads_[i]);
  }
}

Tensor Tape::grad(Var v) const {
  if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
  return Tensor(value(v).shape(), 0.0);
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!nodes_[v.id()].requires_grad) return;
  Tensor& slot = grads_[v.id()];
  if (slot.empty())
    slot = g.reshaped(value(v).shape());
  else
    kern::add_inplace(slot, g);
}

void Tape::accumulate(Var v, Tensor&& g) {
  if (!nodes_[v.id()].requires_grad) return;
  Tensor& slot = grads_[v.id()];
  if (slot.empty()) {
    if (g.shape() != value(v).shape()) g = g.reshaped(value(v).shape());
    slot = std::move(g);
  } else {
    kern::add_inplace(slot, g);
  }
}

namespace {

void require_same(const char* op, Var a, Var b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Column sums of g as a tensor shaped like `like`.
Tensor col_sums(const Tensor& g, const Shape& like) {
  std::vector<double> s(g.cols(), 0.0);
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t j = 0; j < g.cols(); ++j) s[j] += g[r * g.cols() + j];
  return Tensor(like, std::move(s));
}

}  // namespace

Var add(Var a, Var b) {
  require_same("add", a, b);
  return a.tape().record("add", kern::add(a.value(), b.value()), {a, b}, [a, b](const Tensor& g) {
    a.tape().accumulate(a, g);
    a.tape().accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a, b);
  return a.tape().record("sub", kern::sub(a.value(), b.value()), {a, b}, [a, b](const Tensor& g) {
    a.tape().accumulate(a, g);
    a.tape().accumulate(b, kern::scale(g, -1.0));
  });
}

Var mul(Var a, Var b) {
  require_same("mul", a, b);
  return a.tape().record("mul", kern::mul(a.value(), b.value()), {a, b}, [a, b](const Tensor& g) {
    if (a.requires_grad()) a.tape().accumulate(a, kern::mul(g, b.value()));
    if (b.requires_grad()) a.tape().accumulate(b, kern::mul(g, a.value()));
  });
}

Var scale(Var a, double s) {
  return a.tape().record("scale", kern::scale(a.value(), s), {a},
                         [a, s](const Tensor& g) { a.tape().accumulate(a, kern::scale(g, s)); });
}

Var add_scalar(Var a, double s) {
  return a.tape().record("add_scalar", kern::add_scalar(a.value(), s), {a},
                         [a](const Tensor& g) { a.tape().accumulate(a, g); });
}

Var matmul(Var a, Var b) {
  return a.tape().record("matmul", kern::matmul(a.value(), b.value()), {a, b},
                         [a, b](const Tensor& g) {
                           if (a.requires_grad()) a.tape().accumulate(a, kern::matmul_nt(g, b.value()));
                           if (b.requires_grad()) a.tape().accumulate(b, kern::matmul_tn(a.value(), g));
                         });
}

Var add_row(Var x, Var v) {
  return x.tape().record("add_row", kern::add_row(x.value(), v.value()), {x, v},
                         [x, v](const Tensor& g) {
                           x.tape().accumulate(x, g);
                           if (v.requires_grad()) x.tape().accumulate(v, col_sums(g, v.shape()));
                         });
}

Var add_tiled(Var x, Var v) {
  return x.tape().record("add_tiled", kern::add_tiled(x.value(), v.value()), {x, v},
                         [x, v](const Tensor& g) {
                           x.tape().accumulate(x, g);
                           if (v.requires_grad()) x.tape().accumulate(v, kern::fold_rows(g, v.value().rows()));
                         });
}

Var mul_row(Var x, Var v) {
  return x.tape().record("mul_row", kern::mul_row(x.value(), v.value()), {x, v},
                         [x, v](const Tensor& g) {
                           if (x.requires_grad()) x.tape().accumulate(x, kern::mul_row(g, v.value()));
                           if (v.requires_grad())
                             x.tape().accumulate(v, col_sums(kern::mul(g, x.value()), v.shape()));
                         });
}

Var scale_rows(Var x, Var s) {
  return x.tape().record("scale_rows", kern::scale_rows(x.value(), s.value()), {x, s},
                         [x, s](const Tensor& g) {
                           if (x.requires_grad()) x.tape().accumulate(x, kern::scale_rows(g, s.value()));
                           if (s.requires_grad()) {
                             const Tensor& xv = x.value();
                             Tensor gs(s.shape(), 0.0);
                             const std::size_t n = xv.cols();
                             for (std::size_t r = 0; r < xv.rows(); ++r)
                               for (std::size_t j = 0; j < n; ++j) gs[r] += g[r * n + j] * xv[r * n + j];
                             x.tape().accumulate(s, std::move(gs));
                           }
                         });
}

Var repeat_rows(Var v, std::size_t times) {
  return v.tape().record("repeat_rows", kern::repeat_rows(v.value(), times), {v},
                         [v, times](const Tensor& g) {
                           v.tape().accumulate(v, kern::group_sum_rows(g, times));
                         });
}

Var group_mean_rows(Var x, std::size_t group) {
  return x.tape().record("group_mean_rows", kern::group_mean_rows(x.value(), group), {x},
                         [x, group](const Tensor& g) {
                           x.tape().accumulate(
                               x, kern::scale(kern::repeat_rows(g, group), 1.0 / static_cast<double>(group)));
                         });
}

Var mean_axis(Var x, int axis) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (axis == 0) {
    return x.tape().record("mean_axis0", kern::group_mean_rows(xv, rows), {x},
                           [x, rows](const Tensor& g) {
                             x.tape().accumulate(
                                 x, kern::scale(kern::repeat_rows(g, rows), 1.0 / static_cast<double>(rows)));
                           });
  }
  if (axis == 1 || axis == -1) {
    return x.tape().record("mean_axis1", kern::mean_cols(xv), {x}, [x, rows, cols](const Tensor& g) {
      Tensor gx({rows, cols});
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] = g[r] / static_cast<double>(cols);
      x.tape().accumulate(x, std::move(gx));
    });
  }
  throw DimensionError("mean_axis: axis must be 0 or the last axis, got " + std::to_string(axis));
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return x.tape().record("mean", Tensor::scalar(kern::mean(x.value())), {x}, [x, n](const Tensor& g) {
    x.tape().accumulate(x, Tensor(x.shape(), g[0] / n));
  });
}

Var sum(Var x) {
  return x.tape().record("sum", Tensor::scalar(kern::sum(x.value())), {x}, [x](const Tensor& g) {
    x.tape().accumulate(x, Tensor(x.shape(), g[0]));
  });
}

Var sigmoid(Var x) {
  Tensor y = kern::sigmoid(x.value());
  auto ys = std::make_shared<Tensor>(y);
  return x.tape().record("sigmoid", std::move(y), {x}, [x, ys](const Tensor& g) {
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= (*ys)[i] * (1.0 - (*ys)[i]);
    x.tape().accumulate(x, std::move(gx));
  });
}

Var gelu(Var x) {
  return x.tape().record("gelu", kern::gelu(x.value()), {x}, [x](const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= kern::gelu_deriv(xv[i]);
    x.tape().accumulate(x, std::move(gx));
  });
}

Var softmax(Var x) {
  Tensor y = kern::softmax_rows(x.value());
  auto ys = std::make_shared<Tensor>(y);
  return x.tape().record("softmax", std::move(y), {x}, [x, ys](const Tensor& g) {
    const Tensor& yv = *ys;
    const std::size_t n = yv.cols();
    Tensor gx = g;
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * yv[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] = yv[r * n + j] * (g[r * n + j] - dot);
    }
    x.tape().accumulate(x, std::move(gx));
  });
}

Var layer_norm(Var x, double eps) {
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  auto rstd = std::make_shared<std::vector<double>>();
  Tensor y = kern::layer_norm(x.value(), eps, rstd.get());
  auto ys = std::make_shared<Tensor>(y);
  return x.tape().record("layer_norm", std::move(y), {x}, [x, ys, rstd](const Tensor& g) {
    const Tensor& yv = *ys;
    const std::size_t n = yv.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    Tensor gx = g;
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      double mg = 0.0, mgy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mg += g[r * n + j];
        mgy += g[r * n + j] * yv[r * n + j];
      }
      mg *= inv_n;
      mgy *= inv_n;
      for (std::size_t j = 0; j < n; ++j)
        gx[r * n + j] = (*rstd)[r] * (g[r * n + j] - mg - yv[r * n + j] * mgy);
    }
    x.tape().accumulate(x, std::move(gx));
  });
}

Var slice_cols(Var x, std::size_t count) { return slice_cols(x, 0, count); }

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const std::size_t full = x.value().cols();
  return x.tape().record("slice_cols", kern::slice_cols(x.value(), begin, count), {x},
                         [x, begin, full](const Tensor& g) {
                           x.tape().accumulate(x, kern::pad_cols(g, begin, full));
                         });
}

Var mask(Var x, const Tensor& m) {
  if (m.shape() != x.shape())
    throw DimensionError("mask: " + shape_str(x.shape()) + " with mask " + shape_str(m.shape()));
  auto ms = std::make_shared<Tensor>(m);
  return x.tape().record("mask", kern::mul(x.value(), m), {x},
                         [x, ms](const Tensor& g) { x.tape().accumulate(x, kern::mul(g, *ms)); });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  std::vector<const Tensor*> vals;
  for (const Var& p : parts) vals.push_back(&p.value());
  Tensor y = kern::concat_cols(vals);
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts.front().tape().record("concat_cols", std::move(y), parts, [ins](const Tensor& g) {
    const std::size_t rows = g.rows(), total = g.cols();
    std::size_t off = 0;
    for (const Var& p : ins) {
      const std::size_t c = p.value().cols();
      if (p.requires_grad()) {
        Tensor gp({rows, c});
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(g.data().begin() + r * total + off, c, gp.data().begin() + r * c);
        p.tape().accumulate(p, std::move(gp));
      }
      off += c;
    }
  });
}

Var stop_gradient(Var x) { return x.tape().constant(x.value()); }

Var attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t heads) {
  auto probs = std::make_shared<std::vector<double>>();
  Tensor out = kern::attention(q.value(), k.value(), v.value(), seq_len, heads, probs.get());
  return q.tape().record("attention", std::move(out), {q, k, v}, [q, k, v, seq_len, heads, probs](const Tensor& g) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    const std::size_t dim = qv.cols(), hd = dim / heads, groups = qv.rows() / seq_len;
    const double c = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor gq(qv.shape(), 0.0), gk(kv.shape(), 0.0), gv(vv.shape(), 0.0);
    std::vector<double> dp(seq_len);
    for (std::size_t b = 0; b < groups; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* P = probs->data() + (b * heads + h) * seq_len * seq_len;
        for (std::size_t i = 0; i < seq_len; ++i) {
          const std::size_t ri = (b * seq_len + i) * dim + h * hd;
          // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
          double row_dot = 0.0;
          for (std::size_t j = 0; j < seq_len; ++j) {
            const std::size_t rj = (b * seq_len + j) * dim + h * hd;
            double s = 0.0;
            for (std::size_t e = 0; e < hd; ++e) {
              s += g[ri + e] * vv[rj + e];
              gv[rj + e] += P[i * seq_len + j] * g[ri + e];
            }
            dp[j] = s;
            row_dot += s * P[i * seq_len + j];
          }
          for (std::size_t j = 0; j < seq_len; ++j) {
            const double ds = P[i * seq_len + j] * (dp[j] - row_dot) * c;
            const std::size_t rj = (b * seq_len + j) * dim + h * hd;
            for (std::size_t e = 0; e < hd; ++e) {
              gq[ri + e] += ds * kv[rj + e];
              gk[rj + e] += ds * qv[ri + e];
            }
          }
        }
      }
    }
    q.tape().accumulate(q, std::move(gq));
    q.tape().accumulate(k, std::move(gk));
    q.tape().accumulate(v, std::move(gv));
  });
}

GradCheckReport grad_check(const ScalarFn& f, std::span<const double> theta,
                           std::span<const double> analytic, std::span<const std::size_t> coords,
                           double h, const std::vector<bool>& excluded) {
  if (!(h >= 1e-7 && h <= 1e-4)) throw DomainError("grad_check: step h must lie in [1e-7, 1e-4]");
  if (analytic.size() != theta.size())
    throw DimensionError("grad_check: analytic gradient length differs from parameter count");
  std::vector<double> x(theta.begin(), theta.end());
  const double f0 = f(x);
  if (f(x) != f0) throw ContractError("grad_check: f is not deterministic");

  GradCheckReport rep;
  for (std::size_t c : coords) {
    if (c >= x.size()) throw DimensionError("grad_check: coordinate out of range");
    if (!excluded.empty() && excluded[c]) {
      ++rep.excluded;
      continue;
    }
    const double orig = x[c];
    x[c] = orig + h;
    const double fp = f(x);
    x[c] = orig - h;
    const double fm = f(x);
    x[c] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[c];
    const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    ++rep.checked;
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coord = c;
      rep.worst_analytic = a;
      rep.worst_numeric = numeric;
    }
  }
  return rep;
}

}  // namespace edit::ad
