#include "edit/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace edit::kern {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap view(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap view(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

Tensor out2d(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  Tensor c = out2d(a.rows(), b.cols());
  view(c).noalias() = view(a) * view(b);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw DimensionError("matmul_tn: " + shape_str(a.shape()) + "ᵀ · " + shape_str(b.shape()));
  Tensor c = out2d(a.cols(), b.cols());
  view(c).noalias() = view(a).transpose() * view(b);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " · " + shape_str(b.shape()) + "ᵀ");
  Tensor c = out2d(a.rows(), b.rows());
  view(c).noalias() = view(a) * view(b).transpose();
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor c = a;
  for (auto& v : c.data()) v += s;
  return c;
}

void add_inplace(Tensor& acc, const Tensor& b) {
  if (acc.size() != b.size())
    throw DimensionError("accumulate: " + shape_str(acc.shape()) + " += " + shape_str(b.shape()));
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
}

Tensor add_row(const Tensor& x, const Tensor& v) {
  if (v.size() != x.cols())
    throw DimensionError("add_row: " + shape_str(x.shape()) + " + row " + shape_str(v.shape()));
  Tensor c = x;
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) c[r * n + j] += v[j];
  return c;
}

Tensor mul_row(const Tensor& x, const Tensor& v) {
  if (v.size() != x.cols())
    throw DimensionError("mul_row: " + shape_str(x.shape()) + " * row " + shape_str(v.shape()));
  Tensor c = x;
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) c[r * n + j] *= v[j];
  return c;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (s.size() != x.rows())
    throw DimensionError("scale_rows: " + shape_str(x.shape()) + " by " + shape_str(s.shape()));
  Tensor c = x;
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) c[r * n + j] *= s[r];
  return c;
}

Tensor repeat_rows(const Tensor& v, std::size_t times) {
  if (times == 0) throw DimensionError("repeat_rows: zero repetitions");
  const std::size_t n = v.cols();
  Tensor c = out2d(v.rows() * times, n);
  for (std::size_t b = 0; b < v.rows(); ++b)
    for (std::size_t t = 0; t < times; ++t)
      std::copy_n(v.data().begin() + b * n, n, c.data().begin() + (b * times + t) * n);
  return c;
}

Tensor add_tiled(const Tensor& x, const Tensor& v) {
  if (x.cols() != v.cols() || v.rows() == 0 || x.rows() % v.rows() != 0)
    throw DimensionError("add_tiled: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  Tensor c = x;
  const std::size_t block = v.size();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += v[i % block];
  return c;
}

Tensor fold_rows(const Tensor& x, std::size_t block) {
  if (block == 0 || x.rows() % block != 0)
    throw DimensionError("fold_rows: " + std::to_string(x.rows()) + " rows not divisible by " + std::to_string(block));
  Tensor c = out2d(block, x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) c[i % c.size()] += x[i];
  return c;
}

Tensor group_sum_rows(const Tensor& x, std::size_t group) {
  if (group == 0 || x.rows() % group != 0)
    throw DimensionError("group_sum_rows: " + std::to_string(x.rows()) + " rows not divisible by " +
                         std::to_string(group));
  const std::size_t n = x.cols();
  Tensor c = out2d(x.rows() / group, n);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) c[(r / group) * n + j] += x[r * n + j];
  return c;
}

Tensor group_mean_rows(const Tensor& x, std::size_t group) {
  return scale(group_sum_rows(x, group), 1.0 / static_cast<double>(group));
}

Tensor mean_cols(const Tensor& x) {
  Tensor c = out2d(x.rows(), 1);
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[r * n + j];
    c[r] = s / static_cast<double>(n);
  }
  return c;
}

double sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return s;
}

double mean(const Tensor& x) { return sum(x) / static_cast<double>(x.size()); }

double gelu(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_deriv(double x) {
  const double inner = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  const double th = std::tanh(inner);
  const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor gelu(const Tensor& x) {
  Tensor c = x;
  for (auto& v : c.data()) v = gelu(v);
  return c;
}

Tensor sigmoid(const Tensor& x) {
  Tensor c = x;
  for (auto& v : c.data()) v = sigmoid(v);
  return c;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor c = x;
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double* row = c.data().data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= z;
  }
  return c;
}

Tensor layer_norm(const Tensor& x, double eps, std::vector<double>* rstd) {
  Tensor c = x;
  const std::size_t n = x.cols();
  if (rstd) rstd->assign(x.rows(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double* row = c.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) row[j] = (row[j] - mu) * rs;
    if (rstd) (*rstd)[r] = rs;
  }
  return c;
}

Tensor slice_cols(const Tensor& x, std::size_t count) { return slice_cols(x, 0, count); }

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  if (count == 0 || begin + count > x.cols())
    throw DimensionError("slice_cols: cannot take columns [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") of " + shape_str(x.shape()));
  Tensor c = out2d(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r)
    std::copy_n(x.data().begin() + r * x.cols() + begin, count, c.data().begin() + r * count);
  return c;
}

Tensor slice_rows(const Tensor& x, std::size_t count) {
  if (count == 0 || count > x.rows())
    throw DimensionError("slice_rows: cannot take " + std::to_string(count) + " rows of " +
                         shape_str(x.shape()));
  Tensor c = out2d(count, x.cols());
  std::copy_n(x.data().begin(), count * x.cols(), c.data().begin());
  return c;
}

Tensor pad_cols(const Tensor& x, std::size_t total_cols) { return pad_cols(x, 0, total_cols); }

Tensor pad_cols(const Tensor& x, std::size_t begin, std::size_t total_cols) {
  if (begin + x.cols() > total_cols)
    throw DimensionError("pad_cols: target narrower than " + shape_str(x.shape()));
  Tensor c = out2d(x.rows(), total_cols);
  for (std::size_t r = 0; r < x.rows(); ++r)
    std::copy_n(x.data().begin() + r * x.cols(), x.cols(), c.data().begin() + r * total_cols + begin);
  return c;
}

Tensor concat_cols(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts.front()->rows();
  std::size_t cols = 0;
  for (const Tensor* p : parts) {
    if (p->rows() != rows)
      throw DimensionError("concat_cols: row count " + std::to_string(p->rows()) + " vs " +
                           std::to_string(rows));
    cols += p->cols();
  }
  Tensor c = out2d(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t off = 0;
    for (const Tensor* p : parts) {
      std::copy_n(p->data().begin() + r * p->cols(), p->cols(), c.data().begin() + r * cols + off);
      off += p->cols();
    }
  }
  return c;
}

Tensor transpose(const Tensor& x) {
  Tensor c = out2d(x.cols(), x.rows());
  view(c) = view(x).transpose();
  return c;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::size_t heads, std::vector<double>* probs) {
  require_same("attention(q,k)", q, k);
  require_same("attention(q,v)", q, v);
  const std::size_t dim = q.cols();
  if (heads == 0 || dim % heads != 0)
    throw DimensionError("attention: model dim " + std::to_string(dim) +
                         " not divisible by head count " + std::to_string(heads));
  if (seq_len == 0 || q.rows() % seq_len != 0)
    throw DimensionError("attention: " + std::to_string(q.rows()) +
                         " rows not a multiple of sequence length " + std::to_string(seq_len));
  const std::size_t groups = q.rows() / seq_len;
  const std::size_t hd = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor out = out2d(q.rows(), dim);
  if (probs) probs->assign(groups * heads * seq_len * seq_len, 0.0);
  std::vector<double> w(seq_len);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq_len; ++i) {
        const double* qi = q.data().data() + (g * seq_len + i) * dim + h * hd;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < seq_len; ++j) {
          const double* kj = k.data().data() + (g * seq_len + j) * dim + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          w[j] = s * inv_sqrt;
          mx = std::max(mx, w[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq_len; ++j) z += (w[j] = std::exp(w[j] - mx));
        double* oi = out.data().data() + (g * seq_len + i) * dim + h * hd;
        for (std::size_t j = 0; j < seq_len; ++j) {
          w[j] /= z;
          const double* vj = v.data().data() + (g * seq_len + j) * dim + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += w[j] * vj[c];
        }
        if (probs)
          std::copy(w.begin(), w.end(),
                    probs->begin() + ((g * heads + h) * seq_len + i) * seq_len);
      }
    }
  }
  return out;
}

}  // namespace edit::kern
