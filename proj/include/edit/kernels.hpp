#pragma once

// Forward-only numeric kernels on Tensor. The tape ops and the inference engine
// both call these, so a dense tape forward and a dense inference forward run the
// exact same arithmetic.

#include <cstddef>
#include <span>
#include <vector>

#include "edit/tensor.hpp"

namespace edit::kern {

inline constexpr double kLayerNormEps = 1e-6;

Tensor matmul(const Tensor& a, const Tensor& b);     // a·b
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // aᵀ·b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a·bᵀ

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
void add_inplace(Tensor& acc, const Tensor& b);

// Row-vector broadcast over every row of x.
Tensor add_row(const Tensor& x, const Tensor& v);
Tensor mul_row(const Tensor& x, const Tensor& v);
// Multiplies row r of x by s[r].
Tensor scale_rows(const Tensor& x, const Tensor& s);
// Each row of v repeated `times` consecutive times: [B×C] -> [B·times×C].
Tensor repeat_rows(const Tensor& v, std::size_t times);
// v [L×C] added to every consecutive block of L rows of x [B·L×C].
Tensor add_tiled(const Tensor& x, const Tensor& v);
// Sum of the consecutive [L×C] blocks of x: [B·L×C] -> [L×C].
Tensor fold_rows(const Tensor& x, std::size_t block);
// Sums consecutive groups of `group` rows: [B·group×C] -> [B×C].
Tensor group_sum_rows(const Tensor& x, std::size_t group);
Tensor group_mean_rows(const Tensor& x, std::size_t group);
// Mean over the last axis: [R×C] -> [R×1].
Tensor mean_cols(const Tensor& x);
double sum(const Tensor& x);
double mean(const Tensor& x);

double gelu(double x);
double gelu_deriv(double x);
double sigmoid(double x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_rows(const Tensor& x);

// Per-row (x - mean) / sqrt(var + eps), no affine. rstd receives 1/sqrt(var+eps) per row when non-null.
Tensor layer_norm(const Tensor& x, double eps, std::vector<double>* rstd = nullptr);

Tensor slice_cols(const Tensor& x, std::size_t count);
// Columns [begin, begin+count).
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_rows(const Tensor& x, std::size_t count);
Tensor pad_cols(const Tensor& x, std::size_t total_cols);
// Places x at column offset `begin` of a zero [R×total_cols] tensor.
Tensor pad_cols(const Tensor& x, std::size_t begin, std::size_t total_cols);
Tensor concat_cols(std::span<const Tensor* const> parts);
Tensor transpose(const Tensor& x);

/// Bidirectional multi-head scaled dot-product attention.
///
/// q, k, v are [G·L × D] with G independent sequences of length L stacked along
/// rows; head h owns columns [h·D/H, (h+1)·D/H). Returns the concatenated head
/// outputs [G·L × D]. When probs is non-null it receives the attention weights,
/// laid out [G][H][L][L].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::size_t heads, std::vector<double>* probs = nullptr);

}  // namespace edit::kern
