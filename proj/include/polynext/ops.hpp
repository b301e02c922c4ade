#pragma once

#include <vector>

#include "polynext/autodiff.hpp"
#include "polynext/kernels.hpp"

namespace polynext {

// ---- elementwise -----------------------------------------------------------
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var hadamard(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);
Var add_const(Tape& t, Var a, double c);
/// x * s where s is a 1-element tensor (the "scalar-times-tensor" broadcast).
Var mul_scalar_var(Tape& t, Var x, Var s);
/// Elementwise logistic; used on gate logits, never on feature data.
Var sigmoid(Tape& t, Var x);

// ---- reductions / shape ----------------------------------------------------
Var sum_all(Tape& t, Var x);
Var mean_all(Tape& t, Var x);
Var reshape(Tape& t, Var x, Shape s);

// ---- linear algebra --------------------------------------------------------
/// 2D a[m,k] x b[k,n], or batched with equal leading axes; a 2D operand on
/// either side broadcasts across the other's leading axes.
Var matmul(Tape& t, Var a, Var b);
Var transpose_last2(Tape& t, Var x);
/// y[i,o] = sum_k x[i,k] w[o,k] + b[o]. Pass an invalid Var to skip the bias.
Var linear(Tape& t, Var x, Var w, Var b);

// ---- convolution -----------------------------------------------------------
Var conv2d(Tape& t, Var x, Var w, Var b, const Conv2dSpec& spec);
/// Output channel c reads input channel C-1-c.
Var channel_flip(Tape& t, Var x);

// ---- layout ----------------------------------------------------------------
Var nchw_to_tokens(Tape& t, Var x);  // [B,C,H,W] -> [B*H*W, C]
Var tokens_to_nchw(Tape& t, Var x, int64_t batch, int64_t c, int64_t h, int64_t w);
Var split_heads(Tape& t, Var x, int64_t batch, int64_t n, int64_t heads, int64_t dh);
Var merge_heads(Tape& t, Var x, int64_t batch, int64_t n, int64_t heads, int64_t dh);
Var global_avg_pool(Tape& t, Var x);  // [B,C,H,W] -> [B,C]

// ---- dedicated broadcasts --------------------------------------------------
Var add_bias_nchw(Tape& t, Var x, Var bias);   // [B,C,H,W] + bias[C]
Var scale_channels(Tape& t, Var x, Var s);     // [B,C,H,W] * s[C]
Var scale_per_head(Tape& t, Var x, Var s);     // [B*h,N,M] * s[h]
/// Multiply sample b's plane by mask[b]; the mask is a constant (stochastic
/// depth), no gradient flows to it.
Var scale_samples_const(Tape& t, Var x, Tensor mask);
Var mul_mask_const(Tape& t, Var x, Tensor mask);  // elementwise constant mask

// ---- attention helpers -----------------------------------------------------
/// Row-l1 normalization over the last axis: y_ij = x_ij / (sum_k x_ik + eps).
Var l1_row_normalize(Tape& t, Var x, double eps);
/// (s_h * score + 1)^p per head by repeated multiplication (p-1 multiplies),
/// where s_h = sigmoid(head_logits[h]) and the leading axis of scores is B*h.
Var poly_kernel(Tape& t, Var scores, Var head_logits, int p);

// ---- loss ------------------------------------------------------------------
/// Mean label-smoothed cross entropy over rows; logits [N,K]. Targets put
/// (1-eps)+eps/K on the true class and eps/K elsewhere. Log-sum-exp is
/// computed with max subtraction.
Var cross_entropy_label_smooth(Tape& t, Var logits, const std::vector<int>& labels, double eps);

}  // namespace polynext
