#pragma once

#include "polynext/autodiff.hpp"

namespace polynext {

struct LayerNormParams {
  Tensor gamma, beta;  // per normalized feature
  double eps = 1e-5;

  static LayerNormParams make(int64_t features, double eps = 1e-5);
  int64_t features() const { return gamma.dim(0); }
};

/// (x - mean)/sqrt(var + eps) * gamma + beta per row (population variance),
/// normalizing over the last axis of a 2D input.
Var layer_norm(Tape& t, Var x, LayerNormParams& p);

/// Same statistic over the channel axis of B,C,H,W at each (b,h,w) position.
Var layer_norm_nchw(Tape& t, Var x, LayerNormParams& p);

/// Spatial batch norm reducing over (B,C) per position, with a factorized
/// affine (per-channel gamma_c/beta_c plus per-position gamma_hw/beta_hw) so
/// the parameter count stays O(C + HW). Running statistics are per position
/// and make the op a fixed per-position affine at inference.
struct PolyBatchNormParams {
  Tensor gamma_c, beta_c;            // [C]
  Tensor gamma_hw, beta_hw;          // [H*W]
  Tensor running_mean, running_var;  // [H*W], population variance
  int64_t channels = 0, height = 0, width = 0;
  double momentum = 0.1;  // new = (1-m)*old + m*batch
  double eps = 1e-5;

  static PolyBatchNormParams make(int64_t c, int64_t h, int64_t w, double momentum = 0.1, double eps = 1e-5);
};

/// Train mode normalizes by the current batch statistics and updates the
/// running buffers; infer mode uses the running buffers only.
Var poly_bn_forward(Tape& t, Var x, PolyBatchNormParams& p, Mode mode);

/// Per-position affine equivalent of the infer path:
/// scale = gamma_c*gamma_hw/sqrt(running_var+eps), shift = (beta_c+beta_hw) - scale*running_mean.
struct PerPositionAffine {
  Tensor scale, shift;  // [C,H,W]
};
PerPositionAffine fold_norm_to_affine(const PolyBatchNormParams& p);

/// Attention normalizer that replaces the per-sample l1 row sum with a
/// running estimate of E_b[sum_k A_bhik], one entry per (head, query).
/// Multiplicative affine only, no additive bias.
struct RunningRowSumParams {
  Tensor gamma;           // [heads, N]
  Tensor running_rowsum;  // [heads, N], >= 0
  int64_t heads = 0, tokens = 0;
  double momentum = 0.1;
  double eps = 1e-5;

  static RunningRowSumParams make(int64_t heads, int64_t tokens, double momentum = 0.1, double eps = 1e-5);
};

/// a has shape [B*heads, N, N] with non-negative entries. Train mode first
/// EMA-updates the running row sums from the batch mean, then divides by the
/// updated values; the divisor is treated as a constant in the backward pass.
Var rowsum_norm_forward(Tape& t, Var a, RunningRowSumParams& p, Mode mode);

/// Norm slot used throughout the model: LayerNorm, polynomial-compatible
/// BatchNorm, or identity (test configurations).
enum class NormKind { kLayerNorm, kPolyBatchNorm, kIdentity };

struct NormModule {
  NormKind kind = NormKind::kLayerNorm;
  LayerNormParams ln;
  PolyBatchNormParams bn;

  static NormModule layer_norm_over(int64_t features);
  static NormModule poly_bn_over(int64_t c, int64_t h, int64_t w);
  static NormModule identity();

  Var forward_nchw(Tape& t, Var x, Mode mode);
  /// rows = [batch*h*w, d] laid out batch-major then row-major spatial.
  Var forward_rows(Tape& t, Var x, Mode mode, int64_t batch, int64_t h, int64_t w);
};

}  // namespace polynext
