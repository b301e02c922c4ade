#pragma once

#include "polynext/norms.hpp"
#include "polynext/rng.hpp"

namespace polynext {

/// Kaiming-normal fill with gain sqrt(2): std = sqrt(2 / fan_in).
Tensor kaiming_normal(Shape shape, int64_t fan_in, Rng& rng);

/// logit(1/sqrt(32)): the per-head kernel scale starts at the usual
/// 1/sqrt(d_k) with d_k = 32.
double head_scale_init_logit();

/// Channel mixer: y = W_o * Norm((W_a x + b_a) * (W_b x + b_b)) + b_o,
/// a second-degree polynomial of the input when the norm is affine.
struct PolyMlp {
  Tensor w_a, b_a;  // [hidden, d], [hidden]
  Tensor w_b, b_b;
  NormModule norm;  // over hidden
  Tensor w_o, b_o;  // [d_out, hidden], [d_out]
  bool additive_fusion = false;  // ablation: a + b instead of a * b

  static PolyMlp make(int64_t d, int64_t hidden, int64_t d_out, NormKind norm_kind, Rng& rng,
                      int64_t map_h = 1, int64_t map_w = 1);

  /// x rows [batch*h*w, d]; the spatial extents matter only for the
  /// batch-norm configuration.
  Var forward_rows(Tape& t, Var x, Mode mode, int64_t batch, int64_t h, int64_t w);
  int64_t in_features() const { return w_a.dim(1); }
  int64_t hidden() const { return w_a.dim(0); }
};

/// Classifier head with an internal skip around the multiplicative term:
/// y = W_o * Norm(W_a x + (W_a x)*(W_b x)) + b_o.
struct PolyHead {
  Tensor w_a, b_a;  // [d_h, d]
  Tensor w_b, b_b;
  NormModule norm;  // over d_h
  Tensor w_o, b_o;  // [classes, d_h]
  bool additive_fusion = false;

  static PolyHead make(int64_t d, int64_t d_h, int64_t classes, NormKind norm_kind, Rng& rng);

  Var forward_rows(Tape& t, Var x, Mode mode);
};

/// Spatial mixer fusing a coarse dilated depthwise branch with a fine
/// depthwise branch (channel-flipped) by elementwise multiplication:
///   h = W_in x;  m = K_c(h) * flip(K_f(h));  y = Norm(W_out(K(m))).
/// Stage 1 uses a 3x3 dilation-2 coarse kernel, later stages 5x5 dilation-2
/// (9x9 receptive extent); all convolutions preserve the spatial size.
struct PolyConv {
  Tensor w_in, b_in;    // [hidden, C, 1, 1]
  Tensor k_coarse, b_coarse;  // [hidden, 1, k, k] dilation 2
  Tensor k_fine, b_fine;      // [hidden, 1, 3, 3]
  Tensor k_merge, b_merge;    // [hidden, 1, 3, 3]
  Tensor w_out, b_out;  // [C, hidden, 1, 1]
  NormModule norm;      // over C, after W_out
  int64_t coarse_kernel = 5, coarse_padding = 4;
  bool additive_fusion = false;

  static PolyConv make(int64_t channels, int64_t hidden, int stage_index, NormKind norm_kind, Rng& rng,
                       int64_t map_h = 1, int64_t map_w = 1);

  Var forward(Tape& t, Var x, Mode mode);
  int64_t channels() const { return w_out.dim(0); }
  int64_t hidden() const { return w_in.dim(0); }
};

/// Attention mixer with a polynomial kernel (s*QK^T + 1)^p in place of
/// softmax. Q and K come from one shared projection followed by separate
/// depthwise 3x3 convolutions; V has its own projection and depthwise conv.
/// Per-sample l1 row normalization in the layer-norm configuration; a running
/// row-sum estimate plus a spatial norm before W_out in the batch-norm one.
struct PolyAttn {
  Tensor w_qk, b_qk;  // [D, C]
  Tensor w_v, b_v;    // [D, C]
  Tensor dw_q, dwb_q;  // [D, 1, 3, 3]
  Tensor dw_k, dwb_k;
  Tensor dw_v, dwb_v;
  Tensor w_out, b_out;  // [C, D]
  Tensor lambda_scale;  // [heads]
  int degree = 4;
  int64_t heads = 1, head_dim = 32;
  bool running_norm = false;            // batch-norm configuration
  RunningRowSumParams rowsum;           // when running_norm
  PolyBatchNormParams pre_out_norm;     // when running_norm: before W_out
  double l1_eps = 1e-6;

  static PolyAttn make(int64_t channels, int degree, NormKind norm_kind, Rng& rng, int64_t map_h = 1,
                       int64_t map_w = 1);

  Var forward(Tape& t, Var x, Mode mode);
  int64_t channels() const { return w_out.dim(0); }
  int64_t proj_dim() const { return w_qk.dim(0); }
};

}  // namespace polynext
