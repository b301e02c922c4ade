#include "polynext/poly_ops.hpp"

#include <cmath>

#include "polynext/ops.hpp"

namespace polynext {

Tensor kaiming_normal(Shape shape, int64_t fan_in, Rng& rng) {
  check(fan_in >= 1, "kaiming_normal: fan_in must be >= 1");
  double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  return rng.normal_tensor(std::move(shape), 0.0, std);
}

double head_scale_init_logit() {
  double q = 1.0 / std::sqrt(32.0);
  return std::log(q) - std::log1p(-q);
}

namespace {

NormModule make_norm(NormKind kind, int64_t features, int64_t map_h, int64_t map_w) {
  switch (kind) {
    case NormKind::kLayerNorm:
      return NormModule::layer_norm_over(features);
    case NormKind::kPolyBatchNorm:
      return NormModule::poly_bn_over(features, map_h, map_w);
    case NormKind::kIdentity:
      return NormModule::identity();
  }
  fail("norm: unknown kind");
}

}  // namespace

PolyMlp PolyMlp::make(int64_t d, int64_t hidden, int64_t d_out, NormKind norm_kind, Rng& rng, int64_t map_h,
                      int64_t map_w) {
  PolyMlp m;
  m.w_a = kaiming_normal({hidden, d}, d, rng);
  m.b_a = Tensor::zeros({hidden});
  m.w_b = kaiming_normal({hidden, d}, d, rng);
  m.b_b = Tensor::zeros({hidden});
  m.norm = make_norm(norm_kind, hidden, map_h, map_w);
  m.w_o = kaiming_normal({d_out, hidden}, hidden, rng);
  m.b_o = Tensor::zeros({d_out});
  return m;
}

Var PolyMlp::forward_rows(Tape& t, Var x, Mode mode, int64_t batch, int64_t h, int64_t w) {
  Var a = linear(t, x, t.param(w_a), t.param(b_a));
  Var b = linear(t, x, t.param(w_b), t.param(b_b));
  Var prod = additive_fusion ? add(t, a, b) : hadamard(t, a, b);
  Var normed = norm.forward_rows(t, prod, mode, batch, h, w);
  return linear(t, normed, t.param(w_o), t.param(b_o));
}

PolyHead PolyHead::make(int64_t d, int64_t d_h, int64_t classes, NormKind norm_kind, Rng& rng) {
  PolyHead m;
  m.w_a = kaiming_normal({d_h, d}, d, rng);
  m.b_a = Tensor::zeros({d_h});
  m.w_b = kaiming_normal({d_h, d}, d, rng);
  m.b_b = Tensor::zeros({d_h});
  m.norm = make_norm(norm_kind, d_h, 1, 1);
  m.w_o = kaiming_normal({classes, d_h}, d_h, rng);
  m.b_o = Tensor::zeros({classes});
  return m;
}

Var PolyHead::forward_rows(Tape& t, Var x, Mode mode) {
  Var a = linear(t, x, t.param(w_a), t.param(b_a));
  Var b = linear(t, x, t.param(w_b), t.param(b_b));
  Var mixed = additive_fusion ? add(t, a, b) : hadamard(t, a, b);
  Var fused = add(t, a, mixed);  // linear skip around the product
  int64_t rows = t.value(x).dim(0);
  Var normed = norm.forward_rows(t, fused, mode, rows, 1, 1);
  return linear(t, normed, t.param(w_o), t.param(b_o));
}

PolyConv PolyConv::make(int64_t channels, int64_t hidden, int stage_index, NormKind norm_kind, Rng& rng,
                        int64_t map_h, int64_t map_w) {
  check(stage_index >= 1, "poly_conv: stage index is 1-based");
  PolyConv m;
  m.w_in = kaiming_normal({hidden, channels, 1, 1}, channels, rng);
  m.b_in = Tensor::zeros({hidden});
  m.coarse_kernel = stage_index == 1 ? 3 : 5;
  m.coarse_padding = m.coarse_kernel - 1;  // dilation 2 preserves the size
  m.k_coarse = kaiming_normal({hidden, 1, m.coarse_kernel, m.coarse_kernel},
                              m.coarse_kernel * m.coarse_kernel, rng);
  m.b_coarse = Tensor::zeros({hidden});
  m.k_fine = kaiming_normal({hidden, 1, 3, 3}, 9, rng);
  m.b_fine = Tensor::zeros({hidden});
  m.k_merge = kaiming_normal({hidden, 1, 3, 3}, 9, rng);
  m.b_merge = Tensor::zeros({hidden});
  m.w_out = kaiming_normal({channels, hidden, 1, 1}, hidden, rng);
  m.b_out = Tensor::zeros({channels});
  m.norm = make_norm(norm_kind, channels, map_h, map_w);
  return m;
}

Var PolyConv::forward(Tape& t, Var x, Mode mode) {
  int64_t ch = hidden();
  Var h = conv2d(t, x, t.param(w_in), t.param(b_in), {.stride = 1, .padding = 0});
  Var coarse = conv2d(t, h, t.param(k_coarse), t.param(b_coarse),
                      {.stride = 1, .padding = coarse_padding, .dilation = 2, .groups = ch});
  Var fine = conv2d(t, h, t.param(k_fine), t.param(b_fine),
                    {.stride = 1, .padding = 1, .dilation = 1, .groups = ch});
  Var flipped = channel_flip(t, fine);
  Var fused = additive_fusion ? add(t, coarse, flipped) : hadamard(t, coarse, flipped);
  Var merged = conv2d(t, fused, t.param(k_merge), t.param(b_merge),
                      {.stride = 1, .padding = 1, .dilation = 1, .groups = ch});
  Var out = conv2d(t, merged, t.param(w_out), t.param(b_out), {.stride = 1, .padding = 0});
  return norm.forward_nchw(t, out, mode);
}

PolyAttn PolyAttn::make(int64_t channels, int degree, NormKind norm_kind, Rng& rng, int64_t map_h,
                        int64_t map_w) {
  check(degree >= 1, "poly_attn: kernel degree must be >= 1");
  PolyAttn m;
  m.degree = degree;
  m.heads = (channels + 63) / 64;
  m.head_dim = 32;
  int64_t d = m.heads * m.head_dim;
  m.w_qk = kaiming_normal({d, channels}, channels, rng);
  m.b_qk = Tensor::zeros({d});
  m.w_v = kaiming_normal({d, channels}, channels, rng);
  m.b_v = Tensor::zeros({d});
  m.dw_q = kaiming_normal({d, 1, 3, 3}, 9, rng);
  m.dwb_q = Tensor::zeros({d});
  m.dw_k = kaiming_normal({d, 1, 3, 3}, 9, rng);
  m.dwb_k = Tensor::zeros({d});
  m.dw_v = kaiming_normal({d, 1, 3, 3}, 9, rng);
  m.dwb_v = Tensor::zeros({d});
  m.w_out = kaiming_normal({channels, d}, d, rng);
  m.b_out = Tensor::zeros({channels});
  m.lambda_scale = Tensor::full({m.heads}, head_scale_init_logit());
  m.running_norm = norm_kind == NormKind::kPolyBatchNorm;
  if (m.running_norm) {
    m.rowsum = RunningRowSumParams::make(m.heads, map_h * map_w);
    m.pre_out_norm = PolyBatchNormParams::make(d, map_h, map_w);
  }
  return m;
}

Var PolyAttn::forward(Tape& t, Var x, Mode mode) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 4, "poly_attn: expected B,C,H,W, got " + shape_str(xv.shape()));
  int64_t b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  check(c == channels(), "poly_attn: channel mismatch");
  int64_t n = h * w;
  int64_t d = proj_dim();

  Var tokens = nchw_to_tokens(t, x);  // [B*N, C]
  Var qk_base = linear(t, tokens, t.param(w_qk), t.param(b_qk));
  Var v_base = linear(t, tokens, t.param(w_v), t.param(b_v));

  // Local context on the spatial map before flattening to tokens.
  Var qk_map = tokens_to_nchw(t, qk_base, b, d, h, w);
  Var v_map = tokens_to_nchw(t, v_base, b, d, h, w);
  Conv2dSpec dw{.stride = 1, .padding = 1, .dilation = 1, .groups = d};
  Var q_map = conv2d(t, qk_map, t.param(dw_q), t.param(dwb_q), dw);
  Var k_map = conv2d(t, qk_map, t.param(dw_k), t.param(dwb_k), dw);
  Var vv_map = conv2d(t, v_map, t.param(dw_v), t.param(dwb_v), dw);

  Var qh = split_heads(t, nchw_to_tokens(t, q_map), b, n, heads, head_dim);
  Var kh = split_heads(t, nchw_to_tokens(t, k_map), b, n, heads, head_dim);
  Var vh = split_heads(t, nchw_to_tokens(t, vv_map), b, n, heads, head_dim);

  Var scores = matmul(t, qh, transpose_last2(t, kh));  // [B*heads, N, N]
  Var kernel = poly_kernel(t, scores, t.param(lambda_scale), degree);
  Var weights = running_norm ? rowsum_norm_forward(t, kernel, rowsum, mode)
                             : l1_row_normalize(t, kernel, l1_eps);
  Var mixed = matmul(t, weights, vh);  // [B*heads, N, head_dim]
  Var merged = merge_heads(t, mixed, b, n, heads, head_dim);

  if (running_norm) {
    Var map = tokens_to_nchw(t, merged, b, d, h, w);
    Var normed = poly_bn_forward(t, map, pre_out_norm, mode);
    merged = nchw_to_tokens(t, normed);
  }
  Var out = linear(t, merged, t.param(w_out), t.param(b_out));
  return tokens_to_nchw(t, out, b, c, h, w);
}

}  // namespace polynext
