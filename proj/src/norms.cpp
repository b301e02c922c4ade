#include "polynext/norms.hpp"

#include <algorithm>
#include <cmath>

#include "polynext/ops.hpp"

namespace polynext {

LayerNormParams LayerNormParams::make(int64_t features, double eps) {
  check(features >= 1, "layer_norm: feature count must be >= 1");
  LayerNormParams p;
  p.gamma = Tensor::ones({features});
  p.beta = Tensor::zeros({features});
  p.eps = eps;
  return p;
}

Var layer_norm(Tape& t, Var x, LayerNormParams& p) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 2, "layer_norm: expected rows [N,d], got " + shape_str(xv.shape()));
  int64_t rows = xv.dim(0), d = xv.dim(1);
  check(d == p.features(), "layer_norm: feature dim " + std::to_string(d) + " does not match params " +
                               std::to_string(p.features()));
  Var gamma = t.param(p.gamma);
  Var beta = t.param(p.beta);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);

  Tensor y({rows, d});
  Tensor xhat({rows, d});
  Tensor inv_std({rows});
  double eps = p.eps;
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += src[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double c = src[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double r_inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = r_inv;
    for (int64_t j = 0; j < d; ++j) {
      double h = (src[j] - mean) * r_inv;
      xhat[r * d + j] = h;
      y[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return t.make_node(std::move(y), {x, gamma, beta},
                     [x, gamma, beta, xhat, inv_std, rows, d](Tape& tp, const Tensor& g) {
                       const Tensor& gv = tp.value(gamma);
                       if (tp.requires_grad(x)) {
                         Tensor gx({rows, d});
                         for (int64_t r = 0; r < rows; ++r) {
                           const double* grow = g.data() + r * d;
                           const double* hrow = xhat.data() + r * d;
                           double mean_gh = 0.0, mean_ghh = 0.0;
                           for (int64_t j = 0; j < d; ++j) {
                             double gh = grow[j] * gv[j];
                             mean_gh += gh;
                             mean_ghh += gh * hrow[j];
                           }
                           mean_gh /= static_cast<double>(d);
                           mean_ghh /= static_cast<double>(d);
                           double r_inv = inv_std[r];
                           for (int64_t j = 0; j < d; ++j) {
                             double gh = grow[j] * gv[j];
                             gx[r * d + j] = r_inv * (gh - mean_gh - hrow[j] * mean_ghh);
                           }
                         }
                         tp.accumulate_move(x, std::move(gx));
                       }
                       Tensor ggamma({d}, 0.0), gbeta({d}, 0.0);
                       for (int64_t r = 0; r < rows; ++r) {
                         for (int64_t j = 0; j < d; ++j) {
                           ggamma[j] += g[r * d + j] * xhat[r * d + j];
                           gbeta[j] += g[r * d + j];
                         }
                       }
                       tp.accumulate_move(gamma, std::move(ggamma));
                       tp.accumulate_move(beta, std::move(gbeta));
                     });
}

Var layer_norm_nchw(Tape& t, Var x, LayerNormParams& p) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 4, "layer_norm_nchw: expected B,C,H,W, got " + shape_str(xv.shape()));
  int64_t b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Var rows = nchw_to_tokens(t, x);
  Var normed = layer_norm(t, rows, p);
  return tokens_to_nchw(t, normed, b, c, h, w);
}

PolyBatchNormParams PolyBatchNormParams::make(int64_t c, int64_t h, int64_t w, double momentum, double eps) {
  check(c >= 1 && h >= 1 && w >= 1, "poly_bn: invalid dimensions");
  PolyBatchNormParams p;
  p.channels = c;
  p.height = h;
  p.width = w;
  p.gamma_c = Tensor::ones({c});
  p.beta_c = Tensor::zeros({c});
  p.gamma_hw = Tensor::ones({h * w});
  p.beta_hw = Tensor::zeros({h * w});
  p.running_mean = Tensor::zeros({h * w});
  p.running_var = Tensor::ones({h * w});
  p.momentum = momentum;
  p.eps = eps;
  return p;
}

Var poly_bn_forward(Tape& t, Var x, PolyBatchNormParams& p, Mode mode) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 4, "poly_bn: expected B,C,H,W, got " + shape_str(xv.shape()));
  int64_t b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  check(c == p.channels && h == p.height && w == p.width,
        "poly_bn: input " + shape_str(xv.shape()) + " does not match bound size [" + std::to_string(p.channels) +
            "," + std::to_string(p.height) + "," + std::to_string(p.width) + "]");
  int64_t hw = h * w;
  int64_t m = b * c;
  if (mode == Mode::kTrain) check(m >= 2, "poly_bn: train mode needs B*C >= 2");

  Var gamma_c = t.param(p.gamma_c);
  Var beta_c = t.param(p.beta_c);
  Var gamma_hw = t.param(p.gamma_hw);
  Var beta_hw = t.param(p.beta_hw);

  Tensor mean({hw}), var({hw});
  if (mode != Mode::kInfer) {
    for (int64_t q = 0; q < hw; ++q) {
      double acc = 0.0;
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) acc += xv[(i * c + ch) * hw + q];
      }
      mean[q] = acc / static_cast<double>(m);
    }
    for (int64_t q = 0; q < hw; ++q) {
      double acc = 0.0;
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
          double d = xv[(i * c + ch) * hw + q] - mean[q];
          acc += d * d;
        }
      }
      var[q] = acc / static_cast<double>(m);
    }
  }
  if (mode == Mode::kCalibrate) {
    // Normalize by the running estimates (inference semantics) while moving
    // them toward the statistics just observed under those estimates.
    Tensor batch_mean = mean, batch_var = var;
    mean = p.running_mean;
    var = p.running_var;
    double mom = p.momentum;
    for (int64_t q = 0; q < hw; ++q) {
      p.running_mean[q] = (1.0 - mom) * p.running_mean[q] + mom * batch_mean[q];
      p.running_var[q] = (1.0 - mom) * p.running_var[q] + mom * batch_var[q];
    }
  } else if (mode == Mode::kTrain) {
    double mom = p.momentum;
    for (int64_t q = 0; q < hw; ++q) {
      p.running_mean[q] = (1.0 - mom) * p.running_mean[q] + mom * mean[q];
      p.running_var[q] = (1.0 - mom) * p.running_var[q] + mom * var[q];
    }
  } else {
    mean = p.running_mean;
    var = p.running_var;
  }

  Tensor inv_std({hw});
  for (int64_t q = 0; q < hw; ++q) inv_std[q] = 1.0 / std::sqrt(var[q] + p.eps);

  const Tensor& gc = t.value(gamma_c);
  const Tensor& bc = t.value(beta_c);
  const Tensor& ghw = t.value(gamma_hw);
  const Tensor& bhw = t.value(beta_hw);

  Tensor y(xv.shape());
  Tensor xhat(xv.shape());
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      int64_t off = (i * c + ch) * hw;
      for (int64_t q = 0; q < hw; ++q) {
        double hv = (xv[off + q] - mean[q]) * inv_std[q];
        xhat[off + q] = hv;
        y[off + q] = gc[ch] * ghw[q] * hv + (bc[ch] + bhw[q]);
      }
    }
  }
  if (mode == Mode::kCalibrate) {
    // Keep early fixed-point iterations finite while the estimates are still
    // far off; near the fixed point the clamp never engages. Calibration is
    // forward-only, so this never touches a gradient or an exported graph.
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::clamp(y[i], -1e6, 1e6);
  }

  bool train = mode == Mode::kTrain;
  return t.make_node(
      std::move(y), {x, gamma_c, beta_c, gamma_hw, beta_hw},
      [x, gamma_c, beta_c, gamma_hw, beta_hw, xhat, inv_std, b, c, hw, m, train](Tape& tp, const Tensor& g) {
        const Tensor& gc = tp.value(gamma_c);
        const Tensor& ghw = tp.value(gamma_hw);
        if (tp.requires_grad(x)) {
          Tensor gx(tp.shape(x));
          if (train) {
            // Batch statistics participate in the graph: standard batch-norm
            // backward per position over the (B,C) reduction set, with the
            // affine folded into the upstream gradient first.
            std::vector<double> mean_gh(static_cast<size_t>(hw), 0.0);
            std::vector<double> mean_ghh(static_cast<size_t>(hw), 0.0);
            for (int64_t i = 0; i < b; ++i) {
              for (int64_t ch = 0; ch < c; ++ch) {
                int64_t off = (i * c + ch) * hw;
                for (int64_t q = 0; q < hw; ++q) {
                  double gh = g[off + q] * gc[ch] * ghw[q];
                  mean_gh[static_cast<size_t>(q)] += gh;
                  mean_ghh[static_cast<size_t>(q)] += gh * xhat[off + q];
                }
              }
            }
            for (int64_t q = 0; q < hw; ++q) {
              mean_gh[static_cast<size_t>(q)] /= static_cast<double>(m);
              mean_ghh[static_cast<size_t>(q)] /= static_cast<double>(m);
            }
            for (int64_t i = 0; i < b; ++i) {
              for (int64_t ch = 0; ch < c; ++ch) {
                int64_t off = (i * c + ch) * hw;
                for (int64_t q = 0; q < hw; ++q) {
                  double gh = g[off + q] * gc[ch] * ghw[q];
                  gx[off + q] = inv_std[q] * (gh - mean_gh[static_cast<size_t>(q)] -
                                              xhat[off + q] * mean_ghh[static_cast<size_t>(q)]);
                }
              }
            }
          } else {
            for (int64_t i = 0; i < b; ++i) {
              for (int64_t ch = 0; ch < c; ++ch) {
                int64_t off = (i * c + ch) * hw;
                for (int64_t q = 0; q < hw; ++q) gx[off + q] = g[off + q] * gc[ch] * ghw[q] * inv_std[q];
              }
            }
          }
          tp.accumulate_move(x, std::move(gx));
        }
        Tensor ggc({c}, 0.0), gbc({c}, 0.0), gghw({hw}, 0.0), gbhw({hw}, 0.0);
        for (int64_t i = 0; i < b; ++i) {
          for (int64_t ch = 0; ch < c; ++ch) {
            int64_t off = (i * c + ch) * hw;
            for (int64_t q = 0; q < hw; ++q) {
              double gv = g[off + q];
              double hv = xhat[off + q];
              ggc[ch] += gv * ghw[q] * hv;
              gghw[q] += gv * gc[ch] * hv;
              gbc[ch] += gv;
              gbhw[q] += gv;
            }
          }
        }
        tp.accumulate_move(gamma_c, std::move(ggc));
        tp.accumulate_move(beta_c, std::move(gbc));
        tp.accumulate_move(gamma_hw, std::move(gghw));
        tp.accumulate_move(beta_hw, std::move(gbhw));
      });
}

PerPositionAffine fold_norm_to_affine(const PolyBatchNormParams& p) {
  int64_t c = p.channels, hw = p.height * p.width;
  PerPositionAffine out;
  out.scale = Tensor({c, p.height, p.width});
  out.shift = Tensor({c, p.height, p.width});
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t q = 0; q < hw; ++q) {
      double a = p.gamma_c[ch] * p.gamma_hw[q] / std::sqrt(p.running_var[q] + p.eps);
      out.scale[ch * hw + q] = a;
      out.shift[ch * hw + q] = (p.beta_c[ch] + p.beta_hw[q]) - a * p.running_mean[q];
    }
  }
  return out;
}

RunningRowSumParams RunningRowSumParams::make(int64_t heads, int64_t tokens, double momentum, double eps) {
  check(heads >= 1 && tokens >= 1, "rowsum_norm: invalid dimensions");
  RunningRowSumParams p;
  p.heads = heads;
  p.tokens = tokens;
  p.gamma = Tensor::ones({heads, tokens});
  // Uniform attention at init: every kernel entry is 1, so each row sums to N.
  p.running_rowsum = Tensor::full({heads, tokens}, static_cast<double>(tokens));
  p.momentum = momentum;
  p.eps = eps;
  return p;
}

Var rowsum_norm_forward(Tape& t, Var a, RunningRowSumParams& p, Mode mode) {
  const Tensor& av = t.value(a);
  check(av.rank() == 3, "rowsum_norm: expected [B*heads,N,N], got " + shape_str(av.shape()));
  int64_t heads = p.heads, n = p.tokens;
  check(av.dim(1) == n && av.dim(2) == n, "rowsum_norm: token count mismatch for " + shape_str(av.shape()));
  check(av.dim(0) % heads == 0, "rowsum_norm: leading dim not divisible by head count");
  int64_t batch = av.dim(0) / heads;
  for (int64_t i = 0; i < av.numel(); ++i) {
    check(av[i] >= 0.0, "rowsum_norm: negative attention weight at flat index " + std::to_string(i));
  }

  Tensor divisor_snapshot = p.running_rowsum;
  if (mode != Mode::kInfer) {
    // Batch-mean row sums; train updates before normalizing, calibrate after.
    Tensor mean_rs({heads, n}, 0.0);
    for (int64_t bh = 0; bh < av.dim(0); ++bh) {
      int64_t hd = bh % heads;
      for (int64_t i = 0; i < n; ++i) {
        const double* row = av.data() + (bh * n + i) * n;
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) s += row[j];
        mean_rs[hd * n + i] += s;
      }
    }
    for (int64_t i = 0; i < heads * n; ++i) {
      mean_rs[i] /= static_cast<double>(batch);
      p.running_rowsum[i] = (1.0 - p.momentum) * p.running_rowsum[i] + p.momentum * mean_rs[i];
    }
  }

  Var gamma = t.param(p.gamma);
  const Tensor& gv = t.value(gamma);
  Tensor divisor({heads, n});
  const Tensor& div_src = mode == Mode::kCalibrate ? divisor_snapshot : p.running_rowsum;
  for (int64_t i = 0; i < heads * n; ++i) divisor[i] = 1.0 / (div_src[i] + p.eps);

  Tensor y(av.shape());
  for (int64_t bh = 0; bh < av.dim(0); ++bh) {
    int64_t hd = bh % heads;
    for (int64_t i = 0; i < n; ++i) {
      double f = gv[hd * n + i] * divisor[hd * n + i];
      const double* src = av.data() + (bh * n + i) * n;
      double* dst = y.data() + (bh * n + i) * n;
      for (int64_t j = 0; j < n; ++j) dst[j] = src[j] * f;
    }
  }
  if (mode == Mode::kCalibrate) {
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::clamp(y[i], -1e6, 1e6);
  }
  // The running divisor is treated as a constant in the backward pass.
  return t.make_node(std::move(y), {a, gamma}, [a, gamma, divisor, heads, n](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& gv = tp.value(gamma);
    if (tp.requires_grad(a)) {
      Tensor ga(av.shape());
      for (int64_t bh = 0; bh < av.dim(0); ++bh) {
        int64_t hd = bh % heads;
        for (int64_t i = 0; i < n; ++i) {
          double f = gv[hd * n + i] * divisor[hd * n + i];
          int64_t off = (bh * n + i) * n;
          for (int64_t j = 0; j < n; ++j) ga[off + j] = g[off + j] * f;
        }
      }
      tp.accumulate_move(a, std::move(ga));
    }
    Tensor gg({heads, n}, 0.0);
    for (int64_t bh = 0; bh < av.dim(0); ++bh) {
      int64_t hd = bh % heads;
      for (int64_t i = 0; i < n; ++i) {
        int64_t off = (bh * n + i) * n;
        double acc = 0.0;
        for (int64_t j = 0; j < n; ++j) acc += g[off + j] * av[off + j];
        gg[hd * n + i] += acc * divisor[hd * n + i];
      }
    }
    tp.accumulate_move(gamma, std::move(gg));
  });
}

NormModule NormModule::layer_norm_over(int64_t features) {
  NormModule m;
  m.kind = NormKind::kLayerNorm;
  m.ln = LayerNormParams::make(features);
  return m;
}

NormModule NormModule::poly_bn_over(int64_t c, int64_t h, int64_t w) {
  NormModule m;
  m.kind = NormKind::kPolyBatchNorm;
  m.bn = PolyBatchNormParams::make(c, h, w);
  return m;
}

NormModule NormModule::identity() {
  NormModule m;
  m.kind = NormKind::kIdentity;
  return m;
}

Var NormModule::forward_nchw(Tape& t, Var x, Mode mode) {
  switch (kind) {
    case NormKind::kLayerNorm:
      return layer_norm_nchw(t, x, ln);
    case NormKind::kPolyBatchNorm:
      return poly_bn_forward(t, x, bn, mode);
    case NormKind::kIdentity:
      return x;
  }
  fail("norm: unknown kind");
}

Var NormModule::forward_rows(Tape& t, Var x, Mode mode, int64_t batch, int64_t h, int64_t w) {
  switch (kind) {
    case NormKind::kLayerNorm:
      return layer_norm(t, x, ln);
    case NormKind::kPolyBatchNorm: {
      int64_t d = t.value(x).dim(1);
      Var map = tokens_to_nchw(t, x, batch, d, h, w);
      Var normed = poly_bn_forward(t, map, bn, mode);
      return nchw_to_tokens(t, normed);
    }
    case NormKind::kIdentity:
      return x;
  }
  fail("norm: unknown kind");
}

}  // namespace polynext
