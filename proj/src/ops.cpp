#include "polynext/ops.hpp"

#include <algorithm>
#include <cmath>

#include "polynext/parallel.hpp"

namespace polynext {

namespace {

void check_same_shape(const Tape& t, Var a, Var b, const char* op) {
  check(t.value(a).same_shape(t.value(b)), std::string(op) + ": shape mismatch " + shape_str(t.shape(a)) + " vs " +
                                               shape_str(t.shape(b)));
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  check_same_shape(t, a, b, "add");
  Tensor y = t.value(a) + t.value(b);
  return t.make_node(std::move(y), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  check_same_shape(t, a, b, "sub");
  Tensor y = t.value(a) - t.value(b);
  return t.make_node(std::move(y), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    Tensor neg = g;
    neg *= -1.0;
    tp.accumulate_move(b, std::move(neg));
  });
}

Var hadamard(Tape& t, Var a, Var b) {
  check_same_shape(t, a, b, "hadamard");
  Tensor y = t.value(a) * t.value(b);
  return t.make_node(std::move(y), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate_move(a, g * tp.value(b));
    tp.accumulate_move(b, g * tp.value(a));
  });
}

Var scale(Tape& t, Var a, double c) {
  Tensor y = c * t.value(a);
  return t.make_node(std::move(y), {a}, [a, c](Tape& tp, const Tensor& g) { tp.accumulate_move(a, c * g); });
}

Var add_const(Tape& t, Var a, double c) {
  Tensor y = t.value(a);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += c;
  return t.make_node(std::move(y), {a}, [a](Tape& tp, const Tensor& g) { tp.accumulate(a, g); });
}

Var mul_scalar_var(Tape& t, Var x, Var s) {
  check(t.value(s).numel() == 1, "mul_scalar_var: scale must have one element, got " + shape_str(t.shape(s)));
  double sv = t.value(s)[0];
  Tensor y = sv * t.value(x);
  return t.make_node(std::move(y), {x, s}, [x, s](Tape& tp, const Tensor& g) {
    double sv = tp.value(s)[0];
    tp.accumulate_move(x, sv * g);
    const Tensor& xv = tp.value(x);
    double acc = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) acc += g[i] * xv[i];
    tp.accumulate(s, Tensor(tp.shape(s), acc));
  });
}

Var sigmoid(Tape& t, Var x) {
  Tensor y = t.value(x);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = 1.0 / (1.0 + std::exp(-y[i]));
  Tensor saved = y;
  return t.make_node(std::move(y), {x}, [x, saved](Tape& tp, const Tensor& g) {
    Tensor gx = g;
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] *= saved[i] * (1.0 - saved[i]);
    tp.accumulate_move(x, std::move(gx));
  });
}

Var sum_all(Tape& t, Var x) {
  double acc = 0.0;
  const Tensor& xv = t.value(x);
  for (int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  return t.make_node(Tensor::scalar(acc), {x}, [x](Tape& tp, const Tensor& g) {
    tp.accumulate(x, Tensor(tp.shape(x), g[0]));
  });
}

Var mean_all(Tape& t, Var x) {
  int64_t n = t.value(x).numel();
  return scale(t, sum_all(t, x), 1.0 / static_cast<double>(n));
}

Var reshape(Tape& t, Var x, Shape s) {
  Tensor y = t.value(x).reshaped(std::move(s));
  return t.make_node(std::move(y), {x}, [x](Tape& tp, const Tensor& g) {
    tp.accumulate_move(x, g.reshaped(tp.shape(x)));
  });
}

namespace {

struct MatmulDims {
  int64_t batch_a, batch_b, batch;  // leading-axis products (1 when 2D)
  int64_t m, k, n;
  Shape out_shape;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  check(a.size() >= 2 && b.size() >= 2, "matmul: operands must have rank >= 2, got " + shape_str(a) + " x " +
                                            shape_str(b));
  MatmulDims d;
  d.m = a[a.size() - 2];
  d.k = a[a.size() - 1];
  int64_t bk = b[b.size() - 2];
  d.n = b[b.size() - 1];
  check(d.k == bk, "matmul: inner dimensions differ: " + shape_str(a) + " x " + shape_str(b));
  Shape lead_a(a.begin(), a.end() - 2), lead_b(b.begin(), b.end() - 2);
  d.batch_a = shape_numel(lead_a);
  d.batch_b = shape_numel(lead_b);
  check(lead_a == lead_b || lead_a.empty() || lead_b.empty(),
        "matmul: leading axes must match or be absent: " + shape_str(a) + " x " + shape_str(b));
  const Shape& lead = lead_a.empty() ? lead_b : lead_a;
  d.batch = shape_numel(lead);
  d.out_shape = lead;
  d.out_shape.push_back(d.m);
  d.out_shape.push_back(d.n);
  return d;
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  MatmulDims d = matmul_dims(av.shape(), bv.shape());
  Tensor y(d.out_shape);
  int64_t sa = d.batch_a == 1 ? 0 : d.m * d.k;
  int64_t sb = d.batch_b == 1 ? 0 : d.k * d.n;
  const int64_t macs = d.batch * d.m * d.k * d.n;
  auto run = [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      kern::matmul(av.data() + i * sa, bv.data() + i * sb, y.data() + i * d.m * d.n, d.m, d.k, d.n);
    }
  };
  if (macs >= (1 << 15) && d.batch > 1) {
    parallel_for_ranges(d.batch, run);
  } else {
    run(0, d.batch);
  }
  return t.make_node(std::move(y), {a, b}, [a, b, d, sa, sb](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor ga(av.shape(), 0.0);
      for (int64_t i = 0; i < d.batch; ++i) {
        kern::matmul_grad_a(g.data() + i * d.m * d.n, bv.data() + i * sb, ga.data() + i * sa, d.m, d.k, d.n);
      }
      tp.accumulate_move(a, std::move(ga));
    }
    if (tp.requires_grad(b)) {
      Tensor gb(bv.shape(), 0.0);
      for (int64_t i = 0; i < d.batch; ++i) {
        kern::matmul_grad_b(g.data() + i * d.m * d.n, av.data() + i * sa, gb.data() + i * sb, d.m, d.k, d.n);
      }
      tp.accumulate_move(b, std::move(gb));
    }
  });
}

Var transpose_last2(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  check(xv.rank() >= 2, "transpose: rank must be >= 2, got " + shape_str(xv.shape()));
  Shape s = xv.shape();
  int64_t m = s[s.size() - 2], n = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  int64_t batch = xv.numel() / (m * n);
  Tensor y(s);
  for (int64_t b = 0; b < batch; ++b) {
    const double* src = xv.data() + b * m * n;
    double* dst = y.data() + b * m * n;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
  }
  return t.make_node(std::move(y), {x}, [x, m, n, batch](Tape& tp, const Tensor& g) {
    Tensor gx(tp.shape(x));
    for (int64_t b = 0; b < batch; ++b) {
      const double* src = g.data() + b * m * n;
      double* dst = gx.data() + b * m * n;
      for (int64_t j = 0; j < n; ++j) {
        for (int64_t i = 0; i < m; ++i) dst[i * n + j] = src[j * m + i];
      }
    }
    tp.accumulate_move(x, std::move(gx));
  });
}

Var linear(Tape& t, Var x, Var w, Var b) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  check(xv.rank() == 2 && wv.rank() == 2, "linear: expected x[N,in], w[out,in], got " + shape_str(xv.shape()) +
                                              " and " + shape_str(wv.shape()));
  check(xv.dim(1) == wv.dim(1), "linear: input width " + std::to_string(xv.dim(1)) + " does not match weight " +
                                    shape_str(wv.shape()));
  const Tensor* bias = nullptr;
  if (b.valid()) {
    check(t.value(b).rank() == 1 && t.value(b).dim(0) == wv.dim(0),
          "linear: bias shape " + shape_str(t.shape(b)) + " does not match out dim " + std::to_string(wv.dim(0)));
    bias = &t.value(b);
  }
  Tensor y({xv.dim(0), wv.dim(0)});
  kern::linear(xv, wv, bias, y);
  std::vector<Var> inputs = b.valid() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return t.make_node(std::move(y), inputs, [x, w, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(x)) {
      Tensor gx(tp.shape(x), 0.0);
      kern::linear_grad_x(g, tp.value(w), gx);
      tp.accumulate_move(x, std::move(gx));
    }
    if (tp.requires_grad(w)) {
      Tensor gw(tp.shape(w), 0.0);
      kern::linear_grad_w(g, tp.value(x), gw);
      tp.accumulate_move(w, std::move(gw));
    }
    if (b.valid() && tp.requires_grad(b)) {
      Tensor gb(tp.shape(b), 0.0);
      kern::linear_grad_bias(g, gb);
      tp.accumulate_move(b, std::move(gb));
    }
  });
}

Var conv2d(Tape& t, Var x, Var w, Var b, const Conv2dSpec& spec) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  Conv2dDims d = conv2d_check(xv.shape(), wv.shape(), spec);
  const Tensor* bias = nullptr;
  if (b.valid()) {
    check(t.value(b).rank() == 1 && t.value(b).dim(0) == d.c_out,
          "conv2d: bias shape " + shape_str(t.shape(b)) + " does not match out channels " + std::to_string(d.c_out));
    bias = &t.value(b);
  }
  Tensor y({d.batch, d.c_out, d.ho, d.wo});
  kern::conv2d(xv, wv, bias, y, d);
  std::vector<Var> inputs = b.valid() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return t.make_node(std::move(y), inputs, [x, w, b, d](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(x)) {
      Tensor gx(tp.shape(x), 0.0);
      kern::conv2d_grad_x(g, tp.value(w), gx, d);
      tp.accumulate_move(x, std::move(gx));
    }
    if (tp.requires_grad(w)) {
      Tensor gw(tp.shape(w), 0.0);
      kern::conv2d_grad_w(g, tp.value(x), gw, d);
      tp.accumulate_move(w, std::move(gw));
    }
    if (b.valid() && tp.requires_grad(b)) {
      Tensor gb(tp.shape(b), 0.0);
      kern::conv2d_grad_bias(g, gb);
      tp.accumulate_move(b, std::move(gb));
    }
  });
}

Var channel_flip(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 4, "channel_flip: expected B,C,H,W, got " + shape_str(xv.shape()));
  return t.make_node(kern::flip_channels(xv), {x}, [x](Tape& tp, const Tensor& g) {
    tp.accumulate_move(x, kern::flip_channels(g));
  });
}

Var nchw_to_tokens(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 4, "nchw_to_tokens: expected B,C,H,W, got " + shape_str(xv.shape()));
  int64_t b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  return t.make_node(kern::nchw_to_tokens(xv), {x}, [x, b, c, h, w](Tape& tp, const Tensor& g) {
    tp.accumulate_move(x, kern::tokens_to_nchw(g, b, c, h, w));
  });
}

Var tokens_to_nchw(Tape& t, Var x, int64_t batch, int64_t c, int64_t h, int64_t w) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 2 && xv.dim(0) == batch * h * w && xv.dim(1) == c,
        "tokens_to_nchw: token shape " + shape_str(xv.shape()) + " does not match B,C,H,W");
  return t.make_node(kern::tokens_to_nchw(xv, batch, c, h, w), {x}, [x](Tape& tp, const Tensor& g) {
    tp.accumulate_move(x, kern::nchw_to_tokens(g));
  });
}

Var split_heads(Tape& t, Var x, int64_t batch, int64_t n, int64_t heads, int64_t dh) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 2 && xv.dim(0) == batch * n && xv.dim(1) == heads * dh,
        "split_heads: shape " + shape_str(xv.shape()) + " does not factor into B,N,heads,dh");
  return t.make_node(kern::split_heads(xv, batch, n, heads, dh), {x},
                     [x, batch, n, heads, dh](Tape& tp, const Tensor& g) {
                       tp.accumulate_move(x, kern::merge_heads(g, batch, n, heads, dh));
                     });
}

Var merge_heads(Tape& t, Var x, int64_t batch, int64_t n, int64_t heads, int64_t dh) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 3 && xv.dim(0) == batch * heads && xv.dim(1) == n && xv.dim(2) == dh,
        "merge_heads: shape " + shape_str(xv.shape()) + " does not factor into B,heads,N,dh");
  return t.make_node(kern::merge_heads(xv, batch, n, heads, dh), {x},
                     [x, batch, n, heads, dh](Tape& tp, const Tensor& g) {
                       tp.accumulate_move(x, kern::split_heads(g, batch, n, heads, dh));
                     });
}

Var global_avg_pool(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  check(xv.rank() == 4, "global_avg_pool: expected B,C,H,W, got " + shape_str(xv.shape()));
  int64_t b = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor y({b, c});
  for (int64_t i = 0; i < b * c; ++i) {
    const double* base = xv.data() + i * hw;
    double acc = 0.0;
    for (int64_t p = 0; p < hw; ++p) acc += base[p];
    y[i] = acc / static_cast<double>(hw);
  }
  return t.make_node(std::move(y), {x}, [x, hw](Tape& tp, const Tensor& g) {
    Tensor gx(tp.shape(x));
    double inv = 1.0 / static_cast<double>(hw);
    for (int64_t i = 0; i < g.numel(); ++i) {
      double v = g[i] * inv;
      double* base = gx.data() + i * hw;
      for (int64_t p = 0; p < hw; ++p) base[p] = v;
    }
    tp.accumulate_move(x, std::move(gx));
  });
}

Var add_bias_nchw(Tape& t, Var x, Var bias) {
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(bias);
  check(xv.rank() == 4 && bv.rank() == 1 && bv.dim(0) == xv.dim(1),
        "add_bias_nchw: bias " + shape_str(bv.shape()) + " does not match channels of " + shape_str(xv.shape()));
  int64_t b = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor y = xv;
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      double* base = y.data() + (i * c + ch) * hw;
      double v = bv[ch];
      for (int64_t p = 0; p < hw; ++p) base[p] += v;
    }
  }
  return t.make_node(std::move(y), {x, bias}, [x, bias, b, c, hw](Tape& tp, const Tensor& g) {
    tp.accumulate(x, g);
    if (tp.requires_grad(bias)) {
      Tensor gb({c}, 0.0);
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
          const double* base = g.data() + (i * c + ch) * hw;
          double acc = 0.0;
          for (int64_t p = 0; p < hw; ++p) acc += base[p];
          gb[ch] += acc;
        }
      }
      tp.accumulate_move(bias, std::move(gb));
    }
  });
}

Var scale_channels(Tape& t, Var x, Var s) {
  const Tensor& xv = t.value(x);
  const Tensor& sv = t.value(s);
  check(xv.rank() == 4 && sv.rank() == 1 && sv.dim(0) == xv.dim(1),
        "scale_channels: scale " + shape_str(sv.shape()) + " does not match channels of " + shape_str(xv.shape()));
  int64_t b = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor y = xv;
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      double* base = y.data() + (i * c + ch) * hw;
      double v = sv[ch];
      for (int64_t p = 0; p < hw; ++p) base[p] *= v;
    }
  }
  return t.make_node(std::move(y), {x, s}, [x, s, b, c, hw](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(x);
    const Tensor& sv = tp.value(s);
    if (tp.requires_grad(x)) {
      Tensor gx(xv.shape());
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
          int64_t off = (i * c + ch) * hw;
          double v = sv[ch];
          for (int64_t p = 0; p < hw; ++p) gx[off + p] = g[off + p] * v;
        }
      }
      tp.accumulate_move(x, std::move(gx));
    }
    if (tp.requires_grad(s)) {
      Tensor gs({c}, 0.0);
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
          int64_t off = (i * c + ch) * hw;
          double acc = 0.0;
          for (int64_t p = 0; p < hw; ++p) acc += g[off + p] * xv[off + p];
          gs[ch] += acc;
        }
      }
      tp.accumulate_move(s, std::move(gs));
    }
  });
}

Var scale_per_head(Tape& t, Var x, Var s) {
  const Tensor& xv = t.value(x);
  const Tensor& sv = t.value(s);
  check(xv.rank() == 3 && sv.rank() == 1, "scale_per_head: expected x[B*h,N,M] and s[h]");
  int64_t heads = sv.dim(0);
  check(xv.dim(0) % heads == 0, "scale_per_head: leading dim " + std::to_string(xv.dim(0)) +
                                    " not divisible by head count " + std::to_string(heads));
  int64_t plane = xv.dim(1) * xv.dim(2);
  Tensor y = xv;
  for (int64_t l = 0; l < xv.dim(0); ++l) {
    double v = sv[l % heads];
    double* base = y.data() + l * plane;
    for (int64_t p = 0; p < plane; ++p) base[p] *= v;
  }
  return t.make_node(std::move(y), {x, s}, [x, s, heads, plane](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(x);
    const Tensor& sv = tp.value(s);
    if (tp.requires_grad(x)) {
      Tensor gx(xv.shape());
      for (int64_t l = 0; l < xv.dim(0); ++l) {
        double v = sv[l % heads];
        for (int64_t p = 0; p < plane; ++p) gx[l * plane + p] = g[l * plane + p] * v;
      }
      tp.accumulate_move(x, std::move(gx));
    }
    if (tp.requires_grad(s)) {
      Tensor gs({heads}, 0.0);
      for (int64_t l = 0; l < xv.dim(0); ++l) {
        double acc = 0.0;
        for (int64_t p = 0; p < plane; ++p) acc += g[l * plane + p] * xv[l * plane + p];
        gs[l % heads] += acc;
      }
      tp.accumulate_move(s, std::move(gs));
    }
  });
}

Var scale_samples_const(Tape& t, Var x, Tensor mask) {
  const Tensor& xv = t.value(x);
  check(mask.rank() == 1 && mask.dim(0) == xv.dim(0),
        "scale_samples_const: mask " + shape_str(mask.shape()) + " does not match batch of " +
            shape_str(xv.shape()));
  int64_t plane = xv.numel() / xv.dim(0);
  Tensor y = xv;
  for (int64_t b = 0; b < xv.dim(0); ++b) {
    double v = mask[b];
    double* base = y.data() + b * plane;
    for (int64_t p = 0; p < plane; ++p) base[p] *= v;
  }
  Tensor saved = std::move(mask);
  return t.make_node(std::move(y), {x}, [x, saved, plane](Tape& tp, const Tensor& g) {
    Tensor gx = g;
    for (int64_t b = 0; b < saved.dim(0); ++b) {
      double v = saved[b];
      double* base = gx.data() + b * plane;
      for (int64_t p = 0; p < plane; ++p) base[p] *= v;
    }
    tp.accumulate_move(x, std::move(gx));
  });
}

Var mul_mask_const(Tape& t, Var x, Tensor mask) {
  check(t.value(x).same_shape(mask), "mul_mask_const: mask shape " + shape_str(mask.shape()) +
                                         " does not match " + shape_str(t.shape(x)));
  Tensor y = t.value(x) * mask;
  Tensor saved = std::move(mask);
  return t.make_node(std::move(y), {x}, [x, saved](Tape& tp, const Tensor& g) {
    tp.accumulate_move(x, g * saved);
  });
}

Var l1_row_normalize(Tape& t, Var x, double eps) {
  const Tensor& xv = t.value(x);
  check(xv.rank() >= 2, "l1_row_normalize: rank must be >= 2");
  int64_t n = xv.shape().back();
  int64_t rows = xv.numel() / n;
  Tensor y(xv.shape());
  Tensor inv_sums({rows});
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * n;
    double s = eps;
    for (int64_t j = 0; j < n; ++j) s += src[j];
    double inv = 1.0 / s;
    inv_sums[r] = inv;
    double* dst = y.data() + r * n;
    for (int64_t j = 0; j < n; ++j) dst[j] = src[j] * inv;
  }
  return t.make_node(std::move(y), {x}, [x, inv_sums, rows, n](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(x);
    Tensor gx(xv.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const double* xrow = xv.data() + r * n;
      const double* grow = g.data() + r * n;
      double inv = inv_sums[r];
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += grow[j] * xrow[j];
      double corr = dot * inv * inv;
      double* dst = gx.data() + r * n;
      for (int64_t j = 0; j < n; ++j) dst[j] = grow[j] * inv - corr;
    }
    tp.accumulate_move(x, std::move(gx));
  });
}

Var poly_kernel(Tape& t, Var scores, Var head_logits, int p) {
  check(p >= 1, "poly_kernel: degree must be >= 1, got " + std::to_string(p));
  Var s = sigmoid(t, head_logits);
  Var z = add_const(t, scale_per_head(t, scores, s), 1.0);
  Var y = z;
  for (int i = 1; i < p; ++i) y = hadamard(t, y, z);  // exactly p-1 multiplies
  return y;
}

Var cross_entropy_label_smooth(Tape& t, Var logits, const std::vector<int>& labels, double eps) {
  const Tensor& lv = t.value(logits);
  check(lv.rank() == 2, "cross_entropy: logits must be N,K, got " + shape_str(lv.shape()));
  check(eps >= 0.0 && eps < 1.0, "cross_entropy: smoothing must be in [0,1)");
  int64_t n = lv.dim(0), k = lv.dim(1);
  check(static_cast<int64_t>(labels.size()) == n, "cross_entropy: label count " + std::to_string(labels.size()) +
                                                      " does not match batch " + std::to_string(n));
  for (int lab : labels) {
    check(lab >= 0 && lab < k, "cross_entropy: label " + std::to_string(lab) + " out of range [0," +
                                   std::to_string(k) + ")");
  }
  Tensor softmax({n, k});
  double total = 0.0;
  double off = eps / static_cast<double>(k);
  double on = 1.0 - eps + off;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * k;
    double m = row[0];
    for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - m);
    double lse = m + std::log(sum);
    double target_dot = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      softmax[i * k + j] = std::exp(row[j] - m) / sum;
      double q = (j == labels[i]) ? on : off;
      target_dot += q * row[j];
    }
    total += lse - target_dot;
  }
  total /= static_cast<double>(n);
  std::vector<int> labs = labels;
  return t.make_node(Tensor::scalar(total), {logits},
                     [logits, softmax, labs, n, k, on, off](Tape& tp, const Tensor& g) {
                       Tensor gl({n, k});
                       double scale_g = g[0] / static_cast<double>(n);
                       for (int64_t i = 0; i < n; ++i) {
                         for (int64_t j = 0; j < k; ++j) {
                           double q = (j == labs[static_cast<size_t>(i)]) ? on : off;
                           gl[i * k + j] = (softmax[i * k + j] - q) * scale_g;
                         }
                       }
                       tp.accumulate_move(logits, std::move(gl));
                     });
}

}  // namespace polynext
