#include "polynext/kernels.hpp"

#include <algorithm>

#include "polynext/parallel.hpp"

namespace polynext {

Conv2dDims conv2d_check(const Shape& xs, const Shape& ws, const Conv2dSpec& spec) {
  check(xs.size() == 4, "conv2d: input must be B,C,H,W, got " + shape_str(xs));
  check(ws.size() == 4, "conv2d: weight must be O,C/g,kh,kw, got " + shape_str(ws));
  check(spec.stride >= 1 && spec.dilation >= 1 && spec.groups >= 1 && spec.padding >= 0,
        "conv2d: invalid stride/dilation/groups/padding");
  Conv2dDims d;
  d.batch = xs[0];
  d.c_in = xs[1];
  d.h = xs[2];
  d.w = xs[3];
  d.c_out = ws[0];
  d.kc = ws[1];
  d.kh = ws[2];
  d.kw = ws[3];
  d.spec = spec;
  check(d.c_in % spec.groups == 0, "conv2d: channels " + std::to_string(d.c_in) + " not divisible by groups " +
                                       std::to_string(spec.groups));
  check(d.c_out % spec.groups == 0, "conv2d: output channels " + std::to_string(d.c_out) +
                                        " not divisible by groups " + std::to_string(spec.groups));
  check(d.kc == d.c_in / spec.groups, "conv2d: weight shape " + shape_str(ws) + " inconsistent with input " +
                                          shape_str(xs) + " at groups " + std::to_string(spec.groups));
  auto out_size = [&](int64_t in, int64_t k) {
    return (in + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1;
  };
  d.ho = out_size(d.h, d.kh);
  d.wo = out_size(d.w, d.kw);
  check(d.ho >= 1 && d.wo >= 1, "conv2d: output size would be empty for input " + shape_str(xs) + " and kernel " +
                                    shape_str(ws));
  return d;
}

namespace kern {

namespace {
constexpr int64_t kParallelMacs = 1 << 15;
}

void matmul(const double* a, const double* b, double* y, int64_t m, int64_t k, int64_t n) {
  std::fill(y, y + m * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* yrow = y + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
    }
  }
}

void matmul_grad_a(const double* gy, const double* b, double* da, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* grow = gy + i * n;
    double* darow = da + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      darow[p] += acc;
    }
  }
}

void matmul_grad_b(const double* gy, const double* a, double* db, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = gy + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      double* dbrow = db + p * n;
      for (int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
    }
  }
}

void linear(const Tensor& x, const Tensor& w, const Tensor* bias, Tensor& y) {
  int64_t rows = x.dim(0), in = x.dim(1), out = w.dim(0);
  const double* xp = x.data();
  const double* wp = w.data();
  double* yp = y.data();
  bool par = rows * in * out >= kParallelMacs;
  auto body = [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      const double* xrow = xp + i * in;
      double* yrow = yp + i * out;
      for (int64_t o = 0; o < out; ++o) {
        const double* wrow = wp + o * in;
        double acc = bias ? (*bias)[o] : 0.0;
        for (int64_t k = 0; k < in; ++k) acc += xrow[k] * wrow[k];
        yrow[o] = acc;
      }
    }
  };
  if (par) {
    parallel_for_ranges(rows, body);
  } else {
    body(0, rows);
  }
}

void linear_grad_x(const Tensor& gy, const Tensor& w, Tensor& gx) {
  int64_t rows = gy.dim(0), out = gy.dim(1), in = w.dim(1);
  const double* gp = gy.data();
  const double* wp = w.data();
  double* xp = gx.data();
  bool par = rows * in * out >= kParallelMacs;
  auto body = [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      const double* grow = gp + i * out;
      double* xrow = xp + i * in;
      for (int64_t o = 0; o < out; ++o) {
        double g = grow[o];
        const double* wrow = wp + o * in;
        for (int64_t k = 0; k < in; ++k) xrow[k] += g * wrow[k];
      }
    }
  };
  if (par) {
    parallel_for_ranges(rows, body);
  } else {
    body(0, rows);
  }
}

void linear_grad_w(const Tensor& gy, const Tensor& x, Tensor& gw) {
  int64_t rows = gy.dim(0), out = gy.dim(1), in = x.dim(1);
  const double* gp = gy.data();
  const double* xp = x.data();
  double* wp = gw.data();
  bool par = rows * in * out >= kParallelMacs;
  auto body = [&](int64_t o0, int64_t o1) {
    for (int64_t o = o0; o < o1; ++o) {
      double* wrow = wp + o * in;
      for (int64_t i = 0; i < rows; ++i) {
        double g = gp[i * out + o];
        const double* xrow = xp + i * in;
        for (int64_t k = 0; k < in; ++k) wrow[k] += g * xrow[k];
      }
    }
  };
  if (par) {
    parallel_for_ranges(out, body);
  } else {
    body(0, out);
  }
}

void linear_grad_bias(const Tensor& gy, Tensor& gb) {
  int64_t rows = gy.dim(0), out = gy.dim(1);
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t o = 0; o < out; ++o) gb[o] += gy[i * out + o];
  }
}

void conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, Tensor& y, const Conv2dDims& d) {
  const int64_t oc_per_g = d.c_out / d.spec.groups;
  const double* xp = x.data();
  const double* wp = w.data();
  double* yp = y.data();
  const int64_t macs = d.batch * d.c_out * d.ho * d.wo * d.kc * d.kh * d.kw;
  auto plane = [&](int64_t bo) {
    int64_t b = bo / d.c_out;
    int64_t o = bo % d.c_out;
    int64_t g = o / oc_per_g;
    const double* wbase = wp + o * d.kc * d.kh * d.kw;
    double bias_v = bias ? (*bias)[o] : 0.0;
    double* ybase = yp + (b * d.c_out + o) * d.ho * d.wo;
    for (int64_t oh = 0; oh < d.ho; ++oh) {
      for (int64_t ow = 0; ow < d.wo; ++ow) {
        double acc = bias_v;
        for (int64_t ic = 0; ic < d.kc; ++ic) {
          int64_t c = g * d.kc + ic;
          const double* xbase = xp + (b * d.c_in + c) * d.h * d.w;
          const double* wk = wbase + ic * d.kh * d.kw;
          for (int64_t r = 0; r < d.kh; ++r) {
            int64_t ih = oh * d.spec.stride - d.spec.padding + r * d.spec.dilation;
            if (ih < 0 || ih >= d.h) continue;
            for (int64_t s = 0; s < d.kw; ++s) {
              int64_t iw = ow * d.spec.stride - d.spec.padding + s * d.spec.dilation;
              if (iw < 0 || iw >= d.w) continue;
              acc += xbase[ih * d.w + iw] * wk[r * d.kw + s];
            }
          }
        }
        ybase[oh * d.wo + ow] = acc;
      }
    }
  };
  if (macs >= kParallelMacs) {
    parallel_for(d.batch * d.c_out, plane);
  } else {
    for (int64_t bo = 0; bo < d.batch * d.c_out; ++bo) plane(bo);
  }
}

void conv2d_grad_x(const Tensor& gy, const Tensor& w, Tensor& gx, const Conv2dDims& d) {
  const int64_t oc_per_g = d.c_out / d.spec.groups;
  const double* gp = gy.data();
  const double* wp = w.data();
  double* xp = gx.data();
  const int64_t macs = d.batch * d.c_out * d.ho * d.wo * d.kc * d.kh * d.kw;
  // Per-sample planes are disjoint, so the batch loop parallelizes safely.
  auto sample = [&](int64_t b) {
    for (int64_t o = 0; o < d.c_out; ++o) {
      int64_t g = o / oc_per_g;
      const double* wbase = wp + o * d.kc * d.kh * d.kw;
      const double* gbase = gp + (b * d.c_out + o) * d.ho * d.wo;
      for (int64_t oh = 0; oh < d.ho; ++oh) {
        for (int64_t ow = 0; ow < d.wo; ++ow) {
          double gval = gbase[oh * d.wo + ow];
          if (gval == 0.0) continue;
          for (int64_t ic = 0; ic < d.kc; ++ic) {
            int64_t c = g * d.kc + ic;
            double* xbase = xp + (b * d.c_in + c) * d.h * d.w;
            const double* wk = wbase + ic * d.kh * d.kw;
            for (int64_t r = 0; r < d.kh; ++r) {
              int64_t ih = oh * d.spec.stride - d.spec.padding + r * d.spec.dilation;
              if (ih < 0 || ih >= d.h) continue;
              for (int64_t s = 0; s < d.kw; ++s) {
                int64_t iw = ow * d.spec.stride - d.spec.padding + s * d.spec.dilation;
                if (iw < 0 || iw >= d.w) continue;
                xbase[ih * d.w + iw] += gval * wk[r * d.kw + s];
              }
            }
          }
        }
      }
    }
  };
  if (macs >= kParallelMacs) {
    parallel_for(d.batch, sample);
  } else {
    for (int64_t b = 0; b < d.batch; ++b) sample(b);
  }
}

void conv2d_grad_w(const Tensor& gy, const Tensor& x, Tensor& gw, const Conv2dDims& d) {
  const int64_t oc_per_g = d.c_out / d.spec.groups;
  const double* gp = gy.data();
  const double* xp = x.data();
  double* wp = gw.data();
  const int64_t macs = d.batch * d.c_out * d.ho * d.wo * d.kc * d.kh * d.kw;
  // Per-output-channel weight slices are disjoint.
  auto out_channel = [&](int64_t o) {
    int64_t g = o / oc_per_g;
    double* wbase = wp + o * d.kc * d.kh * d.kw;
    for (int64_t b = 0; b < d.batch; ++b) {
      const double* gbase = gp + (b * d.c_out + o) * d.ho * d.wo;
      for (int64_t oh = 0; oh < d.ho; ++oh) {
        for (int64_t ow = 0; ow < d.wo; ++ow) {
          double gval = gbase[oh * d.wo + ow];
          if (gval == 0.0) continue;
          for (int64_t ic = 0; ic < d.kc; ++ic) {
            int64_t c = g * d.kc + ic;
            const double* xbase = xp + (b * d.c_in + c) * d.h * d.w;
            double* wk = wbase + ic * d.kh * d.kw;
            for (int64_t r = 0; r < d.kh; ++r) {
              int64_t ih = oh * d.spec.stride - d.spec.padding + r * d.spec.dilation;
              if (ih < 0 || ih >= d.h) continue;
              for (int64_t s = 0; s < d.kw; ++s) {
                int64_t iw = ow * d.spec.stride - d.spec.padding + s * d.spec.dilation;
                if (iw < 0 || iw >= d.w) continue;
                wk[r * d.kw + s] += gval * xbase[ih * d.w + iw];
              }
            }
          }
        }
      }
    }
  };
  if (macs >= kParallelMacs) {
    parallel_for(d.c_out, out_channel);
  } else {
    for (int64_t o = 0; o < d.c_out; ++o) out_channel(o);
  }
}

void conv2d_grad_bias(const Tensor& gy, Tensor& gb) {
  int64_t b = gy.dim(0), o = gy.dim(1), hw = gy.dim(2) * gy.dim(3);
  const double* gp = gy.data();
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t c = 0; c < o; ++c) {
      const double* base = gp + (i * o + c) * hw;
      double acc = 0.0;
      for (int64_t k = 0; k < hw; ++k) acc += base[k];
      gb[c] += acc;
    }
  }
}

Tensor flip_channels(const Tensor& x) {
  int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* src = x.data() + (i * c + ch) * hw;
      double* dst = y.data() + (i * c + (c - 1 - ch)) * hw;
      std::copy(src, src + hw, dst);
    }
  }
  return y;
}

Tensor nchw_to_tokens(const Tensor& x) {
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({b * h * w, c});
  const double* xp = x.data();
  double* yp = y.data();
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* plane = xp + (i * c + ch) * h * w;
      double* base = yp + i * h * w * c + ch;
      for (int64_t p = 0; p < h * w; ++p) base[p * c] = plane[p];
    }
  }
  return y;
}

Tensor tokens_to_nchw(const Tensor& x, int64_t b, int64_t c, int64_t h, int64_t w) {
  Tensor y({b, c, h, w});
  const double* xp = x.data();
  double* yp = y.data();
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      double* plane = yp + (i * c + ch) * h * w;
      const double* base = xp + i * h * w * c + ch;
      for (int64_t p = 0; p < h * w; ++p) plane[p] = base[p * c];
    }
  }
  return y;
}

Tensor split_heads(const Tensor& x, int64_t b, int64_t n, int64_t heads, int64_t dh) {
  Tensor y({b * heads, n, dh});
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t tok = 0; tok < n; ++tok) {
      const double* src = x.data() + (i * n + tok) * heads * dh;
      for (int64_t hd = 0; hd < heads; ++hd) {
        double* dst = y.data() + ((i * heads + hd) * n + tok) * dh;
        std::copy(src + hd * dh, src + (hd + 1) * dh, dst);
      }
    }
  }
  return y;
}

Tensor merge_heads(const Tensor& x, int64_t b, int64_t n, int64_t heads, int64_t dh) {
  Tensor y({b * n, heads * dh});
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t hd = 0; hd < heads; ++hd) {
      for (int64_t tok = 0; tok < n; ++tok) {
        const double* src = x.data() + ((i * heads + hd) * n + tok) * dh;
        double* dst = y.data() + (i * n + tok) * heads * dh + hd * dh;
        std::copy(src, src + dh, dst);
      }
    }
  }
  return y;
}

}  // namespace kern

}  // namespace polynext
