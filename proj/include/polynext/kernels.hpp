#pragma once

#include "polynext/tensor.hpp"

namespace polynext {

struct Conv2dSpec {
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t dilation = 1;
  int64_t groups = 1;
};

struct Conv2dDims {
  int64_t batch, c_in, h, w;
  int64_t c_out, kc, kh, kw;  // kc = c_in / groups
  int64_t ho, wo;
  Conv2dSpec spec;
};

/// Validates shapes/divisibility and computes the output size
/// H' = floor((H + 2p - d(k-1) - 1)/s) + 1, erroring when H' < 1.
Conv2dDims conv2d_check(const Shape& x, const Shape& w, const Conv2dSpec& spec);

namespace kern {

// y[m,n] = a[m,k] * b[k,n], accumulated over k in index order.
void matmul(const double* a, const double* b, double* y, int64_t m, int64_t k, int64_t n);
// da[m,k] += gy[m,n] * b[k,n]^T ; db[k,n] += a[m,k]^T * gy[m,n]
void matmul_grad_a(const double* gy, const double* b, double* da, int64_t m, int64_t k, int64_t n);
void matmul_grad_b(const double* gy, const double* a, double* db, int64_t m, int64_t k, int64_t n);

// y[i,o] = sum_k x[i,k] w[o,k] + b[o]
void linear(const Tensor& x, const Tensor& w, const Tensor* bias, Tensor& y);
void linear_grad_x(const Tensor& gy, const Tensor& w, Tensor& gx);
void linear_grad_w(const Tensor& gy, const Tensor& x, Tensor& gw);
void linear_grad_bias(const Tensor& gy, Tensor& gb);

void conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, Tensor& y, const Conv2dDims& d);
void conv2d_grad_x(const Tensor& gy, const Tensor& w, Tensor& gx, const Conv2dDims& d);
void conv2d_grad_w(const Tensor& gy, const Tensor& x, Tensor& gw, const Conv2dDims& d);
void conv2d_grad_bias(const Tensor& gy, Tensor& gb);

// Layout moves shared by the tape ops and the folded inference path.
Tensor flip_channels(const Tensor& x);                                   // [B,C,H,W]
Tensor nchw_to_tokens(const Tensor& x);                                  // -> [B*H*W, C]
Tensor tokens_to_nchw(const Tensor& x, int64_t b, int64_t c, int64_t h, int64_t w);
Tensor split_heads(const Tensor& x, int64_t b, int64_t n, int64_t heads, int64_t dh);
Tensor merge_heads(const Tensor& x, int64_t b, int64_t n, int64_t heads, int64_t dh);

}  // namespace kern

}  // namespace polynext
