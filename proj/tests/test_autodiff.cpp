#include <stdexcept>
#include <cstring>

#include "doctest.h"
#include "polynext/grad_check.hpp"
#include "polynext/ops.hpp"
#include "polynext/parallel.hpp"
#include "polynext/rng.hpp"

using namespace polynext;

namespace {

// Independent triple-loop oracle for the matmul contract.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor y({m, n}, 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t p = 0; p < k; ++p) y[i * n + j] += a[i * k + p] * b[p * n + j];
  return y;
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Tape t;
  Var eye = t.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  Var m = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  Var y = matmul(t, eye, m);
  CHECK(max_abs_diff(t.value(y), t.value(m)) == 0.0);

  Var a = t.constant(Tensor({1, 2}, {1, 2}));
  Var b = t.constant(Tensor({2, 1}, {3, 4}));
  CHECK(t.value(matmul(t, a, b))[0] == doctest::Approx(11).epsilon(1e-14));
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(11);
  Tensor a = rng.normal_tensor({4, 5}, 0, 1);
  Tensor b = rng.normal_tensor({5, 3}, 0, 1);
  Tape t;
  Var y = matmul(t, t.constant(a), t.constant(b));
  CHECK(max_abs_diff(t.value(y), matmul_oracle(a, b)) < 1e-12);
}

TEST_CASE("matmul shape errors name both shapes") {
  Tape t;
  Var a = t.constant(Tensor({2, 3}, 1.0));
  Var b = t.constant(Tensor({4, 2}, 1.0));
  CHECK_THROWS_WITH_AS(matmul(t, a, b), doctest::Contains("[2,3]"), std::runtime_error);
}

TEST_CASE("batched matmul broadcasts a 2D operand") {
  Rng rng(5);
  Tensor a = rng.normal_tensor({3, 2, 4}, 0, 1);
  Tensor b = rng.normal_tensor({4, 5}, 0, 1);
  Tape t;
  Var y = matmul(t, t.constant(a), t.constant(b));
  CHECK(t.shape(y) == Shape{3, 2, 5});
  for (int64_t l = 0; l < 3; ++l) {
    Tensor al({2, 4});
    for (int64_t i = 0; i < 8; ++i) al[i] = a[l * 8 + i];
    Tensor expect = matmul_oracle(al, b);
    for (int64_t i = 0; i < 10; ++i) CHECK(t.value(y)[l * 10 + i] == doctest::Approx(expect[i]).epsilon(1e-13));
  }
}

TEST_CASE("hadamard basics") {
  Tape t;
  Var a = t.constant(Tensor({3}, {1, 2, 3}));
  Var b = t.constant(Tensor({3}, {4, 5, 6}));
  Tensor y = t.value(hadamard(t, a, b));
  CHECK(y[0] == 4);
  CHECK(y[1] == 10);
  CHECK(y[2] == 18);
  Var ones = t.constant(Tensor::ones({3}));
  CHECK(max_abs_diff(t.value(hadamard(t, a, ones)), t.value(a)) == 0.0);
  Var zeros = t.constant(Tensor::zeros({3}));
  CHECK(t.value(hadamard(t, a, zeros)).max_abs() == 0.0);
  CHECK_THROWS(hadamard(t, a, t.constant(Tensor({2}, 1.0))));
}

TEST_CASE("backward of sum of squares") {
  Tensor x({1}, {3.0});
  Tape t;
  Var xv = t.param(x);
  Var loss = sum_all(t, hadamard(t, xv, xv));
  t.backward(loss);
  CHECK((*t.grad_for(x))[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("mutual gradient coupling: zero sibling branch kills the gradient") {
  Rng rng(2);
  Tensor wa = rng.normal_tensor({3, 4}, 0, 1);
  Tensor wb = Tensor::zeros({3, 4});
  Tensor x = rng.normal_tensor({2, 4}, 0, 1);
  Tape t;
  Var a = linear(t, t.constant(x), t.param(wa), Var{});
  Var b = linear(t, t.constant(x), t.param(wb), Var{});
  Var loss = sum_all(t, hadamard(t, a, b));
  t.backward(loss);
  CHECK(t.grad_for(wa)->max_abs() == 0.0);
  CHECK(t.grad_for(wb)->max_abs() > 0.0);
}

TEST_CASE("backward requires scalar loss") {
  Tape t;
  Tensor x({2}, {1, 2});
  Var v = t.param(x);
  CHECK_THROWS_WITH_AS(t.backward(v), doctest::Contains("scalar"), std::runtime_error);
}

TEST_CASE("grad_check agrees with finite differences on composites") {
  Rng rng(17);
  Tensor x = rng.normal_tensor({2, 4}, 0, 1);
  Tensor w = rng.normal_tensor({3, 4}, 0, 0.7);
  auto f = [&](Tape& t) {
    Var xv = t.param(x);
    Var wv = t.param(w);
    Var h = linear(t, xv, wv, Var{});
    Var y = hadamard(t, h, h);
    return mean_all(t, y);
  };
  CHECK(grad_check(f, x, 1e-5).max_rel_error < 1e-6);
  CHECK(grad_check(f, w, 1e-5).max_rel_error < 1e-6);
}

TEST_CASE("grad_check on sum is exact up to rounding") {
  Rng rng(1);
  Tensor x = rng.normal_tensor({5}, 0, 1);
  auto f = [&](Tape& t) { return sum_all(t, t.param(x)); };
  CHECK(grad_check(f, x).max_rel_error < 1e-9);
}

TEST_CASE("grad_check flags a wrong gradient rule") {
  Tensor x({3}, {0.5, -0.2, 0.8});
  auto broken = [&](Tape& t) {
    Var xv = t.param(x);
    // y = x*x with a deliberately wrong backward (gradient 1*x instead of 2*x).
    Tensor y = t.value(xv) * t.value(xv);
    Var node = t.make_node(std::move(y), {xv}, [xv](Tape& tp, const Tensor& g) {
      tp.accumulate_move(xv, g * tp.value(xv));
    });
    return sum_all(t, node);
  };
  CHECK(grad_check(broken, x).max_rel_error > 1e-2);
}

TEST_CASE("determinism: identical op sequences give bit-identical results") {
  auto run = [](Tensor& grad_out) {
    Rng rng(99);
    Tensor x = rng.normal_tensor({4, 6}, 0, 1);
    Tensor w = rng.normal_tensor({5, 6}, 0, 1);
    Tape t;
    Var y = linear(t, t.param(x), t.param(w), Var{});
    Var loss = sum_all(t, hadamard(t, y, y));
    t.backward(loss);
    grad_out = *t.grad_for(w);
    return t.value(loss)[0];
  };
  Tensor g1, g2;
  double l1 = run(g1), l2 = run(g2);
  CHECK(std::memcmp(&l1, &l2, sizeof(double)) == 0);
  REQUIRE(g1.numel() == g2.numel());
  CHECK(std::memcmp(g1.data(), g2.data(), sizeof(double) * g1.numel()) == 0);
}

TEST_CASE("layout round trips") {
  Rng rng(8);
  Tensor x = rng.normal_tensor({2, 3, 2, 2}, 0, 1);
  Tape t;
  Var v = t.constant(x);
  Var tokens = nchw_to_tokens(t, v);
  Var back = tokens_to_nchw(t, tokens, 2, 3, 2, 2);
  CHECK(max_abs_diff(t.value(back), x) == 0.0);

  Tensor q = rng.normal_tensor({6, 8}, 0, 1);  // B=2, N=3, heads=2, dh=4
  Var qv = t.constant(q);
  Var heads = split_heads(t, qv, 2, 3, 2, 4);
  Var merged = merge_heads(t, heads, 2, 3, 2, 4);
  CHECK(max_abs_diff(t.value(merged), q) == 0.0);
}

TEST_CASE("layout and reduction gradients pass grad_check") {
  Rng rng(23);
  Tensor x = rng.normal_tensor({2, 3, 2, 2}, 0, 1);
  auto f = [&](Tape& t) {
    Var v = t.param(x);
    Var tokens = nchw_to_tokens(t, v);
    Var sq = hadamard(t, tokens, tokens);
    Var back = tokens_to_nchw(t, sq, 2, 3, 2, 2);
    Var pooled = global_avg_pool(t, back);
    return sum_all(t, pooled);
  };
  CHECK(grad_check(f, x).max_rel_error < 1e-6);
}

TEST_CASE("transpose and batched matmul gradients") {
  Rng rng(31);
  Tensor q = rng.normal_tensor({2, 3, 4}, 0, 1);
  Tensor k = rng.normal_tensor({2, 3, 4}, 0, 1);
  auto f = [&](Tape& t) {
    Var scores = matmul(t, t.param(q), transpose_last2(t, t.param(k)));
    return mean_all(t, hadamard(t, scores, scores));
  };
  CHECK(grad_check(f, q).max_rel_error < 1e-6);
  CHECK(grad_check(f, k).max_rel_error < 1e-6);
}

TEST_CASE("l1 row normalization rows sum to one and differentiate") {
  Rng rng(13);
  Tensor x = rng.uniform_tensor({2, 3, 3}, 0.1, 2.0);
  Tape t;
  Var y = l1_row_normalize(t, t.constant(x), 1e-6);
  const Tensor& yv = t.value(y);
  for (int64_t r = 0; r < 6; ++r) {
    double s = 0;
    for (int64_t j = 0; j < 3; ++j) s += yv[r * 3 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  Tensor w = rng.normal_tensor({2, 3, 3}, 0, 1);
  auto f = [&](Tape& tp) {
    Var n = l1_row_normalize(tp, tp.param(x), 1e-6);
    return sum_all(tp, hadamard(tp, n, tp.constant(w)));
  };
  CHECK(grad_check(f, x).max_rel_error < 1e-6);
}

TEST_CASE("label smoothing loss values") {
  Tape t;
  // Uniform logits: loss = log K for any smoothing.
  Tensor logits({2, 10}, 0.0);
  Var l0 = cross_entropy_label_smooth(t, t.constant(logits), {3, 7}, 0.0);
  Var l1 = cross_entropy_label_smooth(t, t.constant(logits), {3, 7}, 0.1);
  CHECK(t.value(l0)[0] == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK(t.value(l1)[0] == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK_THROWS(cross_entropy_label_smooth(t, t.constant(logits), {3, 11}, 0.1));
}

TEST_CASE("label smoothing loss gradient") {
  Rng rng(41);
  Tensor logits = rng.normal_tensor({3, 5}, 0, 2.0);
  auto f = [&](Tape& t) { return cross_entropy_label_smooth(t, t.param(logits), {0, 2, 4}, 0.1); };
  CHECK(grad_check(f, logits).max_rel_error < 1e-6);
}

TEST_CASE("scalar gate ops differentiate") {
  Rng rng(55);
  Tensor x = rng.normal_tensor({2, 3}, 0, 1);
  Tensor lam = Tensor::scalar(-0.3);
  auto f = [&](Tape& t) {
    Var s = sigmoid(t, t.param(lam));
    Var y = mul_scalar_var(t, t.param(x), s);
    return sum_all(t, hadamard(t, y, y));
  };
  CHECK(grad_check(f, lam).max_rel_error < 1e-6);
  CHECK(grad_check(f, x).max_rel_error < 1e-6);
}

TEST_CASE("results are independent of the worker count") {
  auto run = [](int threads, Tensor& grad_w, Tensor& grad_x) {
    set_num_threads(threads);
    Rng rng(77);
    Tensor x = rng.normal_tensor({4, 8, 12, 12}, 0, 1);
    Tensor w = rng.normal_tensor({16, 8, 3, 3}, 0, 0.5);
    Tensor b = rng.normal_tensor({16}, 0, 0.1);
    Tape t;
    Var y = conv2d(t, t.param(x), t.param(w), t.param(b), {.stride = 1, .padding = 1});
    Var tokens = nchw_to_tokens(t, y);
    Var lin = linear(t, tokens, t.constant(rng.normal_tensor({6, 16}, 0, 1)), Var{});
    Var loss = sum_all(t, hadamard(t, lin, lin));
    t.backward(loss);
    grad_w = *t.grad_for(w);
    grad_x = *t.grad_for(x);
    double v = t.value(loss)[0];
    set_num_threads(0);
    return v;
  };
  Tensor w1, x1, w4, x4;
  double l1 = run(1, w1, x1);
  double l4 = run(4, w4, x4);
  CHECK(std::memcmp(&l1, &l4, sizeof(double)) == 0);
  CHECK(std::memcmp(w1.data(), w4.data(), sizeof(double) * w1.numel()) == 0);
  CHECK(std::memcmp(x1.data(), x4.data(), sizeof(double) * x1.numel()) == 0);
}
