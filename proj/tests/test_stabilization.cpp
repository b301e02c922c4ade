#include <stdexcept>

#include "doctest.h"
#include "polynext/grad_check.hpp"
#include "polynext/ops.hpp"
#include "polynext/stabilization.hpp"

using namespace polynext;

TEST_CASE("sigmoid scale hand values") {
  Tensor x({3}, {1, 2, 3}), fx({3}, {2, 2, 2});
  auto g0 = SigmoidScale::with_logit(0.0);
  Tensor y = sigmoid_scale_apply(x, fx, g0);
  CHECK(y[0] == doctest::Approx(2.0).epsilon(1e-12));  // 1 + 0.5*2

  auto gneg = SigmoidScale::with_logit(-1.0);
  CHECK(gneg.scale() == doctest::Approx(0.268941421369995).epsilon(1e-12));

  auto gfar = SigmoidScale::with_logit(-40.0);
  Tensor yfar = sigmoid_scale_apply(x, fx, gfar);
  CHECK(max_abs_diff(yfar, x) < 1e-12);

  Tensor bad({2}, {1, 2});
  CHECK_THROWS(sigmoid_scale_apply(x, bad, g0));
}

TEST_CASE("sigmoid scale fold identity: scaling the final projection is exact") {
  // For f(x) = W x + b, scaling (W, b) by sigmoid(lambda) and adding a plain
  // residual reproduces the gated form exactly.
  Rng rng(1);
  Tensor w = rng.normal_tensor({4, 4}, 0, 1);
  Tensor b = rng.normal_tensor({4}, 0, 1);
  auto gate = SigmoidScale::with_logit(0.7);
  double s = gate.scale();
  Tensor ws = s * w, bs = s * b;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = rng.normal_tensor({2, 4}, 0, 1);
    Tape t;
    Var fx = linear(t, t.constant(x), t.constant(w), t.constant(b));
    Tensor gated = sigmoid_scale_apply(x, t.value(fx), gate);
    Var folded = linear(t, t.constant(x), t.constant(ws), t.constant(bs));
    Tensor plain = x + t.value(folded);
    CHECK(max_abs_diff(gated, plain) < 1e-12);
  }
}

TEST_CASE("sigmoid scale tape form differentiates through the logit") {
  Rng rng(2);
  Tensor x = rng.normal_tensor({2, 3}, 0, 1);
  Tensor fx = rng.normal_tensor({2, 3}, 0, 1);
  auto gate = SigmoidScale::with_logit(-0.4);
  auto f = [&](Tape& t) {
    Var y = sigmoid_scale_apply(t, t.param(x), t.constant(fx), gate);
    return sum_all(t, hadamard(t, y, y));
  };
  CHECK(grad_check(f, gate.logit).max_rel_error < 1e-6);
  CHECK(grad_check(f, x).max_rel_error < 1e-6);
}

TEST_CASE("sigmoid logit schedules") {
  auto std3 = init_sigmoid_logits(3, SigmoidInitVariant::kStandard);
  auto sig = [](double l) { return 1.0 / (1.0 + std::exp(-l)); };
  CHECK(sig(std3[0]) == doctest::Approx(0.50).epsilon(1e-12));
  CHECK(sig(std3[1]) == doctest::Approx(0.3775406687981454).epsilon(1e-9));
  CHECK(sig(std3[2]) == doctest::Approx(0.2689414213699951).epsilon(1e-9));

  auto large = init_sigmoid_logits(1, SigmoidInitVariant::kLarge);
  CHECK(large[0] == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(sig(large[0]) == doctest::Approx(0.3775406687981454).epsilon(1e-12));

  auto sched = init_sigmoid_logits(8, SigmoidInitVariant::kStandard);
  for (size_t i = 1; i < sched.size(); ++i) CHECK(sig(sched[i]) < sig(sched[i - 1]));
  for (size_t i = 0; i < sched.size(); ++i) CHECK(sig(sched[i]) == doctest::Approx(sig(-0.5 * i)).epsilon(1e-15));
}

TEST_CASE("multi input skip selector, identity, oracle, linearity") {
  Rng rng(3);
  auto skip = MultiInputSkip::make(3);
  Tensor a = rng.normal_tensor({2, 3, 2, 2}, 0, 1);
  Tensor b = rng.normal_tensor({2, 3, 2, 2}, 0, 1);

  skip.s0 = Tensor::zeros({3});
  skip.s1 = Tensor::ones({3});
  CHECK(max_abs_diff(multi_input_skip_combine(a, b, skip), b) == 0.0);

  skip.s0 = Tensor::full({3}, 0.5);
  skip.s1 = Tensor::full({3}, 0.5);
  CHECK(max_abs_diff(multi_input_skip_combine(a, a, skip), a) < 1e-15);

  skip.s0 = rng.normal_tensor({3}, 0, 1);
  skip.s1 = rng.normal_tensor({3}, 0, 1);
  Tensor y = multi_input_skip_combine(a, b, skip);
  Tensor expect(a.shape());
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t p = 0; p < 4; ++p) {
        int64_t idx = (i * 3 + c) * 4 + p;
        expect[idx] = skip.s0[c] * a[idx] + skip.s1[c] * b[idx];
      }
  CHECK(max_abs_diff(y, expect) < 1e-12);

  // Linear in each input.
  Tensor a2 = 2.0 * a;
  Tensor y2 = multi_input_skip_combine(a2, b, skip);
  Tensor lhs = y2 - y;  // should equal combine(a, zeros) = s0*a
  Tensor zeros = Tensor::zeros(b.shape());
  Tensor rhs = multi_input_skip_combine(a, zeros, skip);
  CHECK(max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("multi input skip tape form gradients") {
  Rng rng(4);
  auto skip = MultiInputSkip::make(2);
  Tensor a = rng.normal_tensor({1, 2, 2, 2}, 0, 1);
  Tensor b = rng.normal_tensor({1, 2, 2, 2}, 0, 1);
  auto f = [&](Tape& t) {
    Var y = multi_input_skip_combine(t, t.param(a), t.param(b), skip);
    return sum_all(t, hadamard(t, y, y));
  };
  CHECK(grad_check(f, a).max_rel_error < 1e-6);
  CHECK(grad_check(f, skip.s0).max_rel_error < 1e-6);
  CHECK(grad_check(f, skip.s1).max_rel_error < 1e-6);
}

TEST_CASE("dropout schedule is linear with exact endpoints") {
  RegularizationSchedule sched{.final_dropout = 0.4, .stochastic_depth_max = 0.0, .total_epochs = 300};
  CHECK(dropout_rate_at(0, sched) == 0.0);
  CHECK(dropout_rate_at(299, sched) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(dropout_rate_at(150, sched) == doctest::Approx(0.4 * 150.0 / 299.0).epsilon(1e-12));
  CHECK(dropout_rate_at(150, sched) == doctest::Approx(0.2).epsilon(0.01));
  CHECK_THROWS(dropout_rate_at(-1, sched));
  CHECK_THROWS(dropout_rate_at(301, sched));
}

TEST_CASE("stochastic depth gate") {
  Rng rng(5);
  auto always = stochastic_depth_gate(0.0, true, rng);
  CHECK(always.keep);
  CHECK(always.scale == 1.0);

  auto infer = stochastic_depth_gate(0.9, false, rng);
  CHECK(infer.keep);
  CHECK(infer.scale == 1.0);

  int kept = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto d = stochastic_depth_gate(0.5, true, rng);
    if (d.keep) {
      ++kept;
      CHECK(d.scale == doctest::Approx(2.0).epsilon(1e-12));
    }
  }
  CHECK(std::abs(kept / static_cast<double>(n) - 0.5) < 0.01);
}

TEST_CASE("per-sublayer stochastic depth ramp") {
  CHECK(stochastic_depth_rate_for(0, 10, 0.3) == 0.0);
  CHECK(stochastic_depth_rate_for(9, 10, 0.3) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(stochastic_depth_rate_for(3, 10, 0.3) == doctest::Approx(0.1).epsilon(1e-12));
}
