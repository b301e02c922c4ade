#include "polynext/stabilization.hpp"

#include <cmath>

#include "polynext/ops.hpp"

namespace polynext {

Tensor sigmoid_scale_apply(const Tensor& x, const Tensor& fx, const SigmoidScale& gate) {
  check(x.same_shape(fx), "sigmoid_scale: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(fx.shape()));
  double s = gate.scale();
  Tensor y = x;
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += s * fx[i];
  return y;
}

Var sigmoid_scale_apply(Tape& t, Var x, Var fx, SigmoidScale& gate) {
  check(t.value(x).same_shape(t.value(fx)),
        "sigmoid_scale: shape mismatch " + shape_str(t.shape(x)) + " vs " + shape_str(t.shape(fx)));
  Var s = sigmoid(t, t.param(gate.logit));
  return add(t, x, mul_scalar_var(t, fx, s));
}

std::vector<double> init_sigmoid_logits(int count, SigmoidInitVariant variant) {
  check(count >= 1, "init_sigmoid_logits: count must be >= 1");
  double shift = variant == SigmoidInitVariant::kLarge ? -0.5 : 0.0;
  std::vector<double> logits(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) logits[static_cast<size_t>(i)] = -0.5 * i + shift;
  return logits;
}

MultiInputSkip MultiInputSkip::make(int64_t channels) {
  return MultiInputSkip{Tensor::ones({channels}), Tensor::ones({channels})};
}

Tensor multi_input_skip_combine(const Tensor& x_t2, const Tensor& x_t1, const MultiInputSkip& skip) {
  check(x_t2.same_shape(x_t1),
        "multi_input_skip: shape mismatch " + shape_str(x_t2.shape()) + " vs " + shape_str(x_t1.shape()));
  check(x_t2.rank() == 4 && x_t2.dim(1) == skip.s0.dim(0), "multi_input_skip: channel count mismatch");
  int64_t b = x_t2.dim(0), c = x_t2.dim(1), hw = x_t2.dim(2) * x_t2.dim(3);
  Tensor y(x_t2.shape());
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      int64_t off = (i * c + ch) * hw;
      double a = skip.s0[ch], bb = skip.s1[ch];
      for (int64_t p = 0; p < hw; ++p) y[off + p] = a * x_t2[off + p] + bb * x_t1[off + p];
    }
  }
  return y;
}

Var multi_input_skip_combine(Tape& t, Var x_t2, Var x_t1, MultiInputSkip& skip) {
  check(t.value(x_t2).same_shape(t.value(x_t1)),
        "multi_input_skip: shape mismatch " + shape_str(t.shape(x_t2)) + " vs " + shape_str(t.shape(x_t1)));
  Var a = scale_channels(t, x_t2, t.param(skip.s0));
  Var b = scale_channels(t, x_t1, t.param(skip.s1));
  return add(t, a, b);
}

double dropout_rate_at(int epoch, const RegularizationSchedule& sched) {
  check(epoch >= 0 && epoch <= sched.total_epochs, "dropout_rate_at: epoch " + std::to_string(epoch) +
                                                       " outside [0," + std::to_string(sched.total_epochs) + "]");
  int denom = std::max(sched.total_epochs - 1, 1);
  return sched.final_dropout * static_cast<double>(epoch) / static_cast<double>(denom);
}

DropDecision stochastic_depth_gate(double rate, bool training, Rng& rng) {
  check(rate >= 0.0 && rate < 1.0, "stochastic_depth: rate must be in [0,1)");
  if (!training || rate == 0.0) return {true, 1.0};
  if (rng.uniform() < rate) return {false, 0.0};
  return {true, 1.0 / (1.0 - rate)};
}

double stochastic_depth_rate_for(int sublayer_index, int total_sublayers, double max_rate) {
  if (total_sublayers <= 1) return max_rate;
  return max_rate * static_cast<double>(sublayer_index) / static_cast<double>(total_sublayers - 1);
}

}  // namespace polynext
