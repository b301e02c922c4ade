#pragma once

#include "polynext/autodiff.hpp"
#include "polynext/rng.hpp"

namespace polynext {

/// Residual gate y = x + sigmoid(lambda) * f(x); the effective scale stays in
/// (0,1) and can be absorbed into f's final projection at inference.
struct SigmoidScale {
  Tensor logit;  // one element

  static SigmoidScale with_logit(double value) { return SigmoidScale{Tensor::scalar(value)}; }
  double scale() const { return 1.0 / (1.0 + std::exp(-logit[0])); }
};

/// Tensor-level form, no tape.
Tensor sigmoid_scale_apply(const Tensor& x, const Tensor& fx, const SigmoidScale& gate);
/// Tape form used inside cells.
Var sigmoid_scale_apply(Tape& t, Var x, Var fx, SigmoidScale& gate);

enum class SigmoidInitVariant { kStandard, kLarge };

/// lambda_i = -i/2 (standard) or -i/2 - 0.5 (large); sigmoid values decrease
/// geometrically with sublayer depth.
std::vector<double> init_sigmoid_logits(int count, SigmoidInitVariant variant);

/// Cell input from the two preceding cell outputs, reweighted per channel.
struct MultiInputSkip {
  Tensor s0, s1;  // [C], start at 1 so the plain sum is preserved

  static MultiInputSkip make(int64_t channels);
};

Tensor multi_input_skip_combine(const Tensor& x_t2, const Tensor& x_t1, const MultiInputSkip& skip);
Var multi_input_skip_combine(Tape& t, Var x_t2, Var x_t1, MultiInputSkip& skip);

struct RegularizationSchedule {
  double final_dropout = 0.0;
  double stochastic_depth_max = 0.0;
  int total_epochs = 1;
};

/// Linear ramp: final_dropout * epoch / max(total_epochs - 1, 1).
double dropout_rate_at(int epoch, const RegularizationSchedule& sched);

struct DropDecision {
  bool keep = true;
  double scale = 1.0;  // 1/(1-rate) on kept training branches
};

/// Inference always keeps with no rescale; training keeps with probability
/// 1-rate and rescales so the expectation matches inference.
DropDecision stochastic_depth_gate(double rate, bool training, Rng& rng);

/// Per-sublayer rate: linear ramp from 0 at the first sublayer to max_rate at
/// the last (sublayers indexed over the whole network).
double stochastic_depth_rate_for(int sublayer_index, int total_sublayers, double max_rate);

}  // namespace polynext
