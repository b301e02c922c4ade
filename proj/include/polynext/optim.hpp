#pragma once

#include <string>
#include <vector>

#include "polynext/model.hpp"
#include "polynext/stabilization.hpp"

namespace polynext {

struct TrainRecipe {
  double lr_max = 1e-3;
  double weight_decay = 0.05;
  int64_t batch_size = 96;
  int epochs = 20;
  int warmup_epochs = 0;
  double warmup_multiplier = 0.1;
  double label_smoothing = 0.1;
  bool ema_enabled = true;
  double ema_decay = 0.0;    // 0: half-life set to 5% of the EMA window
  int ema_start_epoch = -1;  // -1: epochs - ceil(2/3 * epochs)
  RegularizationSchedule reg;
  uint64_t seed = 0;
  int checkpoint_every = 10;
  bool deterministic = false;
  bool grad_clip_enabled = false;
  double grad_clip_norm = 5.0;
  bool augment = true;

  int resolved_ema_start() const;
  double resolved_ema_decay(int64_t ema_steps) const;
};

std::string recipe_to_json(const TrainRecipe& r);
TrainRecipe recipe_from_json(const std::string& text);

/// Warmup ramps linearly from lr_max*warmup_multiplier to lr_max; afterwards
/// cosine decay to zero across the remaining steps.
double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, const TrainRecipe& r);

/// Decoupled-decay Adam. Parameters flagged decay_exempt (gates, skip
/// scalars, norm affines) skip the decay term.
class AdamW {
 public:
  explicit AdamW(const std::vector<ParamEntry>& params);

  /// grads[i] may be null, meaning a zero gradient for that parameter this
  /// step; moments still decay and weight decay still applies when the
  /// parameter is not exempt.
  void step(const std::vector<ParamEntry>& params, const std::vector<const Tensor*>& grads, double lr,
            double weight_decay);

  int64_t steps_taken() const { return step_count_; }
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

 private:
  struct Slot {
    Tensor m, v;
  };
  std::vector<Slot> slots_;
  int64_t step_count_ = 0;
};

/// Shadow copy of the parameters updated as ema <- d*ema + (1-d)*live.
class EmaWeights {
 public:
  void init_from(const std::vector<ParamEntry>& params);
  bool initialized() const { return !shadow_.empty(); }
  void update(const std::vector<ParamEntry>& params, double decay);
  /// Exchanges live and shadow values (call again to restore).
  void swap_with(const std::vector<ParamEntry>& params);

 private:
  std::vector<Tensor> shadow_;
};

}  // namespace polynext
