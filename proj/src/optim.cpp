#include "polynext/optim.hpp"

#include <cmath>

#include "json.hpp"

namespace polynext {

int TrainRecipe::resolved_ema_start() const {
  if (ema_start_epoch >= 0) return ema_start_epoch;
  int window = (2 * epochs + 2) / 3;  // ceil(2/3 * epochs)
  return std::max(0, epochs - window);
}

double TrainRecipe::resolved_ema_decay(int64_t ema_steps) const {
  if (ema_decay > 0.0) return ema_decay;
  double half_life = std::max(1.0, 0.05 * static_cast<double>(ema_steps));
  return std::pow(0.5, 1.0 / half_life);
}

std::string recipe_to_json(const TrainRecipe& r) {
  nlohmann::json j;
  j["lr_max"] = r.lr_max;
  j["weight_decay"] = r.weight_decay;
  j["batch_size"] = r.batch_size;
  j["epochs"] = r.epochs;
  j["warmup_epochs"] = r.warmup_epochs;
  j["warmup_multiplier"] = r.warmup_multiplier;
  j["label_smoothing"] = r.label_smoothing;
  j["ema_enabled"] = r.ema_enabled;
  j["ema_decay"] = r.ema_decay;
  j["ema_start_epoch"] = r.ema_start_epoch;
  j["final_dropout"] = r.reg.final_dropout;
  j["stochastic_depth_max"] = r.reg.stochastic_depth_max;
  j["seed"] = r.seed;
  j["checkpoint_every"] = r.checkpoint_every;
  j["deterministic"] = r.deterministic;
  j["grad_clip_enabled"] = r.grad_clip_enabled;
  j["grad_clip_norm"] = r.grad_clip_norm;
  j["augment"] = r.augment;
  return j.dump(2);
}

TrainRecipe recipe_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TrainRecipe r;
  r.lr_max = j.value("lr_max", r.lr_max);
  r.weight_decay = j.value("weight_decay", r.weight_decay);
  r.batch_size = j.value("batch_size", r.batch_size);
  r.epochs = j.value("epochs", r.epochs);
  r.warmup_epochs = j.value("warmup_epochs", r.warmup_epochs);
  r.warmup_multiplier = j.value("warmup_multiplier", r.warmup_multiplier);
  r.label_smoothing = j.value("label_smoothing", r.label_smoothing);
  r.ema_enabled = j.value("ema_enabled", r.ema_enabled);
  r.ema_decay = j.value("ema_decay", r.ema_decay);
  r.ema_start_epoch = j.value("ema_start_epoch", r.ema_start_epoch);
  r.reg.final_dropout = j.value("final_dropout", r.reg.final_dropout);
  r.reg.stochastic_depth_max = j.value("stochastic_depth_max", r.reg.stochastic_depth_max);
  r.seed = j.value("seed", r.seed);
  r.checkpoint_every = j.value("checkpoint_every", r.checkpoint_every);
  r.deterministic = j.value("deterministic", r.deterministic);
  r.grad_clip_enabled = j.value("grad_clip_enabled", r.grad_clip_enabled);
  r.grad_clip_norm = j.value("grad_clip_norm", r.grad_clip_norm);
  r.augment = j.value("augment", r.augment);
  r.reg.total_epochs = r.epochs;
  return r;
}

double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, const TrainRecipe& r) {
  check(step >= 0 && step < total_steps, "cosine_lr: step " + std::to_string(step) + " outside [0," +
                                             std::to_string(total_steps) + ")");
  check(warmup_steps >= 0 && warmup_steps < total_steps, "cosine_lr: invalid warmup length");
  if (step < warmup_steps) {
    double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
    return r.lr_max * (r.warmup_multiplier + (1.0 - r.warmup_multiplier) * frac);
  }
  int64_t span = std::max<int64_t>(total_steps - 1 - warmup_steps, 1);
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  return r.lr_max * 0.5 * (1.0 + std::cos(M_PI * progress));
}

AdamW::AdamW(const std::vector<ParamEntry>& params) {
  slots_.reserve(params.size());
  for (const ParamEntry& p : params) {
    slots_.push_back({Tensor::zeros(p.tensor->shape()), Tensor::zeros(p.tensor->shape())});
  }
}

void AdamW::step(const std::vector<ParamEntry>& params, const std::vector<const Tensor*>& grads, double lr,
                 double weight_decay) {
  check(params.size() == slots_.size(), "adamw: parameter set changed size");
  check(grads.size() == params.size(), "adamw: gradient list size mismatch");
  ++step_count_;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    Slot& s = slots_[i];
    check(s.m.same_shape(p), "adamw: state shape mismatch for " + params[i].name);
    const Tensor* g = grads[i];
    if (g) {
      check(g->same_shape(p), "adamw: gradient shape " + shape_str(g->shape()) + " does not match " +
                                  params[i].name + " " + shape_str(p.shape()));
    }
    for (int64_t k = 0; k < p.numel(); ++k) {
      double gv = g ? (*g)[k] : 0.0;
      s.m[k] = beta1 * s.m[k] + (1.0 - beta1) * gv;
      s.v[k] = beta2 * s.v[k] + (1.0 - beta2) * gv * gv;
      double mhat = s.m[k] / bc1;
      double vhat = s.v[k] / bc2;
      double update = mhat / (std::sqrt(vhat) + eps);
      if (!params[i].decay_exempt) update += weight_decay * p[k];
      p[k] -= lr * update;
    }
  }
}

void EmaWeights::init_from(const std::vector<ParamEntry>& params) {
  shadow_.clear();
  shadow_.reserve(params.size());
  for (const ParamEntry& p : params) shadow_.push_back(*p.tensor);
}

void EmaWeights::update(const std::vector<ParamEntry>& params, double decay) {
  check(shadow_.size() == params.size(), "ema: registry mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& e = shadow_[i];
    const Tensor& live = *params[i].tensor;
    check(e.same_shape(live), "ema: shape mismatch for " + params[i].name);
    for (int64_t k = 0; k < e.numel(); ++k) e[k] = decay * e[k] + (1.0 - decay) * live[k];
  }
}

void EmaWeights::swap_with(const std::vector<ParamEntry>& params) {
  check(shadow_.size() == params.size(), "ema: registry mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    std::swap(shadow_[i], *params[i].tensor);
  }
}

}  // namespace polynext
