#include "polynext/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "polynext/checkpoint.hpp"
#include "polynext/ops.hpp"
#include "polynext/parallel.hpp"

namespace polynext {

std::string metrics_csv(const std::vector<EpochStats>& log) {
  std::string out = "epoch,lr,dropout,train_loss,val_top1,seconds\n";
  char buf[256];
  for (const EpochStats& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.3f\n", e.epoch, e.lr, e.dropout, e.train_loss,
                  e.val_top1, e.seconds);
    out += buf;
  }
  return out;
}

double evaluate(PolyNeXtModel& model, const DatasetSource& source, int64_t batch_size) {
  check(source.size() > 0, "evaluate: empty source");
  int64_t correct = 0;
  for (int64_t start = 0; start < source.size(); start += batch_size) {
    int64_t count = std::min<int64_t>(batch_size, source.size() - start);
    std::vector<int64_t> idx(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
    Tensor batch = make_batch(source, idx, false, nullptr);
    Tensor logits = model.predict(batch);
    int64_t classes = logits.dim(1);
    for (int64_t b = 0; b < count; ++b) {
      int64_t arg = 0;
      for (int64_t k = 1; k < classes; ++k) {
        if (logits[b * classes + k] > logits[b * classes + arg]) arg = k;
      }
      if (arg == source.labels[static_cast<size_t>(start + b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(source.size());
}

TrainResult train(PolyNeXtModel& model, const TrainRecipe& recipe, const DatasetSource& train_src,
                  const DatasetSource& val_src, const std::string& out_dir) {
  check(train_src.size() > 0, "train: refusing to start on an empty source");
  check(train_src.resolution == model.config.resolution,
        "train: source resolution " + std::to_string(train_src.resolution) + " does not match model resolution " +
            std::to_string(model.config.resolution));
  if (recipe.deterministic) set_num_threads(1);

  auto params = model.parameters();
  AdamW opt(params);
  EmaWeights ema;
  int ema_start = recipe.resolved_ema_start();

  int64_t steps_per_epoch = std::max<int64_t>(train_src.size() / recipe.batch_size, 1);
  int64_t total_steps = steps_per_epoch * recipe.epochs;
  int64_t warmup_steps = steps_per_epoch * recipe.warmup_epochs;
  check(warmup_steps < total_steps, "train: warmup spans the whole run");
  int64_t ema_steps = std::max<int64_t>((recipe.epochs - ema_start) * steps_per_epoch, 1);
  double ema_decay = recipe.resolved_ema_decay(ema_steps);

  RegularizationSchedule sched = recipe.reg;
  sched.total_epochs = recipe.epochs;

  Rng order_rng(recipe.seed);
  Rng noise_rng = order_rng.fork(0x5EED);

  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  TrainResult result;
  int64_t global_step = 0;
  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    auto epoch_start = std::chrono::steady_clock::now();
    double rate = dropout_rate_at(epoch, sched);

    std::vector<int64_t> order(static_cast<size_t>(train_src.size()));
    for (int64_t i = 0; i < train_src.size(); ++i) order[static_cast<size_t>(i)] = i;
    // Fisher-Yates with the per-epoch stream.
    Rng shuffle_rng = order_rng.fork(static_cast<uint64_t>(epoch) + 1);
    for (int64_t i = train_src.size() - 1; i > 0; --i) {
      int64_t j = shuffle_rng.below(i + 1);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    double loss_sum = 0.0;
    double lr = recipe.lr_max;
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<int64_t> idx(order.begin() + s * recipe.batch_size,
                               order.begin() + (s + 1) * recipe.batch_size);
      Tensor batch = make_batch(train_src, idx, recipe.augment, &noise_rng);
      std::vector<int> labels = batch_labels(train_src, idx);

      Tape tape;
      ForwardOptions opts;
      opts.mode = Mode::kTrain;
      opts.dropout_rate = rate;
      opts.stochastic_depth_max = recipe.reg.stochastic_depth_max;
      opts.rng = &noise_rng;
      Var logits = model.forward(tape, tape.constant(batch), opts);
      Var loss = cross_entropy_label_smooth(tape, logits, labels, recipe.label_smoothing);
      double loss_v = tape.value(loss)[0];
      if (!std::isfinite(loss_v)) {
        fail("train: non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(s) +
             " (global step " + std::to_string(global_step) + ")");
      }
      if (global_step == 0) result.first_step_loss = loss_v;
      result.last_step_loss = loss_v;
      loss_sum += loss_v;
      tape.backward(loss);

      std::vector<const Tensor*> grads(params.size());
      for (size_t i = 0; i < params.size(); ++i) grads[i] = tape.grad_for(*params[i].tensor);

      std::vector<Tensor> clipped;
      if (recipe.grad_clip_enabled) {
        double sq = 0.0;
        for (const Tensor* g : grads) {
          if (!g) continue;
          for (int64_t k = 0; k < g->numel(); ++k) sq += (*g)[k] * (*g)[k];
        }
        double norm = std::sqrt(sq);
        if (norm > recipe.grad_clip_norm) {
          double scale = recipe.grad_clip_norm / norm;
          clipped.assign(params.size(), Tensor());
          for (size_t i = 0; i < params.size(); ++i) {
            if (grads[i]) {
              clipped[i] = scale * (*grads[i]);
              grads[i] = &clipped[i];
            }
          }
        }
      }

      lr = cosine_lr(global_step, total_steps, warmup_steps, recipe);
      opt.step(params, grads, lr, recipe.weight_decay);

      if (recipe.ema_enabled && epoch >= ema_start) {
        if (!ema.initialized()) ema.init_from(params);
        ema.update(params, ema_decay);
      }
      ++global_step;
    }

    bool use_ema = recipe.ema_enabled && ema.initialized();
    if (use_ema) ema.swap_with(params);
    double top1 = val_src.size() > 0 ? evaluate(model, val_src, recipe.batch_size) : 0.0;
    if (use_ema) ema.swap_with(params);

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    stats.dropout = rate;
    stats.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    stats.val_top1 = top1;
    auto elapsed = std::chrono::steady_clock::now() - epoch_start;
    // Deterministic runs promise byte-identical metrics; wall time is the one
    // column that cannot honor that, so it reads zero there.
    stats.seconds = recipe.deterministic ? 0.0 : std::chrono::duration<double>(elapsed).count();
    result.log.push_back(stats);

    if (!out_dir.empty()) {
      bool last = epoch == recipe.epochs - 1;
      if (last || (recipe.checkpoint_every > 0 && (epoch + 1) % recipe.checkpoint_every == 0)) {
        if (recipe.ema_enabled && ema.initialized()) ema.swap_with(params);
        std::string path = out_dir + (last ? "/final.ckpt" : "/epoch_" + std::to_string(epoch) + ".ckpt");
        save_checkpoint(path, model, recipe_to_json(recipe), epoch, noise_rng.serialize_state());
        if (recipe.ema_enabled && ema.initialized()) ema.swap_with(params);
        if (last) result.checkpoint_path = path;
      }
    }
  }

  // Final weights: the EMA shadow when enabled, matching what the final
  // checkpoint stored. The model keeps them.
  if (recipe.ema_enabled && ema.initialized()) ema.swap_with(params);
  result.final_val_top1 = val_src.size() > 0 ? evaluate(model, val_src, recipe.batch_size) : 0.0;

  if (!out_dir.empty()) {
    std::ofstream csv(out_dir + "/metrics.csv");
    csv << metrics_csv(result.log);
  }
  return result;
}

}  // namespace polynext
