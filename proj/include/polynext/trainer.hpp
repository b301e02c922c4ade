#pragma once

#include <string>
#include <vector>

#include "polynext/dataset.hpp"
#include "polynext/model.hpp"
#include "polynext/optim.hpp"

namespace polynext {

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;       // learning rate at the epoch's last step
  double dropout = 0.0;  // scheduled rate this epoch
  double train_loss = 0.0;
  double val_top1 = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> log;
  std::string checkpoint_path;  // final checkpoint
  double final_val_top1 = 0.0;
  double first_step_loss = 0.0;
  double last_step_loss = 0.0;
};

/// One header row, stable column order.
std::string metrics_csv(const std::vector<EpochStats>& log);

/// Top-1 accuracy over the source with the model's current weights.
double evaluate(PolyNeXtModel& model, const DatasetSource& source, int64_t batch_size = 128);

/// Full loop: shuffled minibatches, AdamW with per-step cosine schedule,
/// label smoothing, scheduled dropout and stochastic depth, EMA from the
/// configured epoch, per-epoch validation, checkpoints under out_dir (empty
/// out_dir disables file output). Aborts on a non-finite loss naming the
/// offending step.
TrainResult train(PolyNeXtModel& model, const TrainRecipe& recipe, const DatasetSource& train_src,
                  const DatasetSource& val_src, const std::string& out_dir);

}  // namespace polynext
