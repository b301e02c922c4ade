#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "polynext/checkpoint.hpp"
#include "polynext/config.hpp"
#include "polynext/fold.hpp"
#include "polynext/parallel.hpp"
#include "polynext/trainer.hpp"
#include "polynext/verify_suites.hpp"

using namespace polynext;

namespace {

// "synthetic" generates a deterministic blob dataset at the model's
// resolution/classes; a directory loads CIFAR-10 binary batches; a file loads
// that single batch file.
DatasetSource load_train_source(const std::string& data, const ModelConfig& cfg, uint64_t seed,
                                int64_t synthetic_n) {
  if (data == "synthetic") {
    return synthetic_dataset(seed, cfg.num_classes, cfg.resolution, synthetic_n);
  }
  return load_cifar10(data);
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out_dir,
              bool deterministic, uint64_t seed, int epochs_override, TrainRecipe recipe, int64_t synthetic_n,
              int64_t val_count) {
  ModelConfig cfg = load_model_config(config_path);
  recipe.seed = seed;
  recipe.deterministic = deterministic;
  if (epochs_override > 0) recipe.epochs = epochs_override;
  recipe.reg.total_epochs = recipe.epochs;

  DatasetSource full = load_train_source(data, cfg, seed, synthetic_n);
  check(full.size() > val_count, "train: dataset smaller than the validation holdout");
  DatasetSource train_src = full.slice(0, full.size() - val_count);
  train_src.compute_stats();
  DatasetSource val_src = full.slice(full.size() - val_count, val_count);
  val_src.use_stats_of(train_src);

  PolyNeXtModel model = PolyNeXtModel::build(cfg, seed);
  std::printf("model: %lld parameters, %d sublayers\n", (long long)model.param_count(),
              model.total_sublayers());
  TrainResult result = train(model, recipe, train_src, val_src, out_dir);
  std::printf("final val top-1: %.4f\n", result.final_val_top1);
  std::printf("checkpoint: %s\n", result.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data, int64_t synthetic_n) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
  DatasetSource src = load_train_source(data, ckpt.model.config, 0, synthetic_n);
  src.compute_stats();
  double top1 = evaluate(ckpt.model, src);
  std::printf("top-1 accuracy: %.4f over %lld images\n", top1, (long long)src.size());
  return 0;
}

int cmd_export(const std::string& checkpoint_path, const std::string& out_path, int64_t max_nodes) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
  FoldedModel folded = fold_inference(ckpt.model);
  ArithmeticCircuit circuit = export_circuit(folded, max_nodes);
  PolynomialCertificate cert = verify_polynomial(circuit);
  write_circuit(circuit, out_path);
  std::printf("circuit: %lld nodes, %zu outputs, max degree %lld, multiplicative depth %lld, certificate %s\n",
              (long long)cert.node_count, circuit.outputs.size(), (long long)cert.max_degree,
              (long long)cert.mul_depth, cert.ok ? "ok" : "FAILED");
  return cert.ok ? 0 : 1;
}

int cmd_verify(const std::string& suite) {
  auto results = run_verify_suite(suite);
  int failed = 0;
  for (const CheckResult& r : results) {
    std::printf("[%s] %s: %s\n", r.passed ? "pass" : "FAIL", r.name.c_str(), r.detail.c_str());
    if (!r.passed) ++failed;
  }
  std::printf("%zu checks, %d failed\n", results.size(), failed);
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Activation-free polynomial vision backbones: training, evaluation, circuit export"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on CIFAR-10 binaries or synthetic data");
  std::string config_path, data = "synthetic", out_dir = "runs/out";
  bool deterministic = false;
  uint64_t seed = 0;
  int epochs_override = -1;
  int64_t synthetic_n = 2048, val_count = 512;
  TrainRecipe recipe;
  train_cmd->add_option("--config", config_path, "Model config JSON")->required();
  train_cmd->add_option("--data", data, "Dataset directory/file, or 'synthetic'");
  train_cmd->add_option("--out", out_dir, "Output directory for metrics and checkpoints");
  train_cmd->add_flag("--deterministic", deterministic, "Single-threaded, byte-reproducible run");
  train_cmd->add_option("--seed", seed, "Seed for init, shuffling and augmentation");
  train_cmd->add_option("--epochs", epochs_override, "Override the recipe epoch count");
  train_cmd->add_option("--lr", recipe.lr_max, "Peak learning rate");
  train_cmd->add_option("--weight-decay", recipe.weight_decay, "Decoupled weight decay");
  train_cmd->add_option("--batch-size", recipe.batch_size, "Minibatch size");
  train_cmd->add_option("--warmup-epochs", recipe.warmup_epochs, "Linear warmup epochs");
  train_cmd->add_option("--label-smoothing", recipe.label_smoothing, "Label smoothing epsilon");
  train_cmd->add_option("--final-dropout", recipe.reg.final_dropout, "Dropout at the last epoch");
  train_cmd->add_option("--stochastic-depth", recipe.reg.stochastic_depth_max, "Peak drop-path rate");
  train_cmd->add_option("--ema-decay", recipe.ema_decay, "EMA decay (0 = auto half-life)");
  bool no_ema = false, no_augment = false, grad_clip = false;
  train_cmd->add_flag("--no-ema", no_ema, "Disable weight averaging");
  train_cmd->add_flag("--no-augment", no_augment, "Disable flip and pad-crop augmentation");
  train_cmd->add_flag("--grad-clip", grad_clip, "Clip global gradient norm at 5");
  train_cmd->add_option("--checkpoint-every", recipe.checkpoint_every, "Checkpoint period in epochs");
  train_cmd->add_option("--synthetic-n", synthetic_n, "Synthetic dataset size");
  train_cmd->add_option("--val-count", val_count, "Held-out validation images");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_data;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset directory/file, or 'synthetic'")->required();

  // export-circuit
  auto* export_cmd = app.add_subcommand("export-circuit", "Fold a batch-norm checkpoint to an arithmetic circuit");
  std::string export_ckpt, export_out = "circuit.txt";
  int64_t max_nodes = 20000000;
  export_cmd->add_option("--checkpoint", export_ckpt, "Checkpoint file")->required();
  export_cmd->add_option("--out", export_out, "Output circuit path");
  export_cmd->add_option("--max-nodes", max_nodes, "Refuse exports estimated beyond this node count");

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "Run an invariant suite");
  std::string suite = "all";
  verify_cmd->add_option("--suite", suite,
                         "gradcheck|degree2|sigmoid-fold|bn-fold|circuit|attention|architecture|all");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      recipe.ema_enabled = !no_ema;
      recipe.augment = !no_augment;
      recipe.grad_clip_enabled = grad_clip;
      return cmd_train(config_path, data, out_dir, deterministic, seed, epochs_override, recipe, synthetic_n,
                       val_count);
    }
    if (*eval_cmd) return cmd_eval(eval_ckpt, eval_data, 2048);
    if (*export_cmd) return cmd_export(export_ckpt, export_out, max_nodes);
    if (*verify_cmd) return cmd_verify(suite);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
