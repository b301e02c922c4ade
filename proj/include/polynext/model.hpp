#pragma once

#include <memory>
#include <string>
#include <vector>

#include "polynext/poly_ops.hpp"
#include "polynext/stabilization.hpp"

namespace polynext {

enum class MixerKind { kPolyConv, kPolyAttn };
enum class FusionKind { kHadamard, kAddition };  // addition is the ablation knob

struct ModelConfig {
  std::vector<int64_t> channels;  // per stage
  std::vector<int64_t> cells;
  std::vector<int64_t> stacks;
  std::vector<MixerKind> mixers;
  NormKind norm = NormKind::kLayerNorm;
  int64_t num_classes = 1000;
  int64_t resolution = 224;
  SigmoidInitVariant sigmoid_init = SigmoidInitVariant::kStandard;
  int attn_degree = 4;
  FusionKind fusion = FusionKind::kHadamard;

  int stages() const { return static_cast<int>(channels.size()); }
  void validate() const;

  /// PolyConv in every stage; size in {T,S,B,L}.
  static ModelConfig cpolynext(char size);
  /// PolyConv in stages 1-2, PolyAttn in stages 3-4.
  static ModelConfig apolynext(char size);
  /// Three-stage low-resolution variant (32x32 inputs).
  static ModelConfig cpolynext_lr();

  /// PolyMLP per-branch hidden width: C in stages 1-2 (the 2x expansion
  /// counts both branches), ceil(0.875*C) in stages 3-4.
  static int64_t mlp_hidden(int64_t c, int stage_index, int total_stages);
  /// PolyConv hidden width: C in stages 1-2, ceil(0.75*C) in stages 3-4.
  static int64_t conv_hidden(int64_t c, int stage_index, int total_stages);
};

struct Sublayer {
  enum class Kind { kConvMixer, kAttnMixer, kMlp };
  Kind kind;
  std::unique_ptr<PolyConv> conv;
  std::unique_ptr<PolyAttn> attn;
  std::unique_ptr<PolyMlp> mlp;
  int gate_index = 0;      // position into the cell's logit vector
  int global_index = 0;    // position across the whole network (drop-path ramp)
};

struct Cell {
  MultiInputSkip skip;
  NormModule pre_norm;                 // over C at each position
  std::vector<Tensor> gate_logits;     // 2*S_max scalars, consumed positionally
  std::vector<Sublayer> sublayers;     // mixer, mlp, mixer, mlp, ...
};

struct Stage {
  bool has_downsample = false;
  Tensor down0_w, down0_b;  // 3x3 stride-2, one conv per skip path
  Tensor down1_w, down1_b;
  std::vector<Cell> cells;
  int64_t map_h = 0, map_w = 0;  // feature-map size at this stage
};

struct ParamEntry {
  std::string name;
  Tensor* tensor;
  bool decay_exempt;
};
struct BufferEntry {
  std::string name;
  Tensor* tensor;
};

struct ForwardOptions {
  Mode mode = Mode::kInfer;
  double dropout_rate = 0.0;
  double stochastic_depth_max = 0.0;
  Rng* rng = nullptr;  // required in train mode when either rate is nonzero
};

struct FlopsBreakdown {
  int64_t conv = 0;
  int64_t linear = 0;
  int64_t attention = 0;
  int64_t total() const { return conv + linear + attention; }
};

class PolyNeXtModel {
 public:
  ModelConfig config;
  Tensor stem_w, stem_b;  // 7x7 stride-4
  std::vector<Stage> stages;
  NormModule head_norm;  // over C_last after pooling
  PolyHead head;

  static PolyNeXtModel build(const ModelConfig& config, uint64_t seed);

  Var forward(Tape& t, Var images, const ForwardOptions& opts);
  /// Plain inference convenience.
  Tensor predict(const Tensor& images);

  /// Stem output pair (x_{-2}, x_{-1}); both reference the same activation.
  std::pair<Var, Var> stem_forward(Tape& t, Var images);
  /// Stride-2 downsampling applied independently to both skip paths.
  std::pair<Var, Var> downsample_pair(Tape& t, Var x2, Var x1, Stage& stage);
  Var cell_forward(Tape& t, Var x2, Var x1, Cell& cell, const ForwardOptions& opts, int64_t map_h,
                   int64_t map_w);

  std::vector<ParamEntry> parameters();
  std::vector<BufferEntry> buffers();
  /// Every spatial batch-norm / running row-sum module, for stat management.
  std::vector<PolyBatchNormParams*> batch_norms();
  std::vector<RunningRowSumParams*> rowsum_norms();
  int64_t param_count();
  FlopsBreakdown flops_estimate(int64_t resolution) const;
  int total_sublayers() const;

  /// Stage feature-map sizes for a given input resolution: H / 2^(s+1).
  static std::vector<int64_t> stage_resolutions(int64_t input, int stages);
};

/// Populates every running buffer with true means over `batches` random
/// train-mode forward passes (momentum 1/i per pass), then restores the
/// configured momenta. Batch-norm variants need this before inference-time
/// folding makes numerical sense.
void warm_batch_stats(PolyNeXtModel& model, Rng& rng, int batches, int64_t batch_size);

/// Fixed-point statistic estimation for untrained batch-norm variants:
/// repeated calibrate-mode passes make the running buffers consistent with
/// the inference-time activation distribution, which keeps deep Hadamard
/// stacks bounded at inference.
void calibrate_infer_stats(PolyNeXtModel& model, Rng& rng, int passes, int64_t batch_size);

}  // namespace polynext
