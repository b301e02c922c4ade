#pragma once

#include <memory>

#include "polynext/circuit.hpp"
#include "polynext/model.hpp"

namespace polynext {

/// Inference-time normalization slot. kBnInfer keeps the running-statistic
/// form (bit-compatible with the live batch-norm inference path); kAffine is
/// the fully collapsed per-position map a*x + b.
struct NormSlot {
  enum class Kind { kIdentity, kLayerNorm, kBnInfer, kAffine };
  Kind kind = Kind::kIdentity;
  // layer norm (live statistics)
  Tensor gamma, beta;
  double eps = 1e-5;
  // bn infer: y = g[c,q] * ((x - mean[q]) * inv_std[q]) + shift[c,q]
  Tensor mean, inv_std;  // [hw]
  Tensor g, shift;       // [c*hw]
  // affine: y = a[c,q] * x + b[c,q]
  Tensor a, b;
  int64_t channels = 0, hw = 0;
};

struct FoldedConvMixer {
  Tensor w_in, b_in, k_coarse, b_coarse, k_fine, b_fine, k_merge, b_merge, w_out, b_out;
  int64_t coarse_kernel = 5, coarse_padding = 4;
  bool additive = false;
  NormSlot out_norm;
};

struct FoldedAttnMixer {
  Tensor w_qk, b_qk, w_v, b_v;
  Tensor dw_q, dwb_q, dw_k, dwb_k, dw_v, dwb_v;
  Tensor w_out, b_out;
  Tensor kernel_scale;  // sigmoid(lambda) per head, a constant at inference
  int degree = 4;
  int64_t heads = 1, head_dim = 32;
  bool use_l1 = true;  // per-sample l1 (layer-norm variant only)
  double l1_eps = 1e-6;
  Tensor rowsum_mult;  // gamma/(R+eps) per (head, query) when !use_l1
  NormSlot pre_out;    // batch-norm variant: spatial norm before W_out
};

struct FoldedMlp {
  Tensor w_a, b_a, w_b, b_b, w_o, b_o;
  bool additive = false;
  bool with_skip = false;  // PolyHead form: a + fuse(a,b)
  NormSlot norm;
};

struct FoldedSublayer {
  Sublayer::Kind kind;
  std::unique_ptr<FoldedConvMixer> conv;
  std::unique_ptr<FoldedAttnMixer> attn;
  std::unique_ptr<FoldedMlp> mlp;
};

struct FoldedCell {
  Tensor s0, s1;
  NormSlot pre_norm;
  std::vector<FoldedSublayer> sublayers;
};

struct FoldedStage {
  bool has_downsample = false;
  Tensor d0w, d0b, d1w, d1b;
  std::vector<FoldedCell> cells;
  int64_t map_h = 0, map_w = 0;
};

/// Inference network with every sigmoid gate absorbed into the sublayers'
/// final projections (or output-norm affines) and plain residual adds. After
/// fold_inference it additionally contains no division, square root, or
/// per-sample statistic.
class FoldedModel {
 public:
  ModelConfig config;
  Tensor stem_w, stem_b;
  std::vector<FoldedStage> stages;
  NormSlot head_norm;
  FoldedMlp head;
  bool fully_folded = false;

  Tensor forward(const Tensor& images) const;
};

/// Absorbs sigma(lambda) into each sublayer's trailing projection or norm
/// affine; works on any variant, numerics unchanged up to re-rounding.
FoldedModel fold_sigmoid_scale(PolyNeXtModel& model);

/// Full constant fold for batch-norm variants: norms become per-position
/// affines, attention row sums become per-(head,query) constants, gates are
/// absorbed. Layer-norm variants are rejected with every offending
/// normalization listed by name.
FoldedModel fold_inference(PolyNeXtModel& model);

int64_t estimate_circuit_nodes(const FoldedModel& fm);

/// Unrolls a fully folded model over a single image into ADD/MUL/CONST/INPUT
/// nodes (inputs indexed over the flattened 3xHxW image, outputs = logits).
/// Dot products lower in fixed left-fold order; the pool lowers to an ADD
/// tree plus one MUL by 1/(H*W). Refuses exports whose estimated size
/// exceeds max_nodes.
ArithmeticCircuit export_circuit(const FoldedModel& fm, int64_t max_nodes = 20000000);

}  // namespace polynext
