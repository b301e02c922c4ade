#include "polynext/fold.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <unordered_map>

#include "polynext/kernels.hpp"

namespace polynext {

namespace {

double sigmoid_of(const Tensor& logit) { return 1.0 / (1.0 + std::exp(-logit[0])); }

NormSlot slot_identity() { return NormSlot{}; }

NormSlot slot_layer_norm(const LayerNormParams& p, double scale) {
  NormSlot s;
  s.kind = NormSlot::Kind::kLayerNorm;
  s.gamma = scale * p.gamma;
  s.beta = scale * p.beta;
  s.eps = p.eps;
  s.channels = p.features();
  return s;
}

NormSlot slot_bn_infer(const PolyBatchNormParams& p, double scale) {
  NormSlot s;
  s.kind = NormSlot::Kind::kBnInfer;
  s.channels = p.channels;
  s.hw = p.height * p.width;
  s.mean = p.running_mean;
  s.inv_std = Tensor({s.hw});
  for (int64_t q = 0; q < s.hw; ++q) s.inv_std[q] = 1.0 / std::sqrt(p.running_var[q] + p.eps);
  s.g = Tensor({p.channels * s.hw});
  s.shift = Tensor({p.channels * s.hw});
  for (int64_t c = 0; c < p.channels; ++c) {
    for (int64_t q = 0; q < s.hw; ++q) {
      double base_g = p.gamma_c[c] * p.gamma_hw[q];
      double base_b = p.beta_c[c] + p.beta_hw[q];
      s.g[c * s.hw + q] = scale == 1.0 ? base_g : scale * base_g;
      s.shift[c * s.hw + q] = scale == 1.0 ? base_b : scale * base_b;
    }
  }
  return s;
}

NormSlot slot_affine(const PolyBatchNormParams& p, double scale) {
  NormSlot s;
  s.kind = NormSlot::Kind::kAffine;
  s.channels = p.channels;
  s.hw = p.height * p.width;
  PerPositionAffine affine = fold_norm_to_affine(p);
  s.a = Tensor({p.channels * s.hw});
  s.b = Tensor({p.channels * s.hw});
  for (int64_t i = 0; i < s.a.numel(); ++i) {
    s.a[i] = scale * affine.scale[i];
    s.b[i] = scale * affine.shift[i];
  }
  return s;
}

enum class FoldDepth { kSigmoidOnly, kFull };

struct FoldContext {
  FoldDepth depth;
  std::vector<std::string> layer_norms;  // offending names when depth == kFull

  NormSlot make_slot(const NormModule& n, double scale, const std::string& name) {
    switch (n.kind) {
      case NormKind::kIdentity:
        // scale (if any) is absorbed by the caller into projection weights
        return slot_identity();
      case NormKind::kLayerNorm:
        if (depth == FoldDepth::kFull) layer_norms.push_back(name);
        return slot_layer_norm(n.ln, scale);
      case NormKind::kPolyBatchNorm:
        return depth == FoldDepth::kFull ? slot_affine(n.bn, scale) : slot_bn_infer(n.bn, scale);
    }
    fail("fold: unknown norm kind");
  }
};

FoldedMlp fold_mlp(const PolyMlp& m, double scale, FoldContext& ctx, const std::string& name) {
  FoldedMlp out;
  out.w_a = m.w_a;
  out.b_a = m.b_a;
  out.w_b = m.w_b;
  out.b_b = m.b_b;
  out.w_o = scale * m.w_o;  // the trailing projection absorbs the gate
  out.b_o = scale * m.b_o;
  out.additive = m.additive_fusion;
  out.norm = ctx.make_slot(m.norm, 1.0, name + ".norm");
  return out;
}

FoldedConvMixer fold_conv(const PolyConv& m, double scale, FoldContext& ctx, const std::string& name) {
  FoldedConvMixer out;
  out.w_in = m.w_in;
  out.b_in = m.b_in;
  out.k_coarse = m.k_coarse;
  out.b_coarse = m.b_coarse;
  out.k_fine = m.k_fine;
  out.b_fine = m.b_fine;
  out.k_merge = m.k_merge;
  out.b_merge = m.b_merge;
  out.coarse_kernel = m.coarse_kernel;
  out.coarse_padding = m.coarse_padding;
  out.additive = m.additive_fusion;
  if (m.norm.kind == NormKind::kIdentity) {
    // no trailing norm: the gate goes into W_out itself
    out.w_out = scale * m.w_out;
    out.b_out = scale * m.b_out;
    out.out_norm = slot_identity();
  } else {
    out.w_out = m.w_out;
    out.b_out = m.b_out;
    out.out_norm = ctx.make_slot(m.norm, scale, name + ".norm");
  }
  return out;
}

FoldedAttnMixer fold_attn(const PolyAttn& m, double scale, FoldContext& ctx, const std::string& name) {
  FoldedAttnMixer out;
  out.w_qk = m.w_qk;
  out.b_qk = m.b_qk;
  out.w_v = m.w_v;
  out.b_v = m.b_v;
  out.dw_q = m.dw_q;
  out.dwb_q = m.dwb_q;
  out.dw_k = m.dw_k;
  out.dwb_k = m.dwb_k;
  out.dw_v = m.dw_v;
  out.dwb_v = m.dwb_v;
  out.w_out = scale * m.w_out;
  out.b_out = scale * m.b_out;
  out.degree = m.degree;
  out.heads = m.heads;
  out.head_dim = m.head_dim;
  out.kernel_scale = Tensor({m.heads});
  for (int64_t h = 0; h < m.heads; ++h) {
    out.kernel_scale[h] = 1.0 / (1.0 + std::exp(-m.lambda_scale[h]));
  }
  out.use_l1 = !m.running_norm;
  out.l1_eps = m.l1_eps;
  if (m.running_norm) {
    out.rowsum_mult = Tensor({m.rowsum.heads, m.rowsum.tokens});
    for (int64_t i = 0; i < out.rowsum_mult.numel(); ++i) {
      out.rowsum_mult[i] = m.rowsum.gamma[i] * (1.0 / (m.rowsum.running_rowsum[i] + m.rowsum.eps));
    }
    out.pre_out = ctx.depth == FoldDepth::kFull ? slot_affine(m.pre_out_norm, 1.0)
                                                : slot_bn_infer(m.pre_out_norm, 1.0);
  } else if (ctx.depth == FoldDepth::kFull) {
    ctx.layer_norms.push_back(name + ".l1_normalization (per-sample row sums)");
  }
  return out;
}

FoldedMlp fold_mlp_head(const PolyHead& h, FoldContext& ctx) {
  // The head sits outside any sigmoid gate; nothing to absorb.
  FoldedMlp out;
  out.w_a = h.w_a;
  out.b_a = h.b_a;
  out.w_b = h.w_b;
  out.b_b = h.b_b;
  out.w_o = h.w_o;
  out.b_o = h.b_o;
  out.additive = h.additive_fusion;
  out.with_skip = true;
  out.norm = ctx.make_slot(h.norm, 1.0, "head.norm");
  return out;
}

FoldedModel fold_model(PolyNeXtModel& model, FoldDepth depth) {
  FoldContext ctx{depth, {}};
  FoldedModel fm;
  fm.config = model.config;
  fm.stem_w = model.stem_w;
  fm.stem_b = model.stem_b;

  for (size_t si = 0; si < model.stages.size(); ++si) {
    Stage& stage = model.stages[si];
    FoldedStage fs;
    fs.has_downsample = stage.has_downsample;
    fs.map_h = stage.map_h;
    fs.map_w = stage.map_w;
    if (stage.has_downsample) {
      fs.d0w = stage.down0_w;
      fs.d0b = stage.down0_b;
      fs.d1w = stage.down1_w;
      fs.d1b = stage.down1_b;
    }
    for (size_t ci = 0; ci < stage.cells.size(); ++ci) {
      Cell& cell = stage.cells[ci];
      std::string cp = "stage" + std::to_string(si) + ".cell" + std::to_string(ci);
      FoldedCell fc;
      fc.s0 = cell.skip.s0;
      fc.s1 = cell.skip.s1;
      fc.pre_norm = ctx.make_slot(cell.pre_norm, 1.0, cp + ".pre_norm");
      for (size_t ji = 0; ji < cell.sublayers.size(); ++ji) {
        Sublayer& sub = cell.sublayers[ji];
        double s = sigmoid_of(cell.gate_logits[static_cast<size_t>(sub.gate_index)]);
        std::string jp = cp + ".sub" + std::to_string(ji);
        FoldedSublayer fsub;
        fsub.kind = sub.kind;
        switch (sub.kind) {
          case Sublayer::Kind::kConvMixer:
            fsub.conv = std::make_unique<FoldedConvMixer>(fold_conv(*sub.conv, s, ctx, jp + ".conv"));
            break;
          case Sublayer::Kind::kAttnMixer:
            fsub.attn = std::make_unique<FoldedAttnMixer>(fold_attn(*sub.attn, s, ctx, jp + ".attn"));
            break;
          case Sublayer::Kind::kMlp:
            fsub.mlp = std::make_unique<FoldedMlp>(fold_mlp(*sub.mlp, s, ctx, jp + ".mlp"));
            break;
        }
        fc.sublayers.push_back(std::move(fsub));
      }
      fs.cells.push_back(std::move(fc));
    }
    fm.stages.push_back(std::move(fs));
  }

  fm.head_norm = ctx.make_slot(model.head_norm, 1.0, "head_norm");
  fm.head = fold_mlp_head(model.head, ctx);
  fm.fully_folded = depth == FoldDepth::kFull;

  if (depth == FoldDepth::kFull && !ctx.layer_norms.empty()) {
    std::string list;
    for (const std::string& n : ctx.layer_norms) list += "\n  " + n;
    fail("fold: model is not polynomial-foldable; per-sample normalizations present:" + list);
  }
  return fm;
}

}  // namespace

FoldedModel fold_sigmoid_scale(PolyNeXtModel& model) { return fold_model(model, FoldDepth::kSigmoidOnly); }

FoldedModel fold_inference(PolyNeXtModel& model) {
  check(model.config.norm == NormKind::kPolyBatchNorm,
        "fold: fold_inference requires the batch-norm variant; run fold on a polybn model or use "
        "fold_sigmoid_scale for gate absorption only");
  return fold_model(model, FoldDepth::kFull);
}

// ---------------------------------------------------------------------------
// Numeric forward (same kernels and accumulation orders as the live model).
// ---------------------------------------------------------------------------

namespace {

Tensor conv_t(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dSpec& spec) {
  Conv2dDims d = conv2d_check(x.shape(), w.shape(), spec);
  Tensor y({d.batch, d.c_out, d.ho, d.wo});
  kern::conv2d(x, w, &b, y, d);
  return y;
}

Tensor linear_t(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y({x.dim(0), w.dim(0)});
  kern::linear(x, w, &b, y);
  return y;
}

void norm_rows_inplace(const NormSlot& slot, Tensor& rows, int64_t hw_of_rows) {
  int64_t n = rows.dim(0), d = rows.dim(1);
  switch (slot.kind) {
    case NormSlot::Kind::kIdentity:
      return;
    case NormSlot::Kind::kLayerNorm: {
      check(d == slot.channels, "fold: layer norm width mismatch");
      for (int64_t r = 0; r < n; ++r) {
        double* row = rows.data() + r * d;
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          double c = row[j] - mean;
          var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + slot.eps);
        for (int64_t j = 0; j < d; ++j) row[j] = slot.gamma[j] * ((row[j] - mean) * inv) + slot.beta[j];
      }
      return;
    }
    case NormSlot::Kind::kBnInfer: {
      check(d == slot.channels && hw_of_rows == slot.hw, "fold: bn slot shape mismatch");
      for (int64_t r = 0; r < n; ++r) {
        int64_t q = r % slot.hw;
        double* row = rows.data() + r * d;
        for (int64_t c = 0; c < d; ++c) {
          double hv = (row[c] - slot.mean[q]) * slot.inv_std[q];
          row[c] = slot.g[c * slot.hw + q] * hv + slot.shift[c * slot.hw + q];
        }
      }
      return;
    }
    case NormSlot::Kind::kAffine: {
      check(d == slot.channels && hw_of_rows == slot.hw, "fold: affine slot shape mismatch");
      for (int64_t r = 0; r < n; ++r) {
        int64_t q = r % slot.hw;
        double* row = rows.data() + r * d;
        for (int64_t c = 0; c < d; ++c) row[c] = slot.a[c * slot.hw + q] * row[c] + slot.b[c * slot.hw + q];
      }
      return;
    }
  }
}

void norm_nchw_inplace(const NormSlot& slot, Tensor& x) {
  int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  switch (slot.kind) {
    case NormSlot::Kind::kIdentity:
      return;
    case NormSlot::Kind::kLayerNorm: {
      // Row per position over the channel axis, matching the live path's
      // tokens round trip value for value.
      check(c == slot.channels, "fold: layer norm width mismatch");
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t q = 0; q < hw; ++q) {
          double mean = 0.0;
          for (int64_t ch = 0; ch < c; ++ch) mean += x[(i * c + ch) * hw + q];
          mean /= static_cast<double>(c);
          double var = 0.0;
          for (int64_t ch = 0; ch < c; ++ch) {
            double d = x[(i * c + ch) * hw + q] - mean;
            var += d * d;
          }
          var /= static_cast<double>(c);
          double inv = 1.0 / std::sqrt(var + slot.eps);
          for (int64_t ch = 0; ch < c; ++ch) {
            double& v = x[(i * c + ch) * hw + q];
            v = slot.gamma[ch] * ((v - mean) * inv) + slot.beta[ch];
          }
        }
      }
      return;
    }
    case NormSlot::Kind::kBnInfer: {
      check(c == slot.channels && hw == slot.hw, "fold: bn slot shape mismatch");
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t q = 0; q < hw; ++q) {
            double& v = x[(i * c + ch) * hw + q];
            double hv = (v - slot.mean[q]) * slot.inv_std[q];
            v = slot.g[ch * slot.hw + q] * hv + slot.shift[ch * slot.hw + q];
          }
        }
      }
      return;
    }
    case NormSlot::Kind::kAffine: {
      check(c == slot.channels && hw == slot.hw, "fold: affine slot shape mismatch");
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t q = 0; q < hw; ++q) {
            double& v = x[(i * c + ch) * hw + q];
            v = slot.a[ch * slot.hw + q] * v + slot.b[ch * slot.hw + q];
          }
        }
      }
      return;
    }
  }
}

Tensor mlp_forward_t(const FoldedMlp& m, const Tensor& rows, int64_t hw) {
  Tensor a = linear_t(rows, m.w_a, m.b_a);
  Tensor b = linear_t(rows, m.w_b, m.b_b);
  Tensor mixed = m.additive ? a + b : a * b;
  Tensor fused = m.with_skip ? a + mixed : std::move(mixed);
  norm_rows_inplace(m.norm, fused, hw);
  return linear_t(fused, m.w_o, m.b_o);
}

Tensor conv_mixer_forward_t(const FoldedConvMixer& m, const Tensor& x) {
  int64_t ch = m.w_in.dim(0);
  Tensor h = conv_t(x, m.w_in, m.b_in, {.stride = 1, .padding = 0});
  Tensor coarse = conv_t(h, m.k_coarse, m.b_coarse,
                         {.stride = 1, .padding = m.coarse_padding, .dilation = 2, .groups = ch});
  Tensor fine = conv_t(h, m.k_fine, m.b_fine, {.stride = 1, .padding = 1, .groups = ch});
  Tensor flipped = kern::flip_channels(fine);
  Tensor fused = m.additive ? coarse + flipped : coarse * flipped;
  Tensor merged = conv_t(fused, m.k_merge, m.b_merge, {.stride = 1, .padding = 1, .groups = ch});
  Tensor out = conv_t(merged, m.w_out, m.b_out, {.stride = 1, .padding = 0});
  norm_nchw_inplace(m.out_norm, out);
  return out;
}

Tensor attn_forward_t(const FoldedAttnMixer& m, const Tensor& x) {
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t n = h * w, d = m.w_qk.dim(0);
  Tensor tokens = kern::nchw_to_tokens(x);
  Tensor qk = linear_t(tokens, m.w_qk, m.b_qk);
  Tensor v = linear_t(tokens, m.w_v, m.b_v);
  Conv2dSpec dw{.stride = 1, .padding = 1, .dilation = 1, .groups = d};
  Tensor q_map = conv_t(kern::tokens_to_nchw(qk, b, d, h, w), m.dw_q, m.dwb_q, dw);
  Tensor k_map = conv_t(kern::tokens_to_nchw(qk, b, d, h, w), m.dw_k, m.dwb_k, dw);
  Tensor v_map = conv_t(kern::tokens_to_nchw(v, b, d, h, w), m.dw_v, m.dwb_v, dw);
  Tensor qh = kern::split_heads(kern::nchw_to_tokens(q_map), b, n, m.heads, m.head_dim);
  Tensor kh = kern::split_heads(kern::nchw_to_tokens(k_map), b, n, m.heads, m.head_dim);
  Tensor vh = kern::split_heads(kern::nchw_to_tokens(v_map), b, n, m.heads, m.head_dim);

  int64_t dh = m.head_dim;
  Tensor mixed({b * m.heads, n, dh});
  for (int64_t l = 0; l < b * m.heads; ++l) {
    int64_t head = l % m.heads;
    // scores = q k^T through an explicit transpose, as in the live path
    Tensor kt({dh, n});
    const double* kbase = kh.data() + l * n * dh;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < dh; ++j) kt[j * n + i] = kbase[i * dh + j];
    Tensor scores({n, n});
    kern::matmul(qh.data() + l * n * dh, kt.data(), scores.data(), n, dh, n);

    double s = m.kernel_scale[head];
    Tensor z(scores.shape());
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = s * scores[i] + 1.0;
    Tensor kernel = z;
    for (int p = 1; p < m.degree; ++p) kernel = kernel * z;

    if (m.use_l1) {
      for (int64_t i = 0; i < n; ++i) {
        double* row = kernel.data() + i * n;
        double sum = m.l1_eps;
        for (int64_t j = 0; j < n; ++j) sum += row[j];
        double inv = 1.0 / sum;
        for (int64_t j = 0; j < n; ++j) row[j] *= inv;
      }
    } else {
      for (int64_t i = 0; i < n; ++i) {
        double f = m.rowsum_mult[head * n + i];
        double* row = kernel.data() + i * n;
        for (int64_t j = 0; j < n; ++j) row[j] *= f;
      }
    }
    kern::matmul(kernel.data(), vh.data() + l * n * dh, mixed.data() + l * n * dh, n, n, dh);
  }
  Tensor merged = kern::merge_heads(mixed, b, n, m.heads, m.head_dim);
  if (m.pre_out.kind != NormSlot::Kind::kIdentity) {
    norm_rows_inplace(m.pre_out, merged, n);
  }
  Tensor out = linear_t(merged, m.w_out, m.b_out);
  return kern::tokens_to_nchw(out, b, c, h, w);
}

Tensor skip_combine_t(const Tensor& x2, const Tensor& x1, const Tensor& s0, const Tensor& s1) {
  int64_t b = x2.dim(0), c = x2.dim(1), hw = x2.dim(2) * x2.dim(3);
  Tensor y(x2.shape());
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      int64_t off = (i * c + ch) * hw;
      double a = s0[ch], bb = s1[ch];
      for (int64_t p = 0; p < hw; ++p) y[off + p] = a * x2[off + p] + bb * x1[off + p];
    }
  }
  return y;
}

}  // namespace

Tensor FoldedModel::forward(const Tensor& images) const {
  Tensor x = conv_t(images, stem_w, stem_b, {.stride = 4, .padding = 3});
  Tensor x2 = x, x1 = std::move(x);
  for (const FoldedStage& stage : stages) {
    if (stage.has_downsample) {
      Conv2dSpec spec{.stride = 2, .padding = 1};
      x2 = conv_t(x2, stage.d0w, stage.d0b, spec);
      x1 = conv_t(x1, stage.d1w, stage.d1b, spec);
    }
    for (const FoldedCell& cell : stage.cells) {
      Tensor y = skip_combine_t(x2, x1, cell.s0, cell.s1);
      norm_nchw_inplace(cell.pre_norm, y);
      int64_t b = y.dim(0), c = y.dim(1);
      for (const FoldedSublayer& sub : cell.sublayers) {
        Tensor f;
        switch (sub.kind) {
          case Sublayer::Kind::kConvMixer:
            f = conv_mixer_forward_t(*sub.conv, y);
            break;
          case Sublayer::Kind::kAttnMixer:
            f = attn_forward_t(*sub.attn, y);
            break;
          case Sublayer::Kind::kMlp: {
            Tensor tokens = kern::nchw_to_tokens(y);
            Tensor out = mlp_forward_t(*sub.mlp, tokens, stage.map_h * stage.map_w);
            f = kern::tokens_to_nchw(out, b, c, y.dim(2), y.dim(3));
            break;
          }
        }
        y += f;  // the gate is already inside f's trailing projection
      }
      x2 = std::move(x1);
      x1 = std::move(y);
    }
  }
  int64_t b = x1.dim(0), c = x1.dim(1), hw = x1.dim(2) * x1.dim(3);
  Tensor pooled({b, c});
  for (int64_t i = 0; i < b * c; ++i) {
    const double* base = x1.data() + i * hw;
    double acc = 0.0;
    for (int64_t p = 0; p < hw; ++p) acc += base[p];
    pooled[i] = acc / static_cast<double>(hw);
  }
  norm_rows_inplace(head_norm, pooled, 1);
  return mlp_forward_t(head, pooled, 1);
}

// ---------------------------------------------------------------------------
// Circuit emission: identical traversal and accumulation orders, one scalar
// node per intermediate value.
// ---------------------------------------------------------------------------

namespace {

struct NodeTensor {
  Shape shape;
  std::vector<int32_t> ids;

  int64_t numel() const { return static_cast<int64_t>(ids.size()); }
  int64_t dim(int64_t i) const { return shape[static_cast<size_t>(i)]; }
};

class Emitter {
 public:
  explicit Emitter(ArithmeticCircuit& c) : c_(c) {}

  int32_t constant(double v) {
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, 8);
    auto it = const_cache_.find(bits);
    if (it != const_cache_.end()) return it->second;
    int32_t id = c_.add_const(v);
    const_cache_.emplace(bits, id);
    return id;
  }
  int32_t add(int32_t a, int32_t b) { return c_.add(a, b); }
  int32_t mul(int32_t a, int32_t b) { return c_.mul(a, b); }

  /// acc + x*w with a constant weight.
  int32_t mac(int32_t acc, double w, int32_t x) { return add(acc, mul(constant(w), x)); }

  NodeTensor conv(const NodeTensor& x, const Tensor& w, const Tensor& b, const Conv2dSpec& spec) {
    Conv2dDims d = conv2d_check(x.shape, w.shape(), spec);
    NodeTensor y;
    y.shape = {d.batch, d.c_out, d.ho, d.wo};
    y.ids.resize(static_cast<size_t>(shape_numel(y.shape)));
    int64_t oc_per_g = d.c_out / d.spec.groups;
    for (int64_t bb = 0; bb < d.batch; ++bb) {
      for (int64_t o = 0; o < d.c_out; ++o) {
        int64_t g = o / oc_per_g;
        for (int64_t oh = 0; oh < d.ho; ++oh) {
          for (int64_t ow = 0; ow < d.wo; ++ow) {
            int32_t acc = constant(b[o]);
            for (int64_t ic = 0; ic < d.kc; ++ic) {
              int64_t cc = g * d.kc + ic;
              for (int64_t r = 0; r < d.kh; ++r) {
                int64_t ih = oh * d.spec.stride - d.spec.padding + r * d.spec.dilation;
                if (ih < 0 || ih >= d.h) continue;
                for (int64_t s = 0; s < d.kw; ++s) {
                  int64_t iw = ow * d.spec.stride - d.spec.padding + s * d.spec.dilation;
                  if (iw < 0 || iw >= d.w) continue;
                  int32_t xin = x.ids[static_cast<size_t>(((bb * d.c_in + cc) * d.h + ih) * d.w + iw)];
                  acc = mac(acc, w.at({o, ic, r, s}), xin);
                }
              }
            }
            y.ids[static_cast<size_t>(((bb * d.c_out + o) * d.ho + oh) * d.wo + ow)] = acc;
          }
        }
      }
    }
    return y;
  }

  NodeTensor linear(const NodeTensor& x, const Tensor& w, const Tensor& b) {
    int64_t rows = x.dim(0), in = x.dim(1), out = w.dim(0);
    NodeTensor y;
    y.shape = {rows, out};
    y.ids.resize(static_cast<size_t>(rows * out));
    for (int64_t i = 0; i < rows; ++i) {
      for (int64_t o = 0; o < out; ++o) {
        int32_t acc = constant(b[o]);
        for (int64_t k = 0; k < in; ++k) {
          acc = mac(acc, w[o * in + k], x.ids[static_cast<size_t>(i * in + k)]);
        }
        y.ids[static_cast<size_t>(i * out + o)] = acc;
      }
    }
    return y;
  }

  NodeTensor elementwise_mul(const NodeTensor& a, const NodeTensor& b) {
    NodeTensor y = a;
    for (size_t i = 0; i < y.ids.size(); ++i) y.ids[i] = mul(a.ids[i], b.ids[i]);
    return y;
  }
  NodeTensor elementwise_add(const NodeTensor& a, const NodeTensor& b) {
    NodeTensor y = a;
    for (size_t i = 0; i < y.ids.size(); ++i) y.ids[i] = add(a.ids[i], b.ids[i]);
    return y;
  }

  ArithmeticCircuit& circuit() { return c_; }

 private:
  ArithmeticCircuit& c_;
  std::unordered_map<uint64_t, int32_t> const_cache_;
};

NodeTensor reindex(const NodeTensor& x, Shape shape, const std::function<int64_t(int64_t)>& src_of_dst) {
  NodeTensor y;
  y.shape = std::move(shape);
  int64_t n = shape_numel(y.shape);
  y.ids.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) y.ids[static_cast<size_t>(i)] = x.ids[static_cast<size_t>(src_of_dst(i))];
  return y;
}

NodeTensor nodes_nchw_to_tokens(const NodeTensor& x) {
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t hw = h * w;
  return reindex(x, {b * hw, c}, [=](int64_t i) {
    int64_t row = i / c, ch = i % c;
    int64_t bb = row / hw, q = row % hw;
    return (bb * c + ch) * hw + q;
  });
}

NodeTensor nodes_tokens_to_nchw(const NodeTensor& x, int64_t b, int64_t c, int64_t h, int64_t w) {
  int64_t hw = h * w;
  return reindex(x, {b, c, h, w}, [=](int64_t i) {
    int64_t q = i % hw;
    int64_t ch = (i / hw) % c;
    int64_t bb = i / (hw * c);
    return (bb * hw + q) * c + ch;
  });
}

NodeTensor nodes_flip_channels(const NodeTensor& x) {
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t hw = h * w;
  return reindex(x, x.shape, [=](int64_t i) {
    int64_t q = i % hw;
    int64_t ch = (i / hw) % c;
    int64_t bb = i / (hw * c);
    return (bb * c + (c - 1 - ch)) * hw + q;
  });
}

NodeTensor nodes_split_heads(const NodeTensor& x, int64_t b, int64_t n, int64_t heads, int64_t dh) {
  return reindex(x, {b * heads, n, dh}, [=](int64_t i) {
    int64_t j = i % dh;
    int64_t tok = (i / dh) % n;
    int64_t bh = i / (dh * n);
    int64_t bb = bh / heads, hd = bh % heads;
    return (bb * n + tok) * heads * dh + hd * dh + j;
  });
}

NodeTensor nodes_merge_heads(const NodeTensor& x, int64_t b, int64_t n, int64_t heads, int64_t dh) {
  return reindex(x, {b * n, heads * dh}, [=](int64_t i) {
    int64_t col = i % (heads * dh);
    int64_t row = i / (heads * dh);
    int64_t bb = row / n, tok = row % n;
    int64_t hd = col / dh, j = col % dh;
    return ((bb * heads + hd) * n + tok) * dh + j;
  });
}

void emit_norm_rows(Emitter& em, const NormSlot& slot, NodeTensor& rows, int64_t hw) {
  int64_t n = rows.dim(0), d = rows.dim(1);
  switch (slot.kind) {
    case NormSlot::Kind::kIdentity:
      return;
    case NormSlot::Kind::kAffine: {
      check(d == slot.channels && hw == slot.hw, "export: affine slot shape mismatch");
      for (int64_t r = 0; r < n; ++r) {
        int64_t q = r % slot.hw;
        for (int64_t c = 0; c < d; ++c) {
          int32_t v = rows.ids[static_cast<size_t>(r * d + c)];
          int32_t scaled = em.mul(em.constant(slot.a[c * slot.hw + q]), v);
          rows.ids[static_cast<size_t>(r * d + c)] = em.add(scaled, em.constant(slot.b[c * slot.hw + q]));
        }
      }
      return;
    }
    default:
      fail("export: only affine or identity normalizations can be lowered; fold the model first");
  }
}

void emit_norm_nchw(Emitter& em, const NormSlot& slot, NodeTensor& x) {
  int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  switch (slot.kind) {
    case NormSlot::Kind::kIdentity:
      return;
    case NormSlot::Kind::kAffine: {
      check(c == slot.channels && hw == slot.hw, "export: affine slot shape mismatch");
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t q = 0; q < hw; ++q) {
            size_t idx = static_cast<size_t>((i * c + ch) * hw + q);
            int32_t scaled = em.mul(em.constant(slot.a[ch * slot.hw + q]), x.ids[idx]);
            x.ids[idx] = em.add(scaled, em.constant(slot.b[ch * slot.hw + q]));
          }
        }
      }
      return;
    }
    default:
      fail("export: only affine or identity normalizations can be lowered; fold the model first");
  }
}

NodeTensor emit_mlp(Emitter& em, const FoldedMlp& m, const NodeTensor& rows, int64_t hw) {
  NodeTensor a = em.linear(rows, m.w_a, m.b_a);
  NodeTensor b = em.linear(rows, m.w_b, m.b_b);
  NodeTensor mixed = m.additive ? em.elementwise_add(a, b) : em.elementwise_mul(a, b);
  NodeTensor fused = m.with_skip ? em.elementwise_add(a, mixed) : std::move(mixed);
  emit_norm_rows(em, m.norm, fused, hw);
  return em.linear(fused, m.w_o, m.b_o);
}

NodeTensor emit_conv_mixer(Emitter& em, const FoldedConvMixer& m, const NodeTensor& x) {
  int64_t ch = m.w_in.dim(0);
  NodeTensor h = em.conv(x, m.w_in, m.b_in, {.stride = 1, .padding = 0});
  NodeTensor coarse =
      em.conv(h, m.k_coarse, m.b_coarse, {.stride = 1, .padding = m.coarse_padding, .dilation = 2, .groups = ch});
  NodeTensor fine = em.conv(h, m.k_fine, m.b_fine, {.stride = 1, .padding = 1, .groups = ch});
  NodeTensor flipped = nodes_flip_channels(fine);
  NodeTensor fused = m.additive ? em.elementwise_add(coarse, flipped) : em.elementwise_mul(coarse, flipped);
  NodeTensor merged = em.conv(fused, m.k_merge, m.b_merge, {.stride = 1, .padding = 1, .groups = ch});
  NodeTensor out = em.conv(merged, m.w_out, m.b_out, {.stride = 1, .padding = 0});
  emit_norm_nchw(em, m.out_norm, out);
  return out;
}

NodeTensor emit_attn(Emitter& em, const FoldedAttnMixer& m, const NodeTensor& x) {
  check(!m.use_l1, "export: per-sample l1 attention normalization cannot be lowered; fold the model first");
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t n = h * w, d = m.w_qk.dim(0), dh = m.head_dim;
  NodeTensor tokens = nodes_nchw_to_tokens(x);
  NodeTensor qk = em.linear(tokens, m.w_qk, m.b_qk);
  NodeTensor v = em.linear(tokens, m.w_v, m.b_v);
  Conv2dSpec dw{.stride = 1, .padding = 1, .dilation = 1, .groups = d};
  NodeTensor q_map = em.conv(nodes_tokens_to_nchw(qk, b, d, h, w), m.dw_q, m.dwb_q, dw);
  NodeTensor k_map = em.conv(nodes_tokens_to_nchw(qk, b, d, h, w), m.dw_k, m.dwb_k, dw);
  NodeTensor v_map = em.conv(nodes_tokens_to_nchw(v, b, d, h, w), m.dw_v, m.dwb_v, dw);
  NodeTensor qh = nodes_split_heads(nodes_nchw_to_tokens(q_map), b, n, m.heads, dh);
  NodeTensor kh = nodes_split_heads(nodes_nchw_to_tokens(k_map), b, n, m.heads, dh);
  NodeTensor vh = nodes_split_heads(nodes_nchw_to_tokens(v_map), b, n, m.heads, dh);

  NodeTensor mixed;
  mixed.shape = {b * m.heads, n, dh};
  mixed.ids.resize(static_cast<size_t>(b * m.heads * n * dh));
  int32_t one = em.constant(1.0);
  for (int64_t l = 0; l < b * m.heads; ++l) {
    int64_t head = l % m.heads;
    int32_t s_const = em.constant(m.kernel_scale[head]);
    std::vector<int32_t> weights(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        // score = <q_i, k_j>, left-fold
        int32_t acc = em.mul(qh.ids[static_cast<size_t>((l * n + i) * dh)],
                             kh.ids[static_cast<size_t>((l * n + j) * dh)]);
        for (int64_t k = 1; k < dh; ++k) {
          acc = em.add(acc, em.mul(qh.ids[static_cast<size_t>((l * n + i) * dh + k)],
                                   kh.ids[static_cast<size_t>((l * n + j) * dh + k)]));
        }
        int32_t z = em.add(em.mul(s_const, acc), one);
        int32_t kernel = z;
        for (int p = 1; p < m.degree; ++p) kernel = em.mul(kernel, z);
        int32_t scaled = em.mul(em.constant(m.rowsum_mult[head * n + i]), kernel);
        weights[static_cast<size_t>(i * n + j)] = scaled;
      }
    }
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t k = 0; k < dh; ++k) {
        int32_t acc = em.mul(weights[static_cast<size_t>(i * n)], vh.ids[static_cast<size_t>(l * n * dh + k)]);
        for (int64_t j = 1; j < n; ++j) {
          acc = em.add(acc, em.mul(weights[static_cast<size_t>(i * n + j)],
                                   vh.ids[static_cast<size_t>((l * n + j) * dh + k)]));
        }
        mixed.ids[static_cast<size_t>((l * n + i) * dh + k)] = acc;
      }
    }
  }
  NodeTensor merged = nodes_merge_heads(mixed, b, n, m.heads, dh);
  if (m.pre_out.kind != NormSlot::Kind::kIdentity) emit_norm_rows(em, m.pre_out, merged, n);
  NodeTensor out = em.linear(merged, m.w_out, m.b_out);
  return nodes_tokens_to_nchw(out, b, c, h, w);
}

NodeTensor emit_skip_combine(Emitter& em, const NodeTensor& x2, const NodeTensor& x1, const Tensor& s0,
                             const Tensor& s1) {
  int64_t b = x2.dim(0), c = x2.dim(1), hw = x2.dim(2) * x2.dim(3);
  NodeTensor y = x2;
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      int64_t off = (i * c + ch) * hw;
      int32_t c0 = em.constant(s0[ch]);
      int32_t c1 = em.constant(s1[ch]);
      for (int64_t p = 0; p < hw; ++p) {
        y.ids[static_cast<size_t>(off + p)] = em.add(em.mul(c0, x2.ids[static_cast<size_t>(off + p)]),
                                                     em.mul(c1, x1.ids[static_cast<size_t>(off + p)]));
      }
    }
  }
  return y;
}

}  // namespace

int64_t estimate_circuit_nodes(const FoldedModel& fm) {
  // Two nodes (MUL+ADD) per multiply-accumulate plus elementwise overheads.
  PolyNeXtModel probe;  // flops_estimate only reads the config
  probe.config = fm.config;
  int64_t macs = probe.flops_estimate(fm.config.resolution).total();
  return 2 * macs + 8 * fm.config.resolution * fm.config.resolution;
}

ArithmeticCircuit export_circuit(const FoldedModel& fm, int64_t max_nodes) {
  check(fm.fully_folded, "export: model must pass through fold_inference first");
  int64_t estimate = estimate_circuit_nodes(fm);
  check(estimate <= max_nodes, "export: estimated " + std::to_string(estimate) + " nodes exceeds the limit of " +
                                   std::to_string(max_nodes) + "; raise --max-nodes or export a smaller model");

  ArithmeticCircuit circuit;
  Emitter em(circuit);
  int64_t res = fm.config.resolution;
  NodeTensor input;
  input.shape = {1, 3, res, res};
  input.ids.resize(static_cast<size_t>(3 * res * res));
  for (int64_t i = 0; i < 3 * res * res; ++i) input.ids[static_cast<size_t>(i)] = circuit.add_input(i);

  NodeTensor x = em.conv(input, fm.stem_w, fm.stem_b, {.stride = 4, .padding = 3});
  NodeTensor x2 = x, x1 = x;
  for (const FoldedStage& stage : fm.stages) {
    if (stage.has_downsample) {
      Conv2dSpec spec{.stride = 2, .padding = 1};
      x2 = em.conv(x2, stage.d0w, stage.d0b, spec);
      x1 = em.conv(x1, stage.d1w, stage.d1b, spec);
    }
    for (const FoldedCell& cell : stage.cells) {
      NodeTensor y = emit_skip_combine(em, x2, x1, cell.s0, cell.s1);
      emit_norm_nchw(em, cell.pre_norm, y);
      for (const FoldedSublayer& sub : cell.sublayers) {
        NodeTensor f;
        switch (sub.kind) {
          case Sublayer::Kind::kConvMixer:
            f = emit_conv_mixer(em, *sub.conv, y);
            break;
          case Sublayer::Kind::kAttnMixer:
            f = emit_attn(em, *sub.attn, y);
            break;
          case Sublayer::Kind::kMlp: {
            NodeTensor tokens = nodes_nchw_to_tokens(y);
            NodeTensor out = emit_mlp(em, *sub.mlp, tokens, stage.map_h * stage.map_w);
            f = nodes_tokens_to_nchw(out, y.dim(0), y.dim(1), y.dim(2), y.dim(3));
            break;
          }
        }
        y = em.elementwise_add(y, f);
      }
      x2 = x1;
      x1 = y;
    }
  }
  // Global average pool: ADD tree then one MUL by 1/(H*W).
  int64_t c = x1.dim(1), hw = x1.dim(2) * x1.dim(3);
  NodeTensor pooled;
  pooled.shape = {1, c};
  pooled.ids.resize(static_cast<size_t>(c));
  int32_t inv = em.constant(1.0 / static_cast<double>(hw));
  for (int64_t ch = 0; ch < c; ++ch) {
    int32_t acc = x1.ids[static_cast<size_t>(ch * hw)];
    for (int64_t p = 1; p < hw; ++p) acc = em.add(acc, x1.ids[static_cast<size_t>(ch * hw + p)]);
    pooled.ids[static_cast<size_t>(ch)] = em.mul(acc, inv);
  }
  emit_norm_rows(em, fm.head_norm, pooled, 1);
  NodeTensor logits = emit_mlp(em, fm.head, pooled, 1);
  for (int32_t id : logits.ids) circuit.outputs.push_back(id);
  check(circuit.size() <= max_nodes + (max_nodes >> 2),
        "export: circuit grew past the node limit (" + std::to_string(circuit.size()) + " nodes)");
  return circuit;
}

}  // namespace polynext
