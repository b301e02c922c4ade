#include "polynext/model.hpp"

#include <cmath>

#include "polynext/ops.hpp"

namespace polynext {

void ModelConfig::validate() const {
  check(stages() == 3 || stages() == 4, "config: stage count must be 3 or 4, got " + std::to_string(stages()));
  check(cells.size() == channels.size() && stacks.size() == channels.size() && mixers.size() == channels.size(),
        "config: channels/cells/stacks/mixers must all have one entry per stage");
  for (int64_t c : channels) check(c >= 1, "config: channels must be >= 1");
  for (int64_t c : cells) check(c >= 1, "config: cells must be >= 1");
  for (int64_t s : stacks) check(s >= 1, "config: stacks must be >= 1");
  check(num_classes >= 2, "config: num_classes must be >= 2");
  check(resolution >= 8 && resolution % 4 == 0, "config: resolution must be >= 8 and divisible by 4");
  check(attn_degree >= 1, "config: attention degree must be >= 1");
  // Attention never appears at high resolution before convolution stages.
  bool seen_attn = false;
  for (MixerKind m : mixers) {
    if (m == MixerKind::kPolyAttn) {
      seen_attn = true;
    } else {
      check(!seen_attn, "config: polyconv stage after a polyattn stage is not a supported layout");
    }
  }
}

int64_t ModelConfig::mlp_hidden(int64_t c, int stage_index, int total_stages) {
  (void)total_stages;
  bool late = stage_index >= 2;       // stages beyond the first two
  return late ? (7 * c + 7) / 8 : c;  // ceil(0.875 * c)
}

int64_t ModelConfig::conv_hidden(int64_t c, int stage_index, int total_stages) {
  (void)total_stages;
  bool late = stage_index >= 2;
  return late ? (3 * c + 3) / 4 : c;  // ceil(0.75 * c)
}

namespace {

ModelConfig base_config(char size) {
  ModelConfig cfg;
  switch (size) {
    case 'T':
      cfg.channels = {48, 96, 192, 288};
      cfg.cells = {2, 2, 6, 2};
      cfg.stacks = {3, 3, 3, 3};
      break;
    case 'S':
      cfg.channels = {72, 144, 288, 432};
      cfg.cells = {3, 3, 8, 3};
      cfg.stacks = {3, 4, 4, 4};
      break;
    case 'B':
      cfg.channels = {84, 168, 336, 504};
      cfg.cells = {3, 5, 10, 3};
      cfg.stacks = {4, 4, 4, 4};
      break;
    case 'L':
      cfg.channels = {96, 192, 384, 576};
      cfg.cells = {3, 6, 12, 3};
      cfg.stacks = {4, 4, 4, 4};
      cfg.sigmoid_init = SigmoidInitVariant::kLarge;
      break;
    default:
      fail(std::string("config: unknown model size '") + size + "', expected T, S, B or L");
  }
  return cfg;
}

}  // namespace

ModelConfig ModelConfig::cpolynext(char size) {
  ModelConfig cfg = base_config(size);
  cfg.mixers.assign(4, MixerKind::kPolyConv);
  return cfg;
}

ModelConfig ModelConfig::apolynext(char size) {
  ModelConfig cfg = base_config(size);
  cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyAttn, MixerKind::kPolyAttn};
  return cfg;
}

ModelConfig ModelConfig::cpolynext_lr() {
  ModelConfig cfg;
  cfg.channels = {72, 144, 288};
  cfg.cells = {2, 3, 3};
  cfg.stacks = {3, 3, 3};
  cfg.mixers.assign(3, MixerKind::kPolyConv);
  cfg.resolution = 32;
  cfg.num_classes = 10;
  return cfg;
}

std::vector<int64_t> PolyNeXtModel::stage_resolutions(int64_t input, int stages) {
  std::vector<int64_t> out;
  int64_t r = input / 4;
  for (int s = 0; s < stages; ++s) {
    out.push_back(r);
    r = (r - 1) / 2 + 1;  // 3x3 stride-2 pad-1 output size
  }
  return out;
}

PolyNeXtModel PolyNeXtModel::build(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  PolyNeXtModel m;
  m.config = config;
  int n_stages = config.stages();
  NormKind norm = config.norm;

  m.stem_w = kaiming_normal({config.channels[0], 3, 7, 7}, 3 * 49, rng);
  m.stem_b = Tensor::zeros({config.channels[0]});

  std::vector<int64_t> res = stage_resolutions(config.resolution, n_stages);
  int64_t s_max = 0;
  for (int64_t s : config.stacks) s_max = std::max(s_max, s);
  int global_sublayer = 0;

  for (int s = 0; s < n_stages; ++s) {
    Stage stage;
    stage.map_h = res[static_cast<size_t>(s)];
    stage.map_w = res[static_cast<size_t>(s)];
    int64_t c = config.channels[static_cast<size_t>(s)];
    if (s > 0) {
      int64_t c_prev = config.channels[static_cast<size_t>(s - 1)];
      stage.has_downsample = true;
      stage.down0_w = kaiming_normal({c, c_prev, 3, 3}, c_prev * 9, rng);
      stage.down0_b = Tensor::zeros({c});
      stage.down1_w = kaiming_normal({c, c_prev, 3, 3}, c_prev * 9, rng);
      stage.down1_b = Tensor::zeros({c});
    }
    int64_t mlp_h = ModelConfig::mlp_hidden(c, s, n_stages);
    int64_t conv_h = ModelConfig::conv_hidden(c, s, n_stages);
    MixerKind mixer = config.mixers[static_cast<size_t>(s)];

    for (int64_t ci = 0; ci < config.cells[static_cast<size_t>(s)]; ++ci) {
      Cell cell;
      cell.skip = MultiInputSkip::make(c);
      cell.pre_norm = norm == NormKind::kPolyBatchNorm
                          ? NormModule::poly_bn_over(c, stage.map_h, stage.map_w)
                          : (norm == NormKind::kIdentity ? NormModule::identity()
                                                         : NormModule::layer_norm_over(c));
      auto logits = init_sigmoid_logits(static_cast<int>(2 * s_max), config.sigmoid_init);
      for (double l : logits) cell.gate_logits.push_back(Tensor::scalar(l));

      for (int64_t st = 0; st < config.stacks[static_cast<size_t>(s)]; ++st) {
        Sublayer mixer_layer;
        if (mixer == MixerKind::kPolyConv) {
          mixer_layer.kind = Sublayer::Kind::kConvMixer;
          mixer_layer.conv = std::make_unique<PolyConv>(
              PolyConv::make(c, conv_h, s + 1, norm, rng, stage.map_h, stage.map_w));
          mixer_layer.conv->additive_fusion = config.fusion == FusionKind::kAddition;
        } else {
          mixer_layer.kind = Sublayer::Kind::kAttnMixer;
          mixer_layer.attn = std::make_unique<PolyAttn>(
              PolyAttn::make(c, config.attn_degree, norm, rng, stage.map_h, stage.map_w));
        }
        mixer_layer.gate_index = static_cast<int>(2 * st);
        mixer_layer.global_index = global_sublayer++;
        cell.sublayers.push_back(std::move(mixer_layer));

        Sublayer mlp_layer;
        mlp_layer.kind = Sublayer::Kind::kMlp;
        mlp_layer.mlp = std::make_unique<PolyMlp>(
            PolyMlp::make(c, mlp_h, c, norm, rng, stage.map_h, stage.map_w));
        mlp_layer.mlp->additive_fusion = config.fusion == FusionKind::kAddition;
        mlp_layer.gate_index = static_cast<int>(2 * st + 1);
        mlp_layer.global_index = global_sublayer++;
        cell.sublayers.push_back(std::move(mlp_layer));
      }
      stage.cells.push_back(std::move(cell));
    }
    m.stages.push_back(std::move(stage));
  }

  int64_t c_last = config.channels.back();
  m.head_norm = norm == NormKind::kPolyBatchNorm ? NormModule::poly_bn_over(c_last, 1, 1)
                                                 : (norm == NormKind::kIdentity
                                                        ? NormModule::identity()
                                                        : NormModule::layer_norm_over(c_last));
  m.head = PolyHead::make(c_last, c_last, config.num_classes, norm, rng);
  m.head.additive_fusion = config.fusion == FusionKind::kAddition;
  return m;
}

int PolyNeXtModel::total_sublayers() const {
  int n = 0;
  for (const Stage& s : stages)
    for (const Cell& c : s.cells) n += static_cast<int>(c.sublayers.size());
  return n;
}

std::pair<Var, Var> PolyNeXtModel::stem_forward(Tape& t, Var images) {
  const Tensor& xv = t.value(images);
  check(xv.rank() == 4 && xv.dim(1) == 3, "stem: expected B,3,H,W, got " + shape_str(xv.shape()));
  check(xv.dim(2) >= 8 && xv.dim(3) >= 8 && xv.dim(2) % 4 == 0 && xv.dim(3) % 4 == 0,
        "stem: resolution too small or not divisible by 4: " + shape_str(xv.shape()));
  Var s = conv2d(t, images, t.param(stem_w), t.param(stem_b), {.stride = 4, .padding = 3});
  return {s, s};
}

std::pair<Var, Var> PolyNeXtModel::downsample_pair(Tape& t, Var x2, Var x1, Stage& stage) {
  check(stage.has_downsample, "downsample: stage has no downsampling convs");
  check(t.value(x2).same_shape(t.value(x1)), "downsample: skip paths must share a shape");
  Conv2dSpec spec{.stride = 2, .padding = 1};
  Var y2 = conv2d(t, x2, t.param(stage.down0_w), t.param(stage.down0_b), spec);
  Var y1 = conv2d(t, x1, t.param(stage.down1_w), t.param(stage.down1_b), spec);
  return {y2, y1};
}

namespace {

Var apply_dropout(Tape& t, Var x, double rate, Rng* rng) {
  if (rate <= 0.0) return x;
  check(rng != nullptr, "dropout: train mode needs an rng");
  Tensor mask(t.shape(x));
  double keep = 1.0 - rate;
  for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
  return mul_mask_const(t, x, std::move(mask));
}

}  // namespace

Var PolyNeXtModel::cell_forward(Tape& t, Var x2, Var x1, Cell& cell, const ForwardOptions& opts, int64_t map_h,
                                int64_t map_w) {
  bool training = opts.mode == Mode::kTrain;
  Var combined = multi_input_skip_combine(t, x2, x1, cell.skip);
  Var y = cell.pre_norm.forward_nchw(t, combined, opts.mode);
  int64_t batch = t.value(y).dim(0);
  int64_t c = t.value(y).dim(1);
  int total = total_sublayers();

  for (Sublayer& sub : cell.sublayers) {
    Var f;
    switch (sub.kind) {
      case Sublayer::Kind::kConvMixer:
        f = sub.conv->forward(t, y, opts.mode);
        break;
      case Sublayer::Kind::kAttnMixer:
        f = sub.attn->forward(t, y, opts.mode);
        break;
      case Sublayer::Kind::kMlp: {
        Var tokens = nchw_to_tokens(t, y);
        Var out = sub.mlp->forward_rows(t, tokens, opts.mode, batch, map_h, map_w);
        if (training && opts.dropout_rate > 0.0) out = apply_dropout(t, out, opts.dropout_rate, opts.rng);
        f = tokens_to_nchw(t, out, batch, c, map_h, map_w);
        break;
      }
    }
    Var s = sigmoid(t, t.param(cell.gate_logits[static_cast<size_t>(sub.gate_index)]));
    Var gated = mul_scalar_var(t, f, s);
    if (training && opts.stochastic_depth_max > 0.0) {
      check(opts.rng != nullptr, "stochastic depth: train mode needs an rng");
      double rate = stochastic_depth_rate_for(sub.global_index, total, opts.stochastic_depth_max);
      Tensor mask({batch});
      for (int64_t b = 0; b < batch; ++b) {
        DropDecision d = stochastic_depth_gate(rate, true, *opts.rng);
        mask[b] = d.scale;
      }
      gated = scale_samples_const(t, gated, std::move(mask));
    }
    y = add(t, y, gated);
  }
  return y;
}

Var PolyNeXtModel::forward(Tape& t, Var images, const ForwardOptions& opts) {
  const Tensor& xv = t.value(images);
  if (config.norm == NormKind::kPolyBatchNorm) {
    check(xv.dim(2) == config.resolution && xv.dim(3) == config.resolution,
          "forward: batch-norm variant is bound to resolution " + std::to_string(config.resolution) +
              ", got input " + shape_str(xv.shape()));
  }
  auto [x2, x1] = stem_forward(t, images);
  for (Stage& stage : stages) {
    if (stage.has_downsample) {
      auto pair = downsample_pair(t, x2, x1, stage);
      x2 = pair.first;
      x1 = pair.second;
    }
    for (Cell& cell : stage.cells) {
      Var out = cell_forward(t, x2, x1, cell, opts, stage.map_h, stage.map_w);
      x2 = x1;
      x1 = out;
    }
  }
  Var pooled = global_avg_pool(t, x1);
  int64_t batch = t.value(pooled).dim(0);
  Var normed = head_norm.forward_rows(t, pooled, opts.mode, batch, 1, 1);
  if (opts.mode == Mode::kTrain && opts.dropout_rate > 0.0) {
    normed = apply_dropout(t, normed, opts.dropout_rate, opts.rng);
  }
  return head.forward_rows(t, normed, opts.mode);
}

Tensor PolyNeXtModel::predict(const Tensor& images) {
  Tape t;
  Var logits = forward(t, t.constant(images), ForwardOptions{});
  return t.value(logits);
}

namespace {

struct Registrar {
  std::vector<ParamEntry>* params = nullptr;
  std::vector<BufferEntry>* buffers = nullptr;

  void p(const std::string& name, Tensor& t, bool exempt = false) {
    if (params) params->push_back({name, &t, exempt});
  }
  void buf(const std::string& name, Tensor& t) {
    if (buffers) buffers->push_back({name, &t});
  }
};

void register_norm(Registrar& r, const std::string& prefix, NormModule& n) {
  switch (n.kind) {
    case NormKind::kLayerNorm:
      r.p(prefix + ".gamma", n.ln.gamma, true);
      r.p(prefix + ".beta", n.ln.beta, true);
      break;
    case NormKind::kPolyBatchNorm:
      r.p(prefix + ".gamma_c", n.bn.gamma_c, true);
      r.p(prefix + ".beta_c", n.bn.beta_c, true);
      r.p(prefix + ".gamma_hw", n.bn.gamma_hw, true);
      r.p(prefix + ".beta_hw", n.bn.beta_hw, true);
      r.buf(prefix + ".running_mean", n.bn.running_mean);
      r.buf(prefix + ".running_var", n.bn.running_var);
      break;
    case NormKind::kIdentity:
      break;
  }
}

void register_mlp(Registrar& r, const std::string& prefix, PolyMlp& m) {
  r.p(prefix + ".w_a", m.w_a);
  r.p(prefix + ".b_a", m.b_a);
  r.p(prefix + ".w_b", m.w_b);
  r.p(prefix + ".b_b", m.b_b);
  register_norm(r, prefix + ".norm", m.norm);
  r.p(prefix + ".w_o", m.w_o);
  r.p(prefix + ".b_o", m.b_o);
}

void register_conv(Registrar& r, const std::string& prefix, PolyConv& m) {
  r.p(prefix + ".w_in", m.w_in);
  r.p(prefix + ".b_in", m.b_in);
  r.p(prefix + ".k_coarse", m.k_coarse);
  r.p(prefix + ".b_coarse", m.b_coarse);
  r.p(prefix + ".k_fine", m.k_fine);
  r.p(prefix + ".b_fine", m.b_fine);
  r.p(prefix + ".k_merge", m.k_merge);
  r.p(prefix + ".b_merge", m.b_merge);
  r.p(prefix + ".w_out", m.w_out);
  r.p(prefix + ".b_out", m.b_out);
  register_norm(r, prefix + ".norm", m.norm);
}

void register_attn(Registrar& r, const std::string& prefix, PolyAttn& m) {
  r.p(prefix + ".w_qk", m.w_qk);
  r.p(prefix + ".b_qk", m.b_qk);
  r.p(prefix + ".w_v", m.w_v);
  r.p(prefix + ".b_v", m.b_v);
  r.p(prefix + ".dw_q", m.dw_q);
  r.p(prefix + ".dwb_q", m.dwb_q);
  r.p(prefix + ".dw_k", m.dw_k);
  r.p(prefix + ".dwb_k", m.dwb_k);
  r.p(prefix + ".dw_v", m.dw_v);
  r.p(prefix + ".dwb_v", m.dwb_v);
  r.p(prefix + ".lambda_scale", m.lambda_scale, true);
  if (m.running_norm) {
    r.p(prefix + ".rowsum.gamma", m.rowsum.gamma, true);
    r.buf(prefix + ".rowsum.running", m.rowsum.running_rowsum);
    r.p(prefix + ".pre_out_norm.gamma_c", m.pre_out_norm.gamma_c, true);
    r.p(prefix + ".pre_out_norm.beta_c", m.pre_out_norm.beta_c, true);
    r.p(prefix + ".pre_out_norm.gamma_hw", m.pre_out_norm.gamma_hw, true);
    r.p(prefix + ".pre_out_norm.beta_hw", m.pre_out_norm.beta_hw, true);
    r.buf(prefix + ".pre_out_norm.running_mean", m.pre_out_norm.running_mean);
    r.buf(prefix + ".pre_out_norm.running_var", m.pre_out_norm.running_var);
  }
  r.p(prefix + ".w_out", m.w_out);
  r.p(prefix + ".b_out", m.b_out);
}

void register_head(Registrar& r, const std::string& prefix, PolyHead& m) {
  r.p(prefix + ".w_a", m.w_a);
  r.p(prefix + ".b_a", m.b_a);
  r.p(prefix + ".w_b", m.w_b);
  r.p(prefix + ".b_b", m.b_b);
  register_norm(r, prefix + ".norm", m.norm);
  r.p(prefix + ".w_o", m.w_o);
  r.p(prefix + ".b_o", m.b_o);
}

void register_model(Registrar& r, PolyNeXtModel& m) {
  r.p("stem.w", m.stem_w);
  r.p("stem.b", m.stem_b);
  for (size_t s = 0; s < m.stages.size(); ++s) {
    Stage& stage = m.stages[s];
    std::string sp = "stage" + std::to_string(s);
    if (stage.has_downsample) {
      r.p(sp + ".down0.w", stage.down0_w);
      r.p(sp + ".down0.b", stage.down0_b);
      r.p(sp + ".down1.w", stage.down1_w);
      r.p(sp + ".down1.b", stage.down1_b);
    }
    for (size_t c = 0; c < stage.cells.size(); ++c) {
      Cell& cell = stage.cells[c];
      std::string cp = sp + ".cell" + std::to_string(c);
      r.p(cp + ".skip.s0", cell.skip.s0, true);
      r.p(cp + ".skip.s1", cell.skip.s1, true);
      register_norm(r, cp + ".pre_norm", cell.pre_norm);
      for (size_t g = 0; g < cell.gate_logits.size(); ++g) {
        r.p(cp + ".gate" + std::to_string(g) + ".logit", cell.gate_logits[g], true);
      }
      for (size_t j = 0; j < cell.sublayers.size(); ++j) {
        Sublayer& sub = cell.sublayers[j];
        std::string jp = cp + ".sub" + std::to_string(j);
        switch (sub.kind) {
          case Sublayer::Kind::kConvMixer:
            register_conv(r, jp + ".conv", *sub.conv);
            break;
          case Sublayer::Kind::kAttnMixer:
            register_attn(r, jp + ".attn", *sub.attn);
            break;
          case Sublayer::Kind::kMlp:
            register_mlp(r, jp + ".mlp", *sub.mlp);
            break;
        }
      }
    }
  }
  register_norm(r, "head_norm", m.head_norm);
  register_head(r, "head", m.head);
}

}  // namespace

std::vector<PolyBatchNormParams*> PolyNeXtModel::batch_norms() {
  std::vector<PolyBatchNormParams*> out;
  auto take = [&](NormModule& n) {
    if (n.kind == NormKind::kPolyBatchNorm) out.push_back(&n.bn);
  };
  for (Stage& s : stages) {
    for (Cell& c : s.cells) {
      take(c.pre_norm);
      for (Sublayer& sub : c.sublayers) {
        if (sub.conv) take(sub.conv->norm);
        if (sub.mlp) take(sub.mlp->norm);
        if (sub.attn && sub.attn->running_norm) out.push_back(&sub.attn->pre_out_norm);
      }
    }
  }
  take(head_norm);
  take(head.norm);
  return out;
}

std::vector<RunningRowSumParams*> PolyNeXtModel::rowsum_norms() {
  std::vector<RunningRowSumParams*> out;
  for (Stage& s : stages) {
    for (Cell& c : s.cells) {
      for (Sublayer& sub : c.sublayers) {
        if (sub.attn && sub.attn->running_norm) out.push_back(&sub.attn->rowsum);
      }
    }
  }
  return out;
}

void warm_batch_stats(PolyNeXtModel& model, Rng& rng, int batches, int64_t batch_size) {
  check(batches >= 1, "warm_batch_stats: need at least one batch");
  auto bns = model.batch_norms();
  auto rows = model.rowsum_norms();
  std::vector<double> bn_momenta, row_momenta;
  for (auto* bn : bns) bn_momenta.push_back(bn->momentum);
  for (auto* r : rows) row_momenta.push_back(r->momentum);
  for (int i = 0; i < batches; ++i) {
    double m = 1.0 / static_cast<double>(i + 1);  // running true mean
    for (auto* bn : bns) bn->momentum = m;
    for (auto* r : rows) r->momentum = m;
    Tensor x = rng.normal_tensor({batch_size, 3, model.config.resolution, model.config.resolution}, 0, 1);
    Tape t;
    model.forward(t, t.constant(x), ForwardOptions{.mode = Mode::kTrain});
  }
  for (size_t i = 0; i < bns.size(); ++i) bns[i]->momentum = bn_momenta[i];
  for (size_t i = 0; i < rows.size(); ++i) rows[i]->momentum = row_momenta[i];
}

namespace {

struct CalibSlot {
  PolyBatchNormParams* bn = nullptr;
  RunningRowSumParams* rs = nullptr;

  double momentum() const { return bn ? bn->momentum : rs->momentum; }
  void set_momentum(double m) const {
    if (bn) {
      bn->momentum = m;
    } else {
      rs->momentum = m;
    }
  }
};

// Every running-statistic module in forward execution order.
std::vector<CalibSlot> calibration_order(PolyNeXtModel& model) {
  std::vector<CalibSlot> slots;
  auto take = [&](NormModule& n) {
    if (n.kind == NormKind::kPolyBatchNorm) slots.push_back({&n.bn, nullptr});
  };
  for (Stage& s : model.stages) {
    for (Cell& c : s.cells) {
      take(c.pre_norm);
      for (Sublayer& sub : c.sublayers) {
        if (sub.conv) take(sub.conv->norm);
        if (sub.mlp) take(sub.mlp->norm);
        if (sub.attn && sub.attn->running_norm) {
          slots.push_back({nullptr, &sub.attn->rowsum});
          slots.push_back({&sub.attn->pre_out_norm, nullptr});
        }
      }
    }
  }
  take(model.head_norm);
  take(model.head.norm);
  return slots;
}

}  // namespace

void calibrate_infer_stats(PolyNeXtModel& model, Rng& rng, int passes, int64_t batch_size) {
  check(passes >= 1, "calibrate_infer_stats: need at least one pass");
  // Sequential front-to-back estimation: a module's input statistics depend
  // only on modules before it, so measuring one module per pass (all others
  // frozen at inference behavior via momentum 0) yields self-consistent
  // buffers in a single sweep. Joint overwrite iteration oscillates instead:
  // deep products react violently to upstream scale changes.
  std::vector<CalibSlot> slots = calibration_order(model);
  std::vector<double> saved;
  for (const CalibSlot& s : slots) saved.push_back(s.momentum());
  for (const CalibSlot& s : slots) s.set_momentum(0.0);
  for (const CalibSlot& s : slots) {
    for (int p = 0; p < passes; ++p) {
      s.set_momentum(1.0 / static_cast<double>(p + 1));  // running true mean
      Tensor x = rng.normal_tensor({batch_size, 3, model.config.resolution, model.config.resolution}, 0, 1);
      Tape t;
      model.forward(t, t.constant(x), ForwardOptions{.mode = Mode::kCalibrate});
    }
    s.set_momentum(0.0);
  }
  for (size_t i = 0; i < slots.size(); ++i) slots[i].set_momentum(saved[i]);
}

std::vector<ParamEntry> PolyNeXtModel::parameters() {
  std::vector<ParamEntry> out;
  Registrar r{&out, nullptr};
  register_model(r, *this);
  return out;
}

std::vector<BufferEntry> PolyNeXtModel::buffers() {
  std::vector<BufferEntry> out;
  Registrar r{nullptr, &out};
  register_model(r, *this);
  return out;
}

int64_t PolyNeXtModel::param_count() {
  int64_t n = 0;
  for (const ParamEntry& e : parameters()) n += e.tensor->numel();
  return n;
}

namespace {

int64_t conv_macs(int64_t out_c, int64_t in_per_group, int64_t k, int64_t map) {
  return out_c * in_per_group * k * k * map;
}

}  // namespace

FlopsBreakdown PolyNeXtModel::flops_estimate(int64_t resolution) const {
  FlopsBreakdown fb;
  int n_stages = config.stages();
  std::vector<int64_t> res = stage_resolutions(resolution, n_stages);
  int64_t stem_map = res[0] * res[0];
  fb.conv += conv_macs(config.channels[0], 3, 7, stem_map);

  for (int s = 0; s < n_stages; ++s) {
    int64_t c = config.channels[static_cast<size_t>(s)];
    int64_t map = res[static_cast<size_t>(s)] * res[static_cast<size_t>(s)];
    int64_t n_cells = config.cells[static_cast<size_t>(s)];
    int64_t n_stacks = config.stacks[static_cast<size_t>(s)];
    if (s > 0) {
      int64_t c_prev = config.channels[static_cast<size_t>(s - 1)];
      fb.conv += 2 * conv_macs(c, c_prev, 3, map);  // both skip paths
    }
    int64_t mlp_h = ModelConfig::mlp_hidden(c, s, n_stages);
    int64_t conv_h = ModelConfig::conv_hidden(c, s, n_stages);
    int64_t sublayer_pairs = n_cells * n_stacks;

    // PolyMLP: W_a, W_b, W_o per position.
    fb.linear += sublayer_pairs * map * (2 * mlp_h * c + c * mlp_h);

    if (config.mixers[static_cast<size_t>(s)] == MixerKind::kPolyConv) {
      int64_t coarse_k = s == 0 ? 3 : 5;
      int64_t mixer = conv_macs(conv_h, c, 1, map) + conv_macs(conv_h, 1, coarse_k, map) +
                      2 * conv_macs(conv_h, 1, 3, map) + conv_macs(c, conv_h, 1, map);
      fb.conv += sublayer_pairs * mixer;
    } else {
      int64_t heads = (c + 63) / 64;
      int64_t d = heads * 32;
      int64_t n = map;
      int64_t proj = n * (2 * d * c + c * d);          // qk, v, out projections
      int64_t dw = 3 * conv_macs(d, 1, 3, map);        // depthwise on Q,K,V
      int64_t attn = 2 * n * n * d;                    // QK^T and AV
      int64_t kernel = (config.attn_degree - 1) * heads * n * n;
      fb.linear += sublayer_pairs * proj;
      fb.conv += sublayer_pairs * dw;
      fb.attention += sublayer_pairs * (attn + kernel);
    }
  }
  int64_t c_last = config.channels.back();
  fb.linear += 2 * c_last * c_last + c_last * config.num_classes;
  return fb;
}

}  // namespace polynext
