#include <cstring>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "polynext/config.hpp"
#include "polynext/grad_check.hpp"
#include "polynext/model.hpp"
#include "polynext/ops.hpp"

using namespace polynext;

namespace {

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.channels = {4, 6, 8};
  cfg.cells = {1, 1, 1};
  cfg.stacks = {1, 1, 1};
  cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyConv};
  cfg.num_classes = 5;
  cfg.resolution = 16;
  return cfg;
}

}  // namespace

TEST_CASE("presets match the reference configurations") {
  ModelConfig t = ModelConfig::cpolynext('T');
  CHECK(t.channels == std::vector<int64_t>{48, 96, 192, 288});
  CHECK(t.cells == std::vector<int64_t>{2, 2, 6, 2});
  CHECK(t.stacks == std::vector<int64_t>{3, 3, 3, 3});
  for (MixerKind m : t.mixers) CHECK(m == MixerKind::kPolyConv);

  ModelConfig a = ModelConfig::apolynext('S');
  CHECK(a.channels == std::vector<int64_t>{72, 144, 288, 432});
  CHECK(a.cells == std::vector<int64_t>{3, 3, 8, 3});
  CHECK(a.stacks == std::vector<int64_t>{3, 4, 4, 4});
  CHECK(a.mixers[0] == MixerKind::kPolyConv);
  CHECK(a.mixers[2] == MixerKind::kPolyAttn);

  ModelConfig lr = ModelConfig::cpolynext_lr();
  CHECK(lr.stages() == 3);
  CHECK(lr.channels == std::vector<int64_t>{72, 144, 288});
  CHECK(lr.cells == std::vector<int64_t>{2, 3, 3});
  CHECK(lr.resolution == 32);

  CHECK_THROWS(ModelConfig::cpolynext('X'));
}

TEST_CASE("stage resolutions follow H / 2^(s+1)") {
  CHECK(PolyNeXtModel::stage_resolutions(224, 4) == std::vector<int64_t>{56, 28, 14, 7});
  CHECK(PolyNeXtModel::stage_resolutions(64, 4) == std::vector<int64_t>{16, 8, 4, 2});
  CHECK(PolyNeXtModel::stage_resolutions(32, 3) == std::vector<int64_t>{8, 4, 2});
}

TEST_CASE("build is deterministic in the seed") {
  ModelConfig cfg = toy_config();
  PolyNeXtModel a = PolyNeXtModel::build(cfg, 3);
  PolyNeXtModel b = PolyNeXtModel::build(cfg, 3);
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    REQUIRE(pa[i].tensor->numel() == pb[i].tensor->numel());
    CHECK(std::memcmp(pa[i].tensor->data(), pb[i].tensor->data(),
                      sizeof(double) * pa[i].tensor->numel()) == 0);
  }
  PolyNeXtModel c = PolyNeXtModel::build(cfg, 4);
  bool any_diff = false;
  auto pc = c.parameters();
  for (size_t i = 0; i < pa.size() && !any_diff; ++i) {
    if (std::memcmp(pa[i].tensor->data(), pc[i].tensor->data(), sizeof(double) * pa[i].tensor->numel()) != 0)
      any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("stem output pair references one activation at the stated size") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_config(), 1);
  Tape t;
  Rng rng(2);
  Var x = t.constant(rng.normal_tensor({2, 3, 16, 16}, 0, 1));
  auto [x2, x1] = m.stem_forward(t, x);
  CHECK(x2.id == x1.id);
  CHECK(t.shape(x1) == Shape{2, 4, 4, 4});

  Var bad = t.constant(rng.normal_tensor({1, 3, 6, 6}, 0, 1));
  CHECK_THROWS_WITH_AS(m.stem_forward(t, bad), doctest::Contains("resolution"), std::runtime_error);
}

TEST_CASE("stem resolution arithmetic matches the stated maps") {
  ModelConfig cfg = toy_config();
  cfg.resolution = 224;
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 1);
  Tape t;
  Rng rng(3);
  Var x = t.constant(rng.normal_tensor({1, 3, 224, 224}, 0, 1));
  auto [x2, x1] = m.stem_forward(t, x);
  CHECK(t.shape(x1) == Shape{1, 4, 56, 56});

  Var lr = t.constant(rng.normal_tensor({1, 3, 32, 32}, 0, 1));
  auto [l2, l1] = m.stem_forward(t, lr);
  CHECK(t.shape(l1) == Shape{1, 4, 8, 8});
}

TEST_CASE("downsample pair halves the maps with independent parameters") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_config(), 5);
  Rng rng(6);
  Tensor x2v = rng.normal_tensor({1, 4, 4, 4}, 0, 1);
  Tensor x1v = rng.normal_tensor({1, 4, 4, 4}, 0, 1);
  Stage& stage1 = m.stages[1];

  Tape t;
  auto [y2, y1] = m.downsample_pair(t, t.constant(x2v), t.constant(x1v), stage1);
  CHECK(t.shape(y2) == Shape{1, 6, 2, 2});
  CHECK(t.shape(y1) == Shape{1, 6, 2, 2});

  // Perturbing path 0's conv leaves path 1's output unchanged.
  Tensor saved = t.value(y1);
  stage1.down0_w[0] += 0.5;
  Tape t2;
  auto [z2, z1] = m.downsample_pair(t2, t2.constant(x2v), t2.constant(x1v), stage1);
  CHECK(max_abs_diff(t2.value(z1), saved) == 0.0);
  CHECK(max_abs_diff(t2.value(z2), t.value(y2)) > 0.0);
  stage1.down0_w[0] -= 0.5;

  // Zero weights leave only the bias.
  Stage zs = std::move(m.stages[1]);
  zs.down0_w = Tensor::zeros(zs.down0_w.shape());
  zs.down0_b = Tensor::full({6}, 0.25);
  Tape t3;
  auto [w2, w1] = m.downsample_pair(t3, t3.constant(x2v), t3.constant(x1v), zs);
  for (int64_t i = 0; i < t3.value(w2).numel(); ++i) CHECK(t3.value(w2)[i] == doctest::Approx(0.25));
}

TEST_CASE("parameter registry has unique names and total coverage") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_config(), 7);
  auto params = m.parameters();
  std::set<std::string> names;
  std::set<const Tensor*> ptrs;
  for (const auto& e : params) {
    CHECK(names.insert(e.name).second);
    CHECK(ptrs.insert(e.tensor).second);
  }
  // Decay exemptions: gates, skips, and all norm affines.
  int exempt = 0;
  for (const auto& e : params) {
    if (e.decay_exempt) ++exempt;
    bool should_exempt = e.name.find("gate") != std::string::npos ||
                         e.name.find("skip") != std::string::npos ||
                         e.name.find("norm") != std::string::npos ||
                         e.name.find("lambda_scale") != std::string::npos;
    CHECK(e.decay_exempt == should_exempt);
  }
  CHECK(exempt > 0);
}

TEST_CASE("param_count matches a hand-derived closed form on the toy config") {
  ModelConfig cfg = toy_config();
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 8);

  auto conv_block = [&](int64_t c, int64_t ch, int64_t kc) {
    int64_t w_in = ch * c + ch;
    int64_t coarse = ch * kc * kc + ch;
    int64_t fine = ch * 9 + ch, merge = ch * 9 + ch;
    int64_t w_out = c * ch + c;
    int64_t ln = 2 * c;
    return w_in + coarse + fine + merge + w_out + ln;
  };
  auto mlp_block = [&](int64_t c, int64_t hidden) {
    return 2 * (hidden * c + hidden) + 2 * hidden + c * hidden + c;
  };
  int64_t expect = 0;
  expect += 4 * 3 * 49 + 4;  // stem
  int64_t chans[3] = {4, 6, 8};
  for (int s = 0; s < 3; ++s) {
    int64_t c = chans[s];
    if (s > 0) expect += 2 * (c * chans[s - 1] * 9 + c);
    int64_t mlp_h = s >= 2 ? (7 * c + 7) / 8 : c;
    int64_t conv_h = s >= 2 ? (3 * c + 3) / 4 : c;
    int64_t kc = s == 0 ? 3 : 5;
    expect += conv_block(c, conv_h, kc) + mlp_block(c, mlp_h);  // one stack
    expect += 2 * c;  // skip scalars
    expect += 2 * c;  // pre-cell layer norm
    expect += 2;      // gate logits (2 * S_max = 2 scalars)
  }
  expect += 2 * 8;                                   // head norm
  expect += 2 * (8 * 8 + 8) + 2 * 8 + 5 * 8 + 5;     // poly head
  CHECK(m.param_count() == expect);
}

TEST_CASE("low-resolution preset parameter count lands at the reference 5.5M") {
  PolyNeXtModel m = PolyNeXtModel::build(ModelConfig::cpolynext_lr(), 9);
  double mparams = static_cast<double>(m.param_count()) / 1e6;
  CHECK(mparams == doctest::Approx(5.5).epsilon(0.02));
}

TEST_CASE("toy model forward produces logits and threads stages") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_config(), 10);
  Rng rng(11);
  Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
  Tensor logits = m.predict(x);
  CHECK(logits.shape() == Shape{2, 5});
  CHECK(logits.all_finite());
}

TEST_CASE("all-zero weights give batch-constant logits") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_config(), 12);
  for (auto& e : m.parameters()) {
    for (int64_t i = 0; i < e.tensor->numel(); ++i) (*e.tensor)[i] = 0.0;
  }
  Rng rng(13);
  Tensor x = rng.normal_tensor({3, 3, 16, 16}, 0, 1);
  Tensor logits = m.predict(x);
  for (int64_t b = 1; b < 3; ++b)
    for (int64_t k = 0; k < 5; ++k) CHECK(logits[b * 5 + k] == doctest::Approx(logits[k]).epsilon(1e-12));
}

TEST_CASE("gated-off residuals reduce a cell to the normalized skip") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_config(), 14);
  Cell& cell = m.stages[0].cells[0];
  for (Tensor& l : cell.gate_logits) l[0] = -40.0;  // sigmoid ~ 0
  Rng rng(15);
  Tensor x2 = rng.normal_tensor({1, 4, 4, 4}, 0, 1);
  Tensor x1 = rng.normal_tensor({1, 4, 4, 4}, 0, 1);
  Tape t;
  Var out = m.cell_forward(t, t.constant(x2), t.constant(x1), cell, ForwardOptions{}, 4, 4);
  Tape t2;
  Var combined = multi_input_skip_combine(t2, t2.constant(x2), t2.constant(x1), cell.skip);
  Var expect = cell.pre_norm.forward_nchw(t2, combined, Mode::kInfer);
  CHECK(max_abs_diff(t.value(out), t2.value(expect)) < 1e-12);
}

TEST_CASE("train mode without stochasticity equals inference") {
  SUBCASE("layer norm variant is exact") {
    PolyNeXtModel m = PolyNeXtModel::build(toy_config(), 16);
    Rng rng(17);
    Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
    Tape t;
    Var train_logits = m.forward(t, t.constant(x), ForwardOptions{.mode = Mode::kTrain});
    Tensor infer_logits = m.predict(x);
    CHECK(max_abs_diff(t.value(train_logits), infer_logits) == 0.0);
  }
  SUBCASE("batch norm variant after a momentum-1 freeze") {
    ModelConfig cfg = toy_config();
    cfg.norm = NormKind::kPolyBatchNorm;
    PolyNeXtModel m = PolyNeXtModel::build(cfg, 18);
    for (auto& e : m.buffers()) (void)e;
    // Set momentum to 1 on every batch-norm.
    for (Stage& s : m.stages)
      for (Cell& c : s.cells) {
        c.pre_norm.bn.momentum = 1.0;
        for (Sublayer& sub : c.sublayers) {
          if (sub.conv) sub.conv->norm.bn.momentum = 1.0;
          if (sub.mlp) sub.mlp->norm.bn.momentum = 1.0;
        }
      }
    m.head_norm.bn.momentum = 1.0;
    m.head.norm.bn.momentum = 1.0;
    Rng rng(19);
    Tensor x = rng.normal_tensor({3, 3, 16, 16}, 0, 1);
    Tape t;
    Var train_logits = m.forward(t, t.constant(x), ForwardOptions{.mode = Mode::kTrain});
    Tensor infer_logits = m.predict(x);
    CHECK(max_abs_diff(t.value(train_logits), infer_logits) < 1e-8);
  }
}

TEST_CASE("end-to-end gradient check on a two-cell toy model") {
  ModelConfig cfg;
  cfg.channels = {4, 6, 6};
  cfg.cells = {1, 1, 2};
  cfg.stacks = {1, 1, 1};
  cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyConv};
  cfg.num_classes = 3;
  cfg.resolution = 16;
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 20);
  Rng rng(21);
  Tensor x = rng.normal_tensor({1, 3, 16, 16}, 0, 1);
  std::vector<int> labels = {1};
  auto f = [&](Tape& t) {
    Var logits = m.forward(t, t.param(x), ForwardOptions{});
    return cross_entropy_label_smooth(t, logits, labels, 0.1);
  };
  CHECK(grad_check(f, x, 1e-4).max_rel_error < 1e-4);
  // A few parameter tensors across depths.
  CHECK(grad_check(f, m.stem_w, 1e-4).max_rel_error < 1e-4);
  CHECK(grad_check(f, m.stages[2].cells[1].gate_logits[0], 1e-4).max_rel_error < 1e-4);
  CHECK(grad_check(f, m.head.w_b, 1e-4).max_rel_error < 1e-4);
  CHECK(grad_check(f, m.stages[1].cells[0].skip.s0, 1e-4).max_rel_error < 1e-4);
}

TEST_CASE("doubling a tiny head W_b perturbs logits but not the argmax") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_config(), 22);
  Rng rng(23);
  for (int64_t i = 0; i < m.head.w_b.numel(); ++i) m.head.w_b[i] = 1e-4 * rng.normal();
  Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
  Tensor logits1 = m.predict(x);
  m.head.w_b *= 2.0;
  Tensor logits2 = m.predict(x);
  CHECK(max_abs_diff(logits1, logits2) > 0.0);
  for (int64_t b = 0; b < 2; ++b) {
    int64_t arg1 = 0, arg2 = 0;
    for (int64_t k = 1; k < 5; ++k) {
      if (logits1[b * 5 + k] > logits1[b * 5 + arg1]) arg1 = k;
      if (logits2[b * 5 + k] > logits2[b * 5 + arg2]) arg2 = k;
    }
    CHECK(arg1 == arg2);
  }
}

TEST_CASE("stochastic depth and dropout engage only in training") {
  ModelConfig cfg = toy_config();
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 24);
  Rng rng(25);
  Tensor x = rng.normal_tensor({4, 3, 16, 16}, 0, 1);
  Rng gate_rng(26);
  Tape t;
  Var train_logits = m.forward(
      t, t.constant(x),
      ForwardOptions{.mode = Mode::kTrain, .dropout_rate = 0.3, .stochastic_depth_max = 0.5, .rng = &gate_rng});
  Tensor infer_logits = m.predict(x);
  CHECK(max_abs_diff(t.value(train_logits), infer_logits) > 0.0);
  CHECK(t.value(train_logits).all_finite());
}

TEST_CASE("config json parsing honors presets, overrides and unknown keys") {
  ModelConfig cfg = parse_model_config(R"({"preset": "cpolynext-t", "num_classes": 10, "resolution": 32})");
  CHECK(cfg.channels == std::vector<int64_t>{48, 96, 192, 288});
  CHECK(cfg.num_classes == 10);
  CHECK(cfg.resolution == 32);

  CHECK_THROWS_WITH_AS(parse_model_config(R"({"preset": "cpolynext-t", "colour": 3})"),
                       doctest::Contains("unknown key"), std::runtime_error);
  CHECK_THROWS(parse_model_config("not json"));
  CHECK_THROWS(parse_model_config(R"({"channels": [4, 6]})"));  // missing stage arrays

  ModelConfig full = parse_model_config(R"({
    "channels": [8, 16, 24], "cells": [1, 1, 1], "stacks": [1, 1, 1],
    "mixers": ["polyconv", "polyconv", "polyattn"],
    "norm": "polybn", "num_classes": 10, "resolution": 32,
    "sigmoid_init": "large", "attn_degree": 3, "fusion": "addition"
  })");
  CHECK(full.norm == NormKind::kPolyBatchNorm);
  CHECK(full.mixers[2] == MixerKind::kPolyAttn);
  CHECK(full.attn_degree == 3);
  CHECK(full.fusion == FusionKind::kAddition);

  // Round trip through the emitter.
  ModelConfig again = parse_model_config(model_config_to_json(full));
  CHECK(again.channels == full.channels);
  CHECK(again.norm == full.norm);
  CHECK(again.fusion == full.fusion);
}

TEST_CASE("flops estimate: hand count on a minimal config and the reference budget") {
  // Hand count: stem + one conv stack + one mlp stack per stage + downsamples
  // + head, all at batch 1.
  ModelConfig cfg = toy_config();  // channels 4/6/8, cells 1, stacks 1, res 16
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 1);
  auto maps = PolyNeXtModel::stage_resolutions(16, 3);
  int64_t expect = 4 * 3 * 49 * maps[0] * maps[0];
  int64_t chans[3] = {4, 6, 8};
  for (int s = 0; s < 3; ++s) {
    int64_t c = chans[s], map = maps[s] * maps[s];
    if (s > 0) expect += 2 * c * chans[s - 1] * 9 * map;
    int64_t mlp_h = s >= 2 ? (7 * c + 7) / 8 : c;
    int64_t conv_h = s >= 2 ? (3 * c + 3) / 4 : c;
    int64_t kc = s == 0 ? 3 : 5;
    expect += (conv_h * c + conv_h * kc * kc + 2 * conv_h * 9 + c * conv_h) * map;  // mixer
    expect += 3 * mlp_h * c * map;                                                  // poly mlp
  }
  expect += 2 * 8 * 8 + 8 * 5;  // head
  CHECK(m.flops_estimate(16).total() == expect);

  // Reference attention-variant budget: 5.3G within 10% at 224.
  PolyNeXtModel as = PolyNeXtModel::build(ModelConfig::apolynext('S'), 1);
  double g = static_cast<double>(as.flops_estimate(224).total()) / 1e9;
  CHECK(g == doctest::Approx(5.3).epsilon(0.10));
}

TEST_CASE("non-uniform stacks leave unused gate-logit tail entries untouched") {
  ModelConfig cfg;
  cfg.channels = {4, 6, 8};
  cfg.cells = {1, 1, 1};
  cfg.stacks = {1, 2, 2};  // S_max = 2 -> 4 logits per cell, stage 1 uses 2
  cfg.mixers.assign(3, MixerKind::kPolyConv);
  cfg.num_classes = 3;
  cfg.resolution = 16;
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 44);
  Cell& first = m.stages[0].cells[0];
  REQUIRE(first.gate_logits.size() == 4);
  REQUIRE(first.sublayers.size() == 2);
  double tail2 = first.gate_logits[2][0], tail3 = first.gate_logits[3][0];

  Rng rng(45);
  Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
  Tape t;
  Var logits = m.forward(t, t.param(x), ForwardOptions{.mode = Mode::kTrain});
  Var loss = cross_entropy_label_smooth(t, logits, {0, 1}, 0.1);
  t.backward(loss);
  // Used gates received gradients; unused tail entries did not.
  CHECK(t.grad_for(first.gate_logits[0]) != nullptr);
  CHECK(t.grad_for(first.gate_logits[1]) != nullptr);
  CHECK(t.grad_for(first.gate_logits[2]) == nullptr);
  CHECK(t.grad_for(first.gate_logits[3]) == nullptr);
  CHECK(first.gate_logits[2][0] == tail2);
  CHECK(first.gate_logits[3][0] == tail3);
}
