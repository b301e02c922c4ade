#include "polynext/verify_suites.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>

#include "polynext/fold.hpp"
#include "polynext/grad_check.hpp"
#include "polynext/ops.hpp"
#include "polynext/optim.hpp"
#include "polynext/trainer.hpp"

namespace polynext {

namespace {

std::string fmt(const char* pattern, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), pattern, a, b);
  return buf;
}

void push(std::vector<CheckResult>& out, const std::string& name, bool ok, const std::string& detail) {
  out.push_back({name, ok, detail});
}

// Random-functional gradient check of a tensor-to-tensor map: loss is a fixed
// random linear functional of the output, keeping every component of the true
// gradient well away from the finite-difference noise floor.
double functional_grad_error(const std::function<Var(Tape&)>& fwd, Tensor& target, Rng& rng, double step) {
  Tensor weights;
  {
    Tape probe;
    weights = rng.normal_tensor(probe.shape(fwd(probe)), 0, 1);
  }
  auto f = [&](Tape& t) { return sum_all(t, hadamard(t, fwd(t), t.constant(weights))); };
  return grad_check(f, target, step).max_rel_error;
}

ModelConfig toy_model_config(NormKind norm) {
  ModelConfig cfg;
  cfg.channels = {6, 8, 8};
  cfg.cells = {1, 1, 1};
  cfg.stacks = {1, 1, 1};
  cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyConv};
  cfg.num_classes = 4;
  cfg.resolution = 16;
  cfg.norm = norm;
  return cfg;
}

}  // namespace

std::vector<CheckResult> verify_gradcheck() {
  std::vector<CheckResult> out;
  Rng rng(20240801);
  const double tol = 1e-5;

  // -- primitive ops, three random shapes each --------------------------------
  struct ShapeCase {
    Shape a, b;
  };
  {
    double worst = 0.0;
    std::vector<ShapeCase> shapes = {{{3, 4}, {4, 5}}, {{2, 2, 3}, {2, 3, 2}}, {{5, 2}, {2, 2}}};
    for (auto& sc : shapes) {
      Tensor a = rng.normal_tensor(sc.a, 0, 1), b = rng.normal_tensor(sc.b, 0, 1);
      auto fwd = [&](Tape& t) { return matmul(t, t.param(a), t.param(b)); };
      worst = std::max(worst, functional_grad_error(fwd, a, rng, 1e-5));
      worst = std::max(worst, functional_grad_error(fwd, b, rng, 1e-5));
    }
    push(out, "matmul gradient vs central differences", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    double worst = 0.0;
    for (Shape s : {Shape{6}, Shape{2, 5}, Shape{2, 2, 3}}) {
      Tensor a = rng.normal_tensor(s, 0, 1), b = rng.normal_tensor(s, 0, 1);
      auto fwd = [&](Tape& t) { return hadamard(t, t.param(a), t.param(b)); };
      worst = std::max(worst, functional_grad_error(fwd, a, rng, 1e-5));
      worst = std::max(worst, functional_grad_error(fwd, b, rng, 1e-5));
    }
    push(out, "hadamard gradient", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    double worst = 0.0;
    struct ConvCase {
      Shape x, w;
      Conv2dSpec spec;
    };
    std::vector<ConvCase> cases = {
        {{2, 3, 5, 5}, {4, 3, 3, 3}, {.stride = 2, .padding = 1}},
        {{1, 4, 6, 6}, {4, 1, 3, 3}, {.stride = 1, .padding = 2, .dilation = 2, .groups = 4}},
        {{2, 4, 4, 4}, {6, 2, 1, 1}, {.stride = 1, .padding = 0, .dilation = 1, .groups = 2}},
    };
    for (auto& cc : cases) {
      Tensor x = rng.normal_tensor(cc.x, 0, 1);
      Tensor w = rng.normal_tensor(cc.w, 0, 0.5);
      Tensor b = rng.normal_tensor({cc.w[0]}, 0, 0.2);
      auto fwd = [&](Tape& t) { return conv2d(t, t.param(x), t.param(w), t.param(b), cc.spec); };
      worst = std::max(worst, functional_grad_error(fwd, x, rng, 1e-5));
      worst = std::max(worst, functional_grad_error(fwd, w, rng, 1e-5));
      worst = std::max(worst, functional_grad_error(fwd, b, rng, 1e-5));
    }
    push(out, "conv2d gradient (strided, dilated depthwise, grouped)", worst < tol,
         fmt("max rel err %.2e", worst));
  }
  {
    double worst = 0.0;
    for (int i = 0; i < 3; ++i) {
      int64_t n = 2 + i, d = 4 + i;
      Tensor x = rng.normal_tensor({n, d}, 0, 1);
      auto p = LayerNormParams::make(d);
      p.gamma = rng.normal_tensor({d}, 1, 0.2);
      p.beta = rng.normal_tensor({d}, 0, 0.2);
      auto fwd = [&](Tape& t) { return layer_norm(t, t.param(x), p); };
      worst = std::max(worst, functional_grad_error(fwd, x, rng, 1e-5));
      worst = std::max(worst, functional_grad_error(fwd, p.gamma, rng, 1e-5));
      worst = std::max(worst, functional_grad_error(fwd, p.beta, rng, 1e-5));
    }
    push(out, "layer_norm gradient", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    double worst = 0.0;
    for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
      auto p = PolyBatchNormParams::make(3, 2, 2);
      p.gamma_c = rng.normal_tensor({3}, 1, 0.2);
      p.gamma_hw = rng.normal_tensor({4}, 1, 0.2);
      Tensor x = rng.normal_tensor({2, 3, 2, 2}, 0, 1);
      auto fwd = [&](Tape& t) { return poly_bn_forward(t, t.param(x), p, mode); };
      worst = std::max(worst, functional_grad_error(fwd, x, rng, 1e-5));
      worst = std::max(worst, functional_grad_error(fwd, p.gamma_c, rng, 1e-5));
      worst = std::max(worst, functional_grad_error(fwd, p.beta_hw, rng, 1e-5));
    }
    push(out, "poly_bn gradient (train and infer)", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    double worst = 0.0;
    auto p = RunningRowSumParams::make(2, 3);
    p.gamma = rng.uniform_tensor({2, 3}, 0.5, 1.5);
    Tensor a = rng.uniform_tensor({4, 3, 3}, 0.1, 2.0);
    auto fwd = [&](Tape& t) { return rowsum_norm_forward(t, t.param(a), p, Mode::kInfer); };
    worst = std::max(worst, functional_grad_error(fwd, a, rng, 1e-5));
    worst = std::max(worst, functional_grad_error(fwd, p.gamma, rng, 1e-5));
    Tensor l1in = rng.uniform_tensor({2, 3, 3}, 0.1, 2.0);
    auto l1 = [&](Tape& t) { return l1_row_normalize(t, t.param(l1in), 1e-6); };
    worst = std::max(worst, functional_grad_error(l1, l1in, rng, 1e-5));
    push(out, "attention normalizer gradients (rowsum, l1)", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    double worst = 0.0;
    Tensor scores = rng.normal_tensor({4, 3, 3}, 0, 1);
    Tensor logits = rng.normal_tensor({2}, -1, 0.5);
    for (int degree : {1, 3, 4}) {
      auto fwd = [&](Tape& t) { return poly_kernel(t, t.param(scores), t.param(logits), degree); };
      worst = std::max(worst, functional_grad_error(fwd, scores, rng, 1e-5));
      worst = std::max(worst, functional_grad_error(fwd, logits, rng, 1e-5));
    }
    push(out, "poly_kernel gradient (p in {1,3,4})", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    double worst = 0.0;
    for (int i = 0; i < 3; ++i) {
      Tensor x = rng.normal_tensor({2, 3, 2 + i, 2 + i}, 0, 1);
      auto fwd = [&](Tape& t) {
        Var tokens = nchw_to_tokens(t, t.param(x));
        Var sq = hadamard(t, tokens, tokens);
        return global_avg_pool(t, tokens_to_nchw(t, sq, 2, 3, 2 + i, 2 + i));
      };
      worst = std::max(worst, functional_grad_error(fwd, x, rng, 1e-5));
    }
    Tensor flips = rng.normal_tensor({1, 5, 2, 2}, 0, 1);
    auto ff = [&](Tape& t) { return channel_flip(t, t.param(flips)); };
    worst = std::max(worst, functional_grad_error(ff, flips, rng, 1e-5));
    push(out, "layout/pool/flip gradients", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    Tensor logits = rng.normal_tensor({4, 6}, 0, 2);
    auto f = [&](Tape& t) { return cross_entropy_label_smooth(t, t.param(logits), {0, 2, 4, 5}, 0.1); };
    double err = grad_check(f, logits, 1e-5).max_rel_error;
    push(out, "label-smoothed cross entropy gradient", err < tol, fmt("max rel err %.2e", err));
  }

  // -- poly modules, every parameter tensor and the input ---------------------
  {
    double worst = 0.0;
    PolyMlp mlp = PolyMlp::make(4, 4, 3, NormKind::kLayerNorm, rng);
    Tensor x = rng.normal_tensor({3, 4}, 0, 1);
    auto fwd = [&](Tape& t) { return mlp.forward_rows(t, t.param(x), Mode::kInfer, 3, 1, 1); };
    for (Tensor* p : {&x, &mlp.w_a, &mlp.b_a, &mlp.w_b, &mlp.b_b, &mlp.w_o, &mlp.b_o, &mlp.norm.ln.gamma,
                      &mlp.norm.ln.beta}) {
      worst = std::max(worst, functional_grad_error(fwd, *p, rng, 1e-5));
    }
    PolyHead head = PolyHead::make(4, 4, 3, NormKind::kLayerNorm, rng);
    auto hf = [&](Tape& t) { return head.forward_rows(t, t.param(x), Mode::kInfer); };
    for (Tensor* p : {&x, &head.w_a, &head.w_b, &head.w_o, &head.b_o}) {
      worst = std::max(worst, functional_grad_error(hf, *p, rng, 1e-5));
    }
    push(out, "poly_mlp/poly_head gradients (all parameters)", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    double worst = 0.0;
    for (int stage : {1, 2}) {
      PolyConv conv = PolyConv::make(8, 8, stage, NormKind::kLayerNorm, rng);
      Tensor x = rng.normal_tensor({1, 8, 7, 7}, 0, 1);
      auto fwd = [&](Tape& t) { return conv.forward(t, t.param(x), Mode::kInfer); };
      for (Tensor* p : {&x, &conv.w_in, &conv.b_in, &conv.k_coarse, &conv.b_coarse, &conv.k_fine,
                        &conv.b_fine, &conv.k_merge, &conv.b_merge, &conv.w_out, &conv.b_out,
                        &conv.norm.ln.gamma, &conv.norm.ln.beta}) {
        worst = std::max(worst, functional_grad_error(fwd, *p, rng, 1e-5));
      }
    }
    push(out, "poly_conv gradients (stage-1 and stage-2 kernels)", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    double worst = 0.0;
    PolyAttn attn = PolyAttn::make(4, 4, NormKind::kLayerNorm, rng);
    Tensor x = rng.normal_tensor({1, 4, 2, 2}, 0, 0.7);
    auto fwd = [&](Tape& t) { return attn.forward(t, t.param(x), Mode::kInfer); };
    for (Tensor* p : {&x, &attn.w_qk, &attn.b_qk, &attn.w_v, &attn.b_v, &attn.dw_q, &attn.dwb_q, &attn.dw_k,
                      &attn.dwb_k, &attn.dw_v, &attn.dwb_v, &attn.lambda_scale, &attn.w_out, &attn.b_out}) {
      worst = std::max(worst, functional_grad_error(fwd, *p, rng, 1e-5));
    }
    PolyAttn bn_attn = PolyAttn::make(4, 4, NormKind::kPolyBatchNorm, rng, 2, 2);
    Tensor xb = rng.normal_tensor({2, 4, 2, 2}, 0, 0.7);
    auto bf = [&](Tape& t) { return bn_attn.forward(t, t.param(xb), Mode::kInfer); };
    for (Tensor* p : {&xb, &bn_attn.w_qk, &bn_attn.rowsum.gamma, &bn_attn.pre_out_norm.gamma_c}) {
      worst = std::max(worst, functional_grad_error(bf, *p, rng, 1e-5));
    }
    push(out, "poly_attn gradients (l1 and running-norm forms)", worst < tol, fmt("max rel err %.2e", worst));
  }
  {
    // Full toy model end to end at 1e-4.
    ModelConfig cfg;
    cfg.channels = {4, 6, 6};
    cfg.cells = {1, 1, 2};
    cfg.stacks = {1, 1, 1};
    cfg.mixers.assign(3, MixerKind::kPolyConv);
    cfg.num_classes = 3;
    cfg.resolution = 16;
    PolyNeXtModel m = PolyNeXtModel::build(cfg, 99);
    Tensor x = rng.normal_tensor({1, 3, 16, 16}, 0, 1);
    std::vector<int> labels = {1};
    auto f = [&](Tape& t) {
      Var logits = m.forward(t, t.param(x), ForwardOptions{});
      return cross_entropy_label_smooth(t, logits, labels, 0.1);
    };
    // Two finite-difference steps: the deep composite mixes components in the
    // roundoff regime with components in the truncation regime, and either
    // step alone can sit on the wrong side for a few of them.
    auto two_step = [&](Tensor& target) {
      return std::min(grad_check(f, target, 1e-5).max_rel_error, grad_check(f, target, 1e-4).max_rel_error);
    };
    double worst = two_step(x);
    worst = std::max(worst, two_step(m.stem_w));
    worst = std::max(worst, two_step(m.head.w_a));
    worst = std::max(worst, two_step(m.stages[1].cells[0].gate_logits[0]));
    worst = std::max(worst, two_step(m.stages[2].cells[1].skip.s1));
    push(out, "toy model end-to-end gradient (tol 1e-4)", worst < 1e-4, fmt("max rel err %.2e", worst));
  }
  return out;
}

std::vector<CheckResult> verify_degree2() {
  std::vector<CheckResult> out;
  Rng rng(20240802);

  auto third_diff = [](const std::function<Tensor(const Tensor&)>& f, const Tensor& x0, const Tensor& v,
                       double h) {
    std::vector<Tensor> ys;
    for (int s = -2; s <= 2; ++s) {
      Tensor x = x0;
      for (int64_t i = 0; i < x.numel(); ++i) x[i] += s * h * v[i];
      ys.push_back(f(x));
    }
    double worst = 0.0, scale = 0.0;
    for (const Tensor& y : ys) scale = std::max(scale, y.max_abs());
    for (int base = 0; base + 3 < 5; ++base) {
      for (int64_t i = 0; i < ys[0].numel(); ++i) {
        double d3 = ys[base + 3][i] - 3 * ys[base + 2][i] + 3 * ys[base + 1][i] - ys[base][i];
        worst = std::max(worst, std::abs(d3));
      }
    }
    return scale > 0 ? worst / scale : worst;
  };

  {
    PolyMlp mlp = PolyMlp::make(6, 6, 4, NormKind::kIdentity, rng);
    mlp.b_a = rng.normal_tensor({6}, 0, 0.3);
    mlp.b_b = rng.normal_tensor({6}, 0, 0.3);
    auto f = [&](const Tensor& x) {
      Tape t;
      return t.value(mlp.forward_rows(t, t.constant(x), Mode::kInfer, x.dim(0), 1, 1));
    };
    double worst = 0.0;
    for (int line = 0; line < 100; ++line) {
      Tensor x0 = rng.normal_tensor({1, 6}, 0, 1);
      Tensor v = rng.normal_tensor({1, 6}, 0, 1);
      worst = std::max(worst, third_diff(f, x0, v, 0.37));
    }
    push(out, "poly_mlp degree-2 line property (100 lines)", worst < 1e-9,
         fmt("max third difference %.2e (relative)", worst));
  }
  {
    PolyConv conv = PolyConv::make(4, 4, 2, NormKind::kIdentity, rng);
    auto f = [&](const Tensor& x) {
      Tape t;
      return t.value(conv.forward(t, t.constant(x), Mode::kInfer));
    };
    double worst = 0.0;
    for (int line = 0; line < 100; ++line) {
      Tensor x0 = rng.normal_tensor({1, 4, 5, 5}, 0, 1);
      Tensor v = rng.normal_tensor({1, 4, 5, 5}, 0, 1);
      worst = std::max(worst, third_diff(f, x0, v, 0.4));
    }
    push(out, "poly_conv hadamard-core degree-2 line property (100 lines)", worst < 1e-9,
         fmt("max third difference %.2e (relative)", worst));
  }
  return out;
}

std::vector<CheckResult> verify_sigmoid_fold(int64_t resolution) {
  std::vector<CheckResult> out;
  ModelConfig cfg = ModelConfig::cpolynext('T');
  cfg.norm = NormKind::kPolyBatchNorm;
  cfg.resolution = resolution;
  cfg.num_classes = 1000;
  PolyNeXtModel model = PolyNeXtModel::build(cfg, 7);
  Rng warm(8);
  calibrate_infer_stats(model, warm, 1, 2);
  FoldedModel folded = fold_sigmoid_scale(model);
  Rng rng(9);
  double worst = 0.0;
  bool finite = true;
  for (int trial = 0; trial < 20; ++trial) {
    // Untrained degree-2^72 polynomials have heavy tails; inputs drawn at the
    // calibrated operating scale keep the comparison inside f64 range.
    Tensor x = rng.normal_tensor({1, 3, resolution, resolution}, 0, 0.5);
    Tensor a = model.predict(x);
    Tensor b = folded.forward(x);
    finite = finite && a.all_finite() && b.all_finite();
    worst = std::max(worst, max_abs_diff(a, b));
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "max abs logits diff %.3e over 20 inputs at %lldx%lld%s", worst,
                (long long)resolution, (long long)resolution, finite ? "" : " (NON-FINITE OUTPUT)");
  push(out, "sigmoid-scale absorption on CPolyNeXt-T-BN (full 72-sublayer depth)", finite && worst < 1e-10,
       buf);
  return out;
}

std::vector<CheckResult> verify_bn_fold() {
  std::vector<CheckResult> out;
  Rng rng(20240803);
  {
    // poly_bn infer equals the precomputed per-position affine within 1e-12.
    auto p = PolyBatchNormParams::make(3, 2, 2);
    p.gamma_c = rng.normal_tensor({3}, 1, 0.3);
    p.beta_c = rng.normal_tensor({3}, 0, 0.3);
    p.gamma_hw = rng.normal_tensor({4}, 1, 0.3);
    p.beta_hw = rng.normal_tensor({4}, 0, 0.3);
    p.running_mean = rng.normal_tensor({4}, 0, 1);
    p.running_var = rng.uniform_tensor({4}, 0.5, 2.0);
    PerPositionAffine affine = fold_norm_to_affine(p);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Tensor x = rng.normal_tensor({2, 3, 2, 2}, 0, 2);
      Tape t;
      const Tensor& y = t.value(poly_bn_forward(t, t.constant(x), p, Mode::kInfer));
      for (int64_t b = 0; b < 2; ++b)
        for (int64_t c = 0; c < 3; ++c)
          for (int64_t q = 0; q < 4; ++q) {
            int64_t i = (b * 3 + c) * 4 + q;
            double expect = affine.scale[c * 4 + q] * x[i] + affine.shift[c * 4 + q];
            worst = std::max(worst, std::abs(y[i] - expect));
          }
    }
    push(out, "poly_bn infer equals folded per-position affine", worst < 1e-12,
         fmt("max abs diff %.2e over 100 inputs", worst));
  }
  {
    PolyNeXtModel m = PolyNeXtModel::build(toy_model_config(NormKind::kPolyBatchNorm), 11);
    Rng warm(12);
    warm_batch_stats(m, warm, 8, 4);
    FoldedModel fm = fold_inference(m);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
      worst = std::max(worst, max_rel_diff(m.predict(x), fm.forward(x)));
    }
    push(out, "fold_inference equivalence on a toy batch-norm model", worst < 1e-9,
         fmt("max rel diff %.2e over 20 inputs", worst));
  }
  {
    bool rejected = false;
    std::string detail = "no rejection";
    ModelConfig ln = toy_model_config(NormKind::kLayerNorm);
    PolyNeXtModel m = PolyNeXtModel::build(ln, 13);
    try {
      fold_inference(m);
    } catch (const std::exception& e) {
      rejected = true;
      detail = "rejected layer-norm variant";
    }
    push(out, "fold_inference rejects layer-norm variants", rejected, detail);
  }
  return out;
}

std::vector<CheckResult> verify_circuit() {
  std::vector<CheckResult> out;
  Rng rng(20240804);
  PolyNeXtModel m = PolyNeXtModel::build(toy_model_config(NormKind::kPolyBatchNorm), 16);
  Rng warm(17);
  warm_batch_stats(m, warm, 8, 4);
  FoldedModel fm = fold_inference(m);
  ArithmeticCircuit circuit = export_circuit(fm);
  PolynomialCertificate cert = verify_polynomial(circuit);
  {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%lld nodes, max degree %lld, mul depth %lld",
                  (long long)cert.node_count, (long long)cert.max_degree, (long long)cert.mul_depth);
    push(out, "exported circuit passes the ADD/MUL/CONST/INPUT certificate", cert.ok, buf);
  }
  {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = rng.normal_tensor({1, 3, 16, 16}, 0, 1);
      Tensor ref = fm.forward(x);
      std::vector<double> flat(x.data(), x.data() + x.numel());
      std::vector<double> got = eval_circuit(circuit, flat);
      for (size_t i = 0; i < got.size(); ++i) {
        double denom = std::max({std::abs(got[i]), std::abs(ref[static_cast<int64_t>(i)]), 1e-8});
        worst = std::max(worst, std::abs(got[i] - ref[static_cast<int64_t>(i)]) / denom);
      }
    }
    push(out, "circuit evaluation matches the folded model", worst < 1e-6,
         fmt("max rel diff %.2e over 20 inputs", worst));
  }
  {
    // Degree ledger vs a symbolic expansion over two variables for L stacked
    // multiplicative blocks.
    using Poly2 = std::map<std::pair<int, int>, double>;
    bool ok = true;
    std::string detail = "degrees";
    for (int levels = 1; levels <= 4; ++levels) {
      ArithmeticCircuit c;
      std::vector<int32_t> x = {c.add_input(0), c.add_input(1)};
      for (int l = 0; l < levels; ++l) {
        std::vector<int32_t> a(2), bb(2);
        for (int i = 0; i < 2; ++i) {
          int32_t acc_a = c.add_const(rng.normal());
          int32_t acc_b = c.add_const(rng.normal());
          for (int j = 0; j < 2; ++j) {
            acc_a = c.add(acc_a, c.mul(c.add_const(rng.normal()), x[static_cast<size_t>(j)]));
            acc_b = c.add(acc_b, c.mul(c.add_const(rng.normal()), x[static_cast<size_t>(j)]));
          }
          a[static_cast<size_t>(i)] = acc_a;
          bb[static_cast<size_t>(i)] = acc_b;
        }
        for (int i = 0; i < 2; ++i)
          x[static_cast<size_t>(i)] = c.mul(a[static_cast<size_t>(i)], bb[static_cast<size_t>(i)]);
      }
      c.outputs = {x[0], x[1]};
      int64_t expect = 1;
      for (int l = 0; l < levels; ++l) expect *= 2;

      std::vector<Poly2> sym(c.nodes.size());
      for (size_t i = 0; i < c.nodes.size(); ++i) {
        const CircuitNode& n = c.nodes[i];
        if (n.kind == CircuitNodeKind::kInput) {
          sym[i][{n.input_index == 0 ? 1 : 0, n.input_index == 1 ? 1 : 0}] = 1.0;
        } else if (n.kind == CircuitNodeKind::kConst) {
          if (n.value != 0.0) sym[i][{0, 0}] = n.value;
        } else if (n.kind == CircuitNodeKind::kAdd) {
          sym[i] = sym[static_cast<size_t>(n.a)];
          for (const auto& [mono, coef] : sym[static_cast<size_t>(n.b)]) sym[i][mono] += coef;
        } else {
          for (const auto& [ma, ca] : sym[static_cast<size_t>(n.a)])
            for (const auto& [mb, cb] : sym[static_cast<size_t>(n.b)])
              sym[i][{ma.first + mb.first, ma.second + mb.second}] += ca * cb;
        }
      }
      PolynomialCertificate lcert = verify_polynomial(c);
      int sym_deg = 0;
      for (int32_t id : c.outputs) {
        for (const auto& [mono, coef] : sym[static_cast<size_t>(id)]) {
          if (std::abs(coef) > 1e-12) sym_deg = std::max(sym_deg, mono.first + mono.second);
        }
      }
      if (lcert.max_degree != expect || sym_deg != expect) {
        ok = false;
        detail = "mismatch at L=" + std::to_string(levels) + ": ledger " + std::to_string(lcert.max_degree) +
                 ", symbolic " + std::to_string(sym_deg) + ", expected " + std::to_string(expect);
        break;
      }
      detail = "2^L growth confirmed for L=1..4 (ledger == symbolic == 2,4,8,16)";
    }
    push(out, "degree ledger reproduces 2^L growth vs the symbolic oracle", ok, detail);
  }
  return out;
}

std::vector<CheckResult> verify_attention() {
  std::vector<CheckResult> out;
  Rng rng(20240805);
  {
    double init_err = 0.0;
    PolyAttn attn = PolyAttn::make(96, 4, NormKind::kLayerNorm, rng);
    for (int64_t h = 0; h < attn.heads; ++h) {
      double s = 1.0 / (1.0 + std::exp(-attn.lambda_scale[h]));
      init_err = std::max(init_err, std::abs(s - 1.0 / std::sqrt(32.0)));
    }
    push(out, "sigma(lambda_scale) initializes to 32^(-1/2)", init_err < 1e-12,
         fmt("max deviation %.2e", init_err));
  }
  {
    // Non-negative pre-normalization weights, unit row sums, via the module's
    // own tensors on random inputs.
    PolyAttn attn = PolyAttn::make(8, 4, NormKind::kLayerNorm, rng);
    double min_weight = 1e300, row_err = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
      Tensor x = rng.normal_tensor({2, 8, 3, 3}, 0, 1.5);
      Tape t;
      Var tokens = nchw_to_tokens(t, t.constant(x));
      Var qk = linear(t, tokens, t.constant(attn.w_qk), t.constant(attn.b_qk));
      Var qmap = tokens_to_nchw(t, qk, 2, 32, 3, 3);
      Conv2dSpec dw{.stride = 1, .padding = 1, .dilation = 1, .groups = 32};
      Var q = conv2d(t, qmap, t.constant(attn.dw_q), t.constant(attn.dwb_q), dw);
      Var k = conv2d(t, qmap, t.constant(attn.dw_k), t.constant(attn.dwb_k), dw);
      Var qh = split_heads(t, nchw_to_tokens(t, q), 2, 9, attn.heads, 32);
      Var kh = split_heads(t, nchw_to_tokens(t, k), 2, 9, attn.heads, 32);
      Var scores = matmul(t, qh, transpose_last2(t, kh));
      Var kernel = poly_kernel(t, scores, t.constant(attn.lambda_scale), attn.degree);
      const Tensor& kv = t.value(kernel);
      for (int64_t i = 0; i < kv.numel(); ++i) min_weight = std::min(min_weight, kv[i]);
      Var normed = l1_row_normalize(t, kernel, attn.l1_eps);
      const Tensor& nv = t.value(normed);
      for (int64_t r = 0; r < nv.numel() / 9; ++r) {
        double s = 0.0;
        for (int64_t j = 0; j < 9; ++j) s += nv[r * 9 + j];
        row_err = std::max(row_err, std::abs(s - 1.0));
      }
    }
    push(out, "even-degree kernel weights are non-negative", min_weight >= 0.0,
         fmt("min pre-normalization weight %.2e", min_weight));
    push(out, "normalized attention rows sum to 1 within 1e-6", row_err < 1e-6,
         fmt("max |row sum - 1| %.2e", row_err));
  }
  {
    // Ablation degrees construct and take one optimizer step.
    bool ok = true;
    std::string detail;
    for (int degree : {3, 4, 5}) {
      ModelConfig cfg;
      cfg.channels = {4, 4, 6};
      cfg.cells = {1, 1, 1};
      cfg.stacks = {1, 1, 1};
      cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyAttn};
      cfg.num_classes = 3;
      cfg.resolution = 16;
      cfg.attn_degree = degree;
      try {
        PolyNeXtModel m = PolyNeXtModel::build(cfg, 21);
        auto params = m.parameters();
        AdamW opt(params);
        Rng drng(22);
        Tensor x = drng.normal_tensor({2, 3, 16, 16}, 0, 1);
        Tape t;
        Var logits = m.forward(t, t.constant(x), ForwardOptions{.mode = Mode::kTrain});
        Var loss = cross_entropy_label_smooth(t, logits, {0, 1}, 0.1);
        t.backward(loss);
        std::vector<const Tensor*> grads(params.size());
        for (size_t i = 0; i < params.size(); ++i) grads[i] = t.grad_for(*params[i].tensor);
        opt.step(params, grads, 1e-3, 0.01);
        detail += (detail.empty() ? "p=" : ", p=") + std::to_string(degree) + " ok";
      } catch (const std::exception& e) {
        ok = false;
        detail = "degree " + std::to_string(degree) + " failed: " + e.what();
        break;
      }
    }
    push(out, "kernel degrees 3/4/5 construct and train one step", ok, detail);
  }
  return out;
}

std::vector<CheckResult> verify_architecture() {
  std::vector<CheckResult> out;
  struct Target {
    const char* name;
    ModelConfig cfg;
    double millions;
  };
  std::vector<Target> targets = {
      {"CPolyNeXt-T", ModelConfig::cpolynext('T'), 6.4},
      {"CPolyNeXt-S", ModelConfig::cpolynext('S'), 26.0},
      {"APolyNeXt-T", ModelConfig::apolynext('T'), 6.5},
      {"APolyNeXt-S", ModelConfig::apolynext('S'), 26.0},
  };
  for (auto& t : targets) {
    PolyNeXtModel m = PolyNeXtModel::build(t.cfg, 1);
    double mp = static_cast<double>(m.param_count()) / 1e6;
    double dev = (mp - t.millions) / t.millions;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "measured %.3fM vs reference %.1fM (%+.2f%%)", mp, t.millions, 100 * dev);
    push(out, std::string(t.name) + " parameter count within 2%", std::abs(dev) <= 0.02, buf);
  }
  {
    // Stage maps 56/28/14/7 at 224 through a real forward.
    ModelConfig cfg = ModelConfig::cpolynext('T');
    PolyNeXtModel m = PolyNeXtModel::build(cfg, 2);
    auto res = PolyNeXtModel::stage_resolutions(224, 4);
    bool ok = res == std::vector<int64_t>{56, 28, 14, 7};
    Tape t;
    Rng rng(3);
    Var x = t.constant(rng.normal_tensor({1, 3, 224, 224}, 0, 1));
    auto [x2, x1] = m.stem_forward(t, x);
    ok = ok && t.shape(x1) == Shape{1, 48, 56, 56};
    auto pair1 = m.downsample_pair(t, x2, x1, m.stages[1]);
    ok = ok && t.shape(pair1.second) == Shape{1, 96, 28, 28};
    auto pair2 = m.downsample_pair(t, pair1.first, pair1.second, m.stages[2]);
    ok = ok && t.shape(pair2.second) == Shape{1, 192, 14, 14};
    auto pair3 = m.downsample_pair(t, pair2.first, pair2.second, m.stages[3]);
    ok = ok && t.shape(pair3.second) == Shape{1, 288, 7, 7};
    push(out, "stage maps 56/28/14/7 at 224x224", ok, "stem and three downsample transitions");
  }
  {
    auto logits = init_sigmoid_logits(3, SigmoidInitVariant::kStandard);
    auto sig = [](double l) { return 1.0 / (1.0 + std::exp(-l)); };
    double e = std::abs(sig(logits[0]) - 0.5);
    e = std::max(e, std::abs(sig(init_sigmoid_logits(1, SigmoidInitVariant::kLarge)[0]) - 0.3775406687981454));
    e = std::max(e, std::abs(sig(logits[2]) - 0.2689414213699951));
    push(out, "gate schedule values 0.50 / 0.3775 / 0.2689", e < 1e-9, fmt("max deviation %.2e", e));
  }
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const CheckResult& r : results) {
    if (!r.passed) return false;
  }
  return true;
}

std::vector<CheckResult> run_verify_suite(const std::string& name) {
  if (name == "gradcheck") return verify_gradcheck();
  if (name == "degree2") return verify_degree2();
  if (name == "sigmoid-fold") return verify_sigmoid_fold();
  if (name == "bn-fold") return verify_bn_fold();
  if (name == "circuit") return verify_circuit();
  if (name == "attention") return verify_attention();
  if (name == "architecture") return verify_architecture();
  if (name == "all") {
    std::vector<CheckResult> out;
    for (const char* suite : {"gradcheck", "degree2", "sigmoid-fold", "bn-fold", "circuit", "attention",
                              "architecture"}) {
      auto part = run_verify_suite(suite);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  fail("verify: unknown suite '" + name +
       "' (expected gradcheck, degree2, sigmoid-fold, bn-fold, circuit, attention, architecture, all)");
}

}  // namespace polynext
