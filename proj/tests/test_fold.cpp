#include <filesystem>
#include <map>
#include <stdexcept>

#include "doctest.h"
#include "polynext/fold.hpp"
#include "polynext/ops.hpp"
#include "polynext/rng.hpp"

using namespace polynext;

namespace {

ModelConfig toy_bn_config() {
  ModelConfig cfg;
  cfg.channels = {6, 8, 8};
  cfg.cells = {1, 1, 1};
  cfg.stacks = {1, 1, 1};
  cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyConv};
  cfg.num_classes = 4;
  cfg.resolution = 16;
  cfg.norm = NormKind::kPolyBatchNorm;
  return cfg;
}

void populate_bn_stats(PolyNeXtModel& model, uint64_t seed, int batches = 8) {
  Rng rng(seed);
  warm_batch_stats(model, rng, batches, 4);
}

// Bivariate polynomial: exponent pair -> coefficient. The symbolic route for
// checking the degree ledger.
using Poly2 = std::map<std::pair<int, int>, double>;

std::vector<Poly2> symbolic_eval(const ArithmeticCircuit& c) {
  std::vector<Poly2> values(c.nodes.size());
  for (size_t i = 0; i < c.nodes.size(); ++i) {
    const CircuitNode& n = c.nodes[i];
    switch (n.kind) {
      case CircuitNodeKind::kInput:
        values[i][{n.input_index == 0 ? 1 : 0, n.input_index == 1 ? 1 : 0}] = 1.0;
        break;
      case CircuitNodeKind::kConst:
        if (n.value != 0.0) values[i][{0, 0}] = n.value;
        break;
      case CircuitNodeKind::kAdd:
        values[i] = values[static_cast<size_t>(n.a)];
        for (const auto& [mono, coef] : values[static_cast<size_t>(n.b)]) values[i][mono] += coef;
        break;
      case CircuitNodeKind::kMul:
        for (const auto& [ma, ca] : values[static_cast<size_t>(n.a)]) {
          for (const auto& [mb, cb] : values[static_cast<size_t>(n.b)]) {
            values[i][{ma.first + mb.first, ma.second + mb.second}] += ca * cb;
          }
        }
        break;
      default:
        break;
    }
  }
  return values;
}

int symbolic_degree(const Poly2& p) {
  int deg = 0;
  for (const auto& [mono, coef] : p) {
    if (std::abs(coef) > 1e-12) deg = std::max(deg, mono.first + mono.second);
  }
  return deg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("gate absorption scales trailing projections by sigmoid(lambda)") {
  ModelConfig cfg = toy_bn_config();
  cfg.norm = NormKind::kLayerNorm;
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 1);
  Cell& cell = m.stages[0].cells[0];
  cell.gate_logits[1][0] = 0.0;  // the first MLP sublayer: sigma = 0.5
  FoldedModel fm = fold_sigmoid_scale(m);
  const FoldedMlp& mlp = *fm.stages[0].cells[0].sublayers[1].mlp;
  const PolyMlp& orig = *cell.sublayers[1].mlp;
  CHECK(max_abs_diff(mlp.w_o, 0.5 * orig.w_o) == 0.0);
  CHECK(max_abs_diff(mlp.b_o, 0.5 * orig.b_o) == 0.0);

  cell.gate_logits[1][0] = -20.0;  // gate closed: folded weights ~ 0
  FoldedModel fm2 = fold_sigmoid_scale(m);
  CHECK(fm2.stages[0].cells[0].sublayers[1].mlp->w_o.max_abs() < 1e-8 * orig.w_o.max_abs() + 1e-12);
}

TEST_CASE("sigmoid fold preserves layer-norm variant logits") {
  ModelConfig cfg = toy_bn_config();
  cfg.norm = NormKind::kLayerNorm;
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 2);
  FoldedModel fm = fold_sigmoid_scale(m);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
    Tensor a = m.predict(x);
    Tensor b = fm.forward(x);
    CHECK(max_abs_diff(a, b) < 1e-11);
  }
}

TEST_CASE("sigmoid fold preserves batch-norm variant logits") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_bn_config(), 4);
  populate_bn_stats(m, 5);
  FoldedModel fm = fold_sigmoid_scale(m);
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
    CHECK(max_abs_diff(m.predict(x), fm.forward(x)) < 1e-12);
  }
}

TEST_CASE("full fold matches infer within 1e-9 relative on random inputs") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_bn_config(), 7);
  populate_bn_stats(m, 8);
  FoldedModel fm = fold_inference(m);
  CHECK(fm.fully_folded);
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
    CHECK(max_rel_diff(m.predict(x), fm.forward(x)) < 1e-9);
  }
}

TEST_CASE("layer-norm variants are rejected with every norm named") {
  ModelConfig cfg = toy_bn_config();
  cfg.norm = NormKind::kLayerNorm;
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 10);
  CHECK_THROWS_WITH_AS(fold_inference(m), doctest::Contains("batch-norm variant"), std::runtime_error);

  // Force the deep path: a polybn config whose cells were hand-swapped to
  // layer norms must enumerate them all.
  PolyNeXtModel mixed = PolyNeXtModel::build(toy_bn_config(), 11);
  mixed.stages[0].cells[0].pre_norm = NormModule::layer_norm_over(6);
  mixed.stages[1].cells[0].sublayers[0].conv->norm = NormModule::layer_norm_over(8);
  try {
    fold_inference(mixed);
    FAIL("expected rejection");
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("stage0.cell0.pre_norm") != std::string::npos);
    CHECK(msg.find("stage1.cell0.sub0.conv.norm") != std::string::npos);
  }
}

TEST_CASE("attention variants fold, including the running row-sum constants") {
  ModelConfig cfg = toy_bn_config();
  cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyAttn};
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 12);
  populate_bn_stats(m, 13);
  FoldedModel fm = fold_inference(m);
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
    CHECK(max_rel_diff(m.predict(x), fm.forward(x)) < 1e-9);
  }
  // The layer-norm attention (per-sample l1) cannot fully fold.
  ModelConfig lncfg = cfg;
  lncfg.norm = NormKind::kLayerNorm;
  PolyNeXtModel ln = PolyNeXtModel::build(lncfg, 15);
  CHECK_THROWS(fold_inference(ln));
}

TEST_CASE("exported circuit is a faithful polynomial form of the folded model") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_bn_config(), 16);
  populate_bn_stats(m, 17);
  FoldedModel fm = fold_inference(m);
  ArithmeticCircuit circuit = export_circuit(fm);

  PolynomialCertificate cert = verify_polynomial(circuit);
  CHECK(cert.ok);
  CHECK(cert.max_degree >= 4);  // several multiplicative levels deep
  CHECK(cert.node_count == circuit.size());

  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = rng.normal_tensor({1, 3, 16, 16}, 0, 1);
    Tensor reference = fm.forward(x);
    std::vector<double> flat(x.data(), x.data() + x.numel());
    std::vector<double> out = eval_circuit(circuit, flat);
    REQUIRE(static_cast<int64_t>(out.size()) == reference.numel());
    double worst = 0.0;
    for (size_t i = 0; i < out.size(); ++i) {
      double denom = std::max({std::abs(out[i]), std::abs(reference[static_cast<int64_t>(i)]), 1e-8});
      worst = std::max(worst, std::abs(out[i] - reference[static_cast<int64_t>(i)]) / denom);
    }
    CHECK(worst < 1e-6);
  }

  // File round trip evaluates identically.
  std::string path = temp_path("polynext_model_circuit.txt");
  write_circuit(circuit, path);
  ArithmeticCircuit back = read_circuit(path);
  Tensor x = Rng(19).normal_tensor({1, 3, 16, 16}, 0, 1);
  std::vector<double> flat(x.data(), x.data() + x.numel());
  std::vector<double> o1 = eval_circuit(circuit, flat);
  std::vector<double> o2 = eval_circuit(back, flat);
  for (size_t i = 0; i < o1.size(); ++i) CHECK(o1[i] == o2[i]);
  std::filesystem::remove(path);
}

TEST_CASE("attention circuits lower and evaluate") {
  ModelConfig cfg;
  cfg.channels = {4, 4, 4};
  cfg.cells = {1, 1, 1};
  cfg.stacks = {1, 1, 1};
  cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyAttn};
  cfg.num_classes = 3;
  cfg.resolution = 16;
  cfg.norm = NormKind::kPolyBatchNorm;
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 20);
  populate_bn_stats(m, 21);
  FoldedModel fm = fold_inference(m);
  ArithmeticCircuit circuit = export_circuit(fm);
  CHECK(verify_polynomial(circuit).ok);
  Rng rng(22);
  Tensor x = rng.normal_tensor({1, 3, 16, 16}, 0, 1);
  Tensor reference = fm.forward(x);
  std::vector<double> flat(x.data(), x.data() + x.numel());
  std::vector<double> out = eval_circuit(circuit, flat);
  for (size_t i = 0; i < out.size(); ++i) {
    double denom = std::max({std::abs(out[i]), std::abs(reference[static_cast<int64_t>(i)]), 1e-8});
    CHECK(std::abs(out[i] - reference[static_cast<int64_t>(i)]) / denom < 1e-6);
  }
}

TEST_CASE("node budget guard refuses oversized exports with an estimate") {
  PolyNeXtModel m = PolyNeXtModel::build(toy_bn_config(), 23);
  populate_bn_stats(m, 24);
  FoldedModel fm = fold_inference(m);
  CHECK_THROWS_WITH_AS(export_circuit(fm, 1000), doctest::Contains("estimated"), std::runtime_error);
}

TEST_CASE("degree ledger reproduces 2^L growth against the symbolic oracle") {
  Rng rng(25);
  for (int levels = 1; levels <= 4; ++levels) {
    // L stacked multiplicative blocks on two variables: per block
    // a = A x + p, b = B x + q, x <- a * b (elementwise, width 2).
    ArithmeticCircuit c;
    std::vector<int32_t> x = {c.add_input(0), c.add_input(1)};
    for (int l = 0; l < levels; ++l) {
      std::vector<int32_t> a(2), b(2);
      for (int i = 0; i < 2; ++i) {
        int32_t acc_a = c.add_const(rng.normal());
        int32_t acc_b = c.add_const(rng.normal());
        for (int j = 0; j < 2; ++j) {
          acc_a = c.add(acc_a, c.mul(c.add_const(rng.normal()), x[static_cast<size_t>(j)]));
          acc_b = c.add(acc_b, c.mul(c.add_const(rng.normal()), x[static_cast<size_t>(j)]));
        }
        a[static_cast<size_t>(i)] = acc_a;
        b[static_cast<size_t>(i)] = acc_b;
      }
      for (int i = 0; i < 2; ++i) x[static_cast<size_t>(i)] = c.mul(a[static_cast<size_t>(i)], b[static_cast<size_t>(i)]);
    }
    c.outputs = {x[0], x[1]};

    PolynomialCertificate cert = verify_polynomial(c);
    int64_t expect = 1;
    for (int l = 0; l < levels; ++l) expect *= 2;
    CHECK(cert.max_degree == expect);
    CHECK(cert.mul_depth == levels);

    // The ledger upper bound is attained exactly for generic weights.
    auto symbolic = symbolic_eval(c);
    for (int32_t id : c.outputs) {
      CHECK(symbolic_degree(symbolic[static_cast<size_t>(id)]) == expect);
      CHECK(symbolic_degree(symbolic[static_cast<size_t>(id)]) <= c.degrees()[static_cast<size_t>(id)]);
    }
  }
}

TEST_CASE("residual wrappers keep the ledger at the max of the branches") {
  // y = x + f(x) with deg f = 2: ledger says 2 at depth 1, and composing two
  // residual blocks gives 4.
  ArithmeticCircuit c;
  int32_t x0 = c.add_input(0), x1 = c.add_input(1);
  auto block = [&](int32_t u, int32_t v) {
    int32_t prod = c.mul(u, v);
    return std::pair<int32_t, int32_t>{c.add(u, prod), c.add(v, prod)};
  };
  auto [y0, y1] = block(x0, x1);
  auto [z0, z1] = block(y0, y1);
  c.outputs = {z0, z1};
  auto deg = c.degrees();
  CHECK(deg[static_cast<size_t>(y0)] == 2);
  CHECK(deg[static_cast<size_t>(z0)] == 4);
}

TEST_CASE("sigmoid fold preserves attention models with per-sample l1 normalization") {
  ModelConfig cfg;
  cfg.channels = {6, 8, 8};
  cfg.cells = {1, 1, 1};
  cfg.stacks = {1, 1, 1};
  cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyAttn};
  cfg.num_classes = 4;
  cfg.resolution = 16;
  cfg.norm = NormKind::kLayerNorm;
  PolyNeXtModel m = PolyNeXtModel::build(cfg, 30);
  FoldedModel fm = fold_sigmoid_scale(m);
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = rng.normal_tensor({2, 3, 16, 16}, 0, 1);
    CHECK(max_abs_diff(m.predict(x), fm.forward(x)) < 1e-11);
  }
}
