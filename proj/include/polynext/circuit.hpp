#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "polynext/tensor.hpp"

namespace polynext {

/// Directed acyclic graph over exactly four node kinds; being closed under
/// this kind set is the certificate that inference is additions and
/// multiplications only.
enum class CircuitNodeKind : int32_t { kInput = 0, kConst = 1, kAdd = 2, kMul = 3 };

struct CircuitNode {
  CircuitNodeKind kind = CircuitNodeKind::kConst;
  int32_t a = -1, b = -1;    // operand ids (ADD/MUL)
  double value = 0.0;        // CONST payload
  int64_t input_index = -1;  // INPUT payload
};

class ArithmeticCircuit {
 public:
  std::vector<CircuitNode> nodes;
  std::vector<int32_t> outputs;
  int64_t input_count = 0;

  int32_t add_input(int64_t index);
  int32_t add_const(double value);
  int32_t add(int32_t a, int32_t b);
  int32_t mul(int32_t a, int32_t b);

  int64_t size() const { return static_cast<int64_t>(nodes.size()); }

  /// Per-node degree bound: INPUT 1, CONST 0, ADD max, MUL sum (saturating).
  std::vector<int64_t> degrees() const;

 private:
  int32_t push(CircuitNode n);
};

std::vector<double> eval_circuit(const ArithmeticCircuit& c, const std::vector<double>& inputs);

struct PolynomialCertificate {
  bool ok = false;
  std::vector<int32_t> offending;  // node ids with kinds outside the whitelist
  int64_t node_count = 0;
  int64_t max_degree = 0;  // over the outputs
  int64_t mul_depth = 0;   // longest chain of nonconstant*nonconstant products
};

PolynomialCertificate verify_polynomial(const ArithmeticCircuit& c);

/// Text format, one node per line:
///   <id> INPUT <index> | <id> CONST <value> | <id> ADD <a> <b> | <id> MUL <a> <b>
/// then a final `OUTPUTS <id...>` line. Ids are dense from 0, operands
/// precede their node, constants carry 17 significant digits.
void write_circuit(const ArithmeticCircuit& c, const std::string& path);
ArithmeticCircuit read_circuit(const std::string& path);

}  // namespace polynext
