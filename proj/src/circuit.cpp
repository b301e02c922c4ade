#include "polynext/circuit.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace polynext {

namespace {
constexpr int64_t kDegreeCap = INT64_MAX / 4;
}

int32_t ArithmeticCircuit::push(CircuitNode n) {
  nodes.push_back(n);
  return static_cast<int32_t>(nodes.size() - 1);
}

int32_t ArithmeticCircuit::add_input(int64_t index) {
  check(index >= 0, "circuit: input index must be >= 0");
  input_count = std::max(input_count, index + 1);
  CircuitNode n;
  n.kind = CircuitNodeKind::kInput;
  n.input_index = index;
  return push(n);
}

int32_t ArithmeticCircuit::add_const(double value) {
  CircuitNode n;
  n.kind = CircuitNodeKind::kConst;
  n.value = value;
  return push(n);
}

int32_t ArithmeticCircuit::add(int32_t a, int32_t b) {
  check(a >= 0 && b >= 0 && a < size() && b < size(), "circuit: ADD operands must reference earlier nodes");
  CircuitNode n;
  n.kind = CircuitNodeKind::kAdd;
  n.a = a;
  n.b = b;
  return push(n);
}

int32_t ArithmeticCircuit::mul(int32_t a, int32_t b) {
  check(a >= 0 && b >= 0 && a < size() && b < size(), "circuit: MUL operands must reference earlier nodes");
  CircuitNode n;
  n.kind = CircuitNodeKind::kMul;
  n.a = a;
  n.b = b;
  return push(n);
}

std::vector<int64_t> ArithmeticCircuit::degrees() const {
  std::vector<int64_t> deg(nodes.size(), 0);
  for (size_t i = 0; i < nodes.size(); ++i) {
    const CircuitNode& n = nodes[i];
    switch (n.kind) {
      case CircuitNodeKind::kInput:
        deg[i] = 1;
        break;
      case CircuitNodeKind::kConst:
        deg[i] = 0;
        break;
      case CircuitNodeKind::kAdd:
        deg[i] = std::max(deg[static_cast<size_t>(n.a)], deg[static_cast<size_t>(n.b)]);
        break;
      case CircuitNodeKind::kMul: {
        int64_t s = deg[static_cast<size_t>(n.a)] + deg[static_cast<size_t>(n.b)];
        deg[i] = std::min(s, kDegreeCap);
        break;
      }
      default:
        deg[i] = kDegreeCap;  // unknown kinds are flagged by verify_polynomial
    }
  }
  return deg;
}

std::vector<double> eval_circuit(const ArithmeticCircuit& c, const std::vector<double>& inputs) {
  check(static_cast<int64_t>(inputs.size()) == c.input_count,
        "circuit: expected " + std::to_string(c.input_count) + " inputs, got " + std::to_string(inputs.size()));
  std::vector<double> v(c.nodes.size(), 0.0);
  for (size_t i = 0; i < c.nodes.size(); ++i) {
    const CircuitNode& n = c.nodes[i];
    switch (n.kind) {
      case CircuitNodeKind::kInput:
        v[i] = inputs[static_cast<size_t>(n.input_index)];
        break;
      case CircuitNodeKind::kConst:
        v[i] = n.value;
        break;
      case CircuitNodeKind::kAdd:
        v[i] = v[static_cast<size_t>(n.a)] + v[static_cast<size_t>(n.b)];
        break;
      case CircuitNodeKind::kMul:
        v[i] = v[static_cast<size_t>(n.a)] * v[static_cast<size_t>(n.b)];
        break;
      default:
        fail("circuit: node " + std::to_string(i) + " has an unknown kind");
    }
  }
  std::vector<double> out;
  out.reserve(c.outputs.size());
  for (int32_t id : c.outputs) {
    check(id >= 0 && id < c.size(), "circuit: output id out of range");
    out.push_back(v[static_cast<size_t>(id)]);
  }
  return out;
}

PolynomialCertificate verify_polynomial(const ArithmeticCircuit& c) {
  PolynomialCertificate cert;
  cert.node_count = c.size();
  for (size_t i = 0; i < c.nodes.size(); ++i) {
    int32_t k = static_cast<int32_t>(c.nodes[i].kind);
    if (k < 0 || k > 3) cert.offending.push_back(static_cast<int32_t>(i));
  }
  cert.ok = cert.offending.empty() && !c.outputs.empty();
  if (!cert.ok) return cert;

  std::vector<int64_t> deg = c.degrees();
  // Multiplicative depth: products with a constant operand are plaintext
  // multiplications and do not consume a level.
  std::vector<int64_t> depth(c.nodes.size(), 0);
  for (size_t i = 0; i < c.nodes.size(); ++i) {
    const CircuitNode& n = c.nodes[i];
    if (n.kind == CircuitNodeKind::kAdd) {
      depth[i] = std::max(depth[static_cast<size_t>(n.a)], depth[static_cast<size_t>(n.b)]);
    } else if (n.kind == CircuitNodeKind::kMul) {
      int64_t base = std::max(depth[static_cast<size_t>(n.a)], depth[static_cast<size_t>(n.b)]);
      bool ct_ct = deg[static_cast<size_t>(n.a)] > 0 && deg[static_cast<size_t>(n.b)] > 0;
      depth[i] = base + (ct_ct ? 1 : 0);
    }
  }
  for (int32_t id : c.outputs) {
    cert.max_degree = std::max(cert.max_degree, deg[static_cast<size_t>(id)]);
    cert.mul_depth = std::max(cert.mul_depth, depth[static_cast<size_t>(id)]);
  }
  return cert;
}

void write_circuit(const ArithmeticCircuit& c, const std::string& path) {
  check(!c.outputs.empty(), "circuit: refusing to write a circuit with no outputs");
  std::ofstream out(path);
  check(out.good(), "circuit: cannot open '" + path + "' for writing");
  char buf[96];
  for (size_t i = 0; i < c.nodes.size(); ++i) {
    const CircuitNode& n = c.nodes[i];
    switch (n.kind) {
      case CircuitNodeKind::kInput:
        std::snprintf(buf, sizeof(buf), "%zu INPUT %" PRId64 "\n", i, n.input_index);
        break;
      case CircuitNodeKind::kConst:
        std::snprintf(buf, sizeof(buf), "%zu CONST %.17g\n", i, n.value);
        break;
      case CircuitNodeKind::kAdd:
        std::snprintf(buf, sizeof(buf), "%zu ADD %d %d\n", i, n.a, n.b);
        break;
      case CircuitNodeKind::kMul:
        std::snprintf(buf, sizeof(buf), "%zu MUL %d %d\n", i, n.a, n.b);
        break;
      default:
        fail("circuit: cannot serialize a node of unknown kind");
    }
    out << buf;
  }
  out << "OUTPUTS";
  for (int32_t id : c.outputs) out << " " << id;
  out << "\n";
  check(out.good(), "circuit: write to '" + path + "' failed");
}

ArithmeticCircuit read_circuit(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "circuit: cannot open '" + path + "'");
  ArithmeticCircuit c;
  std::string line;
  int64_t line_no = 0;
  bool saw_outputs = false;
  auto parse_fail = [&](const std::string& why) {
    fail("circuit: " + path + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string first;
    ss >> first;
    if (first == "OUTPUTS") {
      check(!saw_outputs, "circuit: duplicate OUTPUTS line");
      int64_t id;
      while (ss >> id) {
        if (id < 0 || id >= c.size()) parse_fail("output id " + std::to_string(id) + " out of range");
        c.outputs.push_back(static_cast<int32_t>(id));
      }
      if (c.outputs.empty()) parse_fail("empty OUTPUTS line");
      saw_outputs = true;
      continue;
    }
    if (saw_outputs) parse_fail("node after OUTPUTS line");
    int64_t id = -1;
    try {
      id = std::stoll(first);
    } catch (...) {
      parse_fail("expected a node id, got '" + first + "'");
    }
    if (id != c.size()) parse_fail("ids must be dense from 0; expected " + std::to_string(c.size()));
    std::string kind;
    ss >> kind;
    if (kind == "INPUT") {
      int64_t index;
      if (!(ss >> index) || index < 0) parse_fail("bad INPUT index");
      c.add_input(index);
    } else if (kind == "CONST") {
      double v;
      if (!(ss >> v)) parse_fail("bad CONST value");
      c.add_const(v);
    } else if (kind == "ADD" || kind == "MUL") {
      int64_t a, b;
      if (!(ss >> a >> b)) parse_fail("bad operands");
      if (a < 0 || b < 0 || a >= c.size() || b >= c.size()) parse_fail("operand id out of range");
      if (kind == "ADD") {
        c.add(static_cast<int32_t>(a), static_cast<int32_t>(b));
      } else {
        c.mul(static_cast<int32_t>(a), static_cast<int32_t>(b));
      }
    } else {
      parse_fail("unknown node kind '" + kind + "'");
    }
    std::string rest;
    if (ss >> rest) parse_fail("trailing tokens");
  }
  check(saw_outputs, "circuit: '" + path + "' has no OUTPUTS line");
  return c;
}

}  // namespace polynext
