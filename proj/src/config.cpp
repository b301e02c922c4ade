#include "polynext/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace polynext {

namespace {

using nlohmann::json;

MixerKind mixer_from(const std::string& s) {
  if (s == "polyconv") return MixerKind::kPolyConv;
  if (s == "polyattn") return MixerKind::kPolyAttn;
  fail("config: unknown mixer kind '" + s + "' (expected polyconv or polyattn)");
}

std::string mixer_to(MixerKind m) { return m == MixerKind::kPolyConv ? "polyconv" : "polyattn"; }

NormKind norm_from(const std::string& s) {
  if (s == "layernorm") return NormKind::kLayerNorm;
  if (s == "polybn") return NormKind::kPolyBatchNorm;
  if (s == "identity") return NormKind::kIdentity;
  fail("config: unknown norm kind '" + s + "' (expected layernorm or polybn)");
}

std::string norm_to(NormKind n) {
  switch (n) {
    case NormKind::kLayerNorm:
      return "layernorm";
    case NormKind::kPolyBatchNorm:
      return "polybn";
    case NormKind::kIdentity:
      return "identity";
  }
  return "layernorm";
}

ModelConfig preset_from(const std::string& name) {
  if (name == "cpolynext-lr") return ModelConfig::cpolynext_lr();
  auto tail_size = [&](const std::string& prefix) -> char {
    std::string t = name.substr(prefix.size());
    check(t.size() == 1, "config: unknown preset '" + name + "'");
    return static_cast<char>(std::toupper(t[0]));
  };
  if (name.rfind("cpolynext-", 0) == 0) return ModelConfig::cpolynext(tail_size("cpolynext-"));
  if (name.rfind("apolynext-", 0) == 0) return ModelConfig::apolynext(tail_size("apolynext-"));
  fail("config: unknown preset '" + name + "'");
}

std::vector<int64_t> int_list(const json& j, const std::string& key) {
  check(j.is_array(), "config: '" + key + "' must be an array");
  std::vector<int64_t> out;
  for (const auto& v : j) {
    check(v.is_number_integer(), "config: '" + key + "' entries must be integers");
    out.push_back(v.get<int64_t>());
  }
  return out;
}

}  // namespace

ModelConfig parse_model_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(std::string("config: invalid JSON: ") + e.what());
  }
  check(j.is_object(), "config: top level must be an object");

  static const std::set<std::string> known = {"preset",      "channels",   "cells",       "stacks",
                                              "mixers",      "norm",       "num_classes", "resolution",
                                              "sigmoid_init", "attn_degree", "fusion"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    check(known.count(it.key()) > 0, "config: unknown key '" + it.key() + "'");
  }

  ModelConfig cfg;
  bool have_preset = j.contains("preset");
  if (have_preset) {
    check(j["preset"].is_string(), "config: 'preset' must be a string");
    cfg = preset_from(j["preset"].get<std::string>());
  }
  if (j.contains("channels")) cfg.channels = int_list(j["channels"], "channels");
  if (j.contains("cells")) cfg.cells = int_list(j["cells"], "cells");
  if (j.contains("stacks")) cfg.stacks = int_list(j["stacks"], "stacks");
  if (j.contains("mixers")) {
    check(j["mixers"].is_array(), "config: 'mixers' must be an array");
    cfg.mixers.clear();
    for (const auto& v : j["mixers"]) {
      check(v.is_string(), "config: 'mixers' entries must be strings");
      cfg.mixers.push_back(mixer_from(v.get<std::string>()));
    }
  }
  if (!have_preset && cfg.mixers.empty() && !cfg.channels.empty()) {
    cfg.mixers.assign(cfg.channels.size(), MixerKind::kPolyConv);
  }
  if (j.contains("norm")) cfg.norm = norm_from(j["norm"].get<std::string>());
  if (j.contains("num_classes")) cfg.num_classes = j["num_classes"].get<int64_t>();
  if (j.contains("resolution")) cfg.resolution = j["resolution"].get<int64_t>();
  if (j.contains("sigmoid_init")) {
    std::string s = j["sigmoid_init"].get<std::string>();
    check(s == "standard" || s == "large", "config: sigmoid_init must be standard or large");
    cfg.sigmoid_init = s == "large" ? SigmoidInitVariant::kLarge : SigmoidInitVariant::kStandard;
  }
  if (j.contains("attn_degree")) cfg.attn_degree = j["attn_degree"].get<int>();
  if (j.contains("fusion")) {
    std::string s = j["fusion"].get<std::string>();
    check(s == "hadamard" || s == "addition", "config: fusion must be hadamard or addition");
    cfg.fusion = s == "addition" ? FusionKind::kAddition : FusionKind::kHadamard;
  }
  cfg.validate();
  return cfg;
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_model_config(ss.str());
}

std::string model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["channels"] = cfg.channels;
  j["cells"] = cfg.cells;
  j["stacks"] = cfg.stacks;
  std::vector<std::string> mixers;
  for (MixerKind m : cfg.mixers) mixers.push_back(mixer_to(m));
  j["mixers"] = mixers;
  j["norm"] = norm_to(cfg.norm);
  j["num_classes"] = cfg.num_classes;
  j["resolution"] = cfg.resolution;
  j["sigmoid_init"] = cfg.sigmoid_init == SigmoidInitVariant::kLarge ? "large" : "standard";
  j["attn_degree"] = cfg.attn_degree;
  j["fusion"] = cfg.fusion == FusionKind::kAddition ? "addition" : "hadamard";
  return j.dump(2);
}

}  // namespace polynext
