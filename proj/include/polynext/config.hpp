#pragma once

#include <string>

#include "polynext/model.hpp"

namespace polynext {

/// Parses a model config document. Accepted keys mirror the ModelConfig
/// fields: channels, cells, stacks, mixers, norm, num_classes, resolution,
/// sigmoid_init, attn_degree, fusion, plus an optional "preset"
/// (cpolynext-{t,s,b,l}, apolynext-{t,s,b,l}, cpolynext-lr) that the other
/// keys then override. Unknown keys are rejected.
ModelConfig parse_model_config(const std::string& json_text);
ModelConfig load_model_config(const std::string& path);
std::string model_config_to_json(const ModelConfig& cfg);

}  // namespace polynext
