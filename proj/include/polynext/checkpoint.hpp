#pragma once

#include <string>

#include "polynext/model.hpp"

namespace polynext {

/// Binary container: magic+version header, the model config and recipe as
/// JSON echoes, the epoch, the trainer RNG state, then named tensors
/// (parameters and running buffers) as little-endian f32 payloads.
void save_checkpoint(const std::string& path, PolyNeXtModel& model, const std::string& recipe_json,
                     int64_t epoch, const std::string& rng_state);

struct LoadedCheckpoint {
  PolyNeXtModel model;
  std::string recipe_json;
  int64_t epoch = 0;
  std::string rng_state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace polynext
